//! Acceptance suite: one PASS/FAIL line per criterion, then a single verdict.
//!
//! Criterion 6 compares the pinned run against `tests/golden/pinned_run.json`.
//! The file is written when missing or when `CLALAB_CAPTURE_GOLDEN=1`.

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use clalab::analysis::{pca_project, perpendicularity};
use clalab::evalplane::{score_mcq, Dataset, EvalReport};
use clalab::gradcheck::{reference_check, FdConfig, GradLoss};
use clalab::model::{forward_with_trace, init_model, ModelConfig, Parameters};
use clalab::objectives::{loss_clo_detailed, loss_midalign, loss_sft, midalign_from_pooled};
use clalab::steering::{extract_steering_vector, PairSet, SteerKind, SteeringPlan, SteeringVector};
use clalab::worldgen::{FactKind, McqItem, PreferenceTriple, Split, Statement};
use clalab_cli::persist::{checkpoint_bytes, load_checkpoint, load_vector, parse_checkpoint, read_json, save_vector};
use common::{clalab, s, small_config, tree, write_config};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use tempfile::TempDir;

type Outcome = Result<String, String>;
type Criterion<'a> = (&'static str, Box<dyn FnOnce() -> Outcome + 'a>);

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn toy(vocab: usize, layers: usize, seed: u64, inflate: f64) -> Parameters {
    let cfg = ModelConfig { vocab_size: vocab, n_layers: layers, d_model: 8, n_heads: 2, d_ff: 12, max_seq_len: 10, seed };
    let mut p = init_model(&cfg).unwrap();
    p.as_mut_slice().iter_mut().for_each(|v| *v *= inflate);
    p
}

fn c1_gradients() -> Outcome {
    let start = Instant::now();
    let mut detail = Vec::new();
    for loss in [GradLoss::Sft, GradLoss::Midalign, GradLoss::Clo] {
        let r = reference_check(loss, &FdConfig::default()).map_err(|e| e.to_string())?;
        check(r.checked >= 100, || format!("{}: only {} parameters", r.name, r.checked))?;
        check(r.passed(), || format!("{}: {:?}", r.name, r.failures))?;
        detail.push(format!("{} n={} worst={:.1e}", r.name, r.checked, r.worst_rel));
    }
    let t = start.elapsed();
    check(t < Duration::from_secs(60), || format!("took {t:?}"))?;
    Ok(format!("{} in {:.1}s", detail.join(", "), t.as_secs_f64()))
}

fn c2_closed_forms() -> Outcome {
    let p = toy(12, 2, 3, 5.0);
    let (single, _) = loss_midalign(&p, &[(vec![1, 2, 3], vec![4, 5])], 1).map_err(|e| e.to_string())?;
    check(single == 0.0, || format!("singleton midalign {single:e}"))?;

    let two = midalign_from_pooled(&[vec![1.0, 0.0], vec![-1.0, 0.0]], &[vec![2.0, 0.0], vec![-0.5, 0.0]]).unwrap().loss;
    let want = (1.0 + (-2.0f64).exp()).ln();
    check((two - want).abs() <= 1e-12, || format!("two-pair {two} vs {want}"))?;

    let batch = vec![
        PreferenceTriple { x: vec![1, 2], y_pref: vec![3], y_rej: vec![4, 5], lang: 0 },
        PreferenceTriple { x: vec![6], y_pref: vec![7, 8], y_rej: vec![9], lang: 2 },
    ];
    let (out, _) = loss_clo_detailed(&p, &p, &batch, 0.5, 1.0).map_err(|e| e.to_string())?;
    check((out.cl - 2.0 * 2f64.ln()).abs() <= 1e-12, || format!("CLO contrastive term {}", out.cl))?;

    let zero = Parameters::zeros(*p.config()).unwrap();
    let (sft, _) = loss_sft(&zero, &[Statement { query: vec![1], response: vec![2, 3] }]).unwrap();
    check((sft - 12f64.ln()).abs() <= 1e-12, || format!("zero-model SFT {sft}"))?;
    Ok(format!("midalign 1-pair {single}, 2-pair {two:.12}, cl {:.12}, sft {sft:.12}", out.cl))
}

fn c3_steering() -> Outcome {
    let p = toy(12, 4, 2, 10.0);
    let same = PairSet { kind: SteerKind::En, pairs: vec![(vec![1, 2], vec![1, 2]), (vec![3, 4, 5], vec![3, 4, 5])], split: None };
    let zero = extract_steering_vector(&p, &same, 2).map_err(|e| e.to_string())?;
    check(zero.values.iter().all(|&v| v == 0.0), || "identical pairs gave a non-zero vector".into())?;

    let seq = [5, 1, 9, 0, 11];
    let (plain, _) = forward_with_trace(&p, &seq, None).unwrap();
    let (with_zero, _) = forward_with_trace(&p, &seq, Some(&SteeringPlan::single(&zero, 2.0).unwrap())).unwrap();
    check(with_zero == plain, || "zero-vector plan changed logits".into())?;

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let v = SteeringVector {
        kind: SteerKind::Loc,
        layer: 3,
        values: (0..8).map(|_| rng.random_range(-3.0..3.0)).collect(),
        n_pairs: 1,
        model_revision: 0,
    };
    let (with_g0, _) = forward_with_trace(&p, &seq, Some(&SteeringPlan::single(&v, 0.0).unwrap())).unwrap();
    check(with_g0 == plain, || "gamma 0 plan changed logits".into())?;

    for g in [0.5, 2.0, 7.25] {
        let (_, up) = forward_with_trace(&p, &seq, Some(&SteeringPlan::single(&v, g).unwrap())).unwrap();
        let (_, down) = forward_with_trace(&p, &seq, Some(&SteeringPlan::single(&v, -g).unwrap())).unwrap();
        let (a, b) = (up.injection(3).ok_or("no injection")?, down.injection(3).ok_or("no injection")?);
        check(a.iter().zip(b).all(|(x, y)| *x == -*y), || format!("gamma ±{g} deltas are not exact negations"))?;
    }
    Ok("zero vector, zero-vector plan, gamma 0 plan, ±gamma deltas".into())
}

fn c4_perpendicularity() -> Outcome {
    let anchors = [
        (vec![1.0, 0.0], vec![0.0, 3.0], 90.0),
        (vec![2.0, -1.0, 0.5], vec![4.0, -2.0, 1.0], 0.0),
        (vec![2.0, -1.0, 0.5], vec![-6.0, 3.0, -1.5], 0.0),
        (vec![1.0, 0.0], vec![1.0, 1.0], 45.0),
    ];
    for (a, b, want) in &anchors {
        let got = perpendicularity(a, b).map_err(|e| e.to_string())?;
        check((got - want).abs() <= 1e-9, || format!("{a:?} vs {b:?}: {got} want {want}"))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let d = rng.random_range(2..12);
        let a: Vec<f64> = (0..d).map(|_| rng.random_range(-5.0..5.0)).collect();
        let b: Vec<f64> = (0..d).map(|_| rng.random_range(-5.0..5.0)).collect();
        let c = rng.random_range(0.01..40.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let sab = perpendicularity(&a, &b).map_err(|e| e.to_string())?;
        let sba = perpendicularity(&b, &a).map_err(|e| e.to_string())?;
        let scaled: Vec<f64> = a.iter().map(|x| c * x).collect();
        let sc = perpendicularity(&scaled, &b).map_err(|e| e.to_string())?;
        check((0.0..=90.0).contains(&sab), || format!("score {sab} outside [0, 90]"))?;
        worst = worst.max((sab - sba).abs()).max((sab - sc).abs());
    }
    check(worst <= 1e-9, || format!("worst invariance gap {worst:e}"))?;
    Ok(format!("4 anchors; 1000 random pairs, worst gap {worst:.1e}"))
}

/// Log-likelihood by chaining a fresh forward pass and a hand softmax per token.
fn chained_loglik(p: &Parameters, query: &[u32], option: &[u32]) -> f64 {
    let mut prefix = query.to_vec();
    let mut total = 0.0;
    for &tok in option {
        let (logits, _) = forward_with_trace(p, &prefix, None).unwrap();
        let last = logits.row(logits.nrows() - 1);
        let m = last.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = last.iter().map(|v| (v - m).exp()).sum();
        total += last[tok as usize] - m - z.ln();
        prefix.push(tok);
    }
    total
}

fn c5_mcq_oracle() -> Outcome {
    let vocab = 19;
    let p = toy(vocab, 1, 9, 8.0);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    let n = 64;
    for id in 0..n {
        let query: Vec<u32> = (0..rng.random_range(1..=4)).map(|_| rng.random_range(0..vocab as u32)).collect();
        let olen = rng.random_range(1..=3);
        let options: Vec<Vec<u32>> = (0..4).map(|_| (0..olen).map(|_| rng.random_range(0..vocab as u32)).collect()).collect();
        let item = McqItem {
            id,
            lang: 1,
            kind: FactKind::Universal,
            ctx: false,
            query: query.clone(),
            options: options.clone(),
            gold: 0,
            pivot_opt: None,
            split: Split::Test,
        };
        let scored = score_mcq(&p, &item, None, false).map_err(|e| e.to_string())?;
        for (o, opt) in options.iter().enumerate() {
            worst = worst.max((scored.loglik[o] - chained_loglik(&p, &query, opt)).abs());
        }
    }
    check(worst <= 1e-9, || format!("worst |Δ| {worst:e}"))?;
    Ok(format!("{n} items, vocab {vocab}, worst |Δ| {worst:.1e}"))
}

fn golden_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/pinned_run.json")
}

fn pooled(r: &EvalReport, d: Dataset) -> Result<f64, String> {
    r.pooled(&[1, 2], d).ok_or_else(|| format!("no {d} items"))
}

struct Pinned {
    dir: TempDir,
    elapsed: Duration,
}

fn run_pinned() -> Result<Pinned, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let out = dir.path().join("run");
    let start = Instant::now();
    let (code, err) = clalab(&["run", "--out", s(&out)]);
    let elapsed = start.elapsed();
    check(code == 0, || format!("pinned run exited {code}: {err}"))?;
    Ok(Pinned { dir, elapsed })
}

fn report(dir: &Path, name: &str) -> Result<EvalReport, String> {
    read_json(&dir.join(format!("run/reports/{name}.json"))).map_err(|e| e.to_string())
}

fn c6_tradeoff(pinned: &Result<Pinned, String>) -> Outcome {
    let pinned = pinned.as_ref().map_err(Clone::clone)?;
    let root = pinned.dir.path();
    check(pinned.elapsed < Duration::from_secs(600), || format!("pipeline took {:?}", pinned.elapsed))?;
    let plane = fs::read_to_string(root.join("run/plane/plane.csv")).map_err(|e| e.to_string())?;
    let all = plane.lines().find(|l| l.starts_with("clo,all,")).ok_or("no clo,all row")?;
    let cols: Vec<f64> = all.split(',').skip(2).map(|v| v.parse().unwrap()).collect();
    let (transfer, localization) = (cols[0], cols[1]);

    let mut accs = BTreeMap::new();
    for name in ["base", "clo", "clo+loc", "clo+surgical"] {
        let r = report(root, name)?;
        accs.insert(
            name,
            json!({
                "overall": r.accuracy,
                "universal": pooled(&r, Dataset::Universal)?,
                "cultural": pooled(&r, Dataset::Cultural)?,
            }),
        );
    }
    let argmax: Value =
        serde_json::from_slice(&fs::read(root.join("run/sweep/argmax.json")).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let files: Vec<String> = tree(&root.join("run")).into_keys().collect();
    let snapshot = serde_json::to_string_pretty(&json!({
        "accuracy": accs,
        "plane_csv": plane,
        "argmax": argmax,
        "artifacts": files,
    }))
    .unwrap()
        + "\n";

    let path = golden_path();
    let capture = std::env::var("CLALAB_CAPTURE_GOLDEN").is_ok_and(|v| v == "1") || !path.exists();
    let golden_note = if capture {
        fs::write(&path, &snapshot).map_err(|e| e.to_string())?;
        "golden captured"
    } else {
        let want = fs::read_to_string(&path).map_err(|e| e.to_string())?;
        check(want == snapshot, || format!("pinned run differs from golden:\n{snapshot}"))?;
        "golden matches"
    };
    check(transfer > 0.0 && localization < 0.0, || format!("clo,all transfer {transfer} localization {localization}"))?;
    Ok(format!("transfer {transfer:+.2}, localization {localization:+.2}, {golden_note}, {:.0}s", pinned.elapsed.as_secs_f64()))
}

fn c7_recovery(pinned: &Result<Pinned, String>) -> Outcome {
    let root = pinned.as_ref().map_err(Clone::clone)?.dir.path();
    let clo = report(root, "clo")?;
    let loc = report(root, "clo+loc")?;
    let surgical = report(root, "clo+surgical")?;
    let (c_clo, c_loc) = (pooled(&clo, Dataset::Cultural)?, pooled(&loc, Dataset::Cultural)?);
    let (u_loc, u_surg) = (pooled(&loc, Dataset::Universal)?, pooled(&surgical, Dataset::Universal)?);
    let detail = format!("cultural clo {c_clo:.4} -> clo+loc {c_loc:.4}; universal clo+loc {u_loc:.4}, clo+surgical {u_surg:.4}");
    check(c_loc > c_clo, || format!("LOC steering does not raise cultural accuracy: {detail}"))?;
    check(u_surg >= u_loc, || format!("surgical universal accuracy below LOC-only: {detail}"))?;
    Ok(detail)
}

fn c8_determinism(tmp: &Path) -> Outcome {
    let cfg = write_config(tmp, &small_config());
    let mut trees = Vec::new();
    for name in ["a", "b"] {
        let out = tmp.join(name);
        let (code, err) = clalab(&["run", "--config", s(&cfg), "--no-sweep", "--out", s(&out)]);
        check(code == 0, || format!("run {name} exited {code}: {err}"))?;
        trees.push(tree(&out));
    }
    let (a, b) = (&trees[0], &trees[1]);
    check(a.keys().eq(b.keys()), || "runs produced different file sets".into())?;
    let differing: Vec<&String> = a.iter().filter(|(k, v)| b[*k] != **v).map(|(k, _)| k).collect();
    check(differing.is_empty(), || format!("differing files: {differing:?}"))?;
    for f in ["world/items.jsonl", "clo/model.stb", "vectors/loc-L2-lang1.json", "reports/clo+surgical.json"] {
        check(a.contains_key(f), || format!("missing {f}"))?;
    }
    Ok(format!("{} files byte-identical across two runs", a.len()))
}

fn c9_pca() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (d, n) = (9, 50);
    let mut basis: Vec<Array1<f64>> = Vec::new();
    for _ in 0..2 {
        let mut v: Array1<f64> = Array1::from_shape_fn(d, |_| rng.random_range(-1.0..1.0));
        for b in &basis {
            v = &v - &(b * b.dot(&v));
        }
        let norm = v.dot(&v).sqrt();
        basis.push(v / norm);
    }
    let offset: Array1<f64> = Array1::from_shape_fn(d, |_| rng.random_range(-2.0..2.0));
    let mut acts = Array2::zeros((n, d));
    for i in 0..n {
        let row = &offset + &(&basis[0] * rng.random_range(-5.0..5.0)) + &(&basis[1] * rng.random_range(-2.0..2.0));
        acts.row_mut(i).assign(&row);
    }
    let r = pca_project(&acts, 2).map_err(|e| e.to_string())?;
    let err = (&r.reconstruct() - &acts).iter().fold(0.0f64, |m, v| m.max(v.abs()));
    check(err <= 1e-9, || format!("reconstruction error {err:e}"))?;
    let sum: f64 = r.eigenvalues.iter().sum();
    let rel = (sum - r.total_variance).abs() / r.total_variance;
    check(rel <= 1e-9, || format!("variance sum off by {rel:e}"))?;
    Ok(format!("reconstruction {err:.1e}, variance gap {rel:.1e}"))
}

fn c10_persistence(tmp: &Path) -> Outcome {
    let run = tmp.join("a");
    let ckpt = run.join("clo/model.stb");
    let bytes = fs::read(&ckpt).map_err(|e| format!("{}: {e}", ckpt.display()))?;
    let params = load_checkpoint(&ckpt).map_err(|e| e.to_string())?;
    check(checkpoint_bytes(&params) == bytes, || "checkpoint re-serialization differs".into())?;
    check(parse_checkpoint(&bytes).unwrap() == params, || "checkpoint reparse differs".into())?;

    let vpath = run.join("vectors/loc-L2-lang1.json");
    let v = load_vector(&vpath).map_err(|e| e.to_string())?;
    let copy = tmp.join("vector-copy.json");
    save_vector(&copy, &v).map_err(|e| e.to_string())?;
    check(fs::read(&copy).unwrap() == fs::read(&vpath).unwrap(), || "vector re-serialization differs".into())?;
    let back = load_vector(&copy).map_err(|e| e.to_string())?;
    check(back.values.iter().zip(&v.values).all(|(a, b)| a.to_bits() == b.to_bits()), || "vector values differ".into())?;

    let hlen = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let header = String::from_utf8(bytes[8..8 + hlen].to_vec()).unwrap();
    let mut bumped = bytes.clone();
    bumped[8..8 + hlen].copy_from_slice(header.replacen("\"format_version\":1", "\"format_version\":2", 1).as_bytes());
    let bumped_path = tmp.join("bumped.stb");
    fs::write(&bumped_path, &bumped).unwrap();

    let world = run.join("world");
    let evals = tmp.join("evals");
    let eval = |c: &Path, extra: &[&str]| {
        let mut args = vec!["eval", "--checkpoint", s(c), "--world", s(&world), "--out", s(&evals), "--overwrite"];
        args.extend_from_slice(extra);
        clalab(&args).0
    };
    let version = eval(&bumped_path, &[]);
    check(version == 2, || format!("version mismatch exited {version}"))?;
    let revision = eval(&run.join("base/model.stb"), &["--plan", s(&vpath)]);
    check(revision == 2, || format!("revision mismatch exited {revision}"))?;
    Ok(format!("{} byte checkpoint and vector bit-exact; version and revision mismatch exit 2", bytes.len()))
}

fn emit(line: &str) {
    let mut out = std::io::stdout().lock();
    out.write_all(line.as_bytes()).unwrap();
    out.write_all(b"\n").unwrap();
    out.flush().unwrap();
}

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        Err(e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into()))
    })
}

#[test]
fn acceptance() {
    let tmp = tempfile::tempdir().unwrap();
    let pinned = run_pinned();
    let criteria: Vec<Criterion> = vec![
        ("1 gradient suite", Box::new(c1_gradients)),
        ("2 closed-form losses", Box::new(c2_closed_forms)),
        ("3 steering identities", Box::new(c3_steering)),
        ("4 perpendicularity", Box::new(c4_perpendicularity)),
        ("5 MCQ oracle", Box::new(c5_mcq_oracle)),
        ("6 trade-off reproduction", Box::new(|| c6_tradeoff(&pinned))),
        ("7 steering recovery", Box::new(|| c7_recovery(&pinned))),
        ("8 determinism", Box::new(|| c8_determinism(tmp.path()))),
        ("9 PCA", Box::new(c9_pca)),
        ("10 persistence", Box::new(|| c10_persistence(tmp.path()))),
    ];
    let mut failed = Vec::new();
    emit("");
    for (name, f) in criteria {
        match guarded(f) {
            Ok(detail) => emit(&format!("PASS [{name}] {detail}")),
            Err(why) => {
                emit(&format!("FAIL [{name}] {why}"));
                failed.push(name);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
