//! Planted-structure checks for PCA, centroid distances, sweeps and steering.

use clalab::analysis::{language_overlap_report, layer_sweep_with, overlap_from_activations, pca_project};
use clalab::evalplane::{accuracy, Dataset};
use clalab::model::{forward_with_trace, init_model, ModelConfig, Parameters};
use clalab::steering::{extract_steering_vector, make_surgical_plan, ActivationSource, PairSet, SteerKind, SteeringPlan, SteeringVector};
use clalab::worldgen::{FactKind, McqItem, Split};
use clalab::{Result, TokenId};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn orthonormal_pair(rng: &mut ChaCha8Rng, d: usize) -> (Array1<f64>, Array1<f64>) {
    let a: Array1<f64> = Array1::from_shape_fn(d, |_| rng.random_range(-1.0..1.0));
    let a = &a / a.dot(&a).sqrt();
    let b: Array1<f64> = Array1::from_shape_fn(d, |_| rng.random_range(-1.0..1.0));
    let b = &b - &(&a * a.dot(&b));
    let b = &b / b.dot(&b).sqrt();
    (a, b)
}

#[test]
fn rank_two_planted_data_is_recovered() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (d, n) = (7, 40);
    let (u1, u2) = orthonormal_pair(&mut rng, d);
    let offset = Array1::from_shape_fn(d, |_| rng.random_range(-3.0..3.0));
    let mut acts = Array2::zeros((n, d));
    for i in 0..n {
        let (a, b) = (rng.random_range(-4.0..4.0), rng.random_range(-1.0..1.0));
        acts.row_mut(i).assign(&(&offset + &(&u1 * a) + &(&u2 * b)));
    }
    let r = pca_project(&acts, 2).unwrap();
    let err = (&r.reconstruct() - &acts).iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(err <= 1e-9, "reconstruction error {err:e}");

    let sum: f64 = r.eigenvalues.iter().sum();
    assert!((sum - r.total_variance).abs() <= 1e-9 * r.total_variance);
    assert!((r.explained_ratio[0] + r.explained_ratio[1] - 1.0).abs() <= 1e-9);

    // Both components lie in the planted plane.
    for c in r.components.rows() {
        let inplane = c.dot(&u1).powi(2) + c.dot(&u2).powi(2);
        assert!((inplane - 1.0).abs() <= 1e-9);
    }
    // Independent total variance: trace of the (n−1) sample covariance.
    let mean = acts.mean_axis(ndarray::Axis(0)).unwrap();
    let tv: f64 = acts.rows().into_iter().map(|r| (&r - &mean).mapv(|v| v * v).sum()).sum::<f64>() / (n - 1) as f64;
    assert!((tv - r.total_variance).abs() <= 1e-9 * tv);
}

#[test]
fn planted_clusters_keep_their_separation() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let d = 6;
    let (u1, u2) = orthonormal_pair(&mut rng, d);
    let sep = 3.25;
    let base = Array1::from_shape_fn(d, |_| rng.random_range(-2.0..2.0));
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (lang, centre) in [(0usize, base.clone()), (1, &base + &(&u1 * sep))] {
        // Zero-mean jitter inside the planted plane.
        for (s1, s2) in [(0.4, 0.0), (-0.4, 0.0), (0.0, 0.9), (0.0, -0.9), (0.2, 0.3), (-0.2, -0.3)] {
            rows.push(&centre + &(&u1 * s1) + &(&u2 * s2));
            labels.push(lang);
        }
    }
    let acts = Array2::from_shape_fn((rows.len(), d), |(i, j)| rows[i][j]);
    let (_, dist) = overlap_from_activations(&acts, &labels).unwrap();
    assert!((dist - sep).abs() <= 1e-9, "{dist} vs {sep}");
}

struct Stub;

impl ActivationSource for Stub {
    fn d_model(&self) -> usize {
        3
    }
    fn n_layers(&self) -> usize {
        2
    }
    fn revision(&self) -> u64 {
        5
    }
    fn final_token_activation(&self, tokens: &[TokenId], _layer: usize) -> Result<Vec<f64>> {
        Ok(match tokens[0] {
            0 => vec![1.0, 2.0, 3.0],
            1 => vec![0.5, -1.0, 0.25],
            2 => vec![-4.0, 0.125, 8.0],
            _ => vec![2.0, 2.0, -2.0],
        })
    }
}

#[test]
fn stub_extraction_is_the_hand_mean() {
    let pairs = PairSet { kind: SteerKind::Loc, pairs: vec![(vec![0], vec![1]), (vec![2], vec![3])], split: None };
    let v = extract_steering_vector(&Stub, &pairs, 2).unwrap();
    // ((1−0.5) + (−4−2))/2, ((2+1) + (0.125−2))/2, ((3−0.25) + (8+2))/2
    let want = [-2.75, 0.5625, 6.375];
    for (a, b) in v.values.iter().zip(want) {
        assert!((a - b).abs() <= 1e-15);
    }
    assert_eq!((v.layer, v.n_pairs, v.model_revision), (2, 2, 5));
}

fn toy() -> Parameters {
    let cfg = ModelConfig { vocab_size: 12, n_layers: 4, d_model: 8, n_heads: 2, d_ff: 12, max_seq_len: 8, seed: 2 };
    let mut p = init_model(&cfg).unwrap();
    for v in p.as_mut_slice().iter_mut() {
        *v *= 10.0;
    }
    p
}

#[test]
fn steering_identities_hold_on_a_real_model() {
    let p = toy();
    let same = PairSet { kind: SteerKind::En, pairs: vec![(vec![1, 2, 3], vec![1, 2, 3]), (vec![4], vec![4])], split: None };
    let zero = extract_steering_vector(&p, &same, 2).unwrap();
    assert!(zero.values.iter().all(|&v| v == 0.0));

    let one = PairSet { kind: SteerKind::En, pairs: vec![(vec![1, 2, 3], vec![5, 6])], split: None };
    let v = extract_steering_vector(&p, &one, 3).unwrap();
    let (_, ta) = forward_with_trace(&p, &[1, 2, 3], None).unwrap();
    let (_, tb) = forward_with_trace(&p, &[5, 6], None).unwrap();
    let diff: Vec<f64> = ta.last_token(3).unwrap().iter().zip(tb.last_token(3).unwrap()).map(|(a, b)| a - b).collect();
    assert_eq!(v.values, diff);

    let seq = [7, 1, 0, 11];
    let (plain, _) = forward_with_trace(&p, &seq, None).unwrap();
    let zero_plan = SteeringPlan::single(&zero, 2.0).unwrap();
    assert_eq!(forward_with_trace(&p, &seq, Some(&zero_plan)).unwrap().0, plain);
    let v_loc = SteeringVector { kind: SteerKind::Loc, layer: 4, values: vec![0.3; 8], n_pairs: 1, model_revision: 0 };
    let gamma_zero = make_surgical_plan(&v, &v_loc, 0.0).unwrap();
    assert_eq!(forward_with_trace(&p, &seq, Some(&gamma_zero)).unwrap().0, plain);
    // Applying a plan leaves the weights untouched and is repeatable.
    let before = p.clone();
    let plan = make_surgical_plan(&v, &v_loc, 2.0).unwrap();
    let a = forward_with_trace(&p, &seq, Some(&plan)).unwrap().0;
    let b = forward_with_trace(&p, &seq, Some(&plan)).unwrap().0;
    assert_eq!(a, b);
    assert_eq!(p, before);
}

fn items(n: u64, kind: FactKind) -> Vec<McqItem> {
    let mut rng = ChaCha8Rng::seed_from_u64(n);
    (0..n)
        .map(|id| McqItem {
            id,
            lang: 1 + (id % 2) as usize,
            kind,
            ctx: false,
            query: (0..3).map(|_| rng.random_range(0..12)).collect(),
            options: (0..4).map(|_| vec![rng.random_range(0..12)]).collect(),
            gold: rng.random_range(0..4),
            pivot_opt: None,
            split: Split::Dev2,
        })
        .collect()
}

#[test]
fn zero_gamma_sweep_reproduces_baseline() {
    let p = toy();
    let sets = vec![(Dataset::Universal, items(16, FactKind::Universal)), (Dataset::Cultural, items(14, FactKind::Cultural))];
    let random = |kind: SteerKind, lang: usize, layer: usize| {
        let mut rng = ChaCha8Rng::seed_from_u64((lang * 31 + layer) as u64);
        Ok(SteeringVector { kind, layer, values: (0..8).map(|_| rng.random_range(-5.0..5.0)).collect(), n_pairs: 1, model_revision: 0 })
    };
    let table = layer_sweep_with(&p, &[SteerKind::En, SteerKind::Loc], &[1, 2, 3, 4], &sets, 0.0, random).unwrap();
    assert_eq!(table.rows.len(), 2 + 4 * 2 * 2);
    for r in &table.rows {
        assert_eq!(r.accuracy, table.baseline(r.dataset).unwrap());
    }
    let zeros = |kind, _lang, layer| Ok(SteeringVector { kind, layer, values: vec![0.0; 8], n_pairs: 1, model_revision: 0 });
    let table = layer_sweep_with(&p, &[SteerKind::Loc], &[3], &sets, 2.0, zeros).unwrap();
    assert_eq!(table.rows.len(), 2 + 2);
    for r in &table.rows {
        assert_eq!(r.accuracy, table.baseline(r.dataset).unwrap());
    }
}

#[test]
fn accuracy_over_a_union_is_the_weighted_mean() {
    let p = toy();
    let a = items(10, FactKind::Universal);
    let b: Vec<McqItem> = items(7, FactKind::Universal)
        .into_iter()
        .map(|mut i| {
            i.id += 100;
            i
        })
        .collect();
    let (acc_a, _) = accuracy(&p, &a, None, false).unwrap();
    let (acc_b, _) = accuracy(&p, &b, None, false).unwrap();
    let union: Vec<McqItem> = a.iter().chain(&b).cloned().collect();
    let (acc_u, _) = accuracy(&p, &union, None, false).unwrap();
    assert!((acc_u - (10.0 * acc_a + 7.0 * acc_b) / 17.0).abs() <= 1e-15);
}

#[test]
fn overlap_report_shapes_and_identical_languages() {
    let p = toy();
    let mut same = items(6, FactKind::Universal);
    // Languages 1 and 2 alternate, so each query appears once per language.
    for it in same.iter_mut() {
        it.query = vec![1, 2, (it.id / 2) as u32];
    }
    let rep = language_overlap_report(&p, &same, &[1, 3, 4]).unwrap();
    assert_eq!(rep.layers.len(), 3);
    for l in &rep.layers {
        assert!(l.centroid_distance.abs() <= 1e-12, "{}", l.centroid_distance);
    }
}
