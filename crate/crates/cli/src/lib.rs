//! Command implementations behind the `clalab` binary.

pub mod config;
pub mod error;
pub mod persist;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clalab::analysis::{layer_sweep, perpendicularity_report, SweepTable};
use clalab::evalplane::{accuracy_with_plans, english_bias_from_report, plane_csv, plane_points, Dataset, EvalReport, PlanePoint};
use clalab::model::{init_model, Parameters};
use clalab::objectives::{train, Objective, TrainData};
use clalab::steering::{build_pair_set_en, build_pair_set_loc, extract_steering_vector, SteerKind, SteeringPlan};
use clalab::svg::{scatter, ScatterPoint};
use clalab::worldgen::{
    emit_eval_sets, emit_training_corpora, generate_world, CorpusLine, McqItem, ParallelPair, PreferenceTriple, Split, TrainingCorpora,
    Vocab, WorldSpec, PIVOT,
};
use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::persist::{
    load_checkpoint, load_vector, read_json, read_jsonl, save_checkpoint, save_vector, write_json, write_jsonl, VectorFile,
};

pub const CONFIG_FILE: &str = "config.json";
pub const ITEMS_FILE: &str = "items.jsonl";
pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const PARALLEL_FILE: &str = "parallel.jsonl";
pub const PREFERENCES_FILE: &str = "preferences.jsonl";
pub const CHECKPOINT_FILE: &str = "model.stb";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";

#[derive(Debug, Parser)]
#[command(name = "clalab", version, about = "Cross-lingual alignment and steering lab on a toy transformer")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic world: eval items, corpora, parallel data, preference triples.
    Gen(GenArgs),
    /// Pretrain a base model or post-train one with an alignment objective.
    Train(TrainArgs),
    /// Extract a steering vector from dev1 pairs.
    SteerExtract(ExtractArgs),
    /// Sweep steering layers on dev2 and score EN/LOC perpendicularity.
    Sweep(SweepArgs),
    /// Score the MCQ sets, optionally under a steering plan.
    Eval(EvalArgs),
    /// Transfer-localization plane points of candidates against a baseline.
    Plane(PlaneArgs),
    /// Summarize a run directory.
    Report(ReportArgs),
    /// Full pipeline: gen, pretrain, post-train, extract, sweep, eval, plane, report.
    Run(RunArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Replace existing output files.
    #[arg(long)]
    pub overwrite: bool,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Run config or bare world spec (JSON).
    #[arg(long, alias = "spec")]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// World directory written by `gen`.
    #[arg(long)]
    pub world: PathBuf,
    /// Run config; defaults to the one stored with the world.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// pretrain | mist | midalign | clo
    #[arg(long)]
    pub objective: Option<Objective>,
    /// Starting checkpoint; fresh initialization when absent.
    #[arg(long)]
    pub base: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub world: PathBuf,
    /// en | loc
    #[arg(long)]
    pub kind: SteerKind,
    /// Residual layer (1-based); defaults to the configured layer for the kind.
    #[arg(long)]
    pub layer: Option<usize>,
    /// Target language.
    #[arg(long)]
    pub lang: usize,
    /// Scale stored as the vector's default.
    #[arg(long)]
    pub gamma: Option<f64>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub world: PathBuf,
    /// en | loc; both when absent.
    #[arg(long)]
    pub kind: Option<SteerKind>,
    /// Inclusive layer range `a..b`, a list `a,b,c`, or one layer.
    #[arg(long)]
    pub layers: Option<String>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub world: PathBuf,
    /// Comma-separated steering-vector files.
    #[arg(long, value_delimiter = ',')]
    pub plan: Vec<PathBuf>,
    /// Overrides each vector's default scale.
    #[arg(long)]
    pub gamma: Option<f64>,
    /// dev1 | dev2 | test | all
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long)]
    pub length_norm: bool,
    /// Apply vectors extracted from a different checkpoint revision.
    #[arg(long)]
    pub force: bool,
    /// Report file stem.
    #[arg(long, default_value = "report")]
    pub name: String,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct PlaneArgs {
    #[arg(long)]
    pub baseline: PathBuf,
    /// Candidate reports; the method id is the file stem.
    #[arg(required = true)]
    pub candidates: Vec<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Run directory to summarize; the summary is written there.
    pub run_dir: PathBuf,
    #[arg(long)]
    pub overwrite: bool,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Skip the layer sweep.
    #[arg(long)]
    pub no_sweep: bool,
    #[command(flatten)]
    pub common: Common,
}

/// Parses `args` (including the program name) and runs the command.
pub fn run_args<I, T>(args: I) -> CliResult<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            e.print()?;
            return Ok(());
        }
        Err(e) => return Err(CliError::Usage(e.to_string())),
    };
    run(cli.command)
}

pub fn run(command: Command) -> CliResult<()> {
    match command {
        Command::Gen(a) => cmd_gen(&a),
        Command::Train(a) => cmd_train(&a),
        Command::SteerExtract(a) => cmd_steer_extract(&a).map(|_| ()),
        Command::Sweep(a) => cmd_sweep(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Plane(a) => cmd_plane(&a),
        Command::Report(a) => cmd_report(&a),
        Command::Run(a) => cmd_run(&a),
    }
}

fn prepare_outputs(dir: &Path, files: &[&str], overwrite: bool) -> CliResult<()> {
    if !overwrite {
        if let Some(f) = files.iter().map(|f| dir.join(f)).find(|p| p.exists()) {
            return Err(CliError::Usage(format!("{} exists; pass --overwrite to replace it", f.display())));
        }
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

fn load_config_file(path: &Path) -> CliResult<RunConfig> {
    let raw: serde_json::Value = read_json(path)?;
    if raw.get("world").is_some() {
        serde_json::from_value(raw).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
    } else {
        let world: WorldSpec = serde_json::from_value(raw).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        let seed = world.seed;
        let mut cfg = RunConfig::default().with_seed(seed);
        cfg.world = world;
        Ok(cfg)
    }
}

pub fn cmd_gen(a: &GenArgs) -> CliResult<()> {
    let mut cfg = match &a.config {
        Some(p) => load_config_file(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg = cfg.with_seed(s);
    }
    cfg.validate()?;
    let out = &a.common.out;
    prepare_outputs(out, &[CONFIG_FILE, ITEMS_FILE, CORPUS_FILE, PARALLEL_FILE, PREFERENCES_FILE], a.common.overwrite)?;
    let world = generate_world(&cfg.world)?;
    let corpora = emit_training_corpora(&world);
    let evals = emit_eval_sets(&world)?;
    write_json(&out.join(CONFIG_FILE), &cfg)?;
    write_jsonl(&out.join(ITEMS_FILE), &evals.items)?;
    write_jsonl(&out.join(CORPUS_FILE), &corpora.lm)?;
    write_jsonl(&out.join(PARALLEL_FILE), &corpora.parallel)?;
    write_jsonl(&out.join(PREFERENCES_FILE), &corpora.preferences)?;
    Ok(())
}

/// World files as written by `gen`.
pub struct WorldFiles {
    pub config: RunConfig,
    pub vocab: Vocab,
    pub items: Vec<McqItem>,
    pub corpora: TrainingCorpora,
}

pub fn load_world(dir: &Path, with_corpora: bool) -> CliResult<WorldFiles> {
    let config: RunConfig = read_json(&dir.join(CONFIG_FILE))?;
    config.world.validate()?;
    let vocab = Vocab::for_spec(&config.world);
    let items: Vec<McqItem> = read_jsonl(&dir.join(ITEMS_FILE))?;
    for item in &items {
        item.validate()?;
        if let Some(&t) = item.query.iter().chain(item.options.iter().flatten()).find(|&&t| t as usize >= vocab.size()) {
            return Err(CliError::Data(format!("item {} has token {t} outside the world vocabulary", item.id)));
        }
    }
    let corpora = if with_corpora {
        TrainingCorpora {
            lm: read_jsonl::<CorpusLine>(&dir.join(CORPUS_FILE))?,
            parallel: read_jsonl::<ParallelPair>(&dir.join(PARALLEL_FILE))?,
            preferences: read_jsonl::<PreferenceTriple>(&dir.join(PREFERENCES_FILE))?,
        }
    } else {
        TrainingCorpora::default()
    };
    Ok(WorldFiles { config, vocab, items, corpora })
}

fn check_vocab(params: &Parameters, vocab: &Vocab) -> CliResult<()> {
    if params.config().vocab_size != vocab.size() {
        return Err(CliError::Data(format!(
            "checkpoint vocabulary {} does not match the world's {}",
            params.config().vocab_size,
            vocab.size()
        )));
    }
    Ok(())
}

pub fn cmd_train(a: &TrainArgs) -> CliResult<()> {
    let world = load_world(&a.world, true)?;
    let mut cfg = match &a.config {
        Some(p) => load_config_file(p)?,
        None => world.config.clone(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
        cfg.pretrain.seed = s;
        cfg.train.seed = s;
    }
    cfg.validate()?;
    let objective = a.objective.unwrap_or(cfg.train.objective);
    let tc = if objective == Objective::Pretrain {
        cfg.pretrain.clone()
    } else {
        clalab::objectives::TrainConfig { objective, ..cfg.train.clone() }
    };
    let out = &a.common.out;
    prepare_outputs(out, &[CHECKPOINT_FILE, TRAIN_LOG_FILE, CONFIG_FILE], a.common.overwrite)?;

    let start = match &a.base {
        Some(p) => load_checkpoint(p)?,
        None => init_model(&cfg.model_config(world.vocab.size()))?,
    };
    check_vocab(&start, &world.vocab)?;
    let data = TrainData::from_corpora(&world.corpora, &world.vocab)?;
    let (trained, log) = train(&start, &data, &tc)?;
    save_checkpoint(&out.join(CHECKPOINT_FILE), &trained)?;
    fs::write(out.join(TRAIN_LOG_FILE), log.to_csv())?;
    write_json(&out.join(CONFIG_FILE), &cfg)?;
    Ok(())
}

pub fn vector_file_name(kind: SteerKind, layer: usize, lang: usize) -> String {
    format!("{}-L{layer}-lang{lang}.json", kind.as_str())
}

fn split_items(items: &[McqItem], split: Split) -> Vec<McqItem> {
    items.iter().filter(|i| i.split == split).cloned().collect()
}

pub fn cmd_steer_extract(a: &ExtractArgs) -> CliResult<PathBuf> {
    let world = load_world(&a.world, false)?;
    let params = load_checkpoint(&a.checkpoint)?;
    check_vocab(&params, &world.vocab)?;
    let cfg = &world.config;
    let layer = a.layer.unwrap_or(match a.kind {
        SteerKind::En => cfg.steering.en_layer,
        SteerKind::Loc => cfg.steering.loc_layer,
    });
    if a.lang >= cfg.world.n_languages {
        return Err(CliError::Usage(format!("--lang {} outside 0..{}", a.lang, cfg.world.n_languages)));
    }
    let name = vector_file_name(a.kind, layer, a.lang);
    prepare_outputs(&a.common.out, &[&name], a.common.overwrite)?;
    let dev1 = split_items(&world.items, Split::Dev1);
    let pairs = match a.kind {
        SteerKind::En => build_pair_set_en(&dev1, PIVOT, a.lang)?,
        SteerKind::Loc => build_pair_set_loc(&dev1, a.lang, &world.vocab)?,
    };
    let v = extract_steering_vector(&params, &pairs, layer)?;
    let path = a.common.out.join(name);
    save_vector(&path, &VectorFile::new(&v, a.gamma.unwrap_or(cfg.steering.gamma), Some(a.lang)))?;
    Ok(path)
}

/// Parses `a..b` (inclusive), `a,b,c`, or a single layer.
pub fn parse_layers(s: &str) -> CliResult<Vec<usize>> {
    let bad = || CliError::Usage(format!("cannot parse layers {s:?}; expected a..b, a,b,c or a single layer"));
    let num = |t: &str| t.trim().parse::<usize>().map_err(|_| bad());
    let layers = if let Some((lo, hi)) = s.split_once("..") {
        let (lo, hi) = (num(lo)?, num(hi.trim_start_matches('='))?);
        if lo > hi {
            return Err(bad());
        }
        (lo..=hi).collect()
    } else {
        s.split(',').map(num).collect::<CliResult<Vec<_>>>()?
    };
    if layers.is_empty() {
        return Err(bad());
    }
    Ok(layers)
}

fn non_pivot(items: Vec<McqItem>) -> Vec<McqItem> {
    items.into_iter().filter(|i| i.lang != PIVOT).collect()
}

pub fn cmd_sweep(a: &SweepArgs) -> CliResult<()> {
    let world = load_world(&a.world, false)?;
    let params = load_checkpoint(&a.checkpoint)?;
    check_vocab(&params, &world.vocab)?;
    let cfg = &world.config;
    let layers = match &a.layers {
        Some(s) => parse_layers(s)?,
        None => cfg.sweep_layers.clone(),
    };
    let n = params.config().n_layers;
    if let Some(l) = layers.iter().find(|&&l| l == 0 || l > n) {
        return Err(CliError::Usage(format!("layer {l} outside 1..={n}")));
    }
    let kinds = match a.kind {
        Some(k) => vec![k],
        None => vec![SteerKind::En, SteerKind::Loc],
    };
    let gamma = a.gamma.unwrap_or(cfg.steering.gamma);
    let out = &a.common.out;
    prepare_outputs(out, &["sweep.csv", "sweep.svg", "argmax.json", "perp.csv"], a.common.overwrite)?;

    let dev1 = split_items(&world.items, Split::Dev1);
    let dev2 = split_items(&world.items, Split::Dev2);
    let sets = vec![
        (Dataset::Universal, non_pivot(dev2.iter().filter(|i| Dataset::of(i) == Dataset::Universal).cloned().collect())),
        (Dataset::Cultural, non_pivot(dev2.iter().filter(|i| Dataset::of(i) == Dataset::Cultural).cloned().collect())),
    ];
    let table = layer_sweep(&params, &kinds, &layers, &dev1, &sets, &world.vocab, gamma)?;
    fs::write(out.join("sweep.csv"), table.to_csv())?;
    fs::write(out.join("sweep.svg"), sweep_svg(&table))?;
    write_json(&out.join("argmax.json"), &table.argmax_layers())?;

    // Perpendicularity averaged over the non-pivot languages.
    let mut sums: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for lang in (0..cfg.world.n_languages).filter(|&l| l != PIVOT) {
        for (layer, s) in perpendicularity_report(&params, &dev1, &world.vocab, lang, &layers)?.scores {
            let e = sums.entry(layer).or_default();
            e.0 += s;
            e.1 += 1;
        }
    }
    let mut csv = String::from("layer,score_deg\n");
    for (layer, (s, c)) in sums {
        csv.push_str(&format!("{layer},{:?}\n", s / c as f64));
    }
    fs::write(out.join("perp.csv"), csv)?;
    Ok(())
}

fn sweep_svg(table: &SweepTable) -> String {
    let mut series: Vec<String> = Vec::new();
    let mut points = Vec::new();
    for r in table.rows.iter().filter(|r| r.layer > 0) {
        let key = format!("{}/{}", r.kind, r.dataset);
        let group = series.iter().position(|s| *s == key).unwrap_or_else(|| {
            series.push(key);
            series.len() - 1
        });
        points.push(ScatterPoint { x: r.layer as f64, y: r.accuracy, group, label: None });
    }
    scatter(&points, "Steering accuracy by layer", "layer", "accuracy", false, &series)
}

fn parse_split(s: &str) -> CliResult<Option<Split>> {
    match s {
        "dev1" => Ok(Some(Split::Dev1)),
        "dev2" => Ok(Some(Split::Dev2)),
        "test" => Ok(Some(Split::Test)),
        "all" => Ok(None),
        other => Err(CliError::Usage(format!("unknown split {other:?}; expected dev1, dev2, test or all"))),
    }
}

pub fn cmd_eval(a: &EvalArgs) -> CliResult<()> {
    let split = parse_split(&a.split)?;
    let world = load_world(&a.world, false)?;
    let params = load_checkpoint(&a.checkpoint)?;
    check_vocab(&params, &world.vocab)?;
    let file = format!("{}.json", a.name);
    prepare_outputs(&a.common.out, &[&file], a.common.overwrite)?;

    let vectors = a.plan.iter().map(|p| load_vector(p)).collect::<CliResult<Vec<_>>>()?;
    if !a.force {
        if let Some(v) = vectors.iter().find(|v| v.model_revision != params.revision()) {
            return Err(CliError::Data(
                clalab::Error::RevisionMismatch { vector: v.model_revision, model: params.revision() }.to_string()
                    + "; pass --force to apply anyway",
            ));
        }
    }
    let mut plans: BTreeMap<usize, SteeringPlan> = BTreeMap::new();
    for lang in 0..world.config.world.n_languages {
        let mut plan = SteeringPlan::new();
        for v in vectors.iter().filter(|v| v.lang.is_none_or(|l| l == lang)) {
            plan.push_vector(&v.vector(), a.gamma.unwrap_or(v.gamma_default))?;
        }
        if !plan.is_empty() {
            plan.layer_deltas(params.config())?;
            plans.insert(lang, plan);
        }
    }
    let items: Vec<McqItem> = world.items.iter().filter(|i| split.is_none_or(|s| i.split == s)).cloned().collect();
    let (_, report) = accuracy_with_plans(&params, &items, |i| plans.get(&i.lang), a.length_norm)?;
    write_json(&a.common.out.join(file), &report)?;
    Ok(())
}

fn method_id(path: &Path) -> String {
    path.file_stem().unwrap_or_default().to_string_lossy().into_owned()
}

pub fn cmd_plane(a: &PlaneArgs) -> CliResult<()> {
    let out = &a.common.out;
    prepare_outputs(out, &["plane.csv", "plane.svg"], a.common.overwrite)?;
    let base: EvalReport = read_json(&a.baseline)?;
    let mut points: Vec<PlanePoint> = Vec::new();
    for c in &a.candidates {
        let cand: EvalReport = read_json(c)?;
        points.extend(plane_points(&base, &cand, &method_id(c))?);
    }
    fs::write(out.join("plane.csv"), plane_csv(&points))?;
    fs::write(out.join("plane.svg"), plane_svg(&points))?;
    Ok(())
}

fn plane_svg(points: &[PlanePoint]) -> String {
    let mut methods: Vec<String> = Vec::new();
    let pts: Vec<ScatterPoint> = points
        .iter()
        .map(|p| {
            let group = methods.iter().position(|m| *m == p.method).unwrap_or_else(|| {
                methods.push(p.method.clone());
                methods.len() - 1
            });
            ScatterPoint { x: p.localization, y: p.transfer, group, label: Some(p.lang.clone()) }
        })
        .collect();
    scatter(&pts, "Transfer-localization plane", "localization (points)", "transfer (points)", true, &methods)
}

fn read_csv_rows(path: &Path) -> CliResult<Vec<Vec<String>>> {
    let s = fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    Ok(s.lines().skip(1).filter(|l| !l.is_empty()).map(|l| l.split(',').map(str::to_string).collect()).collect())
}

pub fn cmd_report(a: &ReportArgs) -> CliResult<()> {
    let dir = &a.run_dir;
    if !dir.is_dir() {
        return Err(CliError::Data(format!("{} is not a directory", dir.display())));
    }
    prepare_outputs(dir, &["summary.md", "summary.json"], a.overwrite)?;
    let mut md = String::from("# Run summary\n\n");
    let mut summary = serde_json::Map::new();

    let reports_dir = dir.join("reports");
    let mut reports: Vec<(String, EvalReport)> = Vec::new();
    if reports_dir.is_dir() {
        let mut paths: Vec<PathBuf> = fs::read_dir(&reports_dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        paths.sort();
        for p in paths {
            reports.push((method_id(&p), read_json(&p)?));
        }
    }
    if !reports.is_empty() {
        md += "## Accuracy\n\n| model | lang | universal | cultural | cultural (ctx) | pivot-world picks |\n|---|---|---|---|---|---|\n";
        let mut acc = serde_json::Map::new();
        for (name, r) in &reports {
            let bias = english_bias_from_report(r, Dataset::Cultural).ok();
            for lang in r.languages() {
                let cell = |d| r.cell(lang, d).map(|c| format!("{:.4}", c.accuracy)).unwrap_or_else(|| "-".into());
                let b = bias
                    .as_ref()
                    .and_then(|b| b.per_language.iter().find(|c| c.lang == lang))
                    .map(|c| format!("{:.4}", c.fraction))
                    .unwrap_or_else(|| "-".into());
                md += &format!(
                    "| {name} | {lang} | {} | {} | {} | {b} |\n",
                    cell(Dataset::Universal),
                    cell(Dataset::Cultural),
                    cell(Dataset::CulturalCtx)
                );
            }
            acc.insert(
                name.clone(),
                serde_json::json!({
                    "accuracy": r.accuracy,
                    "cells": r.cells,
                    "english_bias": bias.map(|b| b.fraction),
                    "model_revision": r.model_revision,
                }),
            );
        }
        md.push('\n');
        summary.insert("reports".into(), acc.into());
    }

    let plane = dir.join("plane").join("plane.csv");
    if plane.is_file() {
        md += "## Transfer-localization plane\n\n| method | lang | transfer | localization |\n|---|---|---|---|\n";
        let rows = read_csv_rows(&plane)?;
        for r in &rows {
            md += &format!("| {} |\n", r.join(" | "));
        }
        md.push('\n');
        summary.insert("plane".into(), serde_json::to_value(rows).unwrap());
    }

    let sweep = dir.join("sweep");
    if sweep.join("argmax.json").is_file() {
        let argmax: BTreeMap<String, usize> = read_json(&sweep.join("argmax.json"))?;
        md += "## Best steering layers (dev2)\n\n";
        for (k, l) in &argmax {
            md += &format!("- {k}: layer {l}\n");
        }
        md.push('\n');
        summary.insert("argmax_layers".into(), serde_json::to_value(argmax).unwrap());
    }
    if sweep.join("perp.csv").is_file() {
        let rows = read_csv_rows(&sweep.join("perp.csv"))?;
        md += "## EN/LOC perpendicularity\n\n| layer | score (deg) |\n|---|---|\n";
        for r in &rows {
            md += &format!("| {} |\n", r.join(" | "));
        }
        md.push('\n');
        summary.insert("perpendicularity".into(), serde_json::to_value(rows).unwrap());
    }
    fs::write(dir.join("summary.md"), md)?;
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(())
}

fn p(path: &Path) -> String {
    path.to_string_lossy().into_owned()
}

/// Runs the full pipeline through the individual commands.
pub fn cmd_run(a: &RunArgs) -> CliResult<()> {
    let out = &a.common.out;
    let mut cfg = match &a.config {
        Some(path) => load_config_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg = cfg.with_seed(s);
    }
    cfg.validate()?;
    prepare_outputs(out, &[CONFIG_FILE], a.common.overwrite)?;
    write_json(&out.join(CONFIG_FILE), &cfg)?;
    let ow: &[&str] = if a.common.overwrite { &["--overwrite"] } else { &[] };
    let exec = |args: Vec<String>| run_args(std::iter::once("clalab".to_string()).chain(args).chain(ow.iter().map(|s| s.to_string())));

    let world = out.join("world");
    exec(vec!["gen".into(), "--config".into(), p(&out.join(CONFIG_FILE)), "--out".into(), p(&world)])?;
    let base = out.join("base");
    exec(vec!["train".into(), "--world".into(), p(&world), "--objective".into(), "pretrain".into(), "--out".into(), p(&base)])?;
    let aligned_name = cfg.train.objective.as_str();
    let aligned = out.join(aligned_name);
    exec(vec![
        "train".into(),
        "--world".into(),
        p(&world),
        "--objective".into(),
        aligned_name.into(),
        "--base".into(),
        p(&base.join(CHECKPOINT_FILE)),
        "--out".into(),
        p(&aligned),
    ])?;
    let ckpt = aligned.join(CHECKPOINT_FILE);

    let vectors = out.join("vectors");
    let mut en = Vec::new();
    let mut loc = Vec::new();
    for lang in (0..cfg.world.n_languages).filter(|&l| l != PIVOT) {
        for (kind, layer, dst) in [("en", cfg.steering.en_layer, &mut en), ("loc", cfg.steering.loc_layer, &mut loc)] {
            let mut args = vec![
                "steer-extract".into(),
                "--checkpoint".into(),
                p(&ckpt),
                "--world".into(),
                p(&world),
                "--kind".into(),
                kind.into(),
                "--layer".into(),
                layer.to_string(),
                "--lang".into(),
                lang.to_string(),
                "--out".into(),
                p(&vectors),
            ];
            if let Some(g) = a.gamma {
                args.extend(["--gamma".into(), g.to_string()]);
            }
            exec(args)?;
            dst.push(p(&vectors.join(vector_file_name(kind.parse().unwrap(), layer, lang))));
        }
    }

    if !a.no_sweep {
        let layers = cfg.sweep_layers.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(",");
        exec(vec![
            "sweep".into(),
            "--checkpoint".into(),
            p(&ckpt),
            "--world".into(),
            p(&world),
            "--layers".into(),
            layers,
            "--out".into(),
            p(&out.join("sweep")),
        ])?;
    }

    let reports = out.join("reports");
    let eval = |model: &Path, name: &str, plan: &[String]| {
        let mut args = vec![
            "eval".into(),
            "--checkpoint".into(),
            p(model),
            "--world".into(),
            p(&world),
            "--name".into(),
            name.to_string(),
            "--out".into(),
            p(&reports),
        ];
        if !plan.is_empty() {
            args.extend(["--plan".into(), plan.join(",")]);
        }
        exec(args)
    };
    eval(&base.join(CHECKPOINT_FILE), "base", &[])?;
    eval(&ckpt, aligned_name, &[])?;
    let loc_name = format!("{aligned_name}+loc");
    let surgical_name = format!("{aligned_name}+surgical");
    eval(&ckpt, &loc_name, &loc)?;
    let surgical: Vec<String> = en.iter().chain(&loc).cloned().collect();
    eval(&ckpt, &surgical_name, &surgical)?;

    let mut plane = vec!["plane".into(), "--baseline".into(), p(&reports.join("base.json"))];
    for n in [aligned_name, &loc_name, &surgical_name] {
        plane.push(p(&reports.join(format!("{n}.json"))));
    }
    plane.extend(["--out".into(), p(&out.join("plane"))]);
    exec(plane)?;
    exec(vec!["report".into(), p(out)])?;
    Ok(())
}
