#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use clalab_cli::config::RunConfig;

/// Runs the `clalab` binary; returns (exit code, stderr).
pub fn clalab(args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_clalab")).args(args).output().expect("spawn clalab");
    (out.status.code().unwrap_or(-1), String::from_utf8_lossy(&out.stderr).into_owned())
}

pub fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

/// Two-layer model, one epoch of each stage: seconds instead of minutes.
pub fn small_config() -> RunConfig {
    let mut c = RunConfig::default();
    c.model.n_layers = 2;
    c.model.d_model = 8;
    c.model.n_heads = 2;
    c.model.d_ff = 16;
    c.pretrain.epochs = 2;
    c.train.epochs = 1;
    c.train.midalign_layer = 1;
    c.pretrain.midalign_layer = 1;
    c.steering.en_layer = 1;
    c.steering.loc_layer = 2;
    c.sweep_layers = vec![1, 2];
    c
}

pub fn write_config(dir: &Path, cfg: &RunConfig) -> PathBuf {
    let path = dir.join("run_config.json");
    fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    path
}

/// Every file under `root`, keyed by its relative path.
pub fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        let mut entries: Vec<_> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
        entries.sort();
        for p in entries {
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().replace('\\', "/");
                out.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

/// Runs the small pipeline into `out` and asserts success.
pub fn small_run(dir: &Path, out: &Path, sweep: bool) {
    let cfg = write_config(dir, &small_config());
    let mut args = vec!["run", "--config", s(&cfg), "--out", s(out)];
    if !sweep {
        args.push("--no-sweep");
    }
    let (code, err) = clalab(&args);
    assert_eq!(code, 0, "run failed: {err}");
}
