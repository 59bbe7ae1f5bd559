#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn corpus() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/de_finibus_liber_primus.txt")
}

/// Runs the binary and returns its output.
pub fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_samprune")).args(args).output().expect("binary runs")
}

/// Runs the binary, requires exit 0 and parses `key=value` lines from stdout.
pub fn run_ok(args: &[&str]) -> BTreeMap<String, String> {
    let out = run(args);
    assert!(
        out.status.success(),
        "samprune {args:?} failed with {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout)
        .unwrap()
        .lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

pub fn num(map: &BTreeMap<String, String>, key: &str) -> f64 {
    map.get(key).unwrap_or_else(|| panic!("missing {key} in {map:?}")).parse().unwrap()
}

/// Writes `lines` as a config file in `dir` and returns its path.
pub fn write_config(dir: &Path, name: &str, lines: &[String]) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, lines.join("\n") + "\n").unwrap();
    path
}

/// A small model on the bundled corpus that trains in a second or two.
pub fn small_config(extra: &[&str]) -> Vec<String> {
    let mut lines = vec![
        format!("data.corpus = {}", corpus().display()),
        "data.vocab_size = 200".into(),
        "data.docs_per_eval = 4".into(),
        "data.min_tokens = 32".into(),
        "data.calib_len = 32".into(),
        "model.d_model = 16".into(),
        "model.n_layers = 2".into(),
        "model.n_heads = 2".into(),
        "model.d_ff = 32".into(),
        "model.max_seq_len = 32".into(),
        "model.prune_start = 0".into(),
        "model.prune_end = 2".into(),
        "train.epochs = 1".into(),
        "train.lr = 3e-3".into(),
        "search.k = 4".into(),
        "search.budget = 3".into(),
        "recovery.epochs = 1".into(),
    ];
    lines.extend(extra.iter().map(|s| s.to_string()));
    lines
}

/// Copies the trained base model and vocabulary into a fresh run directory.
pub fn copy_base(from: &Path, to: &Path) {
    std::fs::create_dir_all(to).unwrap();
    for f in ["base.ckpt", "vocab.txt"] {
        std::fs::copy(from.join(f), to.join(f)).unwrap();
    }
}

pub fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}
