//! Flat `section.key = value` run configuration with strict parsing.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use samprune::data::DataConfig;
use samprune::importance::{Aggregation, Composition};
use samprune::model::ModelConfig;
use samprune::recovery::{RecoveryOptions, Targets};
use samprune::search::Strategy;
use samprune::tpe::TpeConfig;
use samprune::train::TrainOptions;

use crate::error::CliError;

/// Which fixed metric the `--fix-metric` ablation uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FixMetric {
    First,
    Second,
}

impl FromStr for FixMetric {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "first" | "first-order" => Ok(FixMetric::First),
            "second" | "second-order" => Ok(FixMetric::Second),
            _ => Err(format!("expected first or second, got {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchConfig {
    pub k: usize,
    pub ratio: f64,
    pub budget: usize,
    pub strategy: Strategy,
    pub tpe: TpeConfig,
    pub width: usize,
    pub align1: Vec<f64>,
    pub align2: Vec<f64>,
    pub aggs: Vec<Aggregation>,
    pub composition: Composition,
    pub fix_metric: Option<FixMetric>,
    pub random_calib: bool,
    pub sequential: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub corpus: PathBuf,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainOptions,
    pub search: SearchConfig,
    pub recovery: RecoveryOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("run"),
            corpus: PathBuf::from("data/de_finibus_liber_primus.txt"),
            data: DataConfig::default(),
            model: ModelConfig {
                vocab_size: 768,
                d_model: 128,
                n_layers: 4,
                n_heads: 4,
                d_ff: 640,
                max_seq_len: 64,
                prune_start: 1,
                prune_end: 3,
                seed: 0,
            },
            train: TrainOptions { epochs: 6, lr: 1e-3, batch_size: 8, seed: 0 },
            search: SearchConfig {
                k: 10,
                ratio: 0.2,
                budget: 50,
                strategy: Strategy::Tpe,
                tpe: TpeConfig::default(),
                width: 1,
                align1: vec![1e5, 1e6, 1e7],
                align2: vec![1e-2, 1e-3, 1e-4],
                aggs: Aggregation::ALL.to_vec(),
                composition: Composition::Granularity,
                fix_metric: None,
                random_calib: false,
                sequential: false,
            },
            recovery: RecoveryOptions::default(),
        }
    }
}

/// Every accepted key.
pub const KEYS: &[&str] = &[
    "seed",
    "out",
    "data.corpus",
    "data.vocab_size",
    "data.eval_sets",
    "data.docs_per_eval",
    "data.recovery_docs",
    "data.min_tokens",
    "data.calib_len",
    "model.d_model",
    "model.n_layers",
    "model.n_heads",
    "model.d_ff",
    "model.max_seq_len",
    "model.prune_start",
    "model.prune_end",
    "train.epochs",
    "train.lr",
    "train.batch_size",
    "search.k",
    "search.ratio",
    "search.budget",
    "search.strategy",
    "search.gamma",
    "search.n_startup",
    "search.n_candidates",
    "search.width",
    "search.align1",
    "search.align2",
    "search.aggs",
    "search.composition",
    "search.fix_metric",
    "search.random_calib",
    "search.sequential",
    "recovery.rank",
    "recovery.epochs",
    "recovery.lr",
    "recovery.batch_size",
    "recovery.targets",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, CliError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e| CliError::usage(format!("config key {key}: cannot parse {value:?}: {e}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>, CliError>
where
    T::Err: std::fmt::Display,
{
    let items: Vec<T> = value.split(',').map(|s| parse(key, s.trim())).collect::<Result<_, _>>()?;
    if items.is_empty() {
        return Err(CliError::usage(format!("config key {key}: list is empty")));
    }
    Ok(items)
}

fn parse_composition(key: &str, value: &str) -> Result<Composition, CliError> {
    match value {
        "granularity" => Ok(Composition::Granularity),
        "order" => Ok(Composition::Order),
        _ => Err(CliError::usage(format!("config key {key}: expected granularity or order, got {value:?}"))),
    }
}

impl RunConfig {
    /// Parses `key = value` lines over the defaults. `#` starts a comment.
    /// Relative paths are resolved against `base_dir`.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self, CliError> {
        let mut cfg = Self::default();
        let mut seen = BTreeSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::usage(format!("config line {}: expected key = value", n + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !KEYS.contains(&key) {
                return Err(CliError::usage(format!("unknown config key {key:?}")));
            }
            if !seen.insert(key.to_string()) {
                return Err(CliError::usage(format!("config key {key} is set twice")));
            }
            cfg.set(key, value, base_dir)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    fn set(&mut self, key: &str, v: &str, base: &Path) -> Result<(), CliError> {
        let s = &mut self.search;
        match key {
            "seed" => self.seed = parse(key, v)?,
            "out" => self.out = base.join(v),
            "data.corpus" => self.corpus = base.join(v),
            "data.vocab_size" => self.data.vocab_size = parse(key, v)?,
            "data.eval_sets" => self.data.eval_sets = parse(key, v)?,
            "data.docs_per_eval" => self.data.docs_per_eval = parse(key, v)?,
            "data.recovery_docs" => self.data.recovery_docs = parse(key, v)?,
            "data.min_tokens" => self.data.min_tokens = parse(key, v)?,
            "data.calib_len" => self.data.calib_len = parse(key, v)?,
            "model.d_model" => self.model.d_model = parse(key, v)?,
            "model.n_layers" => self.model.n_layers = parse(key, v)?,
            "model.n_heads" => self.model.n_heads = parse(key, v)?,
            "model.d_ff" => self.model.d_ff = parse(key, v)?,
            "model.max_seq_len" => self.model.max_seq_len = parse(key, v)?,
            "model.prune_start" => self.model.prune_start = parse(key, v)?,
            "model.prune_end" => self.model.prune_end = parse(key, v)?,
            "train.epochs" => self.train.epochs = parse(key, v)?,
            "train.lr" => self.train.lr = parse(key, v)?,
            "train.batch_size" => self.train.batch_size = parse(key, v)?,
            "search.k" => s.k = parse(key, v)?,
            "search.ratio" => s.ratio = parse(key, v)?,
            "search.budget" => s.budget = parse(key, v)?,
            "search.strategy" => s.strategy = parse(key, v)?,
            "search.gamma" => s.tpe.gamma = parse(key, v)?,
            "search.n_startup" => s.tpe.n_startup = parse(key, v)?,
            "search.n_candidates" => s.tpe.n_candidates = parse(key, v)?,
            "search.width" => s.width = parse(key, v)?,
            "search.align1" => s.align1 = parse_list(key, v)?,
            "search.align2" => s.align2 = parse_list(key, v)?,
            "search.aggs" => s.aggs = parse_list(key, v)?,
            "search.composition" => s.composition = parse_composition(key, v)?,
            "search.fix_metric" => {
                s.fix_metric = if v == "none" { None } else { Some(parse(key, v)?) };
            }
            "search.random_calib" => s.random_calib = parse(key, v)?,
            "search.sequential" => s.sequential = parse(key, v)?,
            "recovery.rank" => self.recovery.rank = parse(key, v)?,
            "recovery.epochs" => self.recovery.epochs = parse(key, v)?,
            "recovery.lr" => self.recovery.lr = parse(key, v)?,
            "recovery.batch_size" => self.recovery.batch_size = parse(key, v)?,
            "recovery.targets" => self.recovery.targets = parse::<Targets>(key, v)?,
            _ => unreachable!("{key} is listed in KEYS"),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::usage(m));
        if self.data.calib_len > self.model.max_seq_len {
            return bad(format!(
                "data.calib_len ({}) exceeds model.max_seq_len ({})",
                self.data.calib_len, self.model.max_seq_len
            ));
        }
        if self.data.min_tokens < self.data.calib_len {
            return bad(format!(
                "data.min_tokens ({}) must be at least data.calib_len ({})",
                self.data.min_tokens, self.data.calib_len
            ));
        }
        if !(0.0..1.0).contains(&self.search.ratio) {
            return bad(format!("search.ratio must lie in [0, 1), got {}", self.search.ratio));
        }
        if self.search.budget == 0 || self.search.width == 0 || self.search.k == 0 {
            return bad("search.budget, search.width and search.k must be at least 1".into());
        }
        if self.train.batch_size == 0 || self.recovery.batch_size == 0 {
            return bad("batch sizes must be at least 1".into());
        }
        self.search.tpe.validate().map_err(CliError::from)?;
        let mut model = self.model.clone();
        model.vocab_size = self.data.vocab_size;
        model.validate().map_err(CliError::from)?;
        Ok(())
    }

    pub fn data_config(&self) -> DataConfig {
        DataConfig { window: self.model.max_seq_len, ..self.data.clone() }
    }
}

/// Stage seeds are fixed offsets from the master seed.
pub mod stage {
    pub const INIT: u64 = 1;
    pub const SPLIT: u64 = 2;
    pub const TRAIN: u64 = 3;
    pub const SEARCH: u64 = 4;
    pub const RECOVERY: u64 = 5;

    pub fn seed(master: u64, offset: u64) -> u64 {
        master.wrapping_add(offset)
    }
}
