//! Joint search over calibration subsets and importance metrics.
//!
//! Each trial picks `k` calibration documents and a [`MetricConfig`], prunes
//! the base model to the target ratio and scores the result by mean eval
//! perplexity. Suggestions come from [`crate::tpe`] or uniform sampling.

use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{objective_h, CalibrationSet, EvalSet};
use crate::error::{Error, Result};
use crate::fingerprint::Fingerprinter;
use crate::groups::build_groups;
use crate::importance::{combined_importance, Aggregation, Composition, MetricConfig};
use crate::model::TransformerLM;
use crate::pruner::{apply_plan, make_plan};
use crate::tpe::{self, Dim, Mode, TpeConfig, Value};

#[derive(Debug, Clone, PartialEq)]
pub struct SolutionSpace {
    /// Candidate calibration documents (indices into the tokenized training split).
    pub pool: Vec<usize>,
    pub k: usize,
    pub alpha_range: (f64, f64),
    pub align1_choices: Vec<f64>,
    pub align2_choices: Vec<f64>,
    pub agg_choices: Vec<Aggregation>,
    pub composition: Composition,
}

const CALIB: usize = 0;
const ALPHA1: usize = 1;
const ALPHA2: usize = 2;
const ALIGN1: usize = 3;
const ALIGN2: usize = 4;
const AGG: usize = 5;

impl SolutionSpace {
    /// Default grids: `align1 ∈ {1e5, 1e6, 1e7}`, `align2 ∈ {1e-2, 1e-3, 1e-4}`, all four aggregations.
    pub fn new(pool: Vec<usize>, k: usize) -> Self {
        Self {
            pool,
            k,
            alpha_range: (0.0, 1.0),
            align1_choices: vec![1e5, 1e6, 1e7],
            align2_choices: vec![1e-2, 1e-3, 1e-4],
            agg_choices: Aggregation::ALL.to_vec(),
            composition: Composition::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.pool.len() < self.k {
            return Err(Error::PoolTooSmall { pool: self.pool.len(), k: self.k });
        }
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if self.align1_choices.is_empty() || self.align2_choices.is_empty() || self.agg_choices.is_empty() {
            return Err(Error::Config("search grids must be non-empty".into()));
        }
        let (lo, hi) = self.alpha_range;
        if !(0.0 <= lo && lo < hi && hi <= 1.0) {
            return Err(Error::Config(format!("alpha range must satisfy 0 <= lo < hi <= 1, got {lo}..{hi}")));
        }
        let mut sorted = self.pool.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.pool.len() {
            return Err(Error::Config("calibration pool has duplicate ids".into()));
        }
        Ok(())
    }

    pub fn dims(&self) -> Vec<Dim> {
        let (lo, hi) = self.alpha_range;
        vec![
            Dim::Subset { pool: self.pool.len(), k: self.k },
            Dim::Real { lo, hi },
            Dim::Real { lo, hi },
            Dim::Categorical { n: self.align1_choices.len() },
            Dim::Categorical { n: self.align2_choices.len() },
            Dim::Categorical { n: self.agg_choices.len() },
        ]
    }

    fn decode(&self, v: &[Value]) -> (Vec<usize>, MetricConfig) {
        let mut ids: Vec<usize> = v[CALIB].subset().iter().map(|&i| self.pool[i]).collect();
        ids.sort_unstable();
        let metric = MetricConfig {
            alpha1: v[ALPHA1].real(),
            alpha2: v[ALPHA2].real(),
            align1: self.align1_choices[v[ALIGN1].cat()],
            align2: self.align2_choices[v[ALIGN2].cat()],
            agg: self.agg_choices[v[AGG].cat()],
            hessian: true,
            composition: self.composition,
        };
        (ids, metric)
    }

    fn encode_calib(&self, calib_ids: &[usize]) -> Option<Value> {
        let mut slots: Vec<usize> =
            calib_ids.iter().map(|id| self.pool.iter().position(|p| p == id)).collect::<Option<_>>()?;
        slots.sort_unstable();
        Some(Value::Subset(slots))
    }

    /// Metric dimensions, or `None` if the grids cannot express `m`.
    fn encode_metric(&self, m: &MetricConfig) -> Option<Vec<Value>> {
        let cat = |xs: &[f64], x: f64| xs.iter().position(|&c| c == x);
        Some(vec![
            Value::Real(m.alpha1),
            Value::Real(m.alpha2),
            Value::Cat(cat(&self.align1_choices, m.align1)?),
            Value::Cat(cat(&self.align2_choices, m.align2)?),
            Value::Cat(self.agg_choices.iter().position(|&a| a == m.agg)?),
        ])
    }

    /// Point for the surrogate. Metrics outside the grids (only possible for a
    /// frozen metric, whose dimensions the surrogate ignores) map to the lowest cell.
    fn observe(&self, t: &Trial) -> Vec<Value> {
        let metric = self.encode_metric(&t.metric).unwrap_or_else(|| self.lowest_cell());
        let mut v = vec![self.encode_calib(&t.calib_ids).expect("trial ids come from the pool")];
        v.extend(metric);
        v
    }

    fn lowest_cell(&self) -> Vec<Value> {
        let lo = Value::Real(self.alpha_range.0);
        vec![lo.clone(), lo, Value::Cat(0), Value::Cat(0), Value::Cat(0)]
    }

    fn hash_into(&self, f: &mut Fingerprinter) {
        f.update(b"space");
        f.update_u64(self.k as u64);
        for &p in &self.pool {
            f.update_u64(p as u64);
        }
        f.update_f64(self.alpha_range.0).update_f64(self.alpha_range.1);
        for &a in self.align1_choices.iter().chain(&self.align2_choices) {
            f.update_f64(a);
        }
        for a in &self.agg_choices {
            f.update(a.to_string().as_bytes());
        }
        f.update(format!("{:?}", self.composition).as_bytes());
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Tpe,
    Random,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Tpe => "tpe",
            Strategy::Random => "random",
        })
    }
}

impl FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tpe" => Ok(Strategy::Tpe),
            "random" => Ok(Strategy::Random),
            _ => Err(Error::Config(format!("unknown strategy {s:?}, expected tpe or random"))),
        }
    }
}

/// Ablation switches. `fixed_metric` freezes the metric dimensions,
/// `random_calib` samples calibration sets uniformly instead of modelling
/// them, `sequential` optimises the calibration set first (metric held at
/// its default) and then the metric with the best set frozen.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Ablation {
    pub fixed_metric: Option<MetricConfig>,
    pub random_calib: bool,
    pub sequential: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchOptions {
    pub strategy: Strategy,
    pub tpe: TpeConfig,
    pub budget: usize,
    pub seed: u64,
    /// Trials evaluated concurrently per round. Every trial in a round is
    /// suggested from the same history and committed in suggestion order.
    pub width: usize,
    pub ablation: Ablation,
}

impl Default for SearchOptions {
    fn default() -> Self {
        Self {
            strategy: Strategy::Tpe,
            tpe: TpeConfig::default(),
            budget: 50,
            seed: 0,
            width: 1,
            ablation: Ablation::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub index: usize,
    /// Sorted.
    pub calib_ids: Vec<usize>,
    pub metric: MetricConfig,
    /// Mean eval perplexity; `None` if the trial failed.
    pub objective: Option<f64>,
    pub seed: u64,
}

impl Trial {
    /// Objective with failures mapped to `+inf`.
    pub fn h(&self) -> f64 {
        self.objective.unwrap_or(f64::INFINITY)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryHeader {
    /// Hash of the space and every search option except the budget.
    pub space: String,
    /// Hash of what a trial is evaluated against: model, eval data, ratio.
    pub fingerprint: String,
    /// Readable copies of the hashed options, so records show how they were made.
    pub strategy: Strategy,
    pub ablation: Ablation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchHistory {
    pub header: HistoryHeader,
    pub trials: Vec<Trial>,
}

impl SearchHistory {
    /// Lowest objective, earliest trial on ties. Failed trials never win
    /// unless every trial failed.
    pub fn best(&self) -> Option<&Trial> {
        self.trials.iter().min_by(|a, b| a.h().total_cmp(&b.h()).then(a.index.cmp(&b.index)))
    }

    pub fn best_so_far(&self) -> Vec<f64> {
        self.trials
            .iter()
            .scan(f64::INFINITY, |best, t| {
                *best = best.min(t.h());
                Some(*best)
            })
            .collect()
    }

    /// Header line followed by one JSON record per trial.
    pub fn to_jsonl(&self) -> String {
        let mut out = header_line(&self.header);
        for t in &self.trials {
            out.push_str(&trial_line(t));
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines
            .next()
            .ok_or_else(|| Error::format("history", "missing header line"))
            .and_then(|l| serde_json::from_str(l).map_err(|e| Error::format("history", e.to_string())))?;
        let trials = lines
            .map(|l| serde_json::from_str::<Trial>(l).map_err(|e| Error::format("history", e.to_string())))
            .collect::<Result<Vec<_>>>()?;
        for (i, t) in trials.iter().enumerate() {
            if t.index != i {
                return Err(Error::format("history", format!("trial {i} is recorded with index {}", t.index)));
            }
        }
        Ok(Self { header, trials })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_jsonl(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    /// `iteration,objective,best_so_far` with one row per trial, 1-based.
    pub fn report_csv(&self) -> String {
        let mut out = String::from("iteration,objective,best_so_far\n");
        for (t, best) in self.trials.iter().zip(self.best_so_far()) {
            out.push_str(&format!("{},{},{}\n", t.index + 1, t.h(), best));
        }
        out
    }
}

fn header_line(h: &HistoryHeader) -> String {
    serde_json::to_string(h).expect("header serializes") + "\n"
}

fn trial_line(t: &Trial) -> String {
    serde_json::to_string(t).expect("trial serializes") + "\n"
}

/// Everything a trial is scored against.
pub struct Evaluator<'a> {
    pub model: &'a TransformerLM,
    /// Tokenized training documents; the pool indexes into these.
    pub docs: &'a [Vec<u32>],
    pub calib_len: usize,
    pub ratio: f64,
    pub evals: &'a [EvalSet],
}

impl Evaluator<'_> {
    /// Calibrate, score, prune to the ratio and return mean eval perplexity.
    pub fn evaluate(&self, calib_ids: &[usize], metric: &MetricConfig) -> Result<f64> {
        let calib = CalibrationSet::new(self.docs, calib_ids, self.calib_len)?;
        let grads = self.model.gradients(&calib.sequences, true)?;
        let groups = build_groups(self.model);
        let report = combined_importance(self.model, &grads, &groups, metric, &calib.fingerprint())?;
        let plan = make_plan(&report, self.model, self.ratio)?;
        let pruned = apply_plan(self.model, &plan)?;
        let h = objective_h(&pruned, self.evals)?;
        if !h.is_finite() {
            return Err(Error::NonFiniteLoss);
        }
        Ok(h)
    }

    pub fn fingerprint(&self) -> String {
        let mut f = Fingerprinter::new();
        f.update(self.model.fingerprint().as_bytes());
        f.update_u64(self.calib_len as u64).update_f64(self.ratio);
        for e in self.evals {
            f.update(e.name.as_bytes());
            for w in &e.windows {
                f.update_u64(w.len() as u64);
                for &t in w {
                    f.update_u64(t as u64);
                }
            }
        }
        f.finish()
    }
}

pub fn space_hash(space: &SolutionSpace, opts: &SearchOptions) -> String {
    let mut f = Fingerprinter::new();
    space.hash_into(&mut f);
    f.update(opts.strategy.to_string().as_bytes());
    f.update_f64(opts.tpe.gamma);
    f.update_u64(opts.tpe.n_startup as u64).update_u64(opts.tpe.n_candidates as u64);
    f.update_u64(opts.seed).update_u64(opts.width as u64);
    let a = &opts.ablation;
    f.update(format!("{:?}|{}|{}", a.fixed_metric, a.random_calib, a.sequential).as_bytes());
    f.finish()
}

/// Seed of trial `index`, independent of every other trial.
pub fn trial_seed(master: u64, index: usize) -> u64 {
    let mut f = Fingerprinter::new();
    f.update(b"trial").update_u64(master).update_u64(index as u64);
    u64::from_str_radix(&f.finish(), 16).expect("hex digest")
}

/// Per-dimension modes and the first history index the surrogate may use.
fn plan_trial(space: &SolutionSpace, opts: &SearchOptions, index: usize, history: &[Trial]) -> (Vec<Mode>, usize) {
    let base = match opts.strategy {
        Strategy::Tpe => Mode::Model,
        Strategy::Random => Mode::Random,
    };
    let mut modes = vec![base; 6];
    let a = &opts.ablation;
    if a.random_calib {
        modes[CALIB] = Mode::Random;
    }
    let freeze_metric = |modes: &mut Vec<Mode>, v: &[Value]| {
        for d in ALPHA1..=AGG {
            modes[d] = Mode::Fixed(v[d - ALPHA1].clone());
        }
    };
    // A fixed metric replaces the decoded one wholesale, so its placeholder cells do not matter.
    if a.fixed_metric.is_some() {
        freeze_metric(&mut modes, &space.lowest_cell());
    }
    let mut start = 0;
    if a.sequential {
        let half = opts.budget.div_ceil(2);
        if index < half {
            if a.fixed_metric.is_none() {
                let v = space.encode_metric(&sequential_default(space)).expect("grid values");
                freeze_metric(&mut modes, &v);
            }
        } else {
            let best = history[..half]
                .iter()
                .min_by(|x, y| x.h().total_cmp(&y.h()).then(x.index.cmp(&y.index)))
                .expect("first phase is complete");
            modes[CALIB] = Mode::Fixed(space.encode_calib(&best.calib_ids).expect("own trial"));
            start = half;
        }
    }
    (modes, start)
}

/// Metric held fixed while the sequential mode searches calibration data:
/// equal mix, the smallest alignment factors and sum aggregation.
pub fn sequential_default(space: &SolutionSpace) -> MetricConfig {
    let smallest = |xs: &[f64]| xs.iter().copied().fold(f64::INFINITY, f64::min);
    let (lo, hi) = space.alpha_range;
    let mid = (lo + hi) / 2.0;
    MetricConfig {
        alpha1: mid,
        alpha2: mid,
        align1: smallest(&space.align1_choices),
        align2: smallest(&space.align2_choices),
        agg: if space.agg_choices.contains(&Aggregation::Sum) { Aggregation::Sum } else { space.agg_choices[0] },
        hessian: true,
        composition: space.composition,
    }
}

fn suggest_trial(space: &SolutionSpace, opts: &SearchOptions, index: usize, history: &[Trial]) -> Trial {
    let seed = trial_seed(opts.seed, index);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (modes, start) = plan_trial(space, opts, index, history);
    let observed: Vec<(Vec<Value>, f64)> = history[start..]
        .iter()
        .map(|t| (space.observe(t), t.h()))
        .collect();
    let v = tpe::suggest(&space.dims(), &modes, &observed, &opts.tpe, &mut rng);
    let (calib_ids, mut metric) = space.decode(&v);
    if let Some(m) = &opts.ablation.fixed_metric {
        metric = *m;
    }
    Trial { index, calib_ids, metric, objective: None, seed }
}

fn check_options(space: &SolutionSpace, opts: &SearchOptions) -> Result<()> {
    space.validate()?;
    opts.tpe.validate()?;
    if opts.budget == 0 || opts.width == 0 {
        return Err(Error::Config("budget and width must be at least 1".into()));
    }
    if let Some(m) = &opts.ablation.fixed_metric {
        m.validate()?;
    }
    if opts.ablation.sequential && opts.budget < 2 {
        return Err(Error::Config("sequential mode needs a budget of at least 2".into()));
    }
    Ok(())
}

/// Runs or resumes a search. When `history_path` is given, existing records
/// there are replayed first and every new trial is appended as it completes,
/// so an interrupted run continues exactly where it stopped.
pub fn run_search(
    evaluator: &Evaluator<'_>,
    space: &SolutionSpace,
    opts: &SearchOptions,
    history_path: Option<&Path>,
) -> Result<SearchHistory> {
    run_search_with(evaluator, space, opts, history_path, |_, _| {})
}

/// [`run_search`] with a callback receiving each committed trial and its wall time in seconds.
pub fn run_search_with(
    evaluator: &Evaluator<'_>,
    space: &SolutionSpace,
    opts: &SearchOptions,
    history_path: Option<&Path>,
    mut on_trial: impl FnMut(&Trial, f64),
) -> Result<SearchHistory> {
    check_options(space, opts)?;
    let header = HistoryHeader {
        space: space_hash(space, opts),
        fingerprint: evaluator.fingerprint(),
        strategy: opts.strategy,
        ablation: opts.ablation.clone(),
    };
    let mut history = SearchHistory { header: header.clone(), trials: Vec::new() };
    let mut sink = None;
    if let Some(path) = history_path {
        if path.exists() {
            let old = SearchHistory::read(path)?;
            if old.header != header {
                return Err(Error::ResumeMismatch(format!(
                    "{} was written for space {} / inputs {}, current run is {} / {}",
                    path.display(),
                    old.header.space,
                    old.header.fingerprint,
                    header.space,
                    header.fingerprint
                )));
            }
            history.trials = old.trials;
            if history.trials.len() > opts.budget {
                history.trials.truncate(opts.budget);
            }
            sink = Some(OpenOptions::new().append(true).open(path).map_err(|e| Error::io(path, e))?);
        } else {
            let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
            f.write_all(header_line(&header).as_bytes()).map_err(|e| Error::io(path, e))?;
            sink = Some(f);
        }
    }

    while history.trials.len() < opts.budget {
        let next = history.trials.len();
        let round_start = next - next % opts.width;
        let round_end = (round_start + opts.width).min(opts.budget);
        let known = &history.trials[..round_start];
        let pending: Vec<Trial> = (next..round_end).map(|i| suggest_trial(space, opts, i, known)).collect();
        let results: Vec<(Trial, f64)> = pending
            .into_par_iter()
            .map(|mut t| {
                let start = std::time::Instant::now();
                match evaluator.evaluate(&t.calib_ids, &t.metric) {
                    Ok(h) => t.objective = Some(h),
                    Err(e) => log::warn!("trial {} failed: {e}", t.index),
                }
                (t, start.elapsed().as_secs_f64())
            })
            .collect();
        for (t, secs) in results {
            if let (Some(f), Some(path)) = (sink.as_mut(), history_path) {
                f.write_all(trial_line(&t).as_bytes()).map_err(|e| Error::io(path, e))?;
                f.flush().map_err(|e| Error::io(path, e))?;
            }
            log::info!("trial {} objective {:?}", t.index, t.objective);
            on_trial(&t, secs);
            history.trials.push(t);
        }
    }
    Ok(history)
}
