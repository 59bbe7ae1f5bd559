use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use samprune::data::{objective_h, objective_h_with, perplexity, CalibrationSet, Corpus, Dataset, Vocabulary};
use samprune::groups::build_groups;
use samprune::importance::{combined_importance, Aggregation, MetricConfig};
use samprune::model::{read_model, write_model, TransformerLM};
use samprune::pruner::{apply_plan, make_plan, pruning_stats};
use samprune::recovery::{attach, RecoveryOptions};
use samprune::search::{run_search_with, Ablation, Evaluator, SearchHistory, SearchOptions, SolutionSpace, Trial};
use samprune::train::{train_lm, TrainOptions};

use crate::config::{stage, FixMetric, RunConfig};
use crate::error::CliError;

pub const BASE: &str = "base.ckpt";
pub const VOCAB: &str = "vocab.txt";
pub const HISTORY: &str = "history.jsonl";
pub const TIMINGS: &str = "timings.csv";
pub const BEST: &str = "best_trial.json";
pub const CONVERGENCE: &str = "convergence.csv";
pub const PRUNED: &str = "pruned.ckpt";
pub const RECOVERED: &str = "recovered.ckpt";
pub const ADAPTER: &str = "adapter.ckpt";

/// Best trial plus the model it was searched on.
#[derive(Debug, Serialize, Deserialize)]
pub struct BestTrial {
    pub model: String,
    pub ratio: f64,
    pub trial: Trial,
}

/// The metric the `--fix-metric` ablation pins: an even mix with unit
/// alignment and sum aggregation, with or without the second-order term.
pub fn fixed_metric(which: FixMetric) -> MetricConfig {
    MetricConfig {
        alpha1: 0.5,
        alpha2: 0.5,
        align1: 1.0,
        align2: 1.0,
        agg: Aggregation::Sum,
        hessian: which == FixMetric::Second,
        composition: Default::default(),
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|e| CliError::runtime(format!("cannot write {}: {e}", path.display())))
}

fn out_dir(cfg: &RunConfig) -> Result<&Path, CliError> {
    std::fs::create_dir_all(&cfg.out)
        .map_err(|e| CliError::runtime(format!("cannot create {}: {e}", cfg.out.display())))?;
    Ok(&cfg.out)
}

fn load_corpus(cfg: &RunConfig) -> Result<Corpus, CliError> {
    if !cfg.corpus.is_file() {
        return Err(CliError::usage(format!("corpus not found: {}", cfg.corpus.display())));
    }
    Ok(Corpus::load(&cfg.corpus)?)
}

fn dataset(cfg: &RunConfig, vocab: Option<Vocabulary>) -> Result<Dataset, CliError> {
    let corpus = load_corpus(cfg)?;
    Ok(Dataset::prepare(&corpus, &cfg.data_config(), stage::seed(cfg.seed, stage::SPLIT), vocab)?)
}

fn require(path: PathBuf, hint: &str) -> Result<PathBuf, CliError> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(CliError::usage(format!("{} not found; {hint}", path.display())))
    }
}

fn load_checkpoint(path: &Path, vocab: &Vocabulary) -> Result<TransformerLM, CliError> {
    let model = read_model(path)?;
    if model.config.vocab_size != vocab.len() {
        return Err(CliError::runtime(format!(
            "{} expects {} tokens but the vocabulary has {}",
            path.display(),
            model.config.vocab_size,
            vocab.len()
        )));
    }
    Ok(model)
}

/// Vocabulary and dataset written by `train`.
fn load_data(cfg: &RunConfig) -> Result<Dataset, CliError> {
    let vocab_path = require(cfg.out.join(VOCAB), "run `samprune train` first")?;
    dataset(cfg, Some(Vocabulary::read(&vocab_path)?))
}

pub fn train(cfg: &RunConfig) -> Result<(), CliError> {
    let ds = dataset(cfg, None)?;
    let out = out_dir(cfg)?;
    let mut mc = cfg.model.clone();
    mc.vocab_size = ds.vocab.len();
    mc.seed = stage::seed(cfg.seed, stage::INIT);
    let mut model = TransformerLM::new(mc)?;
    let opts = TrainOptions { seed: stage::seed(cfg.seed, stage::TRAIN), ..cfg.train.clone() };
    let log = train_lm(&mut model, &ds.train_windows, &opts)?;
    write_model(&model, &out.join(BASE))?;
    ds.vocab.write(&out.join(VOCAB))?;
    let mut csv = format!("epoch,loss\n0,{}\n", log.initial_loss);
    for (e, l) in log.epoch_losses.iter().enumerate() {
        csv.push_str(&format!("{},{l}\n", e + 1));
    }
    write_file(&out.join("train_log.csv"), csv)?;
    println!("params={}", model.count_params(false));
    println!("initial_loss={}", log.initial_loss);
    println!("final_loss={}", log.epoch_losses.last().copied().unwrap_or(log.initial_loss));
    println!("eval_ppl={}", objective_h(&model, &ds.evals)?);
    println!("fingerprint={}", model.fingerprint());
    Ok(())
}

#[derive(Debug, Default, Clone)]
pub struct SearchFlags {
    pub strategy: Option<samprune::search::Strategy>,
    pub ratio: Option<f64>,
    pub budget: Option<usize>,
    pub fix_metric: Option<FixMetric>,
    pub random_calib: bool,
    pub sequential: bool,
}

pub fn search_setup(cfg: &RunConfig, ds: &Dataset, flags: &SearchFlags) -> Result<(SolutionSpace, SearchOptions), CliError> {
    let s = &cfg.search;
    let pool = ds.pool(&cfg.data_config(), s.k)?;
    let space = SolutionSpace {
        pool,
        k: s.k,
        alpha_range: (0.0, 1.0),
        align1_choices: s.align1.clone(),
        align2_choices: s.align2.clone(),
        agg_choices: s.aggs.clone(),
        composition: s.composition,
    };
    let opts = SearchOptions {
        strategy: flags.strategy.unwrap_or(s.strategy),
        tpe: s.tpe,
        budget: flags.budget.unwrap_or(s.budget),
        seed: stage::seed(cfg.seed, stage::SEARCH),
        width: s.width,
        ablation: Ablation {
            fixed_metric: flags.fix_metric.or(s.fix_metric).map(fixed_metric),
            random_calib: flags.random_calib || s.random_calib,
            sequential: flags.sequential || s.sequential,
        },
    };
    Ok((space, opts))
}

fn ratio(cfg: &RunConfig, flag: Option<f64>) -> Result<f64, CliError> {
    let r = flag.unwrap_or(cfg.search.ratio);
    if !(0.0..1.0).contains(&r) {
        return Err(CliError::usage(format!("--ratio must lie in [0, 1), got {r}")));
    }
    Ok(r)
}

pub fn search(cfg: &RunConfig, flags: &SearchFlags) -> Result<(), CliError> {
    let ds = load_data(cfg)?;
    let base = load_checkpoint(&require(cfg.out.join(BASE), "run `samprune train` first")?, &ds.vocab)?;
    let (space, opts) = search_setup(cfg, &ds, flags)?;
    let out = out_dir(cfg)?;
    let evaluator = Evaluator {
        model: &base,
        docs: &ds.train_docs,
        calib_len: cfg.data.calib_len,
        ratio: ratio(cfg, flags.ratio)?,
        evals: &ds.evals,
    };
    // Wall times live outside the history so the history stays reproducible.
    let timings_path = out.join(TIMINGS);
    let fresh = !timings_path.exists() || !out.join(HISTORY).exists();
    let mut timings = OpenOptions::new()
        .create(true)
        .write(true)
        .append(!fresh)
        .truncate(fresh)
        .open(&timings_path)
        .map_err(|e| CliError::runtime(format!("cannot open {}: {e}", timings_path.display())))?;
    if fresh {
        writeln!(timings, "index,seconds").map_err(|e| CliError::runtime(e.to_string()))?;
    }
    let history = run_search_with(&evaluator, &space, &opts, Some(&out.join(HISTORY)), |t, secs| {
        let _ = writeln!(timings, "{},{secs:.3}", t.index);
    })?;
    let best = history.best().expect("budget is at least one").clone();
    let record = BestTrial { model: base.fingerprint(), ratio: evaluator.ratio, trial: best.clone() };
    write_file(&out.join(BEST), serde_json::to_string_pretty(&record).expect("serializable") + "\n")?;
    write_file(&out.join(CONVERGENCE), history.report_csv())?;
    println!("trials={}", history.trials.len());
    println!("best_index={}", best.index);
    println!("best_objective={}", best.h());
    println!("best_calib={:?}", best.calib_ids);
    println!("best_metric={}", best.metric);
    Ok(())
}

pub fn prune(cfg: &RunConfig, ratio_flag: Option<f64>, trial_path: Option<PathBuf>) -> Result<(), CliError> {
    let ds = load_data(cfg)?;
    let base = load_checkpoint(&require(cfg.out.join(BASE), "run `samprune train` first")?, &ds.vocab)?;
    let trial_path = require(trial_path.unwrap_or_else(|| cfg.out.join(BEST)), "run `samprune search` first")?;
    let text = std::fs::read_to_string(&trial_path)
        .map_err(|e| CliError::runtime(format!("cannot read {}: {e}", trial_path.display())))?;
    let best: BestTrial = serde_json::from_str(&text)
        .map_err(|e| CliError::runtime(format!("malformed {}: {e}", trial_path.display())))?;
    if best.model != base.fingerprint() {
        return Err(CliError::runtime(format!(
            "{} was searched on model {}, but {} is {}",
            trial_path.display(),
            best.model,
            BASE,
            base.fingerprint()
        )));
    }
    let ratio = ratio(cfg, ratio_flag)?;
    let calib = CalibrationSet::new(&ds.train_docs, &best.trial.calib_ids, cfg.data.calib_len)?;
    let grads = base.gradients(&calib.sequences, true)?;
    let report = combined_importance(&base, &grads, &build_groups(&base), &best.trial.metric, &calib.fingerprint())?;
    let plan = make_plan(&report, &base, ratio)?;
    let pruned = apply_plan(&base, &plan)?;
    let stats = pruning_stats(&base, &pruned);
    let out = out_dir(cfg)?;
    write_model(&pruned, &out.join(PRUNED))?;
    write_file(&out.join("plan.txt"), plan.to_text())?;
    write_file(&out.join("importance.txt"), report.to_text())?;
    write_file(&out.join("stats.txt"), stats.to_text())?;
    print!("{}", stats.to_text());
    println!("achieved_ratio={}", plan.achieved_ratio);
    println!("removed_groups={}", plan.removed.len());
    println!("eval_ppl_before={}", objective_h(&base, &ds.evals)?);
    println!("eval_ppl_after={}", objective_h(&pruned, &ds.evals)?);
    Ok(())
}

pub fn recover(cfg: &RunConfig, checkpoint: Option<PathBuf>) -> Result<(), CliError> {
    let ds = load_data(cfg)?;
    let path = require(checkpoint.unwrap_or_else(|| cfg.out.join(PRUNED)), "run `samprune prune` first")?;
    let pruned = load_checkpoint(&path, &ds.vocab)?;
    let seed = stage::seed(cfg.seed, stage::RECOVERY);
    let opts = RecoveryOptions { seed, ..cfg.recovery.clone() };
    let mut lora = attach(pruned, opts.rank, opts.targets, seed)?;
    let before = objective_h(&lora.base, &ds.evals)?;
    let log = lora.finetune(&ds.recovery_windows, &opts)?;
    let after = objective_h_with(&lora.base, Some(&lora.adapters), &ds.evals)?;
    let out = out_dir(cfg)?;
    lora.write(&out.join(ADAPTER))?;
    let merged = lora.merge()?;
    write_model(&merged, &out.join(RECOVERED))?;
    let mut csv = format!("epoch,loss\n0,{}\n", log.initial_loss);
    for (e, l) in log.epoch_losses.iter().enumerate() {
        csv.push_str(&format!("{},{l}\n", e + 1));
    }
    write_file(&out.join("recovery_log.csv"), csv)?;
    println!("adapter_params={}", lora.adapters.param_count());
    println!("initial_loss={}", log.initial_loss);
    println!("final_loss={}", log.epoch_losses.last().copied().unwrap_or(log.initial_loss));
    println!("eval_ppl_before={before}");
    println!("eval_ppl_after={after}");
    Ok(())
}

pub fn eval(cfg: &RunConfig, checkpoint: Option<PathBuf>, on_train: bool) -> Result<(), CliError> {
    let ds = load_data(cfg)?;
    let path = require(checkpoint.unwrap_or_else(|| cfg.out.join(BASE)), "pass --checkpoint")?;
    let model = load_checkpoint(&path, &ds.vocab)?;
    let mut sum = 0.0;
    for e in &ds.evals {
        let p = perplexity(&model, e)?;
        sum += p;
        println!("ppl.{}={p}", e.name);
    }
    println!("ppl.mean={}", sum / ds.evals.len() as f64);
    if on_train {
        println!("ppl.train={}", perplexity(&model, &ds.train_eval(cfg.model.max_seq_len)?)?);
    }
    Ok(())
}

pub fn report(cfg: &RunConfig, history: Option<PathBuf>) -> Result<(), CliError> {
    let path = require(history.unwrap_or_else(|| cfg.out.join(HISTORY)), "run `samprune search` first")?;
    let h = SearchHistory::read(&path)?;
    let csv = h.report_csv();
    write_file(&out_dir(cfg)?.join(CONVERGENCE), &csv)?;
    print!("{csv}");
    Ok(())
}
