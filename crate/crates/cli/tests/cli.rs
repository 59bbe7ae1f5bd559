mod common;

use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use common::{copy_base, num, path_str, run, run_ok, small_config, write_config};
use samprune::groups::build_groups;
use samprune::model::read_model;
use samprune::search::{SearchHistory, Strategy};

/// Trained once per test binary: (config path, run directory with base.ckpt and vocab.txt).
fn trained() -> &'static (PathBuf, PathBuf) {
    static FIXTURE: OnceLock<(PathBuf, PathBuf)> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("cli-fixture");
        let _ = std::fs::remove_dir_all(&dir);
        std::fs::create_dir_all(&dir).unwrap();
        let cfg = write_config(&dir, "run.cfg", &small_config(&[]));
        let out = dir.join("base");
        run_ok(&["train", "--config", path_str(&cfg), "--out", path_str(&out)]);
        (cfg, out)
    })
}

/// Fresh run directory holding a copy of the trained base.
fn fresh_run(dir: &Path, name: &str) -> PathBuf {
    let out = dir.join(name);
    copy_base(&trained().1, &out);
    out
}

fn single_line_error(out: &std::process::Output) -> String {
    let err = String::from_utf8(out.stderr.clone()).unwrap();
    assert_eq!(err.trim_end().lines().count(), 1, "stderr: {err}");
    err
}

#[test]
fn train_is_deterministic_and_reduces_loss() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.cfg", &small_config(&["seed = 3"]));
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let first = run_ok(&["train", "--config", path_str(&cfg), "--out", path_str(&a)]);
    let second = run_ok(&["train", "--config", path_str(&cfg), "--out", path_str(&b)]);
    assert_eq!(first, second);
    for f in ["base.ckpt", "vocab.txt", "train_log.csv"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    assert!(num(&first, "final_loss") < num(&first, "initial_loss"));
}

#[test]
fn missing_corpus_exits_2_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.cfg", &["data.corpus = nowhere/corpus.txt".to_string()]);
    let out = run(&["train", "--config", path_str(&cfg), "--out", path_str(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(single_line_error(&out).contains("nowhere/corpus.txt"));
}

#[test]
fn unknown_and_repeated_config_keys_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    for (name, lines) in [
        ("unknown.cfg", vec!["search.budgett = 3".to_string()]),
        ("twice.cfg", vec!["seed = 1".to_string(), "seed = 2".to_string()]),
        ("bad.cfg", vec!["search.ratio = 1.5".to_string()]),
    ] {
        let cfg = write_config(dir.path(), name, &lines);
        let out = run(&["train", "--config", path_str(&cfg)]);
        assert_eq!(out.status.code(), Some(2), "{name}");
        single_line_error(&out);
    }
}

#[test]
fn bad_arguments_exit_2() {
    assert_eq!(run(&["search", "--strategy", "grid"]).status.code(), Some(2));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn stages_before_train_are_refused() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, _) = trained();
    let out = run(&["search", "--config", path_str(cfg), "--out", path_str(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(single_line_error(&out).contains("vocab.txt"));
}

#[test]
fn budget_one_writes_one_trial_that_is_best() {
    let dir = tempfile::tempdir().unwrap();
    let out = fresh_run(dir.path(), "run");
    let (cfg, _) = trained();
    let res = run_ok(&["search", "--config", path_str(cfg), "--out", path_str(&out), "--budget", "1"]);
    let text = std::fs::read_to_string(out.join("history.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 2, "header plus one trial");
    let h = SearchHistory::from_jsonl(&text).unwrap();
    assert_eq!(h.trials.len(), 1);
    assert_eq!(num(&res, "best_index"), 0.0);
    assert_eq!(num(&res, "best_objective"), h.trials[0].h());
    let best: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("best_trial.json")).unwrap()).unwrap();
    assert_eq!(best["trial"]["index"], 0);
    assert_eq!(std::fs::read_to_string(out.join("timings.csv")).unwrap().lines().count(), 2);
}

#[test]
fn tpe_and_random_histories_are_valid_and_reportable() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, _) = trained();
    for strategy in ["tpe", "random"] {
        let out = fresh_run(dir.path(), strategy);
        run_ok(&["search", "--config", path_str(cfg), "--out", path_str(&out), "--strategy", strategy]);
        let h = SearchHistory::read(&out.join("history.jsonl")).unwrap();
        assert_eq!(h.trials.len(), 3);
        assert_eq!(h.header.strategy, strategy.parse::<Strategy>().unwrap());
        assert!(h.trials.iter().all(|t| t.objective.is_some_and(f64::is_finite)));
        let convergence = std::fs::read_to_string(out.join("convergence.csv")).unwrap();
        std::fs::remove_file(out.join("convergence.csv")).unwrap();
        run_ok(&["report", "--config", path_str(cfg), "--out", path_str(&out)]);
        let report = std::fs::read_to_string(out.join("convergence.csv")).unwrap();
        assert_eq!(report, convergence);
        let rows: Vec<&str> = report.lines().collect();
        assert_eq!(rows[0], "iteration,objective,best_so_far");
        assert_eq!(rows.len(), 4);
        let best: Vec<f64> = rows[1..].iter().map(|r| r.rsplit(',').next().unwrap().parse().unwrap()).collect();
        assert!(best.windows(2).all(|w| w[1] <= w[0]));
    }
}

#[test]
fn ablation_flags_show_in_the_records() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, _) = trained();

    let out = fresh_run(dir.path(), "fixed");
    run_ok(&["search", "--config", path_str(cfg), "--out", path_str(&out), "--fix-metric", "first-order"]);
    let h = SearchHistory::read(&out.join("history.jsonl")).unwrap();
    let fixed = h.header.ablation.fixed_metric.expect("fixed metric recorded");
    assert!(!fixed.hessian);
    assert_eq!((fixed.alpha1, fixed.alpha2, fixed.align1, fixed.align2), (0.5, 0.5, 1.0, 1.0));
    assert!(h.trials.iter().all(|t| t.metric == fixed));
    let calibs: std::collections::BTreeSet<_> = h.trials.iter().map(|t| t.calib_ids.clone()).collect();
    assert!(calibs.len() > 1, "calibration sets still vary");

    let out = fresh_run(dir.path(), "second");
    run_ok(&["search", "--config", path_str(cfg), "--out", path_str(&out), "--fix-metric", "second"]);
    let h = SearchHistory::read(&out.join("history.jsonl")).unwrap();
    assert!(h.trials.iter().all(|t| t.metric.hessian && t.metric.alpha1 == 0.5));

    let out = fresh_run(dir.path(), "random-calib");
    run_ok(&["search", "--config", path_str(cfg), "--out", path_str(&out), "--random-calib"]);
    let h = SearchHistory::read(&out.join("history.jsonl")).unwrap();
    assert!(h.header.ablation.random_calib && h.header.ablation.fixed_metric.is_none());
    let metrics: Vec<_> = h.trials.iter().map(|t| t.metric).collect();
    assert!(metrics.windows(2).any(|w| w[0] != w[1]), "metric still searched");

    let out = fresh_run(dir.path(), "sequential");
    run_ok(&["search", "--config", path_str(cfg), "--out", path_str(&out), "--sequential-opt", "--budget", "4"]);
    let h = SearchHistory::read(&out.join("history.jsonl")).unwrap();
    assert!(h.header.ablation.sequential);
    assert_eq!(h.trials[0].metric, h.trials[1].metric, "first half holds the metric");
    assert_eq!(h.trials[2].calib_ids, h.trials[3].calib_ids, "second half holds the calibration set");
}

#[test]
fn prune_at_zero_ratio_returns_the_input() {
    let dir = tempfile::tempdir().unwrap();
    let out = fresh_run(dir.path(), "run");
    let (cfg, _) = trained();
    run_ok(&["search", "--config", path_str(cfg), "--out", path_str(&out), "--budget", "1"]);
    let res = run_ok(&["prune", "--config", path_str(cfg), "--out", path_str(&out), "--ratio", "0"]);
    assert_eq!(num(&res, "achieved_ratio"), 0.0);
    let base = read_model(&out.join("base.ckpt")).unwrap();
    let pruned = read_model(&out.join("pruned.ckpt")).unwrap();
    assert_eq!(pruned.config, base.config);
    assert_eq!(pruned.weights, base.weights);
    assert_eq!(num(&res, "eval_ppl_before"), num(&res, "eval_ppl_after"));
}

#[test]
fn prune_reports_reduction_within_one_group_of_the_target() {
    let dir = tempfile::tempdir().unwrap();
    let out = fresh_run(dir.path(), "run");
    let (cfg, _) = trained();
    run_ok(&["search", "--config", path_str(cfg), "--out", path_str(&out), "--budget", "2"]);
    let res = run_ok(&["prune", "--config", path_str(cfg), "--out", path_str(&out), "--ratio", "0.2"]);
    assert_eq!(res["reduction"], res["achieved_ratio"]);
    let stats = std::fs::read_to_string(out.join("stats.txt")).unwrap();
    assert!(stats.contains(&format!("reduction={}", res["reduction"])));

    let base = read_model(&out.join("base.ckpt")).unwrap();
    let pruned = read_model(&out.join("pruned.ckpt")).unwrap();
    let total = base.count_params(false) as f64;
    let largest = build_groups(&base).iter().map(|g| g.size).max().unwrap() as f64 / total;
    let reduction = num(&res, "reduction");
    assert_eq!(reduction, (total - pruned.count_params(false) as f64) / total);
    assert!(reduction <= 0.2 && 0.2 - reduction < largest, "{reduction} vs largest group {largest}");
    assert!(std::fs::read_to_string(out.join("plan.txt")).unwrap().contains("achieved_ratio="));
}

#[test]
fn prune_refuses_a_trial_from_another_model() {
    let dir = tempfile::tempdir().unwrap();
    let out = fresh_run(dir.path(), "run");
    let (cfg, _) = trained();
    run_ok(&["search", "--config", path_str(cfg), "--out", path_str(&out), "--budget", "1"]);
    let path = out.join("best_trial.json");
    let mut best: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    best["model"] = "0000000000000000".into();
    std::fs::write(&path, best.to_string()).unwrap();
    let res = run(&["prune", "--config", path_str(cfg), "--out", path_str(&out)]);
    assert_eq!(res.status.code(), Some(1));
    assert!(single_line_error(&res).contains("searched on model"));
    assert!(!out.join("pruned.ckpt").exists());
}

#[test]
fn recover_then_eval_agree() {
    let dir = tempfile::tempdir().unwrap();
    let out = fresh_run(dir.path(), "run");
    let (cfg, _) = trained();
    let c = path_str(cfg);
    let o = path_str(&out);
    run_ok(&["search", "--config", c, "--out", o, "--budget", "1"]);
    run_ok(&["prune", "--config", c, "--out", o]);
    let rec = run_ok(&["recover", "--config", c, "--out", o]);
    for f in ["adapter.ckpt", "recovered.ckpt", "recovery_log.csv"] {
        assert!(out.join(f).is_file(), "{f}");
    }
    let recovered = path_str(&out.join("recovered.ckpt")).to_string();
    let ev = run_ok(&["eval", "--config", c, "--out", o, "--checkpoint", &recovered]);
    let after = num(&rec, "eval_ppl_after");
    assert!((num(&ev, "ppl.mean") - after).abs() <= 1e-9 * after);
    let mean = (num(&ev, "ppl.eval0") + num(&ev, "ppl.eval1")) / 2.0;
    assert!((num(&ev, "ppl.mean") - mean).abs() <= 1e-12 * mean);
    let pruned = path_str(&out.join("pruned.ckpt")).to_string();
    let ev = run_ok(&["eval", "--config", c, "--out", o, "--checkpoint", &pruned]);
    assert_eq!(num(&ev, "ppl.mean"), num(&rec, "eval_ppl_before"));
}

#[test]
fn overfit_fixture_reaches_train_perplexity_below_two() {
    let dir = tempfile::tempdir().unwrap();
    let doc = "alpha beta gamma delta epsilon zeta eta theta iota kappa lambda mu nu xi omicron pi";
    let corpus: Vec<&str> = vec![doc; 10];
    std::fs::write(dir.path().join("tiny.txt"), corpus.join("\n\n")).unwrap();
    let lines: Vec<String> = [
        "data.corpus = tiny.txt",
        "data.vocab_size = 32",
        "data.eval_sets = 1",
        "data.docs_per_eval = 1",
        "data.recovery_docs = 0",
        "data.min_tokens = 16",
        "data.calib_len = 16",
        "model.d_model = 16",
        "model.n_layers = 1",
        "model.n_heads = 2",
        "model.d_ff = 32",
        "model.max_seq_len = 16",
        "model.prune_start = 0",
        "model.prune_end = 1",
        "train.epochs = 60",
        "train.lr = 1e-2",
        "train.batch_size = 4",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let cfg = write_config(dir.path(), "run.cfg", &lines);
    let out = dir.path().join("run");
    run_ok(&["train", "--config", path_str(&cfg), "--out", path_str(&out)]);
    let ev = run_ok(&["eval", "--config", path_str(&cfg), "--out", path_str(&out), "--on-train"]);
    assert!(num(&ev, "ppl.train") < 2.0, "{ev:?}");
}

#[test]
fn search_replays_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, _) = trained();
    let a = fresh_run(dir.path(), "a");
    let b = fresh_run(dir.path(), "b");
    let ra = run_ok(&["search", "--config", path_str(cfg), "--out", path_str(&a), "--budget", "4"]);
    let rb = run_ok(&["search", "--config", path_str(cfg), "--out", path_str(&b), "--budget", "4"]);
    assert_eq!(ra, rb);
    for f in ["history.jsonl", "best_trial.json", "convergence.csv"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let other = fresh_run(dir.path(), "c");
    run_ok(&["search", "--config", path_str(cfg), "--out", path_str(&other), "--budget", "4", "--seed", "9"]);
    assert_ne!(std::fs::read(a.join("history.jsonl")).unwrap(), std::fs::read(other.join("history.jsonl")).unwrap());
}
