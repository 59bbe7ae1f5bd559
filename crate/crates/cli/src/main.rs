mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::SearchFlags;
use config::{FixMetric, RunConfig};
use error::CliError;

#[derive(Parser)]
#[command(name = "samprune", version, about = "Sample-aware structured pruning for small transformer LMs")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Run configuration (`section.key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory; overrides the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Subcommand)]
enum Command {
    /// Train the base model and write its checkpoint and vocabulary.
    Train,
    /// Search calibration subsets and importance metrics.
    Search {
        #[arg(long)]
        strategy: Option<samprune::search::Strategy>,
        #[arg(long)]
        ratio: Option<f64>,
        #[arg(long)]
        budget: Option<usize>,
        /// Pin the importance metric (first or second order).
        #[arg(long)]
        fix_metric: Option<FixMetric>,
        /// Draw calibration subsets uniformly instead of modelling them.
        #[arg(long)]
        random_calib: bool,
        /// Optimise the calibration set first, then the metric.
        #[arg(long)]
        sequential_opt: bool,
    },
    /// Prune the base model with the best searched trial.
    Prune {
        #[arg(long)]
        ratio: Option<f64>,
        /// Trial file; defaults to the search output.
        #[arg(long)]
        trial: Option<PathBuf>,
    },
    /// Fine-tune low-rank adapters on the pruned model and merge them.
    Recover {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Report eval perplexity of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Also evaluate on the training split.
        #[arg(long)]
        on_train: bool,
    },
    /// Write the best-so-far convergence CSV of a search history.
    Report {
        #[arg(long)]
        history: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = cli.out {
        cfg.out = o;
    }
    match cli.command {
        Command::Train => commands::train(&cfg),
        Command::Search { strategy, ratio, budget, fix_metric, random_calib, sequential_opt } => commands::search(
            &cfg,
            &SearchFlags { strategy, ratio, budget, fix_metric, random_calib, sequential: sequential_opt },
        ),
        Command::Prune { ratio, trial } => commands::prune(&cfg, ratio, trial),
        Command::Recover { checkpoint } => commands::recover(&cfg, checkpoint),
        Command::Eval { checkpoint, on_train } => commands::eval(&cfg, checkpoint, on_train),
        Command::Report { history } => commands::report(&cfg, history),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            eprintln!("{}", msg.lines().next().unwrap_or("invalid arguments"));
            return ExitCode::from(2);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message.replace('\n', " "));
            ExitCode::from(e.code)
        }
    }
}
