use std::path::PathBuf;
use std::process::ExitCode;

use apnea_core::config::RunConfig;
use apnea_core::pipeline::{
    cmd_evaluate, cmd_pipeline, cmd_predict, cmd_preprocess, cmd_synth, cmd_train,
};
use apnea_core::{Error, ErrorKind};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

/// Single-channel respiratory event detection: synthetic data, training,
/// prediction and evaluation.
#[derive(Debug, Parser)]
#[command(name = "apnea-bench", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Seed for all randomness (overrides config and APNEA_BENCH_SEED).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// `binary` or `multiclass`.
    #[arg(long, global = true)]
    task: Option<String>,
    /// Worker threads; defaults to the number of logical processors.
    #[arg(long, global = true)]
    jobs: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic corpus with reference annotations.
    Synth {
        /// Number of records.
        #[arg(long)]
        records: Option<usize>,
        /// Output directory (paths.corpus_dir).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Condition every corpus record to normalized 10 Hz signals.
    Preprocess,
    /// Train the rejection cascade and the main model.
    Train,
    /// Write per-second probabilities and smoothed events.
    Predict {
        /// Manifest of records to predict (defaults to the corpus test split).
        #[arg(long)]
        records: Option<PathBuf>,
    },
    /// Score predictions against reference annotations.
    Evaluate,
    /// synth, train, predict and evaluate in one go.
    Pipeline,
}

fn resolve_config(cli: &Cli) -> Result<RunConfig, Error> {
    let mut cfg = match &cli.common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Ok(seed) = std::env::var("APNEA_BENCH_SEED") {
        cfg.set("seed", &seed)?;
    }
    for kv in &cli.common.overrides {
        let (key, value) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(key, value)?;
    }
    if let Some(seed) = cli.common.seed {
        cfg.seed = seed;
    }
    if let Some(task) = &cli.common.task {
        cfg.set("task", task)?;
    }
    match &cli.command {
        Command::Synth { records, out } => {
            if let Some(n) = records {
                cfg.corpus.n_records = *n;
            }
            if let Some(out) = out {
                cfg.corpus_dir = out.clone();
            }
        }
        Command::Predict { records: Some(m) } => cfg.predict_manifest = Some(m.clone()),
        _ => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_json<T: Serialize>(value: &T) -> Result<(), Error> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: &Cli) -> Result<(), Error> {
    let cfg = resolve_config(cli)?;
    if let Some(jobs) = cli.common.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::Synth { .. } => {
            let m = cmd_synth(&cfg)?;
            print_json(&serde_json::json!({
                "corpus_dir": cfg.corpus_dir,
                "train": m.train.len(),
                "val": m.val.len(),
                "test": m.test.len(),
            }))
        }
        Command::Preprocess => print_json(&cmd_preprocess(&cfg)?),
        Command::Train => print_json(&cmd_train(&cfg)?),
        Command::Predict { .. } => print_json(&cmd_predict(&cfg)?),
        Command::Evaluate => {
            let report = cmd_evaluate(&cfg)?;
            log::info!("report written to {}", cfg.report_dir.display());
            print_json(&report.event_metrics)
        }
        Command::Pipeline => {
            let out = cmd_pipeline(&cfg)?;
            print_json(&serde_json::json!({
                "train": out.train,
                "event_metrics": out.report.event_metrics,
                "per_second": out.report.per_second,
                "ahi_fit": out.report.ahi_fit,
            }))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(match e.kind() {
                ErrorKind::Config => 2,
                ErrorKind::Data => 3,
                ErrorKind::Numeric => 4,
            })
        }
    }
}
