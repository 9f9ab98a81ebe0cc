//! `ftlab` — a desk-scale fine-tuning laboratory.
//!
//! Subcommands: `prepare` (dataset files), `train` (one run), `optimize`
//! (hyperparameter sweep), `report` (summary tables). Exit codes: 0 ok,
//! 1 usage or config error, 2 runtime failure.

mod config;
mod error;
mod prepare;
mod report;
mod runner;

use clap::{Args, Parser, Subcommand};
use config::ExperimentConfig;
use error::AppError;
use prepare::PrepareArgs;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Debug, Parser)]
#[command(name = "ftlab", version, about = "Fine-tuning strategies on a toy transformer: train, sweep, report")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write canonical train/id_eval/ood_eval dataset files plus stats.
    Prepare(PrepareCli),
    /// Train one strategy from a config file into a run directory.
    Train(RunCli),
    /// Search a built-in hyperparameter space; trials run sequentially.
    Optimize(RunCli),
    /// Summarize run directories as accuracy and efficiency tables.
    Report(ReportCli),
}

#[derive(Debug, Args)]
struct PrepareCli {
    /// Generate the synthetic agreement corpus instead of reading TSVs.
    #[arg(long)]
    synthetic: bool,
    /// Train-split size for the generator (eval splits get a quarter each).
    #[arg(long, default_value_t = 2000)]
    n: usize,
    /// In-domain TSV in CoLA layout (source, label, annotation, sentence).
    #[arg(long, value_name = "PATH", conflicts_with = "synthetic")]
    cola: Option<PathBuf>,
    /// Out-of-domain TSV in the same layout.
    #[arg(long, value_name = "PATH", requires = "cola")]
    ood_cola: Option<PathBuf>,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Output directory for the dataset files.
    #[arg(long, default_value = "data")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct RunCli {
    /// Experiment config file (JSON). Omitted fields take defaults.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override the experiment seed from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory from the config.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ReportCli {
    /// Run directories (or ancestors of them) to scan for traces.
    #[arg(value_name = "DIR", required = true)]
    dirs: Vec<PathBuf>,
    /// Also export per-epoch curves as CSV to this path.
    #[arg(long, value_name = "PATH")]
    curves: Option<PathBuf>,
}

fn load_run_config(args: &RunCli) -> Result<ExperimentConfig, AppError> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &args.out {
        cfg.out_dir = out.clone();
    }
    // One seed story: the experiment seed drives training; any train.seed
    // in the file is an echo, not an independent knob.
    cfg.train.seed = cfg.seed;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), AppError> {
    match cli.command {
        Command::Prepare(p) => prepare::cmd_prepare(&PrepareArgs {
            synthetic: p.synthetic,
            n: p.n,
            cola: p.cola,
            ood_cola: p.ood_cola,
            seed: p.seed,
            out: p.out,
        }),
        Command::Train(args) => {
            let cfg = load_run_config(&args)?;
            runner::cmd_train(&cfg).map(|_| ())
        }
        Command::Optimize(args) => {
            let cfg = load_run_config(&args)?;
            runner::cmd_optimize(&cfg).map(|_| ())
        }
        Command::Report(r) => report::cmd_report(&r.dirs, r.curves.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are successes; anything else is a
            // usage error and must exit 1.
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e);
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
