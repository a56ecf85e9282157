//! Command-line front end: train a VAE, score datasets for OOD detection,
//! evaluate the scores, and render reports, all driven by one declarative
//! config file plus flag overrides.
//!
//! Exit codes: 0 success, 2 configuration or ingest failure, 3 numerical
//! failure.

mod commands;
mod config;

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "lrvae",
    about = "Train compact convolutional VAEs and detect out-of-distribution images",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(clap::Args)]
struct TrainArgs {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Checkpoint output path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args)]
struct ScoreArgs {
    #[arg(long)]
    config: PathBuf,
    /// Trained model checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Background-model checkpoint (needed by the llr_bg scorer).
    #[arg(long)]
    background: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (default: hardware parallelism).
    #[arg(long)]
    workers: Option<usize>,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
    /// Keep existing rows and only compute what is missing.
    #[arg(long)]
    resume: bool,
}

#[derive(clap::Args)]
struct EvalArgs {
    /// Score CSVs produced by `score` (repeatable).
    #[arg(long, required = true)]
    scores: Vec<PathBuf>,
    /// Dataset tag treated as in-distribution; every other tag becomes an
    /// OOD pairing.
    #[arg(long)]
    in_dataset: String,
    /// Output directory for the metrics table and curve files.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 50)]
    bins: usize,
    #[arg(long, default_value_t = 0.8)]
    tpr_target: f64,
}

#[derive(clap::Args)]
struct ReportArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset (by config name) to reconstruct.
    #[arg(long)]
    dataset: String,
    /// Images per reconstruction row.
    #[arg(long, default_value_t = 8)]
    count: usize,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for the PNG panels.
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args)]
struct GenDataArgs {
    /// noise | constant | from-idx | from-cifar
    #[arg(long)]
    kind: String,
    #[arg(long, default_value_t = 1000)]
    count: usize,
    #[arg(long, default_value_t = 1)]
    channels: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Source IDX image file (kind = from-idx).
    #[arg(long)]
    images: Option<PathBuf>,
    /// Source IDX label file (optional, kind = from-idx).
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Source CIFAR-10 binary batches (kind = from-cifar, repeatable).
    #[arg(long)]
    cifar: Vec<PathBuf>,
    /// Dataset tag recorded in the output container.
    #[arg(long)]
    tag: Option<String>,
    /// Output raw-tensor file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a VAE per the config and write a checkpoint.
    Train(TrainArgs),
    /// Train a background model (perturbed pixels + weight decay).
    TrainBackground(TrainArgs),
    /// Score datasets with the configured scorers into a CSV.
    Score(ScoreArgs),
    /// Compute AUCROC/AUPRC/FPR metrics and curve files from score CSVs.
    Eval(EvalArgs),
    /// Render reconstruction and sample panels from a checkpoint.
    Report(ReportArgs),
    /// Generate or convert datasets into the raw-tensor container.
    GenData(GenDataArgs),
    /// Run the gradient-check and metric-oracle suites.
    Verify,
}

fn exit_code_for(err: &lrvae::Error) -> u8 {
    match err {
        lrvae::Error::Numeric(_)
        | lrvae::Error::Optim(_)
        | lrvae::Error::Fit(_)
        | lrvae::Error::Score(_) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.cmd {
        Cmd::Train(a) => commands::train::run(&a, false),
        Cmd::TrainBackground(a) => commands::train::run(&a, true),
        Cmd::Score(a) => commands::score::run(&a),
        Cmd::Eval(a) => commands::eval::run(&a),
        Cmd::Report(a) => commands::report::run(&a),
        Cmd::GenData(a) => commands::gendata::run(&a),
        Cmd::Verify => commands::verify::run(),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(CmdError::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CmdError::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
        Err(CmdError::VerifyFailed(n)) => {
            eprintln!("error: {n} verification check(s) failed");
            ExitCode::from(3)
        }
    }
}

/// Command-level failures, keeping config mistakes apart from numeric ones.
pub enum CmdError {
    Config(String),
    Core(lrvae::Error),
    VerifyFailed(usize),
}

impl From<lrvae::Error> for CmdError {
    fn from(e: lrvae::Error) -> Self {
        CmdError::Core(e)
    }
}

pub type CmdResult = Result<(), CmdError>;
