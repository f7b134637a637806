//! `aid`: batch workflows over the aid-core pipeline.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or validation error.

mod commands;
mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

#[derive(Debug, Parser)]
#[command(name = "aid", version, about = "Auditory intention decoding on synthetic EEG")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Subcommand, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "lowercase")]
pub enum Command {
    /// Build a session schedule and render a synthetic recording (AID1).
    Simulate(SimulateArgs),
    /// Grouped k-fold CV plus permutation test on a recording.
    Evaluate(EvaluateArgs),
    /// Simulate and evaluate a cohort of synthetic subjects.
    Cohort(CohortArgs),
    /// Train one decoder on every trial of a recording.
    Train(TrainArgs),
    /// Stream a recording through the online decoder.
    Replay(ReplayArgs),
    /// Decode a whole recording offline (same output as `replay`).
    Decode(DecodeArgs),
    /// Re-execute the run recorded in a manifest and compare outputs.
    Rerun(RerunArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Simulate(_) => "simulate",
            Command::Evaluate(_) => "evaluate",
            Command::Cohort(_) => "cohort",
            Command::Train(_) => "train",
            Command::Replay(_) => "replay",
            Command::Decode(_) => "decode",
            Command::Rerun(_) => "rerun",
        }
    }
}

/// Session and subject overrides shared by the simulating commands.
#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SessionFlags {
    /// ERP amplitude in microvolts.
    #[arg(long)]
    pub snr_amplitude: Option<f64>,
    #[arg(long)]
    pub n_rounds: Option<usize>,
    #[arg(long)]
    pub trials_per_round: Option<usize>,
    #[arg(long)]
    pub options_per_trial: Option<usize>,
    #[arg(long)]
    pub channels: Option<usize>,
    /// Background EEG standard deviation in microvolts.
    #[arg(long)]
    pub noise_std: Option<f64>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SimulateArgs {
    /// JSON with optional `session`, `subject`, `net`, `train` objects.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub session: SessionFlags,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct EvaluateArgs {
    pub recording: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value_t = 10)]
    pub folds: usize,
    #[arg(long, default_value_t = 10_000)]
    pub permutations: usize,
    /// Output directory; without it the report goes to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct CohortArgs {
    #[arg(long)]
    pub subjects: usize,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Calibrate the ERP amplitude to `--target-accuracy` first.
    #[arg(long, conflicts_with = "snr_amplitude")]
    pub calibrated: bool,
    #[arg(long, default_value_t = 0.65)]
    pub target_accuracy: f64,
    #[command(flatten)]
    pub session: SessionFlags,
    #[arg(long, default_value_t = 10)]
    pub folds: usize,
    #[arg(long, default_value_t = 10_000)]
    pub permutations: usize,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct TrainArgs {
    pub recording: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct ReplayArgs {
    pub recording: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    /// Samples per streamed frame.
    #[arg(long, default_value_t = 64)]
    pub chunk: usize,
    /// Output directory; without it the decode log goes to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct DecodeArgs {
    pub recording: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct RerunArgs {
    pub manifest: PathBuf,
    /// Where the re-executed run writes; required when the original run
    /// wrote to a directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Runtime(format!("{}: {e}", path.display()))
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

impl From<aid_core::AidError> for CliError {
    fn from(e: aid_core::AidError) -> Self {
        if e.is_usage() {
            CliError::Usage(e.to_string())
        } else {
            CliError::Runtime(e.to_string())
        }
    }
}

macro_rules! via_aid_error {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                aid_core::AidError::from(e).into()
            }
        }
    )*};
}

via_aid_error!(
    aid_core::session::SessionError,
    aid_core::synthgen::SynthError,
    aid_core::epochs::EpochError,
    aid_core::evalstats::EvalError,
    aid_core::nnet::NetError
);

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("aid {}: {e}", cli.command.name());
            ExitCode::from(e.exit_code())
        }
    }
}
