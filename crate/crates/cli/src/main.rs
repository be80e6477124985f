mod commands;
mod error;
mod rundir;

use std::path::PathBuf;
use std::process::ExitCode;

use aum::bench::ModelKind;
use aum::training::Task;
use clap::{Args, Parser, Subcommand};

use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "aum", version, about = "Audio Mamba toolkit: features, training, evaluation, scaling bench and ablation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Extract normalized log-mel spectrograms for every file in a manifest.
    Features(FeaturesArgs),
    /// Train a classifier on cached features.
    Train(TrainArgs),
    /// Score a checkpoint on cached features.
    Eval(EvalArgs),
    /// Time AuM and attention blocks over growing token counts.
    Bench(BenchArgs),
    /// Train every block variant and class-token position on the synthetic set.
    Ablate(AblateArgs),
    /// Write the synthetic two-class set as WAV files plus a manifest.
    MakeToy(ToyArgs),
}

#[derive(Debug, Args)]
pub struct FeaturesArgs {
    /// CSV with `path` and `label` (or `label_ids`) columns.
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub config: PathBuf,
    /// Run directory; caches go to `artifacts/features/`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Feature run directory (or any directory holding `dataset.csv`).
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Defaults to the checkpoint path with a `.run` extension.
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "acc")]
    pub task: Task,
    /// Defaults to the checkpoint path with a `.eval` extension.
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Strictly increasing token counts.
    #[arg(long, value_delimiter = ',', default_value = "256,512,1024,2048,4096")]
    pub tokens: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "aum-s,aum-b,attn-s,attn-b")]
    pub models: Vec<ModelKind>,
    /// CSV report.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 3)]
    pub reps: usize,
    #[arg(long, default_value_t = 2)]
    pub warmups: usize,
    /// Blocks per forward pass.
    #[arg(long, default_value_t = 1)]
    pub depth: usize,
    /// Per-cell memory cap; cells above it are recorded as DNF.
    #[arg(long)]
    pub budget_mb: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Defaults to the CSV path with a `.run` extension.
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Training config; built-in defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "ablate-run")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub data_seed: u64,
}

#[derive(Debug, Args)]
pub struct ToyArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Features(a) => commands::features(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Bench(a) => commands::bench(a),
        Command::Ablate(a) => commands::ablate(a),
        Command::MakeToy(a) => commands::make_toy(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

/// Worker cap: available cores, lowered by `AUM_THREADS`.
pub fn worker_cap() -> Result<usize, CliError> {
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    match std::env::var("AUM_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n.min(cores)),
            _ => Err(CliError::Usage(format!("AUM_THREADS must be a positive integer, got {v:?}"))),
        },
        Err(_) => Ok(cores),
    }
}
