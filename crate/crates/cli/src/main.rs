//! `geogan`: batch front end for synthetic data, training, generation,
//! statistics, sensitivity analysis and similarity queries.

mod commands;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use geogan::{Error, ErrorKind};
use serde::{Deserialize, Serialize};

#[derive(Debug, Parser)]
#[command(name = "geogan", version, about = "Physics-constrained conditional GAN for built-land maps")]
struct Cli {
    /// Worker threads; defaults to the number of logical cores.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Subcommand, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    /// Generate a synthetic city dataset.
    Synth(SynthArgs),
    /// Train a model on a dataset's training split.
    Train(TrainArgs),
    /// Predict built maps for a dataset with a trained model.
    Generate(GenerateArgs),
    /// Urban-form statistics, optionally real vs generated.
    Stats(StatsArgs),
    /// Input-gradient maps, spillover and distance-decay profiles.
    Sensitivity(SensitivityArgs),
    /// Nearest cities in discriminator feature space.
    Similar(SimilarArgs),
    /// Finite-difference checks of the backward rules.
    Gradcheck(GradcheckArgs),
    /// Replay a run from its run.json.
    #[serde(skip)]
    Rerun(RerunArgs),
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 200)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// none, river, coast, blobs or mixed.
    #[arg(long, default_value = "mixed")]
    pub water_mode: String,
    #[arg(long, default_value_t = 0.1)]
    pub test_fraction: f64,
    /// Use identical growth parameters for every city.
    #[arg(long)]
    pub no_jitter: bool,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 100.0)]
    pub alpha: f64,
    #[arg(long, default_value_t = 100.0)]
    pub lambda: f64,
    #[arg(long, default_value_t = 0.2)]
    pub dropout: f64,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1)]
    pub batch: usize,
    #[arg(long, default_value_t = 2e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    /// factors or water_only.
    #[arg(long, default_value = "factors")]
    pub mode: String,
    #[arg(long, default_value_t = 16)]
    pub base_width: usize,
    #[arg(long, default_value_t = 4)]
    pub depth: usize,
    /// Periodic checkpoint interval in epochs; 0 disables.
    #[arg(long, default_value_t = 10)]
    pub checkpoint_every: usize,
    /// Record per-step wall time in the log (breaks byte-identical logs).
    #[arg(long)]
    pub wall_time: bool,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct GenerateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// train, test or all.
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Input mode; defaults to the checkpoint's.
    #[arg(long)]
    pub mode: Option<String>,
    /// Extra dropout samples per city, written as PNGs.
    #[arg(long, default_value_t = 0)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct StatsArgs {
    /// Dataset of observed cities.
    #[arg(long)]
    pub data: PathBuf,
    /// Generated dataset to compare against.
    #[arg(long)]
    pub generated: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "all")]
    pub split: String,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f32,
    #[arg(long, default_value = "8")]
    pub connectivity: String,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SensitivityArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// core or secondary_top3.
    #[arg(long, default_value = "core")]
    pub region: String,
    #[arg(long, default_value_t = 7.0)]
    pub bin_km: f64,
    #[arg(long, default_value_t = 50)]
    pub rays: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Analyse at most this many cities.
    #[arg(long)]
    pub limit: Option<usize>,
    /// centroid or medoid.
    #[arg(long, default_value = "centroid")]
    pub origin: String,
    #[arg(long)]
    pub max_km: Option<f64>,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f32,
    #[arg(long, default_value = "8")]
    pub connectivity: String,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SimilarArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 3)]
    pub k: usize,
    #[arg(long, default_value = "all")]
    pub split: String,
    /// Only report neighbours of this city.
    #[arg(long)]
    pub query: Option<String>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct GradcheckArgs {
    /// primitives, sensitivity or all.
    #[arg(long, default_value = "primitives")]
    pub scope: String,
    #[arg(long, default_value_t = 20)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Checkpoint for the sensitivity scope; a fresh generator otherwise.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Dataset supplying the city for the sensitivity scope.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value = "gradcheck")]
    pub out: PathBuf,
    #[arg(long, hide = true)]
    pub corrupt_primitive: Option<String>,
}

#[derive(Debug, Clone, Args)]
pub struct RerunArgs {
    /// A run.json written by an earlier invocation.
    pub run_json: PathBuf,
    /// Write outputs here instead of the recorded directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn exit_code(e: &Error) -> u8 {
    match e.kind() {
        ErrorKind::Validation => 2,
        ErrorKind::Io => 3,
        ErrorKind::Numeric => 4,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("GEOGAN_LOG", "info").write_style("GEOGAN_LOG_STYLE"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match commands::execute(cli.threads, cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
