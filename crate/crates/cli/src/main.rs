//! `tryon`: every pipeline stage as a subcommand. Each run writes a run
//! record next to its outputs. Exit codes: 0 success, 2 invalid arguments
//! or inputs, 1 failure while running.

mod ablation;
mod commands;
mod record;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "tryon", version, about = "Per-garment real-time virtual try-on pipeline")]
pub struct Cli {
    /// Seed for every random choice the command makes.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Pipeline configuration (TOML); defaults apply to missing keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render a synthetic avatar sequence with perception outputs.
    SynthGen(SynthGenArgs),
    /// Train a person's semantic-map network on a tight-garment sequence.
    TrainBodymap(TrainBodymapArgs),
    /// Build a per-garment dataset from a sequence and a BodyMap checkpoint.
    GenDataset(GenDatasetArgs),
    /// Train a garment synthesis network on a per-garment dataset.
    TrainRegarsyn(TrainRegarsynArgs),
    /// Stream a sequence through a garment network and composite it.
    Infer(InferArgs),
    /// Compare predicted frames with reference frames.
    Eval(EvalArgs),
    /// Time the streaming pipeline.
    BenchFps(BenchFpsArgs),
    /// Run the representation and recurrence ablations on synthetic data.
    AblationTable(AblationArgs),
    /// Start the websocket demo service.
    Serve(ServeArgs),
}

#[derive(Args, Debug, serde::Serialize)]
pub struct SynthGenArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 120)]
    pub frames: usize,
    /// tight, loose-skirt, loose-sleeve or jacket.
    #[arg(long, default_value = "tight")]
    pub garment: String,
    /// Hem displacement scale in pixels; the style's preset when omitted.
    #[arg(long)]
    pub sway: Option<f64>,
    /// Share of the sway redrawn every frame, in [0, 1].
    #[arg(long)]
    pub stochasticity: Option<f64>,
    /// WIDTHxHEIGHT, both multiples of 8; the configured desk resolution
    /// when omitted.
    #[arg(long)]
    pub resolution: Option<String>,
    /// Hold one pose instead of turning.
    #[arg(long)]
    pub frozen: bool,
    #[arg(long, default_value = "synthetic")]
    pub person: String,
    #[arg(long, default_value_t = 30.0)]
    pub fps: f64,
}

#[derive(Args, Debug, serde::Serialize)]
pub struct TrainBodymapArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub person: String,
    #[arg(long)]
    pub out: PathBuf,
    /// dp, hm, shm, vm or full.
    #[arg(long, default_value = "full")]
    pub variant: String,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    /// Train against `gt` maps instead of the direct estimates.
    #[arg(long, default_value = "direct")]
    pub target: String,
}

#[derive(Args, Debug, serde::Serialize)]
pub struct GenDatasetArgs {
    #[arg(long)]
    pub video: PathBuf,
    #[arg(long)]
    pub bodymap: PathBuf,
    #[arg(long)]
    pub garment: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, serde::Serialize)]
pub struct TrainRegarsynArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Per-frame variant without the recurrent cell.
    #[arg(long)]
    pub no_convlstm: bool,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub residual_blocks: Option<usize>,
    #[arg(long)]
    pub clip_min: Option<usize>,
    #[arg(long)]
    pub clip_max: Option<usize>,
}

#[derive(Args, Debug, serde::Serialize)]
pub struct InferArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Sequence directory with frames and precomputed perception outputs.
    #[arg(long)]
    pub frames: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Write per-frame recurrent-state magnitudes to `state_trace.jsonl`.
    #[arg(long)]
    pub emit_state_trace: bool,
}

#[derive(Args, Debug, serde::Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub r#ref: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated subset of fid,kid,vfid,jitter.
    #[arg(long, default_value = "fid,kid,vfid,jitter")]
    pub metrics: String,
    #[arg(long, default_value_t = tryon_core::metrics::DEFAULT_EMBEDDING_DIM)]
    pub embedding_dim: usize,
    #[arg(long, default_value_t = tryon_core::metrics::DEFAULT_CLIP_LEN)]
    pub clip_len: usize,
}

#[derive(Args, Debug, serde::Serialize)]
pub struct BenchFpsArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Frames to time, at least 30; the first 10 are warm-up.
    #[arg(long, default_value_t = 200)]
    pub frames: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, serde::Serialize)]
pub struct AblationArgs {
    #[arg(long)]
    pub workdir: PathBuf,
    #[arg(long, default_value_t = 120)]
    pub frames: usize,
    #[arg(long, default_value = "32x48")]
    pub resolution: String,
    #[arg(long, default_value_t = 4)]
    pub bodymap_epochs: usize,
    #[arg(long, default_value_t = 4)]
    pub regarsyn_epochs: usize,
    #[arg(long, default_value_t = 8)]
    pub width: usize,
    #[arg(long, default_value_t = 8)]
    pub embedding_dim: usize,
}

#[derive(Args, Debug, serde::Serialize)]
pub struct ServeArgs {
    /// Directory of garment checkpoints (`*.ckpt`).
    #[arg(long)]
    pub ckpt_dir: PathBuf,
    /// Overridden by TRYON_PORT.
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    /// Precomputed perception for pushed frames, indexed by frame `t`.
    #[arg(long)]
    pub perception: Option<PathBuf>,
    /// Root for replay sequence paths; replay is off without it.
    #[arg(long)]
    pub replay_root: Option<PathBuf>,
    #[arg(long, default_value_t = tryon_service::DEFAULT_SESSION_CAP)]
    pub session_cap: usize,
    /// Where to write the run record.
    #[arg(long, default_value = "tryon-serve.run.json")]
    pub record: PathBuf,
}

/// Bad arguments or inputs, reported with exit code 2.
#[derive(Debug)]
pub struct Invalid(pub String);

impl std::fmt::Display for Invalid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

fn exit_code(err: &anyhow::Error) -> u8 {
    use tryon_core::Error as E;
    if err.downcast_ref::<Invalid>().is_some() {
        return 2;
    }
    match err.downcast_ref::<E>() {
        Some(E::Config(_) | E::Range(_) | E::PersonMismatch { .. } | E::Toml(_)) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let help = format!(
        "Configuration keys for --config, with their defaults:\n\n{}",
        tryon_core::config::PipelineConfig::default().to_toml_string().unwrap_or_default()
    );
    let matches = Cli::command().after_long_help(help).get_matches();
    let cli = Cli::from_arg_matches(&matches).unwrap_or_else(|e| e.exit());
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
