use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;

#[derive(Parser, Debug)]
#[command(name = "splatrig", version, about = "Audio-driven, mesh-rigged Gaussian splat avatars")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand.
#[derive(Args, Debug, Clone)]
pub struct Global {
    /// TOML run configuration; missing keys take their defaults.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Checkpoint to read (or resume from).
    #[arg(long, global = true, value_name = "PATH")]
    pub ckpt: Option<PathBuf>,
    /// Camera excluded from training and used for metrics.
    #[arg(long, global = true, value_name = "IDX")]
    pub holdout_camera: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic scene: truth avatar, fitting recording and sequences.
    SynthData,
    /// Fit a rigged splat avatar to the fitting recording of a dataset.
    FitAvatar(FitArgs),
    /// Train the sequence model on top of a fitted avatar.
    TrainSeq(SeqArgs),
    /// Render a checkpoint from dataset cameras or an orbit.
    Render(RenderArgs),
    /// Run finite-difference gradient suites.
    CheckGrad(GradArgs),
    /// Image metrics of a checkpoint on the held-out camera.
    Metrics(MetricsArgs),
}

#[derive(Args, Debug)]
pub struct FitArgs {
    /// Dataset written by `synth-data`.
    #[arg(long, default_value = "data")]
    pub data: PathBuf,
    /// Stop after this many steps instead of the configured total.
    #[arg(long)]
    pub steps: Option<u64>,
}

#[derive(Args, Debug)]
pub struct SeqArgs {
    #[arg(long, default_value = "data")]
    pub data: PathBuf,
    /// Stop after this many scheduled steps.
    #[arg(long)]
    pub steps: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Source {
    Neutral,
    Recorded,
    Predicted,
}

#[derive(Args, Debug)]
pub struct RenderArgs {
    #[arg(long, default_value = "data")]
    pub data: PathBuf,
    /// Recording that supplies expressions or audio features; defaults to the fitting recording.
    #[arg(long)]
    pub sequence: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Source::Neutral)]
    pub source: Source,
    /// Render this many views on a closed ring instead of the rig cameras.
    #[arg(long, value_name = "N")]
    pub orbit: Option<usize>,
    /// Rig cameras to render (default: all).
    #[arg(long = "camera", value_name = "IDX")]
    pub cameras: Vec<usize>,
    /// Only this frame of the expression source.
    #[arg(long)]
    pub frame: Option<usize>,
    /// File name pattern; `{view}` and `{frame}` expand to three-digit indices.
    #[arg(long, default_value = "view{view}_frame{frame}.png")]
    pub name: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum FaultArg {
    FlipSign,
}

#[derive(Args, Debug)]
pub struct GradArgs {
    /// `all`, a component (tensor, splats, raster, losses, color, sequence) or `component/suite`.
    #[arg(long, default_value = "all")]
    pub component: String,
    /// Number of seeds, starting at `--seed` (default 0).
    #[arg(long, default_value_t = 100)]
    pub seeds: u64,
    /// Corrupt the analytic gradients to prove the checker fails.
    #[arg(long, value_enum)]
    pub inject: Option<FaultArg>,
}

#[derive(Args, Debug)]
pub struct MetricsArgs {
    #[arg(long, default_value = "data")]
    pub data: PathBuf,
    #[arg(long)]
    pub sequence: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Source::Recorded)]
    pub source: Source,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let g = &cli.global;
    let r = match &cli.command {
        Command::SynthData => commands::synth_data(g),
        Command::FitAvatar(a) => commands::fit_avatar(g, a),
        Command::TrainSeq(a) => commands::train_seq(g, a),
        Command::Render(a) => commands::render(g, a),
        Command::CheckGrad(a) => commands::check_grad(g, a),
        Command::Metrics(a) => commands::metrics(g, a),
    };
    match r {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
