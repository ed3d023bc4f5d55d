mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Reconstruct an animatable Gaussian avatar from a monocular video.
#[derive(Parser, Debug)]
#[command(name = "avatar", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic humanoid dataset.
    SynthData(SynthArgs),
    /// Bake the rest-pose UV maps and initialise one Gaussian per texel.
    Preprocess(PreprocessArgs),
    /// Run Stage I (reconstruction) or Stage II (score distillation).
    Train(TrainArgs),
    /// Render a checkpoint in the rest pose from one or more viewpoints.
    Render(RenderArgs),
    /// Render a checkpoint driven by a pose sequence.
    Animate(AnimateArgs),
    /// PSNR/SSIM of a checkpoint on the frame cameras and the eval ring.
    Evaluate(EvaluateArgs),
    /// Visibility ratios of the candidate views and the unseen-view list.
    Visibility(VisibilityArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Generator settings as JSON; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub resolution: Option<usize>,
}

#[derive(Args, Debug)]
pub struct PreprocessArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Defaults to `<data>/preprocess`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 128)]
    pub uv_resolution: usize,
    #[arg(long, default_value_t = 4)]
    pub bake_factor: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ProviderKind {
    Mock,
    Oracle,
    Remote,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    pub stage: u8,
    #[arg(long)]
    pub data: PathBuf,
    /// Training settings as JSON.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = ProviderKind::Mock)]
    pub provider: ProviderKind,
    /// Session to continue; required for stage 2.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Defaults to `<data>/checkpoints/stage<N>.avck`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Epoch budget of the selected stage.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// JSONL metrics log.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Overrides AVATAR_GUIDANCE_URL.
    #[arg(long)]
    pub guidance_url: Option<String>,
    #[arg(long, default_value_t = 30.0)]
    pub guidance_timeout_s: f64,
}

#[derive(Args, Debug, Clone)]
pub struct ViewArgs {
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub azimuth: f64,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub elevation: f64,
    /// Defaults to the training view radius.
    #[arg(long)]
    pub radius: Option<f64>,
}

#[derive(Args, Debug)]
pub struct RenderArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub view: ViewArgs,
    /// Render N views evenly spaced in azimuth instead of one.
    #[arg(long, conflicts_with = "azimuth")]
    pub turntable: Option<usize>,
}

#[derive(Args, Debug)]
pub struct AnimateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Pose sequence in the `poses.json` layout.
    #[arg(long)]
    pub poses: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub view: ViewArgs,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    /// Also write the JSON report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct VisibilityArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Write one visibility map per candidate view into this directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Defaults to the checkpoint's threshold.
    #[arg(long)]
    pub threshold: Option<f64>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
