use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(
    name = "ovs",
    version,
    about = "Out-of-boundary view synthesis for video stabilization"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Grow every frame's canvas from its aligned neighbors.
    Expand(ExpandArgs),
    /// Smooth the camera path and render stabilized frames.
    Stabilize(StabilizeArgs),
    /// Score a stabilized video, and optionally expanded canvases.
    Eval(EvalArgs),
    /// Render a jittery synthetic sequence with ground-truth canvases.
    Synth(SynthArgs),
    /// Mode matrix and iteration sweep with one consolidated report.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed for every randomized step.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Flow estimator: `baseline` or `files:<dir>`.
    #[arg(long)]
    pub flow: Option<String>,
    /// Configuration override, `section.key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Baseline,
    Coarse,
    Fine,
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FillArg {
    None,
    Nearest,
}

#[derive(Debug, Args)]
pub struct ExpandArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct StabilizeArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Sample expanded canvases instead of the bare frames.
    #[arg(long, value_enum, default_value = "on")]
    pub ovs: Switch,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long, value_enum)]
    pub fill: Option<FillArg>,
    /// Smoothing window in frames (odd, at least 3).
    #[arg(long)]
    pub window: Option<usize>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Original frames.
    #[arg(long)]
    pub input: PathBuf,
    /// Stabilized frames.
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long)]
    pub report: PathBuf,
    /// Ground-truth canvases, scored against `--canvases`.
    #[arg(long, requires = "canvases")]
    pub gt: Option<PathBuf>,
    /// Expanded canvases as written by `ovs expand`.
    #[arg(long, requires = "gt")]
    pub canvases: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Source panorama; a procedural one is generated when absent.
    #[arg(long)]
    pub panorama: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the full ground-truth windows.
    #[arg(long)]
    pub emit_gt: bool,
    /// Scale of the 640x480 frame geometry and of all pixel quantities.
    #[arg(long, default_value_t = 1.0)]
    pub scale: f64,
    #[arg(long, default_value_t = 30)]
    pub frames: usize,
    #[arg(long, default_value_t = 60.0)]
    pub amplitude: f64,
    #[arg(long, default_value_t = 30.0)]
    pub period: f64,
    #[arg(long, default_value_t = 8.0)]
    pub jitter: f64,
    /// Rotation jitter in degrees.
    #[arg(long, default_value_t = 0.5)]
    pub rotation: f64,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Input frames; the default synthetic suite is used when absent.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Ground-truth canvases for the input frames.
    #[arg(long, requires = "input")]
    pub gt: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Scale of the default synthetic suite.
    #[arg(long, default_value_t = 0.5, conflicts_with = "input")]
    pub scale: f64,
    /// Frame count of the default synthetic suite.
    #[arg(long, default_value_t = 30, conflicts_with = "input")]
    pub frames: usize,
    /// Iteration counts of the sweep, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = [0usize, 5, 10, 15])]
    pub iterations: Vec<usize>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[command(flatten)]
    pub common: Common,
}
