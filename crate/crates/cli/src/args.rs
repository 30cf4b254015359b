use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use vidnoise_core::dataset::{NoiseLevel, NoisePreset, DEFAULT_CLIP_LEN, DEFAULT_PATCH_SIZE, DEFAULT_TRAIN_RATIO};

pub const CONFIG_DIR_ENV: &str = "VIDNOISE_CONFIG_DIR";

pub const LONG_VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "\nraw frame format 1\nweights format 1");

#[derive(Debug, Parser, Serialize)]
#[command(name = "vidnoise", version, long_version = LONG_VERSION, arg_required_else_help = true)]
#[command(about = "Synthesize, render and evaluate noisy/clean RAW and sRGB video pairs")]
pub struct Cli {
    /// Seed for every random stream of the run.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,

    /// Load and validate configuration and inputs without writing anything.
    #[arg(long, global = true)]
    pub dry_run: bool,

    /// Worker threads (defaults to the number of cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,

    /// Directory holding default `isp.toml`, `calibration.toml` and `model.toml`.
    #[arg(long, global = true, env = CONFIG_DIR_ENV)]
    pub config_dir: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Fit noise parameters for one ISO from flat-field stacks.
    Calibrate(CalibrateArgs),
    /// Add sensor noise to a clean RAW clip (or a synthetic flat field).
    Synth(SynthArgs),
    /// Render a RAW clip to sRGB, optionally injecting noise first.
    Render(RenderArgs),
    /// Build a paired dataset from clean RAW clips.
    Dataset(DatasetArgs),
    /// Compare two frames or clips.
    Metrics(MetricsArgs),
    /// Dense optical flow statistics of an sRGB clip.
    Flow(FlowArgs),
    /// Recurrent video denoising transformer reference.
    #[command(subcommand)]
    Rvdt(RvdtCommand),
}

#[derive(Debug, Args, Serialize)]
#[group(required = true, multiple = false)]
pub struct RequiredLevel {
    #[arg(long)]
    pub iso: Option<f64>,
    /// heavy, medium or light.
    #[arg(long)]
    pub preset: Option<NoisePreset>,
}

#[derive(Debug, Args, Serialize)]
#[group(multiple = false)]
pub struct OptionalLevel {
    #[arg(long)]
    pub iso: Option<f64>,
    /// heavy, medium or light.
    #[arg(long)]
    pub preset: Option<NoisePreset>,
}

fn level(iso: Option<f64>, preset: Option<NoisePreset>) -> Option<NoiseLevel> {
    match (iso, preset) {
        (_, Some(p)) => Some(NoiseLevel::Preset(p)),
        (Some(i), None) => Some(NoiseLevel::Iso(i)),
        (None, None) => None,
    }
}

impl RequiredLevel {
    pub fn level(&self) -> NoiseLevel {
        level(self.iso, self.preset).expect("clap enforces one of --iso/--preset")
    }
}

impl OptionalLevel {
    pub fn level(&self) -> Option<NoiseLevel> {
        level(self.iso, self.preset)
    }
}

#[derive(Debug, Args, Serialize)]
pub struct CalibrateArgs {
    /// Directory whose sub-directories are flat-field RAW stacks.
    #[arg(long)]
    pub flats: PathBuf,
    #[arg(long)]
    pub iso: f64,
    /// Table to extend (default: config directory or built-in).
    #[arg(long)]
    pub table: Option<PathBuf>,
    /// Where to write the updated table.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    /// Clean RAW clip directory.
    #[arg(long = "in", conflicts_with = "flat", required_unless_present = "flat")]
    pub input: Option<PathBuf>,
    /// Generate a flat field at this normalised level instead of reading a clip.
    #[arg(long)]
    pub flat: Option<f32>,
    /// Flat-field size as WIDTHxHEIGHT.
    #[arg(long, default_value = "64x64", value_parser = parse_size)]
    pub size: (usize, usize),
    /// Flat-field frame count.
    #[arg(long, default_value_t = 16)]
    pub frames: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub level: RequiredLevel,
    #[arg(long)]
    pub table: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum FrameFormat {
    Png,
    /// 8-bit planar R, G, B.
    Planar,
}

#[derive(Debug, Args, Serialize)]
pub struct RenderArgs {
    /// RAW clip directory or a single `.raw` frame.
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub level: OptionalLevel,
    /// Render the clean frames even if a noise level is given.
    #[arg(long)]
    pub no_noise: bool,
    /// Skip an optional ISP stage (color-temp, tonemap); repeatable.
    #[arg(long = "disable-stage")]
    pub disable_stage: Vec<String>,
    #[arg(long)]
    pub isp: Option<PathBuf>,
    #[arg(long)]
    pub table: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = FrameFormat::Png)]
    pub format: FrameFormat,
}

#[derive(Debug, Args, Serialize)]
pub struct DatasetArgs {
    /// Directory whose sub-directories are clean RAW videos.
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub level: RequiredLevel,
    /// Patch positions to sample per clip.
    #[arg(long, default_value_t = 0)]
    pub patches: usize,
    #[arg(long, default_value_t = DEFAULT_PATCH_SIZE)]
    pub patch_size: usize,
    #[arg(long)]
    pub no_augment: bool,
    #[arg(long, default_value_t = DEFAULT_TRAIN_RATIO)]
    pub ratio: f64,
    /// Cut each video into clips of this many frames.
    #[arg(long, requires = "clips_per_video")]
    pub clip_len: Option<usize>,
    #[arg(long, requires = "clip_len")]
    pub clips_per_video: Option<usize>,
    #[arg(long)]
    pub isp: Option<PathBuf>,
    #[arg(long)]
    pub table: Option<PathBuf>,
}

impl DatasetArgs {
    pub fn clip_len(&self) -> usize {
        self.clip_len.unwrap_or(DEFAULT_CLIP_LEN)
    }
}

#[derive(Debug, Args, Serialize)]
pub struct MetricsArgs {
    /// PNG frame or directory of PNG frames.
    #[arg(long)]
    pub a: PathBuf,
    #[arg(long)]
    pub b: PathBuf,
    /// Dump the luma residual histogram (a - b) as a table.
    #[arg(long)]
    pub hist: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct FlowArgs {
    /// Directory of PNG frames.
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Write every flow field as planar little-endian f32 u then v.
    #[arg(long)]
    pub dump: Option<PathBuf>,
    /// Write the histogram table here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum RvdtCommand {
    /// Denoise a clip.
    Run(RvdtRunArgs),
    /// Run the structural invariant suite.
    Check,
    /// Print the parameter count of a configuration.
    Params(ModelArgs),
    /// Write randomly initialised weights.
    Init(RvdtInitArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct ModelArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct RvdtRunArgs {
    #[arg(long)]
    pub weights: PathBuf,
    /// Directory of PNG frames (or RAW frames for a 4-channel model).
    #[arg(long)]
    pub clip: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub out: PathBuf,
    /// Noise level for a non-blind model.
    #[arg(long)]
    pub noise_level: Option<f32>,
}

#[derive(Debug, Args, Serialize)]
pub struct RvdtInitArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Weight manifest path; the blob goes next to it.
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (w, h) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected WIDTHxHEIGHT, got '{s}'"))?;
    let p = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("'{v}': {e}"));
    Ok((p(w)?, p(h)?))
}
