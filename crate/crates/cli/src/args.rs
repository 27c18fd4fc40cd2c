use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "preimage", version, about = "Reconstruct natural pre-images of image representations")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Reconstruct an image from its code at one layer.
    Invert(RunArgs),
    /// Find an image that excites one unit, or scores highly under a HOG template.
    Maximize(RunArgs),
    /// Exaggerate the active components of an image's code.
    Caricature(RunArgs),
    /// Synthesize an image matching the channel correlations of a texture.
    Texture(RunArgs),
}

impl Command {
    pub fn kind(&self) -> CommandKind {
        match self {
            Self::Invert(_) => CommandKind::Invert,
            Self::Maximize(_) => CommandKind::Maximize,
            Self::Caricature(_) => CommandKind::Caricature,
            Self::Texture(_) => CommandKind::Texture,
        }
    }

    pub fn args(&self) -> &RunArgs {
        match self {
            Self::Invert(a) | Self::Maximize(a) | Self::Caricature(a) | Self::Texture(a) => a,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum CommandKind {
    Invert,
    Maximize,
    Caricature,
    Texture,
}

impl CommandKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Invert => "invert",
            Self::Maximize => "maximize",
            Self::Caricature => "caricature",
            Self::Texture => "texture",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, serde::Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    InvertShallow,
    InvertDeep,
    Maximize,
    Caricature,
}

impl Preset {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::InvertShallow => "invert-shallow",
            Self::InvertDeep => "invert-deep",
            Self::Maximize => "maximize",
            Self::Caricature => "caricature",
        }
    }
}

/// Jitter amount: a fixed number of pixels, or a quarter of the layer stride.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Jitter {
    Auto,
    Fixed(usize),
}

impl FromStr for Jitter {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "auto" {
            return Ok(Self::Auto);
        }
        match s.parse::<usize>() {
            Ok(0) => Err("jitter must be at least 1 (1 disables it)".into()),
            Ok(t) => Ok(Self::Fixed(t)),
            Err(_) => Err(format!("expected an integer or `auto`, got `{s}`")),
        }
    }
}

impl fmt::Display for Jitter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Auto => f.write_str("auto"),
            Self::Fixed(t) => write!(f, "{t}"),
        }
    }
}

#[derive(Clone, Debug, Default, Args)]
pub struct RunArgs {
    /// Manifest path, or builtin:hog, builtin:hogb, builtin:dsift.
    #[arg(long)]
    pub net: String,
    /// Weight blob; defaults to the manifest path with a .bin extension.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Reference image (PNG).
    #[arg(long)]
    pub image: Option<PathBuf>,
    /// Layer name; a comma-separated list for texture. Defaults to the last layer.
    #[arg(long)]
    pub layer: Option<String>,
    /// Channel to maximize.
    #[arg(long)]
    pub unit: Option<usize>,
    /// Grayscale PNG at the layer's spatial size; pixels above 127 are kept.
    #[arg(long)]
    pub mask: Option<PathBuf>,
    /// HOG template as JSON {height, width, channels, data}.
    #[arg(long)]
    pub template: Option<PathBuf>,
    /// Data term weight; `inf` drops the regularizers.
    #[arg(long = "C")]
    pub c: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    /// Typical pixel norm.
    #[arg(long = "B")]
    pub b: Option<f64>,
    /// Hard bound on pixel values.
    #[arg(long = "Bplus")]
    pub b_plus: Option<f64>,
    /// Typical variation between neighboring pixels.
    #[arg(long = "V")]
    pub v: Option<f64>,
    /// Jitter amount in pixels, or `auto`.
    #[arg(long)]
    pub jitter: Option<Jitter>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long = "finetune-iters")]
    pub finetune_iters: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of runs, with seeds seed, seed+1, ...
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    /// Output PNG.
    #[arg(long)]
    pub out: PathBuf,
    /// Report path; defaults to the output path with a .json extension.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Comma-separated texture weights, one per layer.
    #[arg(long = "layer-weights")]
    pub layer_weights: Option<String>,
    /// Activation range M used to normalize unit maximization.
    #[arg(long = "unit-range")]
    pub unit_range: Option<f64>,
}
