//! Resolution of command-line flags and presets into the full set of
//! parameters for a run.

use std::path::{Path, PathBuf};

use preimage::energy::{c_schedule, default_jitter, RegularizerConfig};
use preimage::hogsift::{build_descriptor_net, DescriptorConfig, Variant};
use preimage::layers::LayerKind;
use preimage::netio::load_network;
use preimage::optim::default_learning_rate;
use preimage::Network;
use serde::{Serialize, Serializer};

use crate::args::{CommandKind, Jitter, Preset, RunArgs};
use crate::error::{CliError, Result};

pub const BUILTIN_PREFIX: &str = "builtin:";

/// Every parameter that affects the result of one run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Config {
    pub command: CommandKind,
    pub net: String,
    pub weights: Option<PathBuf>,
    pub image: Option<PathBuf>,
    pub layers: Vec<String>,
    pub layer_weights: Vec<f64>,
    pub unit: Option<usize>,
    pub unit_range: Option<f64>,
    pub mask: Option<PathBuf>,
    pub template: Option<PathBuf>,
    pub preset: Option<Preset>,
    #[serde(rename = "C", serialize_with = "finite_or_inf")]
    pub c: f64,
    pub alpha: f64,
    pub beta: f64,
    #[serde(rename = "B")]
    pub b: f64,
    #[serde(rename = "Bplus")]
    pub b_plus: f64,
    #[serde(rename = "V")]
    pub v: f64,
    pub jitter: usize,
    pub iters: usize,
    pub finetune_iters: usize,
    pub eta0: f64,
    pub seed: u64,
    pub out: PathBuf,
    pub report: PathBuf,
}

fn finite_or_inf<S: Serializer>(c: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if c.is_finite() {
        s.serialize_f64(*c)
    } else {
        s.serialize_str("inf")
    }
}

impl Config {
    pub fn regularizers(&self) -> RegularizerConfig {
        RegularizerConfig {
            c: self.c,
            alpha: self.alpha,
            beta: self.beta,
            b: self.b,
            b_plus: self.b_plus,
            v: self.v,
            jitter: self.jitter,
        }
    }

    /// The same run with another seed, writing to seed-suffixed files.
    pub fn for_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            out: suffixed(&self.out, seed),
            report: suffixed(&self.report, seed),
            ..self.clone()
        }
    }

    /// Arguments that reproduce this run exactly.
    pub fn replay_args(&self) -> Vec<String> {
        let mut a = vec![self.command.as_str().to_string()];
        let mut flag = |name: &str, value: String| {
            a.push(format!("--{name}"));
            a.push(value);
        };
        let path = |p: &Path| p.display().to_string();
        flag("net", self.net.clone());
        if let Some(w) = &self.weights {
            flag("weights", path(w));
        }
        if let Some(i) = &self.image {
            flag("image", path(i));
        }
        flag("layer", self.layers.join(","));
        if self.command == CommandKind::Texture {
            flag("layer-weights", join(&self.layer_weights));
        }
        if let Some(u) = self.unit {
            flag("unit", u.to_string());
        }
        if let Some(m) = self.unit_range {
            flag("unit-range", m.to_string());
        }
        if let Some(m) = &self.mask {
            flag("mask", path(m));
        }
        if let Some(t) = &self.template {
            flag("template", path(t));
        }
        if let Some(p) = self.preset {
            flag("preset", p.as_str().to_string());
        }
        flag("C", self.c.to_string());
        flag("alpha", self.alpha.to_string());
        flag("beta", self.beta.to_string());
        flag("B", self.b.to_string());
        flag("Bplus", self.b_plus.to_string());
        flag("V", self.v.to_string());
        flag("jitter", self.jitter.to_string());
        flag("iters", self.iters.to_string());
        flag("finetune-iters", self.finetune_iters.to_string());
        flag("seed", self.seed.to_string());
        flag("out", path(&self.out));
        flag("report", path(&self.report));
        a
    }
}

fn join(v: &[f64]) -> String {
    v.iter().map(f64::to_string).collect::<Vec<_>>().join(",")
}

fn suffixed(path: &Path, seed: u64) -> PathBuf {
    let stem = path.file_stem().unwrap_or_default().to_string_lossy();
    let name = match path.extension() {
        Some(ext) => format!("{stem}-{seed}.{}", ext.to_string_lossy()),
        None => format!("{stem}-{seed}"),
    };
    path.with_file_name(name)
}

/// A network named on the command line.
pub fn load_net(net: &str, weights: Option<&Path>) -> Result<(Network, Option<PathBuf>)> {
    if let Some(name) = net.strip_prefix(BUILTIN_PREFIX) {
        let variant = Variant::parse(name).ok_or_else(|| {
            CliError::conflict(format!("unknown builtin network `{name}` (expected hog, hogb or dsift)"))
        })?;
        if weights.is_some() {
            return Err(CliError::conflict("builtin networks take no --weights"));
        }
        return Ok((build_descriptor_net(&DescriptorConfig::new(variant))?, None));
    }
    let manifest = Path::new(net);
    let weights = weights.map_or_else(|| manifest.with_extension("bin"), Path::to_path_buf);
    Ok((load_network(manifest, &weights)?, Some(weights)))
}

/// Descriptor networks take any input size and start with hand-set layers.
fn is_descriptor(network: &Network) -> bool {
    network.layers().iter().any(|l| l.layer.kind() == LayerKind::Binning)
}

fn default_preset(command: CommandKind, network: &Network) -> Option<Preset> {
    match command {
        CommandKind::Invert if is_descriptor(network) => Some(Preset::InvertShallow),
        CommandKind::Invert => Some(Preset::InvertDeep),
        CommandKind::Maximize => Some(Preset::Maximize),
        CommandKind::Caricature => Some(Preset::Caricature),
        CommandKind::Texture => None,
    }
}

fn preset_allowed(command: CommandKind, preset: Preset) -> bool {
    matches!(
        (command, preset),
        (CommandKind::Invert, Preset::InvertShallow | Preset::InvertDeep)
            | (CommandKind::Maximize, Preset::Maximize)
            | (CommandKind::Caricature, Preset::Caricature)
    )
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| p.parse().map_err(|_| CliError::conflict(format!("bad {what} `{p}`"))))
        .collect()
}

fn forbid(present: bool, flag: &str, command: CommandKind) -> Result<()> {
    if present {
        return Err(CliError::conflict(format!("{flag} does not apply to {}", command.as_str())));
    }
    Ok(())
}

pub fn resolve(command: CommandKind, args: &RunArgs, network: &Network, weights: Option<PathBuf>) -> Result<Config> {
    use CommandKind::*;
    if args.count == 0 {
        return Err(CliError::conflict("--count must be at least 1"));
    }
    forbid(args.unit.is_some() && command != Maximize, "--unit", command)?;
    forbid(args.unit_range.is_some() && command != Maximize, "--unit-range", command)?;
    forbid(args.template.is_some() && command != Maximize, "--template", command)?;
    forbid(args.layer_weights.is_some() && command != Texture, "--layer-weights", command)?;
    forbid(args.mask.is_some() && command != Invert, "--mask", command)?;
    if matches!(command, Invert | Caricature | Texture) && args.image.is_none() {
        return Err(CliError::conflict(format!("{} needs --image", command.as_str())));
    }
    if command == Maximize {
        match (args.unit, &args.template) {
            (Some(_), Some(_)) => return Err(CliError::conflict("pass either --unit or --template, not both")),
            (None, None) => return Err(CliError::conflict("maximize needs --unit or --template")),
            _ => {}
        }
        forbid(args.unit_range.is_some() && args.template.is_some(), "--unit-range", command)?;
    }

    let names = network.layer_names();
    let layers: Vec<String> = match &args.layer {
        Some(list) if command == Texture => parse_list(list, "layer name")?,
        Some(name) => vec![name.clone()],
        None => vec![names[network.last_index()].clone()],
    };
    if layers.is_empty() {
        return Err(preimage::Error::Config("the layer list is empty".into()).into());
    }
    let indices = layers
        .iter()
        .map(|l| network.layer_index(l))
        .collect::<preimage::Result<Vec<_>>>()?;
    let deepest = *indices.iter().max().expect("non-empty");
    let layer_weights = match &args.layer_weights {
        Some(list) => parse_list(list, "layer weight")?,
        None if command == Texture => vec![1.0; layers.len()],
        None => Vec::new(),
    };
    if command == Texture && layer_weights.len() != layers.len() {
        return Err(preimage::Error::Config(format!(
            "{} layers but {} layer weights",
            layers.len(),
            layer_weights.len()
        ))
        .into());
    }

    let preset = args.preset.or_else(|| default_preset(command, network));
    if let Some(p) = preset {
        if !preset_allowed(command, p) {
            return Err(CliError::conflict(format!(
                "preset {} does not apply to {}",
                p.as_str(),
                command.as_str()
            )));
        }
    }
    let (preset_c, preset_jitter, finetune) = match preset {
        Some(Preset::InvertShallow) => (100.0, Jitter::Fixed(1), true),
        Some(Preset::InvertDeep) => (c_schedule(&names, deepest).unwrap_or(100.0), Jitter::Auto, true),
        Some(Preset::Maximize | Preset::Caricature) => (1.0, Jitter::Auto, false),
        None => (1.0, Jitter::Fixed(1), false),
    };
    let jitter = match args.jitter.unwrap_or(preset_jitter) {
        Jitter::Auto => default_jitter(network.receptive_fields()[deepest].rf_stride),
        Jitter::Fixed(t) => t,
    };

    let defaults = RegularizerConfig::with_b(args.b.unwrap_or(80.0));
    let reg = RegularizerConfig {
        c: args.c.unwrap_or(preset_c),
        alpha: args.alpha.unwrap_or(defaults.alpha),
        beta: args.beta.unwrap_or(defaults.beta),
        b: defaults.b,
        b_plus: args.b_plus.unwrap_or(defaults.b_plus),
        v: args.v.unwrap_or(defaults.v),
        jitter,
    };
    reg.validate()?;
    if command == Texture && args.c.is_some() {
        return Err(CliError::conflict("texture has no data term; --C does not apply"));
    }

    let report = args.report.clone().unwrap_or_else(|| args.out.with_extension("json"));
    if report == args.out {
        return Err(CliError::conflict("--report and --out name the same file"));
    }
    Ok(Config {
        command,
        net: args.net.clone(),
        weights,
        image: args.image.clone(),
        layers,
        layer_weights,
        unit: args.unit,
        unit_range: args.unit_range,
        mask: args.mask.clone(),
        template: args.template.clone(),
        preset,
        c: reg.c,
        alpha: reg.alpha,
        beta: reg.beta,
        b: reg.b,
        b_plus: reg.b_plus,
        v: reg.v,
        jitter,
        iters: args.iters.unwrap_or(300),
        finetune_iters: args.finetune_iters.unwrap_or(if finetune { 50 } else { 0 }),
        eta0: default_learning_rate(reg.b, reg.alpha),
        seed: args.seed,
        out: args.out.clone(),
        report,
    })
}
