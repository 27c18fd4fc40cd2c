//! One optimization per seed: inputs are loaded once, then each seed builds
//! its objective, optimizes, and produces an image and a report.

use std::path::PathBuf;
use std::time::Instant;

use preimage::energy::{
    activation_normalizer, caricature_target, template_range, unit_target, DataTerm, Loss, Objective,
    TextureTerm,
};
use preimage::layers::LayerKind;
use preimage::metrics::{classification_consistency, feature_error, grad_hist_intersection, DEFAULT_HIST_BINS};
use preimage::optim::{centred_offset, init_preimage, run, InitMode, Schedule};
use preimage::{Network, RandomSource, Tensor};

use crate::args::CommandKind;
use crate::config::Config;
use crate::error::{CliError, Result};
use crate::imageio::{read_mask, read_png, read_template, to_tensor, write_atomic, write_png};
use crate::report::{Metrics, Report, TraceRow, SCHEMA_VERSION};

/// Seed of the white-noise image used to estimate activation ranges, fixed so
/// that every seed of a run shares one normalizer.
const RANGE_PROBE_SEED: u64 = 0;

/// Loaded inputs shared by every seed of a run.
pub struct Session {
    pub network: Network,
    pub config: Config,
    layers: Vec<usize>,
    /// Network input size (without the jitter margin).
    size: (usize, usize),
    /// Reference image after mean subtraction.
    x0: Option<Tensor>,
    data: Option<DataTerm>,
    texture: Vec<TextureTerm>,
    normalizer: Option<f64>,
}

/// Result of one seed.
pub struct Outcome {
    /// Optimized network input (mean removed).
    pub x: Tensor,
    /// `x` with the mean restored, in pixel units.
    pub raw: Tensor,
    pub report: Report,
}

impl Session {
    pub fn new(network: Network, config: Config) -> Result<Self> {
        let layers = config
            .layers
            .iter()
            .map(|l| network.layer_index(l))
            .collect::<preimage::Result<Vec<_>>>()?;
        let layer = layers[0];
        let channels = network.input().channels;
        let fixed = network.input().height.zip(network.input().width);

        let reference = match &config.image {
            Some(path) => Some(to_tensor(&read_png(path)?, channels, fixed)?),
            None => None,
        };
        let template = match &config.template {
            Some(path) => Some(read_template(path)?),
            None => None,
        };

        let size = match (fixed, &template, &reference) {
            (Some(s), _, _) => s,
            (None, Some(t), _) => template_input_size(&network, layer, t)?,
            (None, None, Some(r)) => {
                // Descriptor-style networks: keep whole cells only.
                let s = network.receptive_fields()[layers.iter().copied().max().unwrap()].rf_stride.max(1);
                let (h, w) = (r.height() / s * s, r.width() / s * s);
                if h == 0 || w == 0 {
                    return Err(CliError::conflict(format!("image is smaller than one {s}-pixel cell")));
                }
                (h, w)
            }
            (None, None, None) => {
                return Err(CliError::conflict(
                    "this network takes any input size; pass --image to fix it",
                ))
            }
        };
        let x0 = match reference {
            Some(r) => Some(network.subtract_mean(&r.crop(0, 0, size.0, size.1)?)?),
            None => None,
        };
        let code_shape = network.output_shape((size.0, size.1, channels), layer)?;

        let mut normalizer = None;
        let mut texture = Vec::new();
        let data = match config.command {
            CommandKind::Invert => {
                let x0 = x0.as_ref().expect("checked by resolve");
                let mask = match &config.mask {
                    Some(path) => Some(read_mask(path, code_shape)?),
                    None => None,
                };
                Some(DataTerm {
                    layer,
                    loss: Loss::Inversion {
                        target: network.output(x0, layer)?,
                        mask,
                    },
                })
            }
            CommandKind::Caricature => {
                let (target, z) = caricature_target(&network.output(x0.as_ref().expect("checked"), layer)?)?;
                normalizer = Some(z);
                Some(DataTerm {
                    layer,
                    loss: Loss::Dot { target, z },
                })
            }
            CommandKind::Maximize => {
                let (target, z) = match (&template, config.unit) {
                    (Some(w), _) => {
                        if w.shape() != code_shape {
                            return Err(CliError::conflict(format!(
                                "template is {:?}, layer `{}` produces {:?}",
                                w.shape(),
                                config.layers[0],
                                code_shape
                            )));
                        }
                        let noise = probe(&network, size, &config)?;
                        let m = template_range(w, &network.output(&noise, layer)?)?;
                        let rho = size.0.max(size.1);
                        (w.clone(), activation_normalizer(m, rho))
                    }
                    (None, Some(unit)) => {
                        let (h, w, c) = code_shape;
                        let target = unit_target(h, w, c, unit)?;
                        // A user-supplied range, else the largest activation
                        // of the layer on the reference image, else the
                        // template rule with |Φ0| on a noise image.
                        let m = match (config.unit_range, &x0) {
                            (Some(m), _) => m,
                            (None, Some(x0)) => {
                                network.output(x0, layer)?.data().iter().fold(0.0f64, |a, &b| a.max(b))
                            }
                            (None, None) => {
                                template_range(&target, &network.output(&probe(&network, size, &config)?, layer)?)?
                            }
                        };
                        let rho = network.receptive_fields()[layer].rf_size;
                        (target, activation_normalizer(m, rho))
                    }
                    (None, None) => unreachable!("checked by resolve"),
                };
                if !(z > 0.0 && z.is_finite()) {
                    return Err(preimage::Error::DegenerateTarget(format!(
                        "the activation range estimate gives Z = {z}; the objective would be constant"
                    ))
                    .into());
                }
                normalizer = Some(z);
                Some(DataTerm {
                    layer,
                    loss: Loss::Dot { target, z },
                })
            }
            CommandKind::Texture => {
                let x0 = x0.as_ref().expect("checked by resolve");
                for (&l, &w) in layers.iter().zip(&config.layer_weights) {
                    let mut term = TextureTerm::from_image(&network, l, 1.0, x0)?;
                    let norm: f64 = term.target.iter().map(|g| g * g).sum();
                    if norm == 0.0 {
                        return Err(preimage::Error::DegenerateTarget(format!(
                            "the texture has no energy at layer `{}`",
                            network.layer_names()[l]
                        ))
                        .into());
                    }
                    term.weight = w / norm;
                    texture.push(term);
                }
                None
            }
        };
        Ok(Self {
            network,
            config,
            layers,
            size,
            x0,
            data,
            texture,
            normalizer,
        })
    }

    /// Runs with the session's configuration but another seed; output paths
    /// are unchanged.
    pub fn run_seed(&self, seed: u64) -> Result<Outcome> {
        self.run_with(Config {
            seed,
            ..self.config.clone()
        })
    }

    /// `config` must differ from the session's only in seed and output paths.
    pub fn run_with(&self, config: Config) -> Result<Outcome> {
        let start = Instant::now();
        let seed = config.seed;
        let objective = Objective::new(&self.network, self.data.clone(), config.regularizers())?
            .with_texture(self.texture.clone())?;
        let (h, w) = objective.image_size(self.size.0, self.size.1);
        let shape = (h, w, self.network.input().channels);
        let mut rng = RandomSource::new(seed);
        let init = if config.command == CommandKind::Caricature {
            let t = objective.reg.jitter_amount();
            let (c, _) = centred_offset(t);
            let x0 = self.x0.as_ref().expect("caricature has a reference");
            init_preimage(InitMode::Reference, Some(&x0.pad(c, t - 1 - c, c, t - 1 - c)), shape, config.b, &mut rng)?
        } else {
            init_preimage(InitMode::Noise, None, shape, config.b, &mut rng)?
        };
        let schedule = Schedule {
            iters: config.iters,
            finetune_iters: config.finetune_iters,
            eta0: config.eta0,
            finetune_factor: 0.1,
        };
        let result = run(&objective, &init, &schedule, &mut rng)?;
        let metrics = self.metrics(&result.image, &result.report)?;
        let raw = self.network.add_mean(&result.image)?;
        let report = Report {
            schema_version: SCHEMA_VERSION,
            command: config.command,
            seed,
            replay: config.replay_args(),
            trace: result.report.trace.iter().map(TraceRow::from).collect(),
            final_components: result.report.final_components.into(),
            metrics,
            duration_seconds: start.elapsed().as_secs_f64(),
            output: config.out.clone(),
            config,
        };
        Ok(Outcome {
            x: result.image,
            raw,
            report,
        })
    }

    fn metrics(&self, x: &Tensor, run: &preimage::optim::RunReport) -> Result<Metrics> {
        let layer = self.layers[0];
        let code = self.network.output(x, layer)?;
        let mut m = Metrics {
            initial_energy: run.initial_energy(),
            final_energy: run.final_energy,
            feasible: run.final_components.feasible,
            normalizer: self.normalizer,
            ..Default::default()
        };
        if let Some(x0) = &self.x0 {
            if x0.shape() == x.shape() {
                m.grad_hist_intersection = Some(grad_hist_intersection(x, x0, DEFAULT_HIST_BINS)?);
            }
        }
        match (&self.data, self.config.command) {
            (Some(DataTerm { loss: Loss::Inversion { target, mask }, .. }), _) => {
                m.reconstruction_error = Some(feature_error(&code, target, mask.as_ref())?);
                let x0 = self.x0.as_ref().expect("inversion has a reference");
                let last = self.network.layers().last().map(|l| l.layer.kind());
                if last == Some(LayerKind::Softmax) {
                    m.classification_consistency =
                        Some(classification_consistency(std::slice::from_ref(x), x0, &self.network)?);
                }
            }
            (Some(DataTerm { loss: Loss::Dot { target, .. }, .. }), command) => {
                m.score = Some(code.dot(target)?);
                if command == CommandKind::Caricature {
                    let x0 = self.x0.as_ref().expect("caricature has a reference");
                    m.reference_score = Some(self.network.output(x0, layer)?.dot(target)?);
                }
                if let Some(unit) = self.config.unit {
                    let (h, w, _) = code.shape();
                    m.unit_activation = Some(code.get(h / 2, w / 2, unit));
                    m.unit_is_argmax = Some(code.argmax_channel(h / 2, w / 2) == unit);
                }
            }
            (None, _) => {
                m.texture_energy = Some(run.final_components.texture);
            }
        }
        Ok(m)
    }
}

fn probe(network: &Network, (h, w): (usize, usize), config: &Config) -> Result<Tensor> {
    let mut rng = RandomSource::new(RANGE_PROBE_SEED);
    Ok(Tensor::fill_noise(h, w, network.input().channels, config.b, &mut rng))
}

/// Smallest input whose code at `layer` has the template's spatial size.
fn template_input_size(network: &Network, layer: usize, template: &Tensor) -> Result<(usize, usize)> {
    let c = network.input().channels;
    let find = |target: usize, along_height: bool| {
        (1..=8192).find(|&n| match network.output_shape((n, n, c), layer) {
            Ok((oh, ow, _)) => target == if along_height { oh } else { ow },
            Err(_) => false,
        })
    };
    let mismatch = || CliError::conflict(format!("no input size produces a {:?} code", template.shape()));
    let h = find(template.height(), true).ok_or_else(mismatch)?;
    let w = find(template.width(), false).ok_or_else(mismatch)?;
    Ok((h, w))
}

/// Writes the image and report of one seed.
pub fn write_outcome(outcome: &Outcome) -> Result<PathBuf> {
    let out = &outcome.report.config.out;
    write_png(out, &outcome.raw)?;
    let json = serde_json::to_vec_pretty(&outcome.report).expect("reports serialize");
    write_atomic(&outcome.report.config.report, &json)?;
    Ok(out.clone())
}
