//! Projected momentum-AdaGrad descent on pixels.

use crate::energy::{eval_objective, jitter_apply, Components, Objective};
use crate::error::{Error, Result};
use crate::tensor::{RandomSource, Tensor};

/// Decay of the squared-gradient average and momentum factor.
pub const MOMENTUM: f64 = 0.9;

/// `η0 = 0.01 B² / α`.
pub fn default_learning_rate(b: f64, alpha: f64) -> f64 {
    0.01 * b * b / alpha
}

#[derive(Clone, Debug)]
pub struct OptimState {
    /// Decayed accumulated squared gradient.
    pub g: Tensor,
    pub mu: Tensor,
    pub rho: f64,
    pub eta0: f64,
    pub t: usize,
    pub b_plus: f64,
}

impl OptimState {
    pub fn new(shape: (usize, usize, usize), eta0: f64, b_plus: f64) -> Self {
        let (h, w, c) = shape;
        Self {
            g: Tensor::zeros(h, w, c),
            mu: Tensor::zeros(h, w, c),
            rho: MOMENTUM,
            eta0,
            t: 0,
            b_plus,
        }
    }
}

/// One update, componentwise:
/// `G ← ρG + g²`, `η ← 1/(1/η0 + √G)`, `μ ← ρμ − η g`, `x ← clamp(x + μ, ±B+)`.
pub fn step(x: &mut Tensor, grad: &Tensor, state: &mut OptimState) -> Result<()> {
    x.ensure_same_shape(grad, "gradient")?;
    x.ensure_same_shape(&state.g, "optimizer state")?;
    let (rho, inv_eta0, bound) = (state.rho, 1.0 / state.eta0, state.b_plus);
    let xs = x.data_mut();
    let gs = state.g.data_mut();
    let mus = state.mu.data_mut();
    for i in 0..xs.len() {
        let g = grad.data()[i];
        let prev = gs[i];
        gs[i] = rho * prev + g * g;
        debug_assert!(gs[i] >= 0.0 && gs[i] <= rho * prev + g * g);
        let eta = 1.0 / (inv_eta0 + gs[i].sqrt());
        mus[i] = rho * mus[i] - eta * g;
        xs[i] = (xs[i] + mus[i]).clamp(-bound, bound);
    }
    state.t += 1;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub iters: usize,
    pub finetune_iters: usize,
    pub eta0: f64,
    /// Learning-rate multiplier during fine-tuning.
    pub finetune_factor: f64,
}

impl Schedule {
    /// 300 iterations, plus 50 fine-tuning iterations at a tenth of the rate
    /// when `finetune` is set.
    pub fn standard(eta0: f64, finetune: bool) -> Self {
        Self {
            iters: 300,
            finetune_iters: if finetune { 50 } else { 0 },
            eta0,
            finetune_factor: 0.1,
        }
    }

    pub fn total(&self) -> usize {
        self.iters + self.finetune_iters
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceEntry {
    pub iteration: usize,
    pub energy: f64,
    pub components: Components,
    /// Jitter offset `(τ_1, τ_2)` used for this evaluation.
    pub tau: (usize, usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunReport {
    /// Energy at the iterate before each update.
    pub trace: Vec<TraceEntry>,
    /// Evaluation of the returned pre-image (centred jitter offset).
    pub final_energy: f64,
    pub final_components: Components,
}

impl RunReport {
    pub fn initial_energy(&self) -> Option<f64> {
        self.trace.first().map(|e| e.energy)
    }
}

#[derive(Clone, Debug)]
pub struct RunResult {
    /// The full optimized image, including any jitter margin.
    pub full: Tensor,
    /// The network-input-sized crop at the centred jitter offset.
    pub image: Tensor,
    pub report: RunReport,
}

/// Offset used whenever jitter is switched off: the centre of the margin.
pub fn centred_offset(jitter: usize) -> (usize, usize) {
    let c = jitter.max(1).saturating_sub(1) / 2;
    (c, c)
}

fn check(iteration: usize, energy: f64, components: &Components, grad: &Tensor) -> Result<()> {
    let term = components
        .non_finite()
        .or_else(|| (!energy.is_finite()).then_some("energy"))
        .or_else(|| (!grad.is_finite()).then_some("gradient"));
    match term {
        Some(term) => Err(Error::NonFinite {
            term: term.to_string(),
            iteration,
        }),
        None => Ok(()),
    }
}

/// Runs the main phase with a fresh jitter offset per iteration, then the
/// fine-tuning phase with jitter off and a reduced learning rate. The
/// optimizer state carries over between phases.
///
/// The energy terms are averaged over pixels, while `η0` is sized for
/// per-pixel gradients (a pixel at `B` has `∂R_α = α/B`), so each step uses
/// the gradient of the pixel-summed energy `H W E`.
pub fn run(objective: &Objective, init: &Tensor, schedule: &Schedule, rng: &mut RandomSource) -> Result<RunResult> {
    let t = objective.reg.jitter_amount();
    let centre = centred_offset(t);
    let mut x = init.map(|v| v.clamp(-objective.reg.b_plus, objective.reg.b_plus));
    let mut state = OptimState::new(x.shape(), schedule.eta0, objective.reg.b_plus);
    let area = (x.height() * x.width()) as f64;
    let mut trace = Vec::with_capacity(schedule.total());
    for i in 0..schedule.total() {
        let tau = if i < schedule.iters && t > 1 {
            (rng.below(t), rng.below(t))
        } else {
            centre
        };
        if i == schedule.iters {
            state.eta0 = schedule.eta0 * schedule.finetune_factor;
        }
        let e = eval_objective(&x, objective, tau)?;
        check(i, e.energy, &e.components, &e.grad)?;
        trace.push(TraceEntry {
            iteration: i,
            energy: e.energy,
            components: e.components,
            tau,
        });
        step(&mut x, &e.grad.scale(area), &mut state)?;
    }
    let last = eval_objective(&x, objective, centre)?;
    check(schedule.total(), last.energy, &last.components, &last.grad)?;
    Ok(RunResult {
        image: jitter_apply(&x, centre, t)?,
        full: x,
        report: RunReport {
            trace,
            final_energy: last.energy,
            final_components: last.components,
        },
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitMode {
    Noise,
    Reference,
}

/// Starting image: i.i.d. uniform noise in `[−B, B]`, or a copy of `x0`.
pub fn init_preimage(
    mode: InitMode,
    x0: Option<&Tensor>,
    shape: (usize, usize, usize),
    b: f64,
    rng: &mut RandomSource,
) -> Result<Tensor> {
    match mode {
        InitMode::Noise => Ok(Tensor::fill_noise(shape.0, shape.1, shape.2, b, rng)),
        InitMode::Reference => {
            let x0 = x0.ok_or_else(|| Error::Config("reference initialization needs an image".into()))?;
            if x0.shape() != shape {
                return Err(Error::Shape(format!(
                    "reference image is {:?}, expected {shape:?}",
                    x0.shape()
                )));
            }
            Ok(x0.clone())
        }
    }
}
