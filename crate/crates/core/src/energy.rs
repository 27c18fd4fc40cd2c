//! The pre-image energy: a data term comparing the network's code with a
//! target, bounded-range and TV regularizers, optional texture terms, and
//! random jitter of the image.

use crate::error::{Error, Result};
use crate::network::Network;
use crate::tensor::Tensor;

/// Data-term weight used when `C = ∞`, i.e. when the regularizers are dropped.
pub const UNREGULARIZED_WEIGHT: f64 = 100.0;
/// Smoothing inside the square root of the `β = 1` TV norm.
pub const TV_EPSILON: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegularizerConfig {
    /// Data-term weight. `f64::INFINITY` disables both regularizers.
    pub c: f64,
    pub alpha: f64,
    pub beta: f64,
    /// Typical pixel norm.
    pub b: f64,
    /// Hard bound enforced by the optimizer's projection.
    pub b_plus: f64,
    /// Typical gradient norm.
    pub v: f64,
    /// Jitter amount `T`; 0 and 1 both mean no jitter.
    pub jitter: usize,
}

impl Default for RegularizerConfig {
    fn default() -> Self {
        Self::with_b(80.0)
    }
}

impl RegularizerConfig {
    /// Defaults scaled to a typical pixel norm `b`: `C = 1`, `α = 6`, `β = 2`,
    /// `B+ = 2B`, `V = B / 6.5`, no jitter.
    pub fn with_b(b: f64) -> Self {
        Self {
            c: 1.0,
            alpha: 6.0,
            beta: 2.0,
            b,
            b_plus: 2.0 * b,
            v: b / 6.5,
            jitter: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.alpha > 1.0) {
            return fail("alpha must exceed 1");
        }
        if !(self.beta >= 1.0) {
            return fail("beta must be at least 1");
        }
        if !(self.b > 0.0 && self.b.is_finite()) {
            return fail("B must be positive");
        }
        if !(self.b_plus >= self.b) {
            return fail("B+ must be at least B");
        }
        if !(self.v > 0.0 && self.v.is_finite()) {
            return fail("V must be positive");
        }
        if !(self.c > 0.0) {
            return fail("C must be positive");
        }
        Ok(())
    }

    pub fn unregularized(&self) -> bool {
        self.c == f64::INFINITY
    }

    /// Effective jitter amount (at least 1).
    pub fn jitter_amount(&self) -> usize {
        self.jitter.max(1)
    }
}

/// `round(stride / 4)`, at least 1.
pub fn default_jitter(stride: usize) -> usize {
    ((stride as f64 / 4.0).round() as usize).max(1)
}

fn masked_norm_sq(t: &Tensor, mask: Option<&Tensor>) -> Result<f64> {
    Ok(match mask {
        None => t.norm_sq(),
        Some(m) => t.mul(m)?.norm_sq(),
    })
}

/// `‖(code − Φ0) ⊙ M‖² / ‖Φ0 ⊙ M‖²` and its gradient with respect to `code`.
pub fn loss_inversion(code: &Tensor, phi0: &Tensor, mask: Option<&Tensor>) -> Result<(f64, Tensor)> {
    code.ensure_same_shape(phi0, "code and target")?;
    if let Some(m) = mask {
        m.ensure_same_shape(phi0, "mask and target")?;
    }
    let denom = masked_norm_sq(phi0, mask)?;
    if denom == 0.0 {
        return Err(Error::DegenerateTarget("target code has zero norm under the mask".into()));
    }
    let mut diff = code.sub(phi0)?;
    if let Some(m) = mask {
        diff = diff.mul(m)?;
    }
    let value = diff.norm_sq() / denom;
    Ok((value, diff.scale(2.0 / denom)))
}

/// `−⟨code, Φ0⟩ / Z` and its gradient.
pub fn loss_dot(code: &Tensor, phi0: &Tensor, z: f64) -> Result<(f64, Tensor)> {
    code.ensure_same_shape(phi0, "code and target")?;
    if !(z > 0.0) {
        return Err(Error::DegenerateTarget(format!("normalizer Z = {z} must be positive")));
    }
    Ok((-code.dot(phi0)? / z, phi0.scale(-1.0 / z)))
}

/// `N_α(x) = (1 / (H W B^α)) Σ_{v,u} ‖x(v,u,:)‖^α`, its gradient, and whether
/// every pixel norm is within `b_plus`.
pub fn reg_bounded_range(x: &Tensor, alpha: f64, b: f64, b_plus: f64) -> (f64, Tensor, bool) {
    let (h, w, c) = x.shape();
    let norm = 1.0 / ((h * w) as f64 * b.powf(alpha));
    let mut value = 0.0;
    let mut feasible = true;
    let mut grad = Tensor::zeros(h, w, c);
    for (px, g) in x.data().chunks(c).zip(grad.data_mut().chunks_mut(c)) {
        let s: f64 = px.iter().map(|v| v * v).sum();
        if s.sqrt() > b_plus {
            feasible = false;
        }
        if s == 0.0 {
            continue;
        }
        value += s.powf(alpha / 2.0);
        let d = norm * alpha * s.powf(alpha / 2.0 - 1.0);
        for (gk, xk) in g.iter_mut().zip(px) {
            *gk = d * xk;
        }
    }
    (norm * value, grad, feasible)
}

/// `(1 / (H W V^β)) Σ ((x(v,u+1) − x(v,u))² + (x(v+1,u) − x(v,u))²)^{β/2}` with
/// differences past the border taken as zero, and its gradient. For `β = 1`
/// the square root is smoothed by [`TV_EPSILON`].
pub fn reg_tv(x: &Tensor, beta: f64, v: f64) -> (f64, Tensor) {
    let (h, w, c) = x.shape();
    let norm = 1.0 / ((h * w) as f64 * v.powf(beta));
    let eps = if beta == 1.0 { TV_EPSILON } else { 0.0 };
    let mut value = 0.0;
    let mut grad = Tensor::zeros(h, w, c);
    for i in 0..h {
        for j in 0..w {
            for k in 0..c {
                let here = x.get(i, j, k);
                let dx = if j + 1 < w { x.get(i, j + 1, k) - here } else { 0.0 };
                let dy = if i + 1 < h { x.get(i + 1, j, k) - here } else { 0.0 };
                let r = dx * dx + dy * dy + eps;
                if r == 0.0 {
                    continue;
                }
                value += r.powf(beta / 2.0);
                let d = norm * beta * r.powf(beta / 2.0 - 1.0);
                let g = grad.data_mut();
                if j + 1 < w {
                    g[x.index(i, j + 1, k)] += d * dx;
                }
                if i + 1 < h {
                    g[x.index(i + 1, j, k)] += d * dy;
                }
                g[x.index(i, j, k)] -= d * (dx + dy);
            }
        }
    }
    (norm * value, grad)
}

fn check_jitter(x: &Tensor, tau: (usize, usize), t: usize) -> Result<(usize, usize)> {
    if t == 0 {
        return Err(Error::Config("jitter amount must be at least 1".into()));
    }
    if tau.0 >= t || tau.1 >= t {
        return Err(Error::Config(format!("jitter offset {tau:?} outside 0..{t}")));
    }
    if x.height() < t || x.width() < t {
        return Err(Error::Config(format!(
            "image {}×{} is too small for jitter {t}",
            x.height(),
            x.width()
        )));
    }
    Ok((x.height() - t + 1, x.width() - t + 1))
}

/// `jitter(x; τ)(v, u) = x(v + τ_2, u + τ_1)`, cropped to `(H − T + 1) × (W − T + 1)`.
/// `tau` is `(τ_1, τ_2)`: horizontal then vertical.
pub fn jitter_apply(x: &Tensor, tau: (usize, usize), t: usize) -> Result<Tensor> {
    let (h, w) = check_jitter(x, tau, t)?;
    x.crop(tau.1, tau.0, h, w)
}

/// Adjoint of [`jitter_apply`]: scatters a crop-shaped gradient back into `x`'s shape.
pub fn jitter_backward(x: &Tensor, tau: (usize, usize), t: usize, grad: &Tensor) -> Result<Tensor> {
    check_jitter(x, tau, t)?;
    let mut out = Tensor::zeros(x.height(), x.width(), x.channels());
    out.add_window(tau.1, tau.0, grad)?;
    Ok(out)
}

/// Channel Gram matrix `[ψ(Φ)]_{cc'} = Σ_{v,u} Φ(v,u,c) Φ(v,u,c')`, row-major `C × C`.
pub fn texture_correlation(features: &Tensor) -> Vec<f64> {
    let c = features.channels();
    let mut gram = vec![0.0; c * c];
    for px in features.data().chunks(c) {
        for a in 0..c {
            if px[a] == 0.0 {
                continue;
            }
            for b in a..c {
                gram[a * c + b] += px[a] * px[b];
            }
        }
    }
    for a in 0..c {
        for b in 0..a {
            gram[a * c + b] = gram[b * c + a];
        }
    }
    gram
}

/// One `w_l ‖ψ(Φ_l(x)) − ψ(Φ_l(x_tex))‖²_F` term.
#[derive(Clone, Debug, PartialEq)]
pub struct TextureTerm {
    pub layer: usize,
    pub weight: f64,
    pub target: Vec<f64>,
}

impl TextureTerm {
    pub fn from_image(network: &Network, layer: usize, weight: f64, texture: &Tensor) -> Result<Self> {
        Ok(Self {
            layer,
            weight,
            target: texture_correlation(&network.output(texture, layer)?),
        })
    }

    /// Value and gradient with respect to the layer's features.
    pub fn evaluate(&self, features: &Tensor) -> Result<(f64, Tensor)> {
        let c = features.channels();
        if self.target.len() != c * c {
            return Err(Error::Shape(format!(
                "texture target is for {} channels, features have {c}",
                (self.target.len() as f64).sqrt()
            )));
        }
        let diff: Vec<f64> = texture_correlation(features)
            .iter()
            .zip(&self.target)
            .map(|(g, t)| g - t)
            .collect();
        let value = self.weight * diff.iter().map(|d| d * d).sum::<f64>();
        let mut grad = Tensor::zeros(features.height(), features.width(), c);
        for (px, g) in features.data().chunks(c).zip(grad.data_mut().chunks_mut(c)) {
            for a in 0..c {
                let row = &diff[a * c..(a + 1) * c];
                g[a] = 4.0 * self.weight * row.iter().zip(px).map(|(d, p)| d * p).sum::<f64>();
            }
        }
        Ok((value, grad))
    }
}

/// Sum of texture terms at the image `x` (no jitter), with gradient.
pub fn reg_texture(x: &Tensor, network: &Network, terms: &[TextureTerm]) -> Result<(f64, Tensor)> {
    let Some(deepest) = terms.iter().map(|t| t.layer).max() else {
        return Ok((0.0, Tensor::zeros(x.height(), x.width(), x.channels())));
    };
    if deepest >= network.len() {
        return Err(Error::Config(format!("texture layer index {deepest} out of range")));
    }
    let acts = network.forward(x, deepest)?;
    let mut value = 0.0;
    let mut grads = Vec::with_capacity(terms.len());
    for t in terms {
        let (v, g) = t.evaluate(&acts[t.layer + 1])?;
        value += v;
        grads.push((t.layer, g));
    }
    let injections: Vec<_> = grads.iter().map(|(l, g)| (*l, g)).collect();
    Ok((value, network.backward(&acts, &injections)?))
}

#[derive(Clone, Debug, PartialEq)]
pub enum Loss {
    /// Reconstruction of a target code, optionally restricted by a 0/1 mask.
    Inversion { target: Tensor, mask: Option<Tensor> },
    /// Inner product with a weight vector, normalized by `Z`.
    Dot { target: Tensor, z: f64 },
}

impl Loss {
    pub fn target(&self) -> &Tensor {
        match self {
            Loss::Inversion { target, .. } | Loss::Dot { target, .. } => target,
        }
    }

    pub fn evaluate(&self, code: &Tensor) -> Result<(f64, Tensor)> {
        match self {
            Loss::Inversion { target, mask } => loss_inversion(code, target, mask.as_ref()),
            Loss::Dot { target, z } => loss_dot(code, target, *z),
        }
    }
}

/// Loss applied at the output of one network layer.
#[derive(Clone, Debug, PartialEq)]
pub struct DataTerm {
    pub layer: usize,
    pub loss: Loss,
}

#[derive(Clone, Debug)]
pub struct Objective<'a> {
    pub network: &'a Network,
    pub data: Option<DataTerm>,
    pub reg: RegularizerConfig,
    pub texture: Vec<TextureTerm>,
}

/// Per-term values of one evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Components {
    pub range: f64,
    pub tv: f64,
    /// The raw loss `ℓ`.
    pub loss: f64,
    /// The weighted data term, `C · ℓ`.
    pub data: f64,
    pub texture: f64,
    /// Every pixel norm within `B+`.
    pub feasible: bool,
}

impl Components {
    /// Name of the first non-finite term, if any.
    pub fn non_finite(&self) -> Option<&'static str> {
        [
            ("range", self.range),
            ("tv", self.tv),
            ("loss", self.loss),
            ("data", self.data),
            ("texture", self.texture),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub energy: f64,
    pub grad: Tensor,
    pub components: Components,
}

impl<'a> Objective<'a> {
    pub fn new(network: &'a Network, data: Option<DataTerm>, reg: RegularizerConfig) -> Result<Self> {
        reg.validate()?;
        if let Some(d) = &data {
            if d.layer >= network.len() {
                return Err(Error::Config(format!("layer index {} out of range", d.layer)));
            }
        }
        Ok(Self {
            network,
            data,
            reg,
            texture: Vec::new(),
        })
    }

    pub fn with_texture(mut self, terms: Vec<TextureTerm>) -> Result<Self> {
        if let Some(t) = terms.iter().find(|t| t.layer >= self.network.len()) {
            return Err(Error::Config(format!("texture layer index {} out of range", t.layer)));
        }
        self.texture = terms;
        Ok(self)
    }

    /// Weight applied to the loss.
    pub fn data_weight(&self) -> f64 {
        if self.reg.unregularized() {
            UNREGULARIZED_WEIGHT
        } else {
            self.reg.c
        }
    }

    /// Pre-image size for a network input of `h × w`, including the jitter margin.
    pub fn image_size(&self, h: usize, w: usize) -> (usize, usize) {
        let t = self.reg.jitter_amount();
        (h + t - 1, w + t - 1)
    }
}

/// Energy and gradient at `x` with the jitter offset `tau` (`(τ_1, τ_2)`).
pub fn eval_objective(x: &Tensor, obj: &Objective, tau: (usize, usize)) -> Result<Evaluation> {
    let reg = &obj.reg;
    let mut comp = Components::default();
    let (mut energy, mut grad) = if reg.unregularized() {
        let (_, _, feasible) = reg_bounded_range(x, reg.alpha, reg.b, reg.b_plus);
        comp.feasible = feasible;
        (0.0, Tensor::zeros(x.height(), x.width(), x.channels()))
    } else {
        let (range, mut g, feasible) = reg_bounded_range(x, reg.alpha, reg.b, reg.b_plus);
        let (tv, gtv) = reg_tv(x, reg.beta, reg.v);
        g.axpy(1.0, &gtv)?;
        comp.range = range;
        comp.tv = tv;
        comp.feasible = feasible;
        (range + tv, g)
    };

    let deepest = obj
        .data
        .iter()
        .map(|d| d.layer)
        .chain(obj.texture.iter().map(|t| t.layer))
        .max();
    if let Some(deepest) = deepest {
        let t = reg.jitter_amount();
        let xj = jitter_apply(x, tau, t)?;
        let acts = obj.network.forward(&xj, deepest)?;
        let mut injections = Vec::new();
        if let Some(d) = &obj.data {
            let (loss, g) = d.loss.evaluate(&acts[d.layer + 1])?;
            let wgt = obj.data_weight();
            comp.loss = loss;
            comp.data = wgt * loss;
            energy += comp.data;
            injections.push((d.layer, g.scale(wgt)));
        }
        for term in &obj.texture {
            let (v, g) = term.evaluate(&acts[term.layer + 1])?;
            comp.texture += v;
            energy += v;
            injections.push((term.layer, g));
        }
        let refs: Vec<_> = injections.iter().map(|(l, g)| (*l, g)).collect();
        let gj = obj.network.backward(&acts, &refs)?;
        grad.axpy(1.0, &jitter_backward(x, tau, t, &gj)?)?;
    }
    Ok(Evaluation {
        energy,
        grad,
        components: comp,
    })
}

/// Normalizer `Z = M ρ²` for maximizing a unit with receptive field `ρ` and
/// activation range estimate `M`.
pub fn activation_normalizer(range: f64, rf_size: usize) -> f64 {
    range * (rf_size * rf_size) as f64
}

/// Range estimate `M = ⟨|w|, Φ(x_noise)⟩` for a template `w`.
pub fn template_range(template: &Tensor, noise_code: &Tensor) -> Result<f64> {
    template.map(f64::abs).dot(noise_code)
}

/// One-hot target selecting channel `unit` at the centre of an `h × w` code.
pub fn unit_target(h: usize, w: usize, channels: usize, unit: usize) -> Result<Tensor> {
    if unit >= channels {
        return Err(Error::Bounds(format!("unit {unit} outside 0..{channels}")));
    }
    let mut t = Tensor::zeros(h, w, channels);
    t.set(h / 2, w / 2, unit, 1.0);
    Ok(t)
}

/// Caricature target `max{0, Φ(x0)}` and its normalizer `‖Φ0‖²`.
pub fn caricature_target(code: &Tensor) -> Result<(Tensor, f64)> {
    let target = code.map(|v| v.max(0.0));
    let z = target.norm_sq();
    if z == 0.0 {
        return Err(Error::DegenerateTarget(
            "the reference image has no positive activations at this layer".into(),
        ));
    }
    Ok((target, z))
}

/// Data-term weight for inverting a CNN layer, following the depth schedule
/// 300 / 100 / 20 / 1. Recognizes AlexNet-style (`relu3`, `relu4`, `relu5`)
/// and VGG-VD-style (`pool4`, `relu5_1`, `relu5_3`) layer names; returns
/// `None` for other architectures.
pub fn c_schedule(names: &[String], layer: usize) -> Option<f64> {
    let pos = |n: &str| names.iter().position(|x| x == n);
    let bounds = match (pos("relu3"), pos("relu4"), pos("relu5")) {
        (Some(a), Some(b), Some(c)) => [a, b, c],
        _ => [pos("pool4")?, pos("relu5_1")?, pos("relu5_3")?],
    };
    let c = [300.0, 100.0, 20.0]
        .into_iter()
        .zip(bounds)
        .find(|(_, end)| layer <= *end)
        .map_or(1.0, |(c, _)| c);
    Some(c)
}
