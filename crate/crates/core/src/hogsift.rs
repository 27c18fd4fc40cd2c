//! HOG, HOGb and DSIFT written as layer networks, plus a direct scalar
//! implementation used to check them.
//!
//! The network pipeline is: replicate pad, a 3×3 convolution producing
//! `[g_x, g_y, ⟨g, u_0⟩, …, ⟨g, u_{K-1}⟩]`, orientation binning, triangular
//! spatial pooling into cells, block extraction, L2 block normalization,
//! (HOG only) decomposition of blocks back into cells, and clamping.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::layers::{Conv, FilterBank, Layer, Lrn, LrnGroups, ReplicatePad};
use crate::network::{InputSpec, NamedLayer, Network};
use crate::tensor::Tensor;

/// Gradient norms below this are treated as zero.
pub const NORM_FLOOR: f64 = 1e-12;
/// Added to the squared block norm before the square root.
pub const BLOCK_EPSILON: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinningMode {
    Bilinear,
    Hard,
    /// `max{0, ⟨g, u_k⟩ − a‖g‖}` with `a = cos 2π/K`.
    Approx,
}

impl BinningMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            BinningMode::Bilinear => "bilinear",
            BinningMode::Hard => "hard",
            BinningMode::Approx => "approx",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "bilinear" => Some(BinningMode::Bilinear),
            "hard" => Some(BinningMode::Hard),
            "approx" => Some(BinningMode::Approx),
            _ => None,
        }
    }
}

/// Value of one orientation bin given the projection `p = ⟨g, u_k⟩` and `n = ‖g‖`.
fn bin_value(p: f64, n: f64, mode: BinningMode, k: usize) -> f64 {
    if n < NORM_FLOOR {
        return 0.0;
    }
    let k = k as f64;
    match mode {
        BinningMode::Bilinear => {
            let c = (p / n).clamp(-1.0, 1.0);
            n * (1.0 - k / (2.0 * PI) * c.acos()).max(0.0)
        }
        BinningMode::Hard => {
            if p > n * (PI / k).cos() {
                n
            } else {
                0.0
            }
        }
        BinningMode::Approx => (p - (2.0 * PI / k).cos() * n).max(0.0),
    }
}

/// Partial derivatives `(∂h/∂p, ∂h/∂n)` of [`bin_value`].
fn bin_partials(p: f64, n: f64, mode: BinningMode, k: usize) -> (f64, f64) {
    if n < NORM_FLOOR {
        return (0.0, 0.0);
    }
    let k = k as f64;
    match mode {
        BinningMode::Bilinear => {
            let c = (p / n).clamp(-1.0, 1.0);
            let t = 1.0 - k / (2.0 * PI) * c.acos();
            if t <= 0.0 {
                return (0.0, 0.0);
            }
            let s = (1.0 - c * c).sqrt();
            if s < NORM_FLOOR {
                return (0.0, t);
            }
            let dt = k / (2.0 * PI) / s;
            (dt, t - c * dt)
        }
        // The assignment indicator is held constant.
        BinningMode::Hard => {
            if p > n * (PI / k).cos() {
                (0.0, 1.0)
            } else {
                (0.0, 0.0)
            }
        }
        BinningMode::Approx => {
            let a = (2.0 * PI / k).cos();
            if p - a * n > 0.0 {
                (1.0, -a)
            } else {
                (0.0, 0.0)
            }
        }
    }
}

/// Orientation binning on raw projections and a precomputed gradient norm.
pub fn binning(projections: &Tensor, grad_norm: &Tensor, mode: BinningMode) -> Result<Tensor> {
    let (h, w, k) = projections.shape();
    if grad_norm.shape() != (h, w, 1) {
        return Err(Error::Shape(format!(
            "gradient norm must be {h}×{w}×1, got {:?}",
            grad_norm.shape()
        )));
    }
    if k < 2 {
        return Err(Error::Shape("binning needs at least 2 orientation channels".into()));
    }
    Ok(Tensor::from_fn(h, w, k, |v, u, c| {
        bin_value(projections.get(v, u, c), grad_norm.get(v, u, 0), mode, k)
    }))
}

/// Binning layer. Its input has `K + 2` channels: `g_x`, `g_y`, then the `K`
/// directional projections; the gradient norm is computed internally so that
/// the layer is differentiable with respect to all of them.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Binning {
    pub orientations: usize,
    pub mode: BinningMode,
}

impl Binning {
    pub fn new(orientations: usize, mode: BinningMode) -> Result<Self> {
        if orientations < 2 {
            return Err(Error::Config("at least 2 orientations are required".into()));
        }
        Ok(Self { orientations, mode })
    }

    pub fn output_shape(&self, (h, w, c): (usize, usize, usize)) -> Result<(usize, usize, usize)> {
        if c != self.orientations + 2 {
            return Err(Error::Shape(format!(
                "binning with {} orientations expects {} input channels, got {c}",
                self.orientations,
                self.orientations + 2
            )));
        }
        Ok((h, w, self.orientations))
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let (h, w, k) = self.output_shape(input.shape())?;
        let mut out = Tensor::zeros(h, w, k);
        for v in 0..h {
            for u in 0..w {
                let px = input.pixel(v, u);
                let n = px[0].hypot(px[1]);
                for c in 0..k {
                    out.set(v, u, c, bin_value(px[c + 2], n, self.mode, k));
                }
            }
        }
        Ok(out)
    }

    pub fn backward(&self, input: &Tensor, upstream: &Tensor) -> Result<Tensor> {
        let shape = self.output_shape(input.shape())?;
        if upstream.shape() != shape {
            return Err(Error::Shape("binning upstream gradient shape".into()));
        }
        let (h, w, k) = shape;
        let mut grad = Tensor::zeros(h, w, k + 2);
        for v in 0..h {
            for u in 0..w {
                let px = input.pixel(v, u);
                let n = px[0].hypot(px[1]);
                if n < NORM_FLOOR {
                    continue;
                }
                let mut dn = 0.0;
                for c in 0..k {
                    let g = upstream.get(v, u, c);
                    let (dp, dnc) = bin_partials(px[c + 2], n, self.mode, k);
                    grad.set(v, u, c + 2, g * dp);
                    dn += g * dnc;
                }
                grad.set(v, u, 0, dn * px[0] / n);
                grad.set(v, u, 1, dn * px[1] / n);
            }
        }
        Ok(grad)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Hog,
    Hogb,
    Dsift,
}

impl Variant {
    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Hog => "hog",
            Variant::Hogb => "hogb",
            Variant::Dsift => "dsift",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "hog" => Some(Variant::Hog),
            "hogb" => Some(Variant::Hogb),
            "dsift" => Some(Variant::Dsift),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DescriptorConfig {
    pub variant: Variant,
    pub orientations: usize,
    pub cell_size: usize,
    pub block_cells: usize,
    pub clamp_ceiling: f64,
    pub binning: BinningMode,
}

impl DescriptorConfig {
    pub fn new(variant: Variant) -> Self {
        match variant {
            Variant::Hog => Self {
                variant,
                orientations: 18,
                cell_size: 8,
                block_cells: 2,
                clamp_ceiling: 0.2,
                binning: BinningMode::Hard,
            },
            Variant::Hogb => Self {
                binning: BinningMode::Bilinear,
                variant,
                ..Self::new(Variant::Hog)
            },
            Variant::Dsift => Self {
                variant,
                orientations: 8,
                cell_size: 8,
                block_cells: 4,
                clamp_ceiling: 0.2,
                binning: BinningMode::Bilinear,
            },
        }
    }

    pub fn with_cell_size(mut self, cell_size: usize) -> Self {
        self.cell_size = cell_size;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.orientations < 2 {
            return Err(Error::Config("at least 2 orientations are required".into()));
        }
        if self.cell_size == 0 || self.block_cells == 0 {
            return Err(Error::Config("cell size and block size must be positive".into()));
        }
        if self.variant == Variant::Hog && self.block_cells != 2 {
            return Err(Error::Config("HOG cell decomposition needs 2×2 blocks".into()));
        }
        Ok(())
    }

    /// `a = cos 2π/K`, the offset used by approximate binning.
    pub fn offset(&self) -> f64 {
        (2.0 * PI / self.orientations as f64).cos()
    }

    /// Channels of the final descriptor.
    pub fn output_channels(&self) -> usize {
        let b = self.block_cells;
        b * b * self.orientations
    }
}

fn gx_taps() -> [(usize, usize, f64); 2] {
    [(1, 0, -1.0), (1, 2, 1.0)]
}

fn gy_taps() -> [(usize, usize, f64); 2] {
    [(0, 1, -1.0), (2, 1, 1.0)]
}

/// Unit vector `u_k = (cos 2πk/K, sin 2πk/K)`, with exact zeros on the axes.
fn unit(k: usize, orientations: usize) -> (f64, f64) {
    let a = 2.0 * PI * k as f64 / orientations as f64;
    let snap = |x: f64| if x.abs() < 1e-15 { 0.0 } else { x };
    (snap(a.cos()), snap(a.sin()))
}

/// The `K` filters `G_k = cos(2πk/K) G_x + sin(2πk/K) G_y`, as a 3×3×1×K bank.
pub fn directional_filters(orientations: usize) -> Result<FilterBank> {
    if orientations < 2 {
        return Err(Error::Config("at least 2 orientations are required".into()));
    }
    let mut f = FilterBank::zeros(3, 3, 1, orientations);
    for k in 0..orientations {
        let (c, s) = unit(k, orientations);
        for (dv, du, w) in gx_taps() {
            f.set(dv, du, 0, k, f.get(dv, du, 0, k) + c * w);
        }
        for (dv, du, w) in gy_taps() {
            f.set(dv, du, 0, k, f.get(dv, du, 0, k) + s * w);
        }
    }
    Ok(f)
}

/// `[G_x, G_y, G_0, …, G_{K-1}]` as one 3×3×1×(K+2) bank.
fn gradient_filters(orientations: usize) -> Result<FilterBank> {
    let dirs = directional_filters(orientations)?;
    let mut f = FilterBank::zeros(3, 3, 1, orientations + 2);
    for (dv, du, w) in gx_taps() {
        f.set(dv, du, 0, 0, w);
    }
    for (dv, du, w) in gy_taps() {
        f.set(dv, du, 0, 1, w);
    }
    for dv in 0..3 {
        for du in 0..3 {
            for k in 0..orientations {
                f.set(dv, du, 0, k + 2, dirs.get(dv, du, 0, k));
            }
        }
    }
    Ok(f)
}

/// Per-channel image derivatives `(g_x, g_y)` with the descriptor's 3×3
/// operators and replicate boundary.
pub fn image_gradients(image: &Tensor) -> (Tensor, Tensor) {
    let (h, w, c) = image.shape();
    let padded = ReplicatePad { amount: 1 }.forward(image).expect("padding cannot fail");
    let mut gx = Tensor::zeros(h, w, c);
    let mut gy = Tensor::zeros(h, w, c);
    for v in 0..h {
        for u in 0..w {
            for k in 0..c {
                let d = |taps: [(usize, usize, f64); 2]| {
                    taps.iter().map(|&(dv, du, wt)| wt * padded.get(v + dv, u + du, k)).sum::<f64>()
                };
                gx.set(v, u, k, d(gx_taps()));
                gy.set(v, u, k, d(gy_taps()));
            }
        }
    }
    (gx, gy)
}

/// Depthwise triangular pooling: cell `i` collects pixel `p` with weight
/// `max{0, 1 − |p − c_i| / s}` where `c_i = i·s + (s − 1)/2`.
fn cell_pooling(orientations: usize, s: usize) -> Result<Conv> {
    let size = 2 * s - s % 2;
    let pad = s / 2;
    let centre = pad as f64 + (s as f64 - 1.0) / 2.0;
    let tri = |d: usize| (1.0 - (d as f64 - centre).abs() / s as f64).max(0.0);
    let mut f = FilterBank::zeros(size, size, 1, orientations);
    for dv in 0..size {
        for du in 0..size {
            for k in 0..orientations {
                f.set(dv, du, 0, k, tri(dv) * tri(du));
            }
        }
    }
    Conv::grouped(f, vec![0.0; orientations], s, pad, orientations)
}

/// Stacks each `b×b` neighbourhood of cells into one `b²K` vector; output
/// channel `(dv·b + du)·K + k` holds bin `k` of cell `(dv, du)` in the block.
fn block_selection(orientations: usize, b: usize) -> Result<Conv> {
    let k = orientations;
    let mut f = FilterBank::zeros(b, b, k, b * b * k);
    for dv in 0..b {
        for du in 0..b {
            for c in 0..k {
                f.set(dv, du, c, (dv * b + du) * k + c, 1.0);
            }
        }
    }
    Conv::new(f, vec![0.0; b * b * k], 1, 0)
}

/// Gathers, for each cell, its four normalized copies from the 2×2 blocks
/// that contain it. Output channel `(dv·2 + du)·K + k` comes from the block
/// at offset `(dv, du)` relative to the cell's top-left neighbour block.
fn cell_decomposition(orientations: usize) -> Result<Conv> {
    let k = orientations;
    let mut f = FilterBank::zeros(2, 2, 4 * k, 4 * k);
    for dv in 0..2 {
        for du in 0..2 {
            let quadrant = (1 - dv) * 2 + (1 - du);
            for c in 0..k {
                f.set(dv, du, quadrant * k + c, (dv * 2 + du) * k + c, 1.0);
            }
        }
    }
    Conv::new(f, vec![0.0; 4 * k], 1, 0)
}

/// Builds the descriptor as a network over mean-subtracted grayscale images.
/// The builtin networks use a mean of 128.
pub fn build_descriptor_net(config: &DescriptorConfig) -> Result<Network> {
    config.validate()?;
    let k = config.orientations;
    let b = config.block_cells;
    let mut layers = vec![
        ("pad", Layer::Pad(ReplicatePad { amount: 1 })),
        (
            "gradients",
            Layer::Conv(Conv::new(gradient_filters(k)?, vec![0.0; k + 2], 1, 0)?),
        ),
        ("binning", Layer::Binning(Binning::new(k, config.binning)?)),
        ("cells", Layer::Conv(cell_pooling(k, config.cell_size)?)),
        ("blocks", Layer::Conv(block_selection(k, b)?)),
        (
            "norm",
            Layer::Lrn(Lrn::new(LrnGroups::Block(b * b * k), BLOCK_EPSILON, 1.0, 0.5)?),
        ),
    ];
    if config.variant == Variant::Hog {
        layers.push(("cells_out", Layer::Conv(cell_decomposition(k)?)));
    }
    layers.push((
        "clamp",
        Layer::Clamp {
            ceiling: config.clamp_ceiling,
        },
    ));
    Network::new(
        InputSpec::any_size(1, vec![128.0]),
        layers
            .into_iter()
            .map(|(name, layer)| NamedLayer {
                name: name.to_string(),
                layer,
            })
            .collect(),
    )
}

/// Direct scalar computation of the same descriptor, sharing no code with
/// [`build_descriptor_net`]. Orientation bins come from `atan2` rather than
/// projections, and pooling scatters each pixel into its two nearest cells.
pub fn reference_descriptor(image: &Tensor, config: &DescriptorConfig) -> Result<Tensor> {
    config.validate()?;
    let (h, w, ch) = image.shape();
    let s = config.cell_size;
    if ch != 1 {
        return Err(Error::Shape(format!("expected a grayscale image, got {ch} channels")));
    }
    if h % s != 0 || w % s != 0 || h == 0 || w == 0 {
        return Err(Error::Shape(format!(
            "image size {h}×{w} is not a multiple of the cell size {s}"
        )));
    }
    let k = config.orientations;
    let (hc, wc) = (h / s, w / s);
    let px = |v: isize, u: isize| {
        let v = v.clamp(0, h as isize - 1) as usize;
        let u = u.clamp(0, w as isize - 1) as usize;
        image.get(v, u, 0)
    };

    let mut cells = vec![0.0; hc * wc * k];
    let mut bins = vec![0.0; k];
    for v in 0..h {
        for u in 0..w {
            let (vi, ui) = (v as isize, u as isize);
            let gx = px(vi, ui + 1) - px(vi, ui - 1);
            let gy = px(vi + 1, ui) - px(vi - 1, ui);
            let n = (gx * gx + gy * gy).sqrt();
            if n < NORM_FLOOR {
                continue;
            }
            bins.iter_mut().for_each(|x| *x = 0.0);
            let t = (gy.atan2(gx) / (2.0 * PI) * k as f64).rem_euclid(k as f64);
            match config.binning {
                BinningMode::Bilinear => {
                    let b0 = t.floor();
                    let f = t - b0;
                    let b0 = b0 as usize % k;
                    bins[b0] += n * (1.0 - f);
                    bins[(b0 + 1) % k] += n * f;
                }
                BinningMode::Hard => bins[t.round() as usize % k] += n,
                BinningMode::Approx => {
                    let a = (2.0 * PI / k as f64).cos();
                    for (b, x) in bins.iter_mut().enumerate() {
                        let d = t - b as f64;
                        *x = n * ((2.0 * PI * d / k as f64).cos() - a).max(0.0);
                    }
                }
            }
            let split = |p: usize, count: usize| {
                let f = (p as f64 + 0.5) / s as f64 - 0.5;
                let i0 = f.floor();
                let a = f - i0;
                let i0 = i0 as isize;
                [(i0, 1.0 - a), (i0 + 1, a)]
                    .into_iter()
                    .filter(move |(i, _)| *i >= 0 && (*i as usize) < count)
            };
            for (cv, wv) in split(v, hc) {
                for (cu, wu) in split(u, wc) {
                    let base = (cv as usize * wc + cu as usize) * k;
                    for b in 0..k {
                        cells[base + b] += wv * wu * bins[b];
                    }
                }
            }
        }
    }

    let nb = config.block_cells;
    if hc < nb || wc < nb {
        return Err(Error::Shape("image is smaller than one block".into()));
    }
    let (hb, wb) = (hc - nb + 1, wc - nb + 1);
    let dim = nb * nb * k;
    let mut blocks = vec![0.0; hb * wb * dim];
    for bv in 0..hb {
        for bu in 0..wb {
            let out = &mut blocks[(bv * wb + bu) * dim..][..dim];
            let mut i = 0;
            for dv in 0..nb {
                for du in 0..nb {
                    for b in 0..k {
                        out[i] = cells[((bv + dv) * wc + bu + du) * k + b];
                        i += 1;
                    }
                }
            }
            let norm = (BLOCK_EPSILON + out.iter().map(|x| x * x).sum::<f64>()).sqrt();
            out.iter_mut().for_each(|x| *x /= norm);
        }
    }

    let ceiling = config.clamp_ceiling;
    if config.variant != Variant::Hog {
        let data = blocks.into_iter().map(|x| x.min(ceiling)).collect();
        return Tensor::from_vec(hb, wb, dim, data);
    }
    // Cell (i + 1, j + 1) sits in blocks (i + dv, j + du) at quadrant (1 − dv, 1 − du).
    let (ho, wo) = (hb - 1, wb - 1);
    Ok(Tensor::from_fn(ho, wo, 4 * k, |i, j, c| {
        let (offset, b) = (c / k, c % k);
        let (dv, du) = (offset / 2, offset % 2);
        let quadrant = (1 - dv) * 2 + (1 - du);
        blocks[((i + dv) * wb + j + du) * dim + quadrant * k + b].min(ceiling)
    }))
}
