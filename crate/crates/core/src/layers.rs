//! Differentiable layer primitives.
//!
//! Every layer exposes a forward map and a backward map that returns the
//! vector–Jacobian product with respect to the layer input. Weights are fixed:
//! pre-image search never trains, so no parameter gradients are computed.

use crate::error::{Error, Result};
use crate::hogsift::Binning;
use crate::tensor::Tensor;

/// Convolution filters of shape `fh × fw × inputs × outputs`, stored with the
/// output index innermost.
#[derive(Clone, Debug, PartialEq)]
pub struct FilterBank {
    height: usize,
    width: usize,
    inputs: usize,
    outputs: usize,
    data: Vec<f64>,
}

impl FilterBank {
    pub fn zeros(height: usize, width: usize, inputs: usize, outputs: usize) -> Self {
        Self {
            height,
            width,
            inputs,
            outputs,
            data: vec![0.0; height * width * inputs * outputs],
        }
    }

    pub fn from_vec(
        height: usize,
        width: usize,
        inputs: usize,
        outputs: usize,
        data: Vec<f64>,
    ) -> Result<Self> {
        if data.len() != height * width * inputs * outputs {
            return Err(Error::Shape(format!(
                "{} values cannot fill a {height}x{width}x{inputs}x{outputs} filter bank",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            inputs,
            outputs,
            data,
        })
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.height, self.width, self.inputs, self.outputs]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn index(&self, dv: usize, du: usize, k: usize, o: usize) -> usize {
        ((dv * self.width + du) * self.inputs + k) * self.outputs + o
    }

    #[inline]
    pub fn get(&self, dv: usize, du: usize, k: usize, o: usize) -> f64 {
        self.data[self.index(dv, du, k, o)]
    }

    #[inline]
    pub fn set(&mut self, dv: usize, du: usize, k: usize, o: usize, value: f64) {
        let i = self.index(dv, du, k, o);
        self.data[i] = value;
    }
}

#[derive(Clone, Copy, Debug)]
struct Tap {
    dv: usize,
    du: usize,
    k: usize,
    weight: f64,
}

/// Linear filtering with zero padding. Fully connected layers are convolutions
/// whose support equals the input size.
#[derive(Clone, Debug)]
pub struct Conv {
    filters: FilterBank,
    bias: Vec<f64>,
    stride: usize,
    pad: usize,
    groups: usize,
    // Per-output-channel nonzero taps in (dv, du, k) order; only kept for
    // mostly-zero filter banks such as the descriptor selection filters.
    sparse: Option<Vec<Vec<Tap>>>,
}

impl Conv {
    pub fn new(filters: FilterBank, bias: Vec<f64>, stride: usize, pad: usize) -> Result<Self> {
        Self::grouped(filters, bias, stride, pad, 1)
    }

    /// Grouped convolution: input and output channels are split into `groups`
    /// equal slices and slice `g` of the output only sees slice `g` of the input.
    /// The filter bank's input dimension is the per-group input count.
    pub fn grouped(
        filters: FilterBank,
        bias: Vec<f64>,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Result<Self> {
        if stride == 0 {
            return Err(Error::Config("convolution stride must be at least 1".into()));
        }
        if groups == 0 || filters.outputs % groups != 0 {
            return Err(Error::Config(format!(
                "{} output channels cannot be split into {groups} groups",
                filters.outputs
            )));
        }
        if bias.len() != filters.outputs {
            return Err(Error::Shape(format!(
                "bias has {} entries for {} filters",
                bias.len(),
                filters.outputs
            )));
        }
        let nonzero = filters.data.iter().filter(|w| **w != 0.0).count();
        let sparse = (nonzero * 4 < filters.data.len()).then(|| {
            (0..filters.outputs)
                .map(|o| {
                    let mut taps = Vec::new();
                    for dv in 0..filters.height {
                        for du in 0..filters.width {
                            for k in 0..filters.inputs {
                                let weight = filters.get(dv, du, k, o);
                                if weight != 0.0 {
                                    taps.push(Tap { dv, du, k, weight });
                                }
                            }
                        }
                    }
                    taps
                })
                .collect()
        });
        Ok(Self {
            filters,
            bias,
            stride,
            pad,
            groups,
            sparse,
        })
    }

    pub fn filters(&self) -> &FilterBank {
        &self.filters
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn pad(&self) -> usize {
        self.pad
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn input_channels(&self) -> usize {
        self.filters.inputs * self.groups
    }

    pub fn output_channels(&self) -> usize {
        self.filters.outputs
    }

    pub fn output_shape(&self, (h, w, c): (usize, usize, usize)) -> Result<(usize, usize, usize)> {
        if c != self.input_channels() {
            return Err(Error::Shape(format!(
                "convolution expects {} input channels, got {c}",
                self.input_channels()
            )));
        }
        let oh = window_count(h, self.filters.height, self.stride, self.pad)?;
        let ow = window_count(w, self.filters.width, self.stride, self.pad)?;
        Ok((oh, ow, self.filters.outputs))
    }

    #[inline]
    fn source(&self, out: usize, tap: usize, limit: usize) -> Option<usize> {
        (out * self.stride + tap)
            .checked_sub(self.pad)
            .filter(|&i| i < limit)
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let (oh, ow, oc) = self.output_shape(input.shape())?;
        let (h, w, _) = input.shape();
        let f = &self.filters;
        let cin_g = f.inputs;
        let cout_g = oc / self.groups;
        let mut out = Tensor::zeros(oh, ow, oc);
        let od = out.data_mut();
        let x = input.data();
        let cin = input.channels();
        for v in 0..oh {
            for u in 0..ow {
                let base = (v * ow + u) * oc;
                let acc = &mut od[base..base + oc];
                acc.copy_from_slice(&self.bias);
                if let Some(sparse) = &self.sparse {
                    for (o, taps) in sparse.iter().enumerate() {
                        let g = o / cout_g;
                        let mut a = acc[o];
                        for t in taps {
                            let (Some(iv), Some(iu)) =
                                (self.source(v, t.dv, h), self.source(u, t.du, w))
                            else {
                                continue;
                            };
                            a += x[(iv * w + iu) * cin + g * cin_g + t.k] * t.weight;
                        }
                        acc[o] = a;
                    }
                    continue;
                }
                for dv in 0..f.height {
                    let Some(iv) = self.source(v, dv, h) else { continue };
                    for du in 0..f.width {
                        let Some(iu) = self.source(u, du, w) else { continue };
                        let px = &x[(iv * w + iu) * cin..(iv * w + iu + 1) * cin];
                        for g in 0..self.groups {
                            let acc_g = &mut acc[g * cout_g..(g + 1) * cout_g];
                            for kk in 0..cin_g {
                                let xv = px[g * cin_g + kk];
                                if xv == 0.0 {
                                    continue;
                                }
                                let fi = f.index(dv, du, kk, g * cout_g);
                                for (a, wt) in acc_g.iter_mut().zip(&f.data[fi..fi + cout_g]) {
                                    *a += xv * wt;
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn backward(&self, input: &Tensor, upstream: &Tensor) -> Result<Tensor> {
        let (oh, ow, oc) = self.output_shape(input.shape())?;
        if upstream.shape() != (oh, ow, oc) {
            return Err(Error::Shape(format!(
                "convolution upstream gradient {:?}, expected {:?}",
                upstream.shape(),
                (oh, ow, oc)
            )));
        }
        let (h, w, cin) = input.shape();
        let f = &self.filters;
        let cin_g = f.inputs;
        let cout_g = oc / self.groups;
        let mut grad = Tensor::zeros(h, w, cin);
        let gd = grad.data_mut();
        let gy = upstream.data();
        for v in 0..oh {
            for u in 0..ow {
                let gout = &gy[(v * ow + u) * oc..(v * ow + u + 1) * oc];
                if let Some(sparse) = &self.sparse {
                    for (o, taps) in sparse.iter().enumerate() {
                        let go = gout[o];
                        if go == 0.0 {
                            continue;
                        }
                        let g = o / cout_g;
                        for t in taps {
                            let (Some(iv), Some(iu)) =
                                (self.source(v, t.dv, h), self.source(u, t.du, w))
                            else {
                                continue;
                            };
                            gd[(iv * w + iu) * cin + g * cin_g + t.k] += go * t.weight;
                        }
                    }
                    continue;
                }
                for dv in 0..f.height {
                    let Some(iv) = self.source(v, dv, h) else { continue };
                    for du in 0..f.width {
                        let Some(iu) = self.source(u, du, w) else { continue };
                        let base = (iv * w + iu) * cin;
                        for g in 0..self.groups {
                            let go = &gout[g * cout_g..(g + 1) * cout_g];
                            for kk in 0..cin_g {
                                let fi = f.index(dv, du, kk, g * cout_g);
                                let s: f64 = go
                                    .iter()
                                    .zip(&f.data[fi..fi + cout_g])
                                    .map(|(a, b)| a * b)
                                    .sum();
                                gd[base + g * cin_g + kk] += s;
                            }
                        }
                    }
                }
            }
        }
        Ok(grad)
    }
}

fn window_count(size: usize, window: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = size + 2 * pad;
    if window == 0 || padded < window {
        return Err(Error::Shape(format!(
            "window {window} does not fit input of size {size} with padding {pad}"
        )));
    }
    Ok((padded - window) / stride + 1)
}

/// Spatial max pooling; padded positions behave as −∞.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaxPool {
    pub window: usize,
    pub stride: usize,
    pub pad: usize,
}

impl MaxPool {
    pub fn output_shape(&self, (h, w, c): (usize, usize, usize)) -> Result<(usize, usize, usize)> {
        if self.stride == 0 {
            return Err(Error::Config("pooling stride must be at least 1".into()));
        }
        Ok((
            window_count(h, self.window, self.stride, self.pad)?,
            window_count(w, self.window, self.stride, self.pad)?,
            c,
        ))
    }

    // Row-major scan of the window, first maximum wins.
    fn argmax(&self, input: &Tensor, v: usize, u: usize, k: usize) -> Option<(usize, usize)> {
        let (h, w, _) = input.shape();
        let mut best: Option<(usize, usize, f64)> = None;
        for dv in 0..self.window {
            let Some(iv) = (v * self.stride + dv).checked_sub(self.pad).filter(|&i| i < h) else {
                continue;
            };
            for du in 0..self.window {
                let Some(iu) = (u * self.stride + du).checked_sub(self.pad).filter(|&i| i < w)
                else {
                    continue;
                };
                let x = input.get(iv, iu, k);
                if best.is_none_or(|(_, _, b)| x > b) {
                    best = Some((iv, iu, x));
                }
            }
        }
        best.map(|(iv, iu, _)| (iv, iu))
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let (oh, ow, c) = self.output_shape(input.shape())?;
        let mut out = Tensor::zeros(oh, ow, c);
        for v in 0..oh {
            for u in 0..ow {
                for k in 0..c {
                    let value = match self.argmax(input, v, u, k) {
                        Some((iv, iu)) => input.get(iv, iu, k),
                        None => f64::NEG_INFINITY,
                    };
                    out.set(v, u, k, value);
                }
            }
        }
        Ok(out)
    }

    pub fn backward(&self, input: &Tensor, upstream: &Tensor) -> Result<Tensor> {
        let shape = self.output_shape(input.shape())?;
        if upstream.shape() != shape {
            return Err(Error::Shape("max-pool upstream gradient shape".into()));
        }
        let (h, w, c) = input.shape();
        let mut grad = Tensor::zeros(h, w, c);
        for v in 0..shape.0 {
            for u in 0..shape.1 {
                for k in 0..c {
                    if let Some((iv, iu)) = self.argmax(input, v, u, k) {
                        let i = grad.index(iv, iu, k);
                        grad.data_mut()[i] += upstream.get(v, u, k);
                    }
                }
            }
        }
        Ok(grad)
    }
}

/// Which channels enter the normalizer of channel `k`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LrnGroups {
    /// Sliding window of `n` neighbouring channels centred on `k` (clipped at the ends).
    Window(usize),
    /// Contiguous blocks of `n` channels; `k` is normalized over its own block.
    Block(usize),
}

impl LrnGroups {
    fn range(&self, k: usize, channels: usize) -> std::ops::Range<usize> {
        match *self {
            LrnGroups::Window(n) => {
                let lo = k.saturating_sub((n - 1) / 2);
                let hi = (k + n / 2 + 1).min(channels);
                lo..hi
            }
            LrnGroups::Block(n) => {
                let lo = k / n * n;
                lo..(lo + n).min(channels)
            }
        }
    }
}

/// Local response normalization
/// `y_k = x_k / (kappa + alpha · Σ_{j ∈ G(k)} x_j²)^beta`.
///
/// L2 block normalization is the special case `kappa = ε`, `alpha = 1`,
/// `beta = 1/2` with block groups.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Lrn {
    pub groups: LrnGroups,
    pub kappa: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl Lrn {
    pub fn new(groups: LrnGroups, kappa: f64, alpha: f64, beta: f64) -> Result<Self> {
        let n = match groups {
            LrnGroups::Window(n) | LrnGroups::Block(n) => n,
        };
        if n == 0 {
            return Err(Error::Config("normalization group is empty".into()));
        }
        Ok(Self {
            groups,
            kappa,
            alpha,
            beta,
        })
    }

    fn denominators(&self, px: &[f64]) -> Vec<f64> {
        let c = px.len();
        (0..c)
            .map(|k| {
                let ss: f64 = px[self.groups.range(k, c)].iter().map(|x| x * x).sum();
                self.kappa + self.alpha * ss
            })
            .collect()
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let (h, w, c) = input.shape();
        let mut out = Tensor::zeros(h, w, c);
        for v in 0..h {
            for u in 0..w {
                let px = input.pixel(v, u);
                let d = self.denominators(px);
                for k in 0..c {
                    out.set(v, u, k, px[k] * d[k].powf(-self.beta));
                }
            }
        }
        Ok(out)
    }

    pub fn backward(&self, input: &Tensor, upstream: &Tensor) -> Result<Tensor> {
        input.ensure_same_shape(upstream, "normalization upstream gradient")?;
        let (h, w, c) = input.shape();
        let mut grad = Tensor::zeros(h, w, c);
        let mut gx = vec![0.0; c];
        for v in 0..h {
            for u in 0..w {
                let px = input.pixel(v, u);
                let gy = upstream.pixel(v, u);
                let d = self.denominators(px);
                for (j, g) in gx.iter_mut().enumerate() {
                    *g = gy[j] * d[j].powf(-self.beta);
                }
                for k in 0..c {
                    let coef = -2.0 * self.alpha * self.beta * gy[k] * px[k] * d[k].powf(-self.beta - 1.0);
                    if coef == 0.0 {
                        continue;
                    }
                    for j in self.groups.range(k, c) {
                        gx[j] += coef * px[j];
                    }
                }
                for k in 0..c {
                    grad.set(v, u, k, gx[k]);
                }
            }
        }
        Ok(grad)
    }
}

/// Replicates the border `amount` pixels outwards on every side.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReplicatePad {
    pub amount: usize,
}

impl ReplicatePad {
    fn source(&self, i: usize, size: usize) -> usize {
        i.saturating_sub(self.amount).min(size - 1)
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let (h, w, c) = input.shape();
        let p = self.amount;
        Ok(Tensor::from_fn(h + 2 * p, w + 2 * p, c, |v, u, k| {
            input.get(self.source(v, h), self.source(u, w), k)
        }))
    }

    pub fn backward(&self, input: &Tensor, upstream: &Tensor) -> Result<Tensor> {
        let (h, w, c) = input.shape();
        let p = self.amount;
        if upstream.shape() != (h + 2 * p, w + 2 * p, c) {
            return Err(Error::Shape("padding upstream gradient shape".into()));
        }
        let mut grad = Tensor::zeros(h, w, c);
        for v in 0..h + 2 * p {
            for u in 0..w + 2 * p {
                let i = grad.index(self.source(v, h), self.source(u, w), 0);
                for k in 0..c {
                    grad.data_mut()[i + k] += upstream.get(v, u, k);
                }
            }
        }
        Ok(grad)
    }
}

pub fn relu(input: &Tensor) -> Tensor {
    input.map(|x| x.max(0.0))
}

pub fn relu_backward(input: &Tensor, upstream: &Tensor) -> Result<Tensor> {
    input.zip_map(upstream, |x, g| if x > 0.0 { g } else { 0.0 })
}

pub fn clamp(input: &Tensor, ceiling: f64) -> Tensor {
    input.map(|x| x.min(ceiling))
}

pub fn clamp_backward(input: &Tensor, ceiling: f64, upstream: &Tensor) -> Result<Tensor> {
    input.zip_map(upstream, |x, g| if x < ceiling { g } else { 0.0 })
}

/// Channel-wise softmax at every spatial location.
pub fn softmax(input: &Tensor) -> Tensor {
    let (h, w, c) = input.shape();
    let mut out = Tensor::zeros(h, w, c);
    for v in 0..h {
        for u in 0..w {
            let px = input.pixel(v, u);
            let m = px.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = px.iter().map(|x| (x - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for k in 0..c {
                out.set(v, u, k, e[k] / z);
            }
        }
    }
    out
}

pub fn softmax_backward(output: &Tensor, upstream: &Tensor) -> Result<Tensor> {
    output.ensure_same_shape(upstream, "softmax upstream gradient")?;
    let (h, w, c) = output.shape();
    let mut grad = Tensor::zeros(h, w, c);
    for v in 0..h {
        for u in 0..w {
            let y = output.pixel(v, u);
            let g = upstream.pixel(v, u);
            let s: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
            for k in 0..c {
                grad.set(v, u, k, y[k] * (g[k] - s));
            }
        }
    }
    Ok(grad)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LayerKind {
    Conv,
    Relu,
    MaxPool,
    Lrn,
    Clamp,
    Binning,
    Pad,
    Softmax,
}

impl LayerKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            LayerKind::Conv => "conv",
            LayerKind::Relu => "relu",
            LayerKind::MaxPool => "maxpool",
            LayerKind::Lrn => "lrn",
            LayerKind::Clamp => "clamp",
            LayerKind::Binning => "binning",
            LayerKind::Pad => "pad",
            LayerKind::Softmax => "softmax",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "conv" => LayerKind::Conv,
            "relu" => LayerKind::Relu,
            "maxpool" => LayerKind::MaxPool,
            "lrn" => LayerKind::Lrn,
            "clamp" => LayerKind::Clamp,
            "binning" => LayerKind::Binning,
            "pad" => LayerKind::Pad,
            "softmax" => LayerKind::Softmax,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug)]
pub enum Layer {
    Conv(Conv),
    Relu,
    MaxPool(MaxPool),
    Lrn(Lrn),
    Clamp { ceiling: f64 },
    Binning(Binning),
    Pad(ReplicatePad),
    Softmax,
}

impl Layer {
    pub fn kind(&self) -> LayerKind {
        match self {
            Layer::Conv(_) => LayerKind::Conv,
            Layer::Relu => LayerKind::Relu,
            Layer::MaxPool(_) => LayerKind::MaxPool,
            Layer::Lrn(_) => LayerKind::Lrn,
            Layer::Clamp { .. } => LayerKind::Clamp,
            Layer::Binning(_) => LayerKind::Binning,
            Layer::Pad(_) => LayerKind::Pad,
            Layer::Softmax => LayerKind::Softmax,
        }
    }

    pub fn output_shape(&self, shape: (usize, usize, usize)) -> Result<(usize, usize, usize)> {
        match self {
            Layer::Conv(c) => c.output_shape(shape),
            Layer::MaxPool(p) => p.output_shape(shape),
            Layer::Binning(b) => b.output_shape(shape),
            Layer::Pad(p) => Ok((shape.0 + 2 * p.amount, shape.1 + 2 * p.amount, shape.2)),
            Layer::Relu | Layer::Lrn(_) | Layer::Clamp { .. } | Layer::Softmax => Ok(shape),
        }
    }

    /// Spatial support and subsampling factor, as used by receptive-field bookkeeping.
    pub fn footprint(&self) -> (usize, usize) {
        match self {
            Layer::Conv(c) => {
                let [fh, fw, _, _] = c.filters.shape();
                (fh.max(fw), c.stride)
            }
            Layer::MaxPool(p) => (p.window, p.stride),
            _ => (1, 1),
        }
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        match self {
            Layer::Conv(c) => c.forward(input),
            Layer::Relu => Ok(relu(input)),
            Layer::MaxPool(p) => p.forward(input),
            Layer::Lrn(l) => l.forward(input),
            Layer::Clamp { ceiling } => Ok(clamp(input, *ceiling)),
            Layer::Binning(b) => b.forward(input),
            Layer::Pad(p) => p.forward(input),
            Layer::Softmax => Ok(softmax(input)),
        }
    }

    /// Vector–Jacobian product; `output` must be `self.forward(input)`.
    pub fn backward(&self, input: &Tensor, output: &Tensor, upstream: &Tensor) -> Result<Tensor> {
        match self {
            Layer::Conv(c) => c.backward(input, upstream),
            Layer::Relu => relu_backward(input, upstream),
            Layer::MaxPool(p) => p.backward(input, upstream),
            Layer::Lrn(l) => l.backward(input, upstream),
            Layer::Clamp { ceiling } => clamp_backward(input, *ceiling, upstream),
            Layer::Binning(b) => b.backward(input, upstream),
            Layer::Pad(p) => p.backward(input, upstream),
            Layer::Softmax => softmax_backward(output, upstream),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{numeric_gradient, relative_error};
    use crate::tensor::RandomSource;

    fn random_bank(rng: &mut RandomSource, shape: [usize; 4]) -> FilterBank {
        let n = shape.iter().product();
        FilterBank::from_vec(
            shape[0],
            shape[1],
            shape[2],
            shape[3],
            (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect(),
        )
        .unwrap()
    }

    // Direct nested-loop evaluation of the convolution formula.
    fn conv_oracle(x: &Tensor, f: &FilterBank, b: &[f64], stride: usize, pad: usize) -> Tensor {
        let [fh, fw, cin, cout] = f.shape();
        let oh = (x.height() + 2 * pad - fh) / stride + 1;
        let ow = (x.width() + 2 * pad - fw) / stride + 1;
        Tensor::from_fn(oh, ow, cout, |v, u, o| {
            let mut s = b[o];
            for dv in 0..fh {
                for du in 0..fw {
                    for k in 0..cin {
                        let iv = (v * stride + dv) as isize - pad as isize;
                        let iu = (u * stride + du) as isize - pad as isize;
                        if iv >= 0 && iu >= 0 && (iv as usize) < x.height() && (iu as usize) < x.width() {
                            s += x.get(iv as usize, iu as usize, k) * f.get(dv, du, k, o);
                        }
                    }
                }
            }
            s
        })
    }

    fn check_layer_gradient(layer: &Layer, x: &Tensor, seed: u64, tol: f64) {
        let y = layer.forward(x).unwrap();
        let probe = Tensor::fill_noise(y.height(), y.width(), y.channels(), 1.0, &mut RandomSource::new(seed));
        let analytic = layer.backward(x, &y, &probe).unwrap();
        let numeric = numeric_gradient(|t| layer.forward(t).unwrap().dot(&probe).unwrap(), x, 1e-5).unwrap();
        let err = relative_error(&analytic, &numeric);
        assert!(err <= tol, "{:?}: relative error {err}", layer.kind());
    }

    #[test]
    fn identity_filter_is_identity() {
        let mut f = FilterBank::zeros(1, 1, 2, 2);
        f.set(0, 0, 0, 0, 1.0);
        f.set(0, 0, 1, 1, 1.0);
        let conv = Conv::new(f, vec![0.0; 2], 1, 0).unwrap();
        let x = Tensor::fill_noise(4, 5, 2, 3.0, &mut RandomSource::new(3));
        assert_eq!(conv.forward(&x).unwrap(), x);
    }

    #[test]
    fn conv_matches_direct_summation() {
        let mut rng = RandomSource::new(11);
        let x = Tensor::fill_noise(6, 6, 2, 1.0, &mut rng);
        let f = random_bank(&mut rng, [3, 3, 2, 4]);
        let b: Vec<f64> = (0..4).map(|_| rng.uniform(-1.0, 1.0)).collect();
        for (stride, pad) in [(1, 0), (1, 1), (2, 1), (3, 2)] {
            let got = Conv::new(f.clone(), b.clone(), stride, pad).unwrap().forward(&x).unwrap();
            let want = conv_oracle(&x, &f, &b, stride, pad);
            assert_eq!(got.shape(), want.shape());
            let diff = got.sub(&want).unwrap().max_abs();
            assert!(diff <= 1e-10, "stride {stride} pad {pad}: {diff}");
        }
    }

    #[test]
    fn sparse_and_dense_paths_agree() {
        let mut rng = RandomSource::new(5);
        let mut f = FilterBank::zeros(2, 2, 3, 4);
        f.set(0, 1, 2, 0, 0.5);
        f.set(1, 0, 0, 3, -2.0);
        let conv = Conv::new(f.clone(), vec![0.1, 0.2, 0.3, 0.4], 1, 1).unwrap();
        assert!(conv.sparse.is_some());
        let x = Tensor::fill_noise(5, 4, 3, 1.0, &mut rng);
        let want = conv_oracle(&x, &f, &[0.1, 0.2, 0.3, 0.4], 1, 1);
        assert!(conv.forward(&x).unwrap().sub(&want).unwrap().max_abs() < 1e-12);
        check_layer_gradient(&Layer::Conv(conv), &x, 2, 1e-7);
    }

    #[test]
    fn grouped_conv_matches_blockwise_oracle() {
        let mut rng = RandomSource::new(21);
        let x = Tensor::fill_noise(5, 5, 4, 1.0, &mut rng);
        let f = random_bank(&mut rng, [3, 3, 2, 6]);
        let conv = Conv::grouped(f.clone(), vec![0.0; 6], 1, 1, 2).unwrap();
        let y = conv.forward(&x).unwrap();
        for g in 0..2 {
            let xg = Tensor::from_fn(5, 5, 2, |v, u, k| x.get(v, u, 2 * g + k));
            let fg = FilterBank::from_vec(
                3,
                3,
                2,
                3,
                (0..3)
                    .flat_map(|dv| (0..3).flat_map(move |du| (0..2).map(move |k| (dv, du, k))))
                    .flat_map(|(dv, du, k)| (0..3).map(move |o| (dv, du, k, o)))
                    .map(|(dv, du, k, o)| f.get(dv, du, k, 3 * g + o))
                    .collect(),
            )
            .unwrap();
            let want = conv_oracle(&xg, &fg, &[0.0; 3], 1, 1);
            for v in 0..5 {
                for u in 0..5 {
                    for o in 0..3 {
                        assert!((y.get(v, u, 3 * g + o) - want.get(v, u, o)).abs() < 1e-12);
                    }
                }
            }
        }
        check_layer_gradient(&Layer::Conv(conv), &x, 9, 1e-7);
    }

    #[test]
    fn conv_channel_mismatch() {
        let conv = Conv::new(FilterBank::zeros(3, 3, 2, 1), vec![0.0], 1, 0).unwrap();
        assert!(matches!(conv.forward(&Tensor::zeros(5, 5, 3)), Err(Error::Shape(_))));
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = RandomSource::new(13);
        let x = Tensor::fill_noise(5, 5, 3, 1.0, &mut rng);
        let f = random_bank(&mut rng, [3, 3, 3, 4]);
        let conv = Conv::new(f, vec![0.5; 4], 2, 1).unwrap();
        check_layer_gradient(&Layer::Conv(conv), &x, 14, 1e-4);
    }

    #[test]
    fn relu_definition() {
        let x = Tensor::vector(vec![-1.0, 0.0, 2.0]);
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        let neg = Tensor::vector(vec![-1.0, -3.0]);
        assert_eq!(relu(&neg).norm_sq(), 0.0);
        let g = relu_backward(&neg, &Tensor::vector(vec![1.0, 1.0])).unwrap();
        assert_eq!(g.norm_sq(), 0.0);
        // At the kink itself the subgradient is zero.
        let g0 = relu_backward(&Tensor::vector(vec![0.0]), &Tensor::vector(vec![1.0])).unwrap();
        assert_eq!(g0.data(), &[0.0]);
    }

    #[test]
    fn relu_backward_matches_finite_differences() {
        // Keep every input at least 0.1 away from the kink.
        let x = Tensor::fill_noise(4, 4, 3, 1.0, &mut RandomSource::new(17))
            .map(|v| if v.abs() < 0.1 { v + 0.2_f64.copysign(v) } else { v });
        check_layer_gradient(&Layer::Relu, &x, 18, 1e-4);
    }

    #[test]
    fn maxpool_definition() {
        let pool = MaxPool { window: 2, stride: 2, pad: 0 };
        let x = Tensor::from_vec(2, 2, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(pool.forward(&x).unwrap().data(), &[4.0]);
        let c = Tensor::filled(6, 6, 2, 1.5);
        let pool = MaxPool { window: 3, stride: 2, pad: 1 };
        let y = pool.forward(&c).unwrap();
        assert!(y.data().iter().all(|&v| v == 1.5));
    }

    #[test]
    fn maxpool_ties_route_to_first_index() {
        let pool = MaxPool { window: 2, stride: 2, pad: 0 };
        let x = Tensor::filled(2, 2, 1, 1.0);
        let g = pool.backward(&x, &Tensor::filled(1, 1, 1, 1.0)).unwrap();
        assert_eq!(g.data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn maxpool_backward_matches_finite_differences() {
        // Distinct values spaced well beyond the finite-difference step.
        let mut order: Vec<usize> = (0..6 * 6 * 2).collect();
        let mut rng = RandomSource::new(19);
        for i in (1..order.len()).rev() {
            order.swap(i, rng.below(i + 1));
        }
        let x = Tensor::from_vec(6, 6, 2, order.iter().map(|&i| i as f64 * 0.1).collect()).unwrap();
        let pool = MaxPool { window: 3, stride: 2, pad: 1 };
        check_layer_gradient(&Layer::MaxPool(pool), &x, 20, 1e-4);
    }

    #[test]
    fn lrn_self_normalization() {
        let l = Lrn::new(LrnGroups::Block(1), 0.0, 1.0, 0.5).unwrap();
        let y = l.forward(&Tensor::vector(vec![3.0])).unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-15);
        let l = Lrn::new(LrnGroups::Block(4), 1e-8, 1.0, 0.5).unwrap();
        let y = l.forward(&Tensor::zeros(2, 2, 4)).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
        assert!(matches!(Lrn::new(LrnGroups::Window(0), 1.0, 1.0, 0.75), Err(Error::Config(_))));
    }

    #[test]
    fn lrn_backward_matches_finite_differences() {
        let x = Tensor::fill_noise(4, 4, 6, 1.0, &mut RandomSource::new(23));
        for l in [
            Lrn::new(LrnGroups::Block(3), 1e-8, 1.0, 0.5).unwrap(),
            Lrn::new(LrnGroups::Window(5), 1.0, 2e-1, 0.75).unwrap(),
            Lrn::new(LrnGroups::Window(2), 0.5, 1.0, 0.75).unwrap(),
        ] {
            check_layer_gradient(&Layer::Lrn(l), &x, 24, 1e-4);
        }
    }

    #[test]
    fn clamp_definition() {
        let y = clamp(&Tensor::vector(vec![0.5, 0.1]), 0.2);
        assert_eq!(y.data(), &[0.2, 0.1]);
        let g = clamp_backward(&Tensor::vector(vec![0.5, 0.1]), 0.2, &Tensor::vector(vec![1.0, 1.0])).unwrap();
        assert_eq!(g.data(), &[0.0, 1.0]);
    }

    #[test]
    fn clamp_and_softmax_backward_match_finite_differences() {
        let x = Tensor::fill_noise(3, 3, 4, 1.0, &mut RandomSource::new(29))
            .map(|v| if (v - 0.2).abs() < 0.05 { v + 0.1 } else { v });
        check_layer_gradient(&Layer::Clamp { ceiling: 0.2 }, &x, 30, 1e-4);
        check_layer_gradient(&Layer::Softmax, &x, 31, 1e-4);
    }

    #[test]
    fn replicate_pad_backward_matches_finite_differences() {
        let x = Tensor::fill_noise(3, 4, 2, 1.0, &mut RandomSource::new(33));
        let pad = ReplicatePad { amount: 2 };
        let y = pad.forward(&x).unwrap();
        assert_eq!(y.shape(), (7, 8, 2));
        assert_eq!(y.get(0, 0, 1), x.get(0, 0, 1));
        assert_eq!(y.get(6, 7, 0), x.get(2, 3, 0));
        check_layer_gradient(&Layer::Pad(pad), &x, 34, 1e-6);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]

            #[test]
            fn conv_is_linear(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
                let mut rng = RandomSource::new(seed);
                let x = Tensor::fill_noise(5, 5, 2, 1.0, &mut rng);
                let y = Tensor::fill_noise(5, 5, 2, 1.0, &mut rng);
                let conv = Conv::new(random_bank(&mut rng, [3, 3, 2, 3]), vec![0.0; 3], 1, 1).unwrap();
                let lhs = conv.forward(&x.scale(a).add(&y.scale(b)).unwrap()).unwrap();
                let rhs = conv.forward(&x).unwrap().scale(a).add(&conv.forward(&y).unwrap().scale(b)).unwrap();
                prop_assert!(lhs.sub(&rhs).unwrap().max_abs() <= 1e-10);
            }

            #[test]
            fn maxpool_is_monotone_and_channel_equivariant(seed in any::<u64>()) {
                let mut rng = RandomSource::new(seed);
                let x = Tensor::fill_noise(6, 5, 3, 1.0, &mut rng);
                let bump = Tensor::fill_noise(6, 5, 3, 1.0, &mut rng).map(f64::abs);
                let pool = MaxPool { window: 3, stride: 2, pad: 1 };
                let px = pool.forward(&x).unwrap();
                let py = pool.forward(&x.add(&bump).unwrap()).unwrap();
                prop_assert!(px.data().iter().zip(py.data()).all(|(a, b)| a <= b));
                let perm = [2usize, 0, 1];
                let xp = Tensor::from_fn(6, 5, 3, |v, u, k| x.get(v, u, perm[k]));
                let pp = pool.forward(&xp).unwrap();
                for v in 0..px.height() {
                    for u in 0..px.width() {
                        for k in 0..3 {
                            prop_assert_eq!(pp.get(v, u, k), px.get(v, u, perm[k]));
                        }
                    }
                }
            }
        }
    }
}
