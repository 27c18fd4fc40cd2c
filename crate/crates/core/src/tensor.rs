//! Dense height × width × channels arrays.
//!
//! Storage is row-major with the channel index innermost: element `(v, u, k)`
//! lives at `(v * width + u) * channels + k`. The weight blob format relies on
//! this layout, so it must not change.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor({}x{}x{}", self.height, self.width, self.channels)?;
        if self.data.len() <= 16 {
            write!(f, ", {:?}", self.data)?;
        }
        write!(f, ")")
    }
}

impl Tensor {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "{} values cannot fill a {height}x{width}x{channels} tensor",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    /// A `1 × 1 × n` tensor, the shape used for plain code vectors.
    pub fn vector(data: Vec<f64>) -> Self {
        let n = data.len();
        Self {
            height: 1,
            width: 1,
            channels: n,
            data,
        }
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for v in 0..height {
            for u in 0..width {
                for k in 0..channels {
                    data.push(f(v, u, k));
                }
            }
        }
        Self {
            height,
            width,
            channels,
            data,
        }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, v: usize, u: usize, k: usize) -> usize {
        debug_assert!(v < self.height && u < self.width && k < self.channels);
        (v * self.width + u) * self.channels + k
    }

    #[inline]
    pub fn get(&self, v: usize, u: usize, k: usize) -> f64 {
        self.data[self.index(v, u, k)]
    }

    #[inline]
    pub fn set(&mut self, v: usize, u: usize, k: usize, value: f64) {
        let i = self.index(v, u, k);
        self.data[i] = value;
    }

    /// The channel vector at one spatial location.
    #[inline]
    pub fn pixel(&self, v: usize, u: usize) -> &[f64] {
        let start = (v * self.width + u) * self.channels;
        &self.data[start..start + self.channels]
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.shape() == other.shape()
    }

    pub fn ensure_same_shape(&self, other: &Tensor, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )))
        }
    }

    pub fn crop(&self, top: usize, left: usize, out_h: usize, out_w: usize) -> Result<Tensor> {
        if top + out_h > self.height || left + out_w > self.width {
            return Err(Error::Bounds(format!(
                "{out_h}x{out_w} window at ({top}, {left}) does not fit in {}x{}",
                self.height, self.width
            )));
        }
        let c = self.channels;
        let mut data = Vec::with_capacity(out_h * out_w * c);
        for v in 0..out_h {
            let start = self.index(v + top, left, 0);
            data.extend_from_slice(&self.data[start..start + out_w * c]);
        }
        Ok(Tensor {
            height: out_h,
            width: out_w,
            channels: c,
            data,
        })
    }

    /// Adds `src` into the window of `self` at `(top, left)`; the adjoint of [`Tensor::crop`].
    pub fn add_window(&mut self, top: usize, left: usize, src: &Tensor) -> Result<()> {
        if src.channels != self.channels
            || top + src.height > self.height
            || left + src.width > self.width
        {
            return Err(Error::Bounds(format!(
                "{:?} at ({top}, {left}) does not fit in {:?}",
                src.shape(),
                self.shape()
            )));
        }
        let c = self.channels;
        for v in 0..src.height {
            let dst = self.index(v + top, left, 0);
            let s = src.index(v, 0, 0);
            for (d, x) in self.data[dst..dst + src.width * c]
                .iter_mut()
                .zip(&src.data[s..s + src.width * c])
            {
                *d += x;
            }
        }
        Ok(())
    }

    /// Zero-pads by the given number of rows/columns on each side.
    pub fn pad(&self, top: usize, bottom: usize, left: usize, right: usize) -> Tensor {
        let mut out = Tensor::zeros(
            self.height + top + bottom,
            self.width + left + right,
            self.channels,
        );
        out.add_window(top, left, self)
            .expect("padded tensor always contains the source");
        out
    }

    /// Swaps the row and column axes.
    pub fn transpose(&self) -> Tensor {
        Tensor::from_fn(self.width, self.height, self.channels, |v, u, k| {
            self.get(u, v, k)
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.ensure_same_shape(other, "elementwise operation")?;
        Ok(Tensor {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|x| x * s)
    }

    /// `self += s * other`
    pub fn axpy(&mut self, s: f64, other: &Tensor) -> Result<()> {
        self.ensure_same_shape(other, "axpy")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        Ok(())
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        self.ensure_same_shape(other, "dot product")?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Index of the largest channel value at `(v, u)`, first index on ties.
    pub fn argmax_channel(&self, v: usize, u: usize) -> usize {
        let px = self.pixel(v, u);
        let mut best = 0;
        for (k, &x) in px.iter().enumerate() {
            if x > px[best] {
                best = k;
            }
        }
        best
    }

    /// Elements drawn i.i.d. uniform on `[-scale, scale]`.
    pub fn fill_noise(
        height: usize,
        width: usize,
        channels: usize,
        scale: f64,
        rng: &mut RandomSource,
    ) -> Tensor {
        let data = (0..height * width * channels)
            .map(|_| rng.uniform(-scale, scale))
            .collect();
        Tensor {
            height,
            width,
            channels,
            data,
        }
    }
}

/// Seeded, platform-independent pseudo-random generator.
#[derive(Clone, Debug)]
pub struct RandomSource {
    seed: u64,
    rng: ChaCha8Rng,
}

impl RandomSource {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        self.rng.random_range(lo..=hi)
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    /// Standard normal draw (Box–Muller).
    pub fn normal(&mut self) -> f64 {
        let u1: f64 = 1.0 - self.rng.random::<f64>();
        let u2: f64 = self.rng.random();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_crop() {
        let t = Tensor::from_fn(3, 3, 1, |v, u, _| (v * 3 + u) as f64);
        assert_eq!(t.crop(0, 0, 3, 3).unwrap(), t);
    }

    #[test]
    fn crop_reads_the_window() {
        let t = Tensor::from_vec(2, 2, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let c = t.crop(1, 0, 1, 2).unwrap();
        assert_eq!(c.shape(), (1, 2, 1));
        assert_eq!(c.data(), &[3.0, 4.0]);
    }

    #[test]
    fn crop_out_of_bounds() {
        let t = Tensor::zeros(4, 4, 1);
        assert!(matches!(t.crop(2, 2, 3, 3), Err(Error::Bounds(_))));
    }

    #[test]
    fn noise_is_deterministic_and_bounded() {
        let a = Tensor::fill_noise(8, 8, 3, 80.0, &mut RandomSource::new(7));
        let b = Tensor::fill_noise(8, 8, 3, 80.0, &mut RandomSource::new(7));
        assert_eq!(a.data(), b.data());
        assert!(a.data().iter().all(|x| (-80.0..=80.0).contains(x)));
        let c = Tensor::fill_noise(8, 8, 3, 80.0, &mut RandomSource::new(8));
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn noise_mean_and_skew_are_symmetric() {
        // Uniform on [-1, 1]: variance 1/3, so the standard error of the mean is sqrt(1/3 / n).
        let n = 100_000;
        let t = Tensor::fill_noise(1, 1, n, 1.0, &mut RandomSource::new(42));
        let mean = t.sum() / n as f64;
        let se = (1.0 / 3.0 / n as f64).sqrt();
        assert!(mean.abs() < 3.0 * se, "mean {mean} outside 3 standard errors");
        let var = t.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        let skew = t.data().iter().map(|x| (x - mean).powi(3)).sum::<f64>() / n as f64 / var.powf(1.5);
        // The skewness estimator has standard error about sqrt(6 / n).
        assert!(skew.abs() < 3.0 * (6.0 / n as f64).sqrt(), "skewness {skew}");
    }

    #[test]
    fn add_window_is_adjoint_of_crop() {
        let mut rng = RandomSource::new(1);
        let x = Tensor::fill_noise(6, 7, 2, 1.0, &mut rng);
        let y = Tensor::fill_noise(3, 4, 2, 1.0, &mut rng);
        let lhs = x.crop(2, 1, 3, 4).unwrap().dot(&y).unwrap();
        let mut z = Tensor::zeros(6, 7, 2);
        z.add_window(2, 1, &y).unwrap();
        let rhs = x.dot(&z).unwrap();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn crop_of_pad_is_identity(h in 1usize..6, w in 1usize..6, c in 1usize..3,
                                       t in 0usize..3, b in 0usize..3, l in 0usize..3, r in 0usize..3,
                                       seed in any::<u64>()) {
                let x = Tensor::fill_noise(h, w, c, 5.0, &mut RandomSource::new(seed));
                let padded = x.pad(t, b, l, r);
                prop_assert_eq!(padded.crop(t, l, h, w).unwrap(), x);
            }
        }
    }
}
