//! Evaluation measures and the finite-difference gradient oracle.

use crate::error::{Error, Result};
use crate::hogsift::image_gradients;
use crate::network::Network;
use crate::tensor::Tensor;

/// Bins used by [`grad_hist_intersection`].
pub const DEFAULT_HIST_BINS: usize = 64;

/// Reconstruction error reported in the literature for a dictionary-based
/// HOG inverter (percent); a reference value, not computed here.
pub const HOGGLE_REFERENCE_ERROR: f64 = 60.1;

fn masked(t: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
    match mask {
        None => Ok(t.clone()),
        Some(m) => {
            m.ensure_same_shape(t, "mask")?;
            t.mul(m)
        }
    }
}

/// `100 · ‖(Φ(x) − Φ(x0)) ⊙ M‖² / ‖Φ(x0) ⊙ M‖²` at the given layer, in percent.
/// Both images are network inputs (mean already removed).
pub fn reconstruction_error(
    x: &Tensor,
    x0: &Tensor,
    network: &Network,
    layer: usize,
    mask: Option<&Tensor>,
) -> Result<f64> {
    let a = network.output(x, layer)?;
    let b = network.output(x0, layer)?;
    feature_error(&a, &b, mask)
}

/// [`reconstruction_error`] on precomputed features.
pub fn feature_error(phi: &Tensor, phi0: &Tensor, mask: Option<&Tensor>) -> Result<f64> {
    phi.ensure_same_shape(phi0, "features")?;
    let target = masked(phi0, mask)?.norm_sq();
    if target == 0.0 {
        return Err(Error::DegenerateTarget(
            "reference features have zero norm".into(),
        ));
    }
    Ok(100.0 * masked(&phi.sub(phi0)?, mask)?.norm_sq() / target)
}

/// Normalized histogram of gradient magnitudes.
#[derive(Clone, Debug, PartialEq)]
pub struct GradHistogram {
    pub edges: Vec<f64>,
    pub counts: Vec<f64>,
}

impl GradHistogram {
    /// Histograms `values` into `bins` uniform bins over `[0, max]`; values at
    /// `max` fall in the last bin. A zero `max` uses the range `[0, 1]`.
    pub fn new(values: &[f64], max: f64, bins: usize) -> Self {
        let bins = bins.max(1);
        let top = if max > 0.0 { max } else { 1.0 };
        let edges = (0..=bins).map(|i| top * i as f64 / bins as f64).collect();
        let mut counts = vec![0.0; bins];
        for &v in values {
            let i = ((v / top * bins as f64) as usize).min(bins - 1);
            counts[i] += 1.0;
        }
        let total = values.len().max(1) as f64;
        counts.iter_mut().for_each(|c| *c /= total);
        Self { edges, counts }
    }

    pub fn intersection(&self, other: &GradHistogram) -> f64 {
        self.counts
            .iter()
            .zip(&other.counts)
            .map(|(a, b)| a.min(*b))
            .sum()
    }
}

/// Per-pixel gradient magnitude, combining channels in L2.
pub fn gradient_magnitudes(image: &Tensor) -> Vec<f64> {
    let (gx, gy) = image_gradients(image);
    let c = image.channels();
    gx.data()
        .chunks(c)
        .zip(gy.data().chunks(c))
        .map(|(a, b)| a.iter().chain(b).map(|g| g * g).sum::<f64>().sqrt())
        .collect()
}

/// Histogram intersection of the gradient-magnitude distributions of two
/// images, both binned over `[0, largest magnitude in either image]`.
pub fn grad_hist_intersection(x: &Tensor, x0: &Tensor, bins: usize) -> Result<f64> {
    x.ensure_same_shape(x0, "images")?;
    let a = gradient_magnitudes(x);
    let b = gradient_magnitudes(x0);
    let max = a.iter().chain(&b).fold(0.0f64, |m, v| m.max(*v));
    Ok(GradHistogram::new(&a, max, bins).intersection(&GradHistogram::new(&b, max, bins)))
}

fn argmax(t: &Tensor) -> usize {
    t.data()
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

/// Fraction of `xs` given the same top class as `x0` by the network's last layer.
pub fn classification_consistency(xs: &[Tensor], x0: &Tensor, classifier: &Network) -> Result<f64> {
    if xs.is_empty() {
        return Err(Error::Config("no pre-images to classify".into()));
    }
    let last = classifier.last_index();
    let reference = argmax(&classifier.output(x0, last)?);
    let mut agree = 0;
    for x in xs {
        if argmax(&classifier.output(x, last)?) == reference {
            agree += 1;
        }
    }
    Ok(agree as f64 / xs.len() as f64)
}

/// Central differences `(f(x + h e_i) − f(x − h e_i)) / 2h` for every component.
pub fn numeric_gradient(f: impl Fn(&Tensor) -> f64, x: &Tensor, h: f64) -> Result<Tensor> {
    if h <= 0.0 || !h.is_finite() {
        return Err(Error::Config(format!("step {h} must be positive")));
    }
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.height(), x.width(), x.channels());
    for i in 0..x.len() {
        let x0 = x.data()[i];
        probe.data_mut()[i] = x0 + h;
        let plus = f(&probe);
        probe.data_mut()[i] = x0 - h;
        let minus = f(&probe);
        probe.data_mut()[i] = x0;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite {
                term: "probed function".into(),
                iteration: i,
            });
        }
        grad.data_mut()[i] = (plus - minus) / (2.0 * h);
    }
    Ok(grad)
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, and 0 when both are zero.
pub fn relative_error(a: &Tensor, b: &Tensor) -> f64 {
    let diff: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    let scale = a.norm_sq().max(b.norm_sq());
    if scale == 0.0 {
        0.0
    } else {
        (diff / scale).sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hogsift::{build_descriptor_net, DescriptorConfig, Variant};
    use crate::layers::{Conv, FilterBank, Layer};
    use crate::network::{InputSpec, NamedLayer};
    use crate::tensor::RandomSource;
    use proptest::prelude::*;

    fn noise(h: usize, w: usize, c: usize, seed: u64) -> Tensor {
        Tensor::fill_noise(h, w, c, 1.0, &mut RandomSource::new(seed))
    }

    #[test]
    fn numeric_gradient_of_square_norm() {
        let x = noise(3, 4, 2, 1);
        let g = numeric_gradient(|t| t.norm_sq(), &x, 1e-4).unwrap();
        assert!(relative_error(&g, &x.scale(2.0)) < 1e-9);
    }

    #[test]
    fn numeric_gradient_is_exact_for_linear() {
        let w = noise(3, 3, 1, 2);
        let x = noise(3, 3, 1, 3);
        for h in [1e-3, 0.5, 10.0] {
            let g = numeric_gradient(|t| t.dot(&w).unwrap(), &x, h).unwrap();
            assert!(g.sub(&w).unwrap().max_abs() < 1e-9);
        }
    }

    #[test]
    fn numeric_gradient_rejects_bad_input() {
        let x = noise(2, 2, 1, 0);
        assert!(numeric_gradient(|t| t.sum(), &x, 0.0).is_err());
        assert!(matches!(
            numeric_gradient(|t| t.sum().ln(), &x.map(|v| -v.abs() - 1.0), 1e-3),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn conv_probe_matches_backward() {
        let mut rng = RandomSource::new(9);
        let f = FilterBank::from_vec(3, 3, 2, 3, (0..54).map(|_| rng.normal()).collect()).unwrap();
        let conv = Conv::new(f, vec![0.1, 0.2, 0.3], 2, 1).unwrap();
        let x = noise(7, 6, 2, 4);
        let y = conv.forward(&x).unwrap();
        let r = noise(y.height(), y.width(), y.channels(), 5);
        let analytic = conv.backward(&x, &r).unwrap();
        let numeric = numeric_gradient(|t| conv.forward(t).unwrap().dot(&r).unwrap(), &x, 1e-4).unwrap();
        assert!(relative_error(&analytic, &numeric) <= 1e-4);
    }

    #[test]
    fn reconstruction_error_basics() {
        let net = build_descriptor_net(&DescriptorConfig::new(Variant::Dsift).with_cell_size(4)).unwrap();
        let last = net.last_index();
        let x0 = noise(24, 24, 1, 1).scale(50.0);
        assert_eq!(reconstruction_error(&x0, &x0, &net, last, None).unwrap(), 0.0);
        let x = noise(24, 24, 1, 2).scale(50.0);
        let e = reconstruction_error(&x, &x0, &net, last, None).unwrap();
        assert!(e > 0.0);
        let flat = Tensor::zeros(24, 24, 1);
        assert!(matches!(
            reconstruction_error(&x, &flat, &net, last, None),
            Err(Error::DegenerateTarget(_))
        ));
    }

    #[test]
    fn mask_restricts_the_error() {
        let a = Tensor::from_vec(1, 2, 1, vec![1.0, 5.0]).unwrap();
        let b = Tensor::from_vec(1, 2, 1, vec![2.0, 1.0]).unwrap();
        let m = Tensor::from_vec(1, 2, 1, vec![1.0, 0.0]).unwrap();
        assert!((feature_error(&a, &b, Some(&m)).unwrap() - 25.0).abs() < 1e-12);
        assert!((feature_error(&a, &b, None).unwrap() - 100.0 * 17.0 / 5.0).abs() < 1e-12);
    }

    #[test]
    fn histogram_intersection_examples() {
        let x = noise(16, 16, 3, 3).scale(100.0);
        assert!((grad_hist_intersection(&x, &x, DEFAULT_HIST_BINS).unwrap() - 1.0).abs() < 1e-12);
        let flat = Tensor::filled(16, 16, 3, 5.0);
        let v = grad_hist_intersection(&flat, &x, DEFAULT_HIST_BINS).unwrap();
        assert!(v < 0.5, "{v}");
        assert_eq!(v, grad_hist_intersection(&x, &flat, DEFAULT_HIST_BINS).unwrap());
        assert_eq!(grad_hist_intersection(&flat, &flat, DEFAULT_HIST_BINS).unwrap(), 1.0);
    }

    #[test]
    fn histogram_is_normalized() {
        let h = GradHistogram::new(&[0.0, 0.5, 1.0, 2.0, 2.0], 2.0, 4);
        assert_eq!(h.counts, [0.2, 0.2, 0.2, 0.4]);
        assert!(h.edges.windows(2).all(|e| e[0] < e[1]));
    }

    fn classifier() -> Network {
        let mut rng = RandomSource::new(11);
        let f = FilterBank::from_vec(4, 4, 1, 3, (0..48).map(|_| rng.normal()).collect()).unwrap();
        Network::new(
            InputSpec::any_size(1, vec![0.0]),
            vec![
                NamedLayer { name: "fc".into(), layer: Layer::Conv(Conv::new(f, vec![0.0; 3], 1, 0).unwrap()) },
                NamedLayer { name: "prob".into(), layer: Layer::Softmax },
            ],
        )
        .unwrap()
    }

    #[test]
    fn consistency_of_reference_is_one() {
        let net = classifier();
        let x0 = noise(4, 4, 1, 1);
        assert_eq!(classification_consistency(std::slice::from_ref(&x0), &x0, &net).unwrap(), 1.0);
    }

    proptest! {
        #[test]
        fn intersection_stays_in_unit_interval(seed_a in 0u64..1000, seed_b in 0u64..1000, scale in 0.0f64..300.0) {
            let a = noise(8, 8, 1, seed_a).scale(scale);
            let b = noise(8, 8, 1, seed_b);
            let v = grad_hist_intersection(&a, &b, DEFAULT_HIST_BINS).unwrap();
            prop_assert!((0.0..=1.0 + 1e-12).contains(&v));
        }

        #[test]
        fn consistency_ignores_score_scaling(seed in 0u64..500, s in 0.01f64..100.0) {
            let net = classifier();
            let x0 = noise(4, 4, 1, seed);
            let xs: Vec<_> = (0..5).map(|i| noise(4, 4, 1, seed + 1000 + i)).collect();
            let base = classification_consistency(&xs, &x0, &net).unwrap();
            // Scaling the input scales the pre-softmax scores of this bias-free linear head.
            let scaled: Vec<_> = xs.iter().map(|x| x.scale(s)).collect();
            prop_assert_eq!(base, classification_consistency(&scaled, &x0.scale(s), &net).unwrap());
        }
    }
}
