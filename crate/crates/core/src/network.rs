//! Ordered layer stacks with cached forward passes and multi-point backpropagation.

use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::layers::Layer;
use crate::tensor::Tensor;

/// Mean removed from raw images before they enter the network.
#[derive(Clone, Debug, PartialEq)]
pub enum Mean {
    /// One value per input channel.
    Channels(Vec<f64>),
    /// A full mean image; the network input must have exactly its shape.
    Image(Tensor),
}

#[derive(Clone, Debug, PartialEq)]
pub struct InputSpec {
    /// Expected input size; `None` for networks that accept any size.
    pub height: Option<usize>,
    pub width: Option<usize>,
    pub channels: usize,
    pub mean: Mean,
}

impl InputSpec {
    pub fn any_size(channels: usize, mean: Vec<f64>) -> Self {
        Self {
            height: None,
            width: None,
            channels,
            mean: Mean::Channels(mean),
        }
    }
}

#[derive(Clone, Debug)]
pub struct NamedLayer {
    pub name: String,
    pub layer: Layer,
}

/// Receptive-field size and stride of one layer's outputs, in input pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerGeometry {
    pub rf_size: usize,
    pub rf_stride: usize,
}

/// Composes per-layer `(support, stride)` pairs into receptive fields.
///
/// The size grows by `(k - 1)` times the stride accumulated so far and the
/// stride is the running product. Padding is ignored, so sizes may exceed the
/// actual input.
pub fn compose_receptive_fields(footprints: impl IntoIterator<Item = (usize, usize)>) -> Vec<LayerGeometry> {
    let mut size = 1;
    let mut stride = 1;
    footprints
        .into_iter()
        .map(|(k, s)| {
            size += (k.max(1) - 1) * stride;
            stride *= s.max(1);
            LayerGeometry {
                rf_size: size,
                rf_stride: stride,
            }
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct Network {
    input: InputSpec,
    layers: Vec<NamedLayer>,
}

/// All intermediate values of a forward pass: entry 0 is the input, entry
/// `i + 1` the output of layer `i`.
pub type Activations = Vec<Tensor>;

fn channel_map(layer: &Layer, channels: usize) -> Result<usize> {
    match layer {
        Layer::Conv(c) if c.input_channels() != channels => Err(Error::Shape(format!(
            "expects {} input channels but receives {channels}",
            c.input_channels()
        ))),
        Layer::Conv(c) => Ok(c.output_channels()),
        Layer::Binning(b) => b.output_shape((1, 1, channels)).map(|s| s.2),
        _ => Ok(channels),
    }
}

impl Network {
    pub fn new(input: InputSpec, layers: Vec<NamedLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("network has no layers".into()));
        }
        let mut seen = HashSet::new();
        let mut channels = input.channels;
        for l in &layers {
            if !seen.insert(l.name.as_str()) {
                return Err(Error::Config(format!("duplicate layer name `{}`", l.name)));
            }
            channels = channel_map(&l.layer, channels)
                .map_err(|e| Error::Shape(format!("layer `{}`: {e}", l.name)))?;
        }
        match &input.mean {
            Mean::Channels(m) if m.len() != input.channels => {
                return Err(Error::Config(format!(
                    "{} mean values for {} input channels",
                    m.len(),
                    input.channels
                )))
            }
            Mean::Image(t) if t.channels() != input.channels => {
                return Err(Error::Config("mean image channel count differs from input".into()))
            }
            _ => {}
        }
        Ok(Self { input, layers })
    }

    pub fn input(&self) -> &InputSpec {
        &self.input
    }

    pub fn layers(&self) -> &[NamedLayer] {
        &self.layers
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn layer_names(&self) -> Vec<String> {
        self.layers.iter().map(|l| l.name.clone()).collect()
    }

    pub fn layer_index(&self, name: &str) -> Result<usize> {
        self.layers
            .iter()
            .position(|l| l.name == name)
            .ok_or_else(|| Error::UnknownLayer {
                name: name.to_string(),
                valid: self.layer_names(),
            })
    }

    pub fn last_index(&self) -> usize {
        self.layers.len() - 1
    }

    /// Appends a layer, checking the channel chain.
    pub fn push(&mut self, name: impl Into<String>, layer: Layer) -> Result<()> {
        let name = name.into();
        if self.layers.iter().any(|l| l.name == name) {
            return Err(Error::Config(format!("duplicate layer name `{name}`")));
        }
        let channels = self.output_channels(self.last_index());
        channel_map(&layer, channels).map_err(|e| Error::Shape(format!("layer `{name}`: {e}")))?;
        self.layers.push(NamedLayer { name, layer });
        Ok(())
    }

    /// Channel count produced by layer `index`.
    pub fn output_channels(&self, index: usize) -> usize {
        self.layers[..=index]
            .iter()
            .try_fold(self.input.channels, |c, l| channel_map(&l.layer, c))
            .expect("channel chain validated at construction")
    }

    pub fn output_shape(&self, input: (usize, usize, usize), index: usize) -> Result<(usize, usize, usize)> {
        self.layers[..=index]
            .iter()
            .try_fold(input, |s, l| l.layer.output_shape(s))
    }

    pub fn receptive_fields(&self) -> Vec<LayerGeometry> {
        compose_receptive_fields(self.layers.iter().map(|l| l.layer.footprint()))
    }

    /// Runs layers `0..=upto`, keeping every intermediate tensor.
    pub fn forward(&self, x: &Tensor, upto: usize) -> Result<Activations> {
        if x.channels() != self.input.channels {
            return Err(Error::Shape(format!(
                "network expects {} input channels, got {}",
                self.input.channels,
                x.channels()
            )));
        }
        if upto >= self.layers.len() {
            return Err(Error::Config(format!("layer index {upto} out of range")));
        }
        let mut acts = Vec::with_capacity(upto + 2);
        acts.push(x.clone());
        for l in &self.layers[..=upto] {
            let y = l
                .layer
                .forward(acts.last().expect("non-empty"))
                .map_err(|e| match e {
                    Error::Shape(m) => Error::Shape(format!("layer `{}`: {m}", l.name)),
                    other => other,
                })?;
            acts.push(y);
        }
        Ok(acts)
    }

    /// Output of layer `index` for input `x`.
    pub fn output(&self, x: &Tensor, index: usize) -> Result<Tensor> {
        let mut acts = self.forward(x, index)?;
        Ok(acts.pop().expect("non-empty"))
    }

    /// Backpropagates gradients injected at the outputs of one or more layers
    /// (`(layer index, d energy / d output)`) down to the network input.
    pub fn backward(&self, acts: &Activations, injections: &[(usize, &Tensor)]) -> Result<Tensor> {
        let Some(deepest) = injections.iter().map(|(i, _)| *i).max() else {
            return Ok(Tensor::zeros(acts[0].height(), acts[0].width(), acts[0].channels()));
        };
        if deepest + 1 >= acts.len() {
            return Err(Error::Config("gradient injected beyond the forward pass".into()));
        }
        let out = &acts[deepest + 1];
        let mut grad = Tensor::zeros(out.height(), out.width(), out.channels());
        for i in (0..=deepest).rev() {
            for (_, g) in injections.iter().filter(|(j, _)| *j == i) {
                grad.axpy(1.0, g)?;
            }
            grad = self.layers[i].layer.backward(&acts[i], &acts[i + 1], &grad)?;
        }
        Ok(grad)
    }

    pub fn subtract_mean(&self, raw: &Tensor) -> Result<Tensor> {
        self.apply_mean(raw, -1.0)
    }

    pub fn add_mean(&self, x: &Tensor) -> Result<Tensor> {
        self.apply_mean(x, 1.0)
    }

    fn apply_mean(&self, t: &Tensor, sign: f64) -> Result<Tensor> {
        if t.channels() != self.input.channels {
            return Err(Error::Shape(format!(
                "image has {} channels, network expects {}",
                t.channels(),
                self.input.channels
            )));
        }
        match &self.input.mean {
            Mean::Channels(m) => Ok(Tensor::from_fn(t.height(), t.width(), t.channels(), |v, u, k| {
                t.get(v, u, k) + sign * m[k]
            })),
            Mean::Image(m) => {
                m.ensure_same_shape(t, "mean image")?;
                let mut out = t.clone();
                out.axpy(sign, m)?;
                Ok(out)
            }
        }
    }

    /// Forward pass on a raw (not mean-subtracted) image.
    pub fn forward_image(&self, raw: &Tensor, upto: usize) -> Result<Activations> {
        self.forward(&self.subtract_mean(raw)?, upto)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{Conv, FilterBank, MaxPool};

    fn toy() -> Network {
        let mut f = FilterBank::zeros(3, 3, 1, 2);
        f.set(1, 1, 0, 0, 1.0);
        f.set(0, 0, 0, 1, -1.0);
        Network::new(
            InputSpec::any_size(1, vec![10.0]),
            vec![
                NamedLayer { name: "conv".into(), layer: Layer::Conv(Conv::new(f, vec![0.0, 0.5], 1, 1).unwrap()) },
                NamedLayer { name: "relu".into(), layer: Layer::Relu },
                NamedLayer { name: "pool".into(), layer: Layer::MaxPool(MaxPool { window: 2, stride: 2, pad: 0 }) },
            ],
        )
        .unwrap()
    }

    #[test]
    fn unknown_layer_lists_valid_names() {
        match toy().layer_index("nope") {
            Err(Error::UnknownLayer { valid, .. }) => assert_eq!(valid, ["conv", "relu", "pool"]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn channel_chain_is_validated() {
        let f = FilterBank::zeros(1, 1, 3, 2);
        let err = Network::new(
            InputSpec::any_size(1, vec![0.0]),
            vec![NamedLayer { name: "c".into(), layer: Layer::Conv(Conv::new(f, vec![0.0; 2], 1, 0).unwrap()) }],
        );
        assert!(matches!(err, Err(Error::Shape(_))));
    }

    #[test]
    fn mean_is_subtracted_once() {
        let net = toy();
        let raw = Tensor::filled(4, 4, 1, 12.0);
        let a = net.forward_image(&raw, 0).unwrap();
        assert!(a[0].data().iter().all(|&v| v == 2.0));
        let b = net.forward(&raw.map(|v| v - 10.0), 0).unwrap();
        assert_eq!(a[1], b[1]);
        assert_eq!(net.add_mean(&net.subtract_mean(&raw).unwrap()).unwrap(), raw);
    }

    #[test]
    fn backward_sums_multiple_injections() {
        let net = toy();
        let x = Tensor::from_fn(4, 4, 1, |v, u, _| (v as f64 - 1.3) * (u as f64 + 0.7));
        let acts = net.forward(&x, 2).unwrap();
        let g1 = Tensor::filled(4, 4, 2, 1.0);
        let g2 = Tensor::filled(2, 2, 2, 1.0);
        let both = net.backward(&acts, &[(0, &g1), (2, &g2)]).unwrap();
        let a = net.backward(&acts, &[(0, &g1)]).unwrap();
        let b = net.backward(&acts, &[(2, &g2)]).unwrap();
        assert!(both.sub(&a.add(&b).unwrap()).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn receptive_field_recursion() {
        let geo = compose_receptive_fields([(11, 4), (1, 1), (3, 2), (5, 1)]);
        let pairs: Vec<_> = geo.iter().map(|g| (g.rf_size, g.rf_stride)).collect();
        assert_eq!(pairs, [(11, 4), (11, 4), (19, 8), (51, 8)]);
    }
}
