//! Network files: a TOML manifest describing the architecture and a raw
//! little-endian `f32` weight blob.
//!
//! ```toml
//! format = "preimage-net"
//! version = 1
//!
//! [input]
//! height = 227
//! width = 227
//! channels = 3
//! mean = [122.77, 115.95, 102.98]
//!
//! [[layer]]
//! name = "conv1"
//! kind = "conv"
//! filter = [11, 11, 3, 96]   # height, width, input channels per group, outputs
//! stride = 4
//! pad = 0
//! weight_offset = 0          # byte offsets into the blob
//! bias_offset = 139392
//! ```
//!
//! Filters are stored in `(dv, du, in, out)` order with `out` fastest. A mean
//! image may replace the per-channel mean through `input.mean_offset`, pointing
//! at `height × width × channels` values in the blob.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hogsift::{Binning, BinningMode};
use crate::layers::{Conv, FilterBank, Layer, LayerKind, Lrn, LrnGroups, MaxPool, ReplicatePad};
use crate::network::{compose_receptive_fields, InputSpec, LayerGeometry, Mean, NamedLayer, Network};
use crate::tensor::Tensor;

pub const FORMAT: &str = "preimage-net";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkManifest {
    pub format: String,
    pub version: u32,
    pub input: ManifestInput,
    #[serde(rename = "layer", default)]
    pub layers: Vec<ManifestLayer>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ManifestInput {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<usize>,
    pub channels: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_offset: Option<u64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ManifestLayer {
    pub name: String,
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub filter: Option<[usize; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stride: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pad: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub groups: Option<usize>,
    /// Max-pooling window.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window: Option<usize>,
    /// Normalization grouping: `"window"` (sliding) or `"block"`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub norm: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ceiling: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub orientations: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<String>,
    /// Replicate-padding amount.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub amount: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight_offset: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias_offset: Option<u64>,
}

fn missing(layer: &str, field: &str) -> Error {
    Error::Manifest(format!("layer `{layer}` is missing `{field}`"))
}

impl ManifestLayer {
    fn kind(&self) -> Result<LayerKind> {
        LayerKind::parse(&self.kind).ok_or_else(|| Error::UnsupportedKind {
            layer: self.name.clone(),
            kind: self.kind.clone(),
        })
    }

    fn req<T: Copy>(&self, v: Option<T>, field: &str) -> Result<T> {
        v.ok_or_else(|| missing(&self.name, field))
    }

    fn filter(&self) -> Result<[usize; 4]> {
        let f = self.req(self.filter, "filter")?;
        if f.contains(&0) {
            return Err(Error::Manifest(format!("layer `{}` has an empty filter", self.name)));
        }
        Ok(f)
    }

    /// Byte ranges this layer reads from the blob.
    fn blob_ranges(&self) -> Result<Vec<(u64, u64)>> {
        if self.kind()? != LayerKind::Conv {
            return Ok(Vec::new());
        }
        let [fh, fw, i, o] = self.filter()?;
        let w = self.req(self.weight_offset, "weight_offset")?;
        let b = self.req(self.bias_offset, "bias_offset")?;
        Ok(vec![(w, w + 4 * (fh * fw * i * o) as u64), (b, b + 4 * o as u64)])
    }

    fn footprint(&self) -> Result<(usize, usize)> {
        Ok(match self.kind()? {
            LayerKind::Conv => {
                let [fh, fw, _, _] = self.filter()?;
                (fh.max(fw), self.stride.unwrap_or(1))
            }
            LayerKind::MaxPool => (self.req(self.window, "window")?, self.stride.unwrap_or(1)),
            _ => (1, 1),
        })
    }

    /// Output channel count given the incoming one.
    fn chain(&self, channels: usize) -> Result<usize> {
        match self.kind()? {
            LayerKind::Conv => {
                let [_, _, i, o] = self.filter()?;
                let g = self.groups.unwrap_or(1);
                if g == 0 || o % g != 0 || i * g != channels {
                    return Err(Error::Manifest(format!(
                        "layer `{}` expects {} input channels in {g} groups but receives {channels}",
                        self.name,
                        i * g
                    )));
                }
                Ok(o)
            }
            LayerKind::Binning => {
                let k = self.req(self.orientations, "orientations")?;
                if channels != k + 2 {
                    return Err(Error::Manifest(format!(
                        "layer `{}` expects {} input channels but receives {channels}",
                        self.name,
                        k + 2
                    )));
                }
                Ok(k)
            }
            _ => Ok(channels),
        }
    }

    fn build(&self, blob: &[u8]) -> Result<Layer> {
        let name = &self.name;
        let config = |e: Error| Error::Manifest(format!("layer `{name}`: {e}"));
        Ok(match self.kind()? {
            LayerKind::Conv => {
                let [fh, fw, i, o] = self.filter()?;
                let w = read_f32s(blob, self.req(self.weight_offset, "weight_offset")?, fh * fw * i * o)?;
                let b = read_f32s(blob, self.req(self.bias_offset, "bias_offset")?, o)?;
                let bank = FilterBank::from_vec(fh, fw, i, o, w)?;
                Layer::Conv(
                    Conv::grouped(
                        bank,
                        b,
                        self.stride.unwrap_or(1),
                        self.pad.unwrap_or(0),
                        self.groups.unwrap_or(1),
                    )
                    .map_err(config)?,
                )
            }
            LayerKind::Relu => Layer::Relu,
            LayerKind::Softmax => Layer::Softmax,
            LayerKind::MaxPool => {
                let window = self.req(self.window, "window")?;
                let stride = self.stride.unwrap_or(1);
                if window == 0 || stride == 0 {
                    return Err(Error::Manifest(format!("layer `{name}` has a zero window or stride")));
                }
                Layer::MaxPool(MaxPool {
                    window,
                    stride,
                    pad: self.pad.unwrap_or(0),
                })
            }
            LayerKind::Lrn => {
                let size = self.req(self.size, "size")?;
                let groups = match self.norm.as_deref() {
                    Some("window") => LrnGroups::Window(size),
                    Some("block") => LrnGroups::Block(size),
                    Some(other) => {
                        return Err(Error::Manifest(format!("layer `{name}` has unknown norm `{other}`")))
                    }
                    None => return Err(missing(name, "norm")),
                };
                Layer::Lrn(
                    Lrn::new(
                        groups,
                        self.req(self.kappa, "kappa")?,
                        self.req(self.alpha, "alpha")?,
                        self.req(self.beta, "beta")?,
                    )
                    .map_err(config)?,
                )
            }
            LayerKind::Clamp => Layer::Clamp {
                ceiling: self.req(self.ceiling, "ceiling")?,
            },
            LayerKind::Binning => {
                let mode = self.mode.as_deref().ok_or_else(|| missing(name, "mode"))?;
                let mode = BinningMode::parse(mode)
                    .ok_or_else(|| Error::Manifest(format!("layer `{name}` has unknown binning mode `{mode}`")))?;
                Layer::Binning(Binning::new(self.req(self.orientations, "orientations")?, mode).map_err(config)?)
            }
            LayerKind::Pad => Layer::Pad(ReplicatePad {
                amount: self.req(self.amount, "amount")?,
            }),
        })
    }
}

fn read_f32s(blob: &[u8], offset: u64, count: usize) -> Result<Vec<f64>> {
    let start = usize::try_from(offset).map_err(|_| Error::Corrupt("offset overflows".into()))?;
    let end = start + 4 * count;
    let bytes = blob.get(start..end).ok_or_else(|| {
        Error::Corrupt(format!(
            "weight blob has {} bytes but bytes {start}..{end} are required",
            blob.len()
        ))
    })?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

fn push_f32s(blob: &mut Vec<u8>, values: &[f64]) -> u64 {
    let offset = blob.len() as u64;
    for &v in values {
        blob.extend_from_slice(&(v as f32).to_le_bytes());
    }
    offset
}

impl NetworkManifest {
    pub fn parse(text: &str) -> Result<Self> {
        let m: NetworkManifest = toml::from_str(text).map_err(|e| Error::Manifest(e.to_string()))?;
        m.validate()?;
        Ok(m)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Manifest(e.to_string()))
    }

    /// Checks everything that does not need the weight blob.
    pub fn validate(&self) -> Result<()> {
        if self.format != FORMAT {
            return Err(Error::Manifest(format!("unknown format `{}`", self.format)));
        }
        if self.version != VERSION {
            return Err(Error::Manifest(format!("unsupported version {}", self.version)));
        }
        if self.layers.is_empty() {
            return Err(Error::Manifest("no layers".into()));
        }
        let input = &self.input;
        match (&input.mean, input.mean_offset) {
            (Some(m), None) if m.len() != input.channels => {
                return Err(Error::Manifest(format!(
                    "{} mean values for {} channels",
                    m.len(),
                    input.channels
                )))
            }
            (Some(_), Some(_)) => {
                return Err(Error::Manifest("both `mean` and `mean_offset` given".into()))
            }
            (None, Some(_)) if input.height.is_none() || input.width.is_none() => {
                return Err(Error::Manifest("a mean image needs the input height and width".into()))
            }
            _ => {}
        }
        let mut names = HashSet::new();
        let mut channels = input.channels;
        let mut ranges = Vec::new();
        if let Some(offset) = input.mean_offset {
            let n = input.height.unwrap_or(0) * input.width.unwrap_or(0) * input.channels;
            ranges.push((offset, offset + 4 * n as u64, "input mean".to_string()));
        }
        for l in &self.layers {
            if !names.insert(l.name.as_str()) {
                return Err(Error::Manifest(format!("duplicate layer name `{}`", l.name)));
            }
            channels = l.chain(channels)?;
            ranges.extend(l.blob_ranges()?.into_iter().map(|(a, b)| (a, b, l.name.clone())));
        }
        ranges.sort();
        for pair in ranges.windows(2) {
            if pair[1].0 < pair[0].1 {
                return Err(Error::Manifest(format!(
                    "blob ranges of `{}` and `{}` overlap",
                    pair[0].2, pair[1].2
                )));
            }
        }
        Ok(())
    }

    /// Smallest blob length that covers every declared range.
    pub fn required_blob_len(&self) -> u64 {
        let mean = self.input.mean_offset.map_or(0, |o| {
            o + 4 * (self.input.height.unwrap_or(0) * self.input.width.unwrap_or(0) * self.input.channels) as u64
        });
        self.layers
            .iter()
            .filter_map(|l| l.blob_ranges().ok())
            .flatten()
            .map(|(_, end)| end)
            .fold(mean, u64::max)
    }

    pub fn layer_names(&self) -> Vec<String> {
        self.layers.iter().map(|l| l.name.clone()).collect()
    }

    /// Receptive field of every layer, from the declared geometry alone.
    pub fn receptive_fields(&self) -> Result<Vec<(String, LayerGeometry)>> {
        let footprints = self.layers.iter().map(|l| l.footprint()).collect::<Result<Vec<_>>>()?;
        Ok(self
            .layer_names()
            .into_iter()
            .zip(compose_receptive_fields(footprints))
            .collect())
    }

    pub fn build(&self, blob: &[u8]) -> Result<Network> {
        self.validate()?;
        if (blob.len() as u64) < self.required_blob_len() {
            return Err(Error::Corrupt(format!(
                "weight blob has {} bytes, manifest needs {}",
                blob.len(),
                self.required_blob_len()
            )));
        }
        let input = &self.input;
        let mean = match (&input.mean, input.mean_offset) {
            (_, Some(offset)) => {
                let (h, w) = (input.height.unwrap_or(0), input.width.unwrap_or(0));
                Mean::Image(Tensor::from_vec(h, w, input.channels, read_f32s(blob, offset, h * w * input.channels)?)?)
            }
            (Some(m), None) => Mean::Channels(m.clone()),
            (None, None) => Mean::Channels(vec![0.0; input.channels]),
        };
        let layers = self
            .layers
            .iter()
            .map(|l| {
                Ok(NamedLayer {
                    name: l.name.clone(),
                    layer: l.build(blob)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Network::new(
            InputSpec {
                height: input.height,
                width: input.width,
                channels: input.channels,
                mean,
            },
            layers,
        )
    }

    /// Canonical manifest and blob for a network: parameters are packed in
    /// layer order, weights before bias, with the mean image (if any) first.
    pub fn from_network(network: &Network) -> (NetworkManifest, Vec<u8>) {
        let mut blob = Vec::new();
        let spec = network.input();
        let (mean, mean_offset) = match &spec.mean {
            Mean::Channels(m) => (Some(m.clone()), None),
            Mean::Image(t) => (None, Some(push_f32s(&mut blob, t.data()))),
        };
        let input = ManifestInput {
            height: spec.height,
            width: spec.width,
            channels: spec.channels,
            mean,
            mean_offset,
        };
        let layers = network
            .layers()
            .iter()
            .map(|nl| {
                let mut m = ManifestLayer {
                    name: nl.name.clone(),
                    kind: nl.layer.kind().as_str().to_string(),
                    ..Default::default()
                };
                match &nl.layer {
                    Layer::Conv(c) => {
                        m.filter = Some(c.filters().shape());
                        m.stride = Some(c.stride());
                        m.pad = Some(c.pad());
                        if c.groups() != 1 {
                            m.groups = Some(c.groups());
                        }
                        m.weight_offset = Some(push_f32s(&mut blob, c.filters().data()));
                        m.bias_offset = Some(push_f32s(&mut blob, c.bias()));
                    }
                    Layer::MaxPool(p) => {
                        m.window = Some(p.window);
                        m.stride = Some(p.stride);
                        m.pad = Some(p.pad);
                    }
                    Layer::Lrn(l) => {
                        let (norm, size) = match l.groups {
                            LrnGroups::Window(n) => ("window", n),
                            LrnGroups::Block(n) => ("block", n),
                        };
                        m.norm = Some(norm.to_string());
                        m.size = Some(size);
                        m.kappa = Some(l.kappa);
                        m.alpha = Some(l.alpha);
                        m.beta = Some(l.beta);
                    }
                    Layer::Clamp { ceiling } => m.ceiling = Some(*ceiling),
                    Layer::Binning(b) => {
                        m.orientations = Some(b.orientations);
                        m.mode = Some(b.mode.as_str().to_string());
                    }
                    Layer::Pad(p) => m.amount = Some(p.amount),
                    Layer::Relu | Layer::Softmax => {}
                }
                m
            })
            .collect();
        (
            NetworkManifest {
                format: FORMAT.to_string(),
                version: VERSION,
                input,
                layers,
            },
            blob,
        )
    }
}

pub fn read_manifest(path: &Path) -> Result<NetworkManifest> {
    NetworkManifest::parse(&fs::read_to_string(path)?)
}

pub fn load_network(manifest: &Path, weights: &Path) -> Result<Network> {
    let m = read_manifest(manifest)?;
    m.build(&fs::read(weights)?)
}

pub fn save_network(network: &Network, manifest: &Path, weights: &Path) -> Result<()> {
    let (m, blob) = NetworkManifest::from_network(network);
    fs::write(manifest, m.to_toml()?)?;
    fs::write(weights, blob)?;
    Ok(())
}

pub fn receptive_fields(network: &Network) -> Vec<LayerGeometry> {
    network.receptive_fields()
}
