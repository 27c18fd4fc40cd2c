#![allow(dead_code)]

use std::path::{Path, PathBuf};

use clap::Parser;
use preimage::layers::{Conv, FilterBank, Layer, MaxPool};
use preimage::network::{InputSpec, Mean, NamedLayer};
use preimage::{Network, RandomSource};
use preimage_cli::config::resolve;
use preimage_cli::run::Session;
use preimage_cli::Cli;

pub const TOY_SIZE: usize = 64;

/// Folder of natural test images: `PREIMAGE_IMAGE_DIR` if set, else the
/// bundled set.
pub fn image_dir() -> PathBuf {
    std::env::var_os("PREIMAGE_IMAGE_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/images"))
}

pub fn images() -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(image_dir())
        .expect("image folder")
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    v.sort();
    v
}

fn conv(rng: &mut RandomSource, shape: [usize; 4], stride: usize) -> Layer {
    let [h, w, cin, cout] = shape;
    let scale = (2.0 / (h * w * cin) as f64).sqrt();
    let data = (0..h * w * cin * cout).map(|_| scale * rng.normal()).collect();
    let bias = (0..cout).map(|_| 0.1 * rng.normal()).collect();
    Layer::Conv(Conv::new(FilterBank::from_vec(h, w, cin, cout, data).unwrap(), bias, stride, 0).unwrap())
}

/// conv 5×5 stride 2 (3 → 16), ReLU, 3×3 max pooling stride 2, on 64×64
/// colour inputs; optionally followed by a fully connected head and softmax.
pub fn toy_network(seed: u64, classes: Option<usize>) -> Network {
    let mut rng = RandomSource::new(seed);
    let mut layers = vec![
        ("conv1", conv(&mut rng, [5, 5, 3, 16], 2)),
        ("relu1", Layer::Relu),
        ("pool1", Layer::MaxPool(MaxPool { window: 3, stride: 2, pad: 0 })),
    ];
    if let Some(n) = classes {
        layers.push(("fc", conv(&mut rng, [14, 14, 16, n], 1)));
        layers.push(("prob", Layer::Softmax));
    }
    Network::new(
        InputSpec {
            height: Some(TOY_SIZE),
            width: Some(TOY_SIZE),
            channels: 3,
            mean: Mean::Channels(vec![123.0, 117.0, 104.0]),
        },
        layers
            .into_iter()
            .map(|(name, layer)| NamedLayer { name: name.into(), layer })
            .collect(),
    )
    .unwrap()
}

/// Parses a command line (without the program name) for an in-memory network.
pub fn session(network: Network, argv: &[&str]) -> preimage_cli::Result<Session> {
    let cli = Cli::try_parse_from(std::iter::once("preimage").chain(argv.iter().copied())).expect("valid flags");
    let config = resolve(cli.command.kind(), cli.command.args(), &network, None)?;
    Session::new(network, config)
}


pub fn path_str(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}
