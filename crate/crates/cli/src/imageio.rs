//! PNG and JSON inputs, PNG output. Pixels are reals in `[0, 255]`; the
//! network mean is handled by the caller.

use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{DynamicImage, GrayImage, ImageFormat, RgbImage};
use preimage::Tensor;
use serde::Deserialize;

use crate::error::{CliError, Result};

/// Rec. 601 luma weights.
const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

pub fn read_png(path: &Path) -> Result<DynamicImage> {
    image::open(path).map_err(|e| CliError::Image {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Converts to `channels` (1 via luma, or 3), optionally resizing to `size`
/// (height, width) first.
pub fn to_tensor(img: &DynamicImage, channels: usize, size: Option<(usize, usize)>) -> Result<Tensor> {
    let img = match size {
        Some((h, w)) if (h as u32, w as u32) != (img.height(), img.width()) => {
            img.resize_exact(w as u32, h as u32, FilterType::Triangle)
        }
        _ => img.clone(),
    };
    let rgb = img.to_rgb8();
    let (h, w) = (rgb.height() as usize, rgb.width() as usize);
    match channels {
        3 => Ok(Tensor::from_fn(h, w, 3, |v, u, k| rgb.get_pixel(u as u32, v as u32)[k] as f64)),
        1 => Ok(Tensor::from_fn(h, w, 1, |v, u, _| {
            let p = rgb.get_pixel(u as u32, v as u32);
            (0..3).map(|k| LUMA[k] * p[k] as f64).sum()
        })),
        c => Err(CliError::conflict(format!("cannot convert a PNG to {c} channels"))),
    }
}

fn quantize(v: f64) -> u8 {
    v.clamp(0.0, 255.0).round() as u8
}

/// Writes a 1- or 3-channel image in `[0, 255]`, replacing any existing file
/// only once the new one is complete.
pub fn write_png(path: &Path, raw: &Tensor) -> Result<()> {
    let (h, w, c) = raw.shape();
    let img = match c {
        1 => DynamicImage::ImageLuma8(GrayImage::from_fn(w as u32, h as u32, |u, v| {
            image::Luma([quantize(raw.get(v as usize, u as usize, 0))])
        })),
        3 => DynamicImage::ImageRgb8(RgbImage::from_fn(w as u32, h as u32, |u, v| {
            image::Rgb([0, 1, 2].map(|k| quantize(raw.get(v as usize, u as usize, k))))
        })),
        _ => return Err(CliError::conflict(format!("cannot write a {c}-channel image as PNG"))),
    };
    let tmp = temp_path(path);
    img.save_with_format(&tmp, ImageFormat::Png).map_err(|e| CliError::Output {
        path: path.to_path_buf(),
        source: std::io::Error::other(e),
    })?;
    fs::rename(&tmp, path).map_err(|source| CliError::Output {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let tmp = temp_path(path);
    fs::write(&tmp, contents)
        .and_then(|_| fs::rename(&tmp, path))
        .map_err(|source| CliError::Output {
            path: path.to_path_buf(),
            source,
        })
}

fn temp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".partial");
    path.with_file_name(name)
}

/// Binary mask from a grayscale PNG of size `h × w`, broadcast over `c` channels.
pub fn read_mask(path: &Path, (h, w, c): (usize, usize, usize)) -> Result<Tensor> {
    let img = read_png(path)?.to_luma8();
    if (img.height() as usize, img.width() as usize) != (h, w) {
        return Err(CliError::conflict(format!(
            "mask is {}×{}, the layer code is {h}×{w}",
            img.height(),
            img.width()
        )));
    }
    Ok(Tensor::from_fn(h, w, c, |v, u, _| {
        if img.get_pixel(u as u32, v as u32)[0] > 127 {
            1.0
        } else {
            0.0
        }
    }))
}

#[derive(Deserialize)]
struct TemplateFile {
    height: usize,
    width: usize,
    channels: usize,
    /// Row-major, channels fastest.
    data: Vec<f64>,
}

pub fn read_template(path: &Path) -> Result<Tensor> {
    let bad = |reason: String| CliError::Input {
        path: path.to_path_buf(),
        reason,
    };
    let text = fs::read_to_string(path).map_err(|e| bad(e.to_string()))?;
    let t: TemplateFile = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
    Tensor::from_vec(t.height, t.width, t.channels, t.data).map_err(|e| bad(e.to_string()))
}
