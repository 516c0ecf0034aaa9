//! Frozen encoders feeding the renaming model.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::tape::Mat;
use crate::error::{Error, Result};

/// An RGB image with channels in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[f64; 3]>,
}

impl RgbImage {
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> Self {
        let mut pixels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(x, y));
            }
        }
        RgbImage { width, height, pixels }
    }

    pub fn read_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| match e {
                image::ImageError::IoError(io) => Error::io(path, io),
                other => Error::parse(path, other),
            })?
            .to_rgb8();
        let (w, h) = img.dimensions();
        let pixels = img
            .pixels()
            .map(|p| [p[0] as f64 / 255.0, p[1] as f64 / 255.0, p[2] as f64 / 255.0])
            .collect();
        Ok(RgbImage {
            width: w as usize,
            height: h as usize,
            pixels,
        })
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let quant = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        image::RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let p = self.pixels[y as usize * self.width + x as usize];
            image::Rgb([quant(p[0]), quant(p[1]), quant(p[2])])
        })
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        self.to_rgb8()
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| match e {
                image::ImageError::IoError(io) => Error::io(path, io),
                other => Error::parse(path, other),
            })
    }
}

/// Random Fourier features of pixel colour, normalised per pixel.
///
/// Stands in for a frozen vision tower at desk scale: colours that are close get
/// nearly parallel features, distant colours nearly orthogonal ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisionEncoder {
    pub dim: usize,
    pub bandwidth: f64,
    pub seed: u64,
    omega: Vec<[f64; 3]>,
    phase: Vec<f64>,
}

impl VisionEncoder {
    pub fn new(dim: usize, bandwidth: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, bandwidth).expect("finite bandwidth");
        let uniform = Uniform::new(0.0, std::f64::consts::TAU).expect("valid range");
        let omega = (0..dim)
            .map(|_| {
                [
                    normal.sample(&mut rng),
                    normal.sample(&mut rng),
                    normal.sample(&mut rng),
                ]
            })
            .collect();
        let phase = (0..dim).map(|_| uniform.sample(&mut rng)).collect();
        VisionEncoder {
            dim,
            bandwidth,
            seed,
            omega,
            phase,
        }
    }

    pub fn encode_color(&self, rgb: [f64; 3]) -> Vec<f64> {
        let mut v: Vec<f64> = self
            .omega
            .iter()
            .zip(&self.phase)
            .map(|(w, p)| (w[0] * rgb[0] + w[1] * rgb[1] + w[2] * rgb[2] + p).cos())
            .collect();
        let n = crate::names::l2_norm(&v).max(1e-12);
        v.iter_mut().for_each(|x| *x /= n);
        v
    }

    /// `P x dim` features, one row per pixel in row-major order.
    pub fn encode_image(&self, image: &RgbImage) -> Mat {
        let mut out = Mat::zeros((image.pixels.len(), self.dim));
        for (mut row, px) in out.rows_mut().into_iter().zip(&image.pixels) {
            for (o, v) in row.iter_mut().zip(self.encode_color(*px)) {
                *o = v;
            }
        }
        out
    }

    pub fn parameter_digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.dim.to_le_bytes());
        for (w, p) in self.omega.iter().zip(&self.phase) {
            for x in w.iter().chain(std::iter::once(p)) {
                h.update(x.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}
