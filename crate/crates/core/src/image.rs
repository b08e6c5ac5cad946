//! Minimal in-memory images used by the trainer and the file formats.

use serde::{Deserialize, Serialize};

use crate::color::{lab_norm_to_srgb, srgb_to_lab_norm, LabNorm};

/// An sRGB image with channels in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[f64; 3]>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, pixels: Vec<[f64; 3]>) -> Self {
        assert_eq!(pixels.len(), width * height, "pixel count does not match dimensions");
        Self { width, height, pixels }
    }

    pub fn from_rgb8(width: usize, height: usize, bytes: &[u8]) -> Self {
        let pixels = bytes
            .chunks_exact(3)
            .map(|c| [c[0] as f64 / 255.0, c[1] as f64 / 255.0, c[2] as f64 / 255.0])
            .collect();
        Self::new(width, height, pixels)
    }

    pub fn from_lab(width: usize, height: usize, lab: &[LabNorm]) -> Self {
        Self::new(width, height, lab.iter().map(|&c| lab_norm_to_srgb(c)).collect())
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .flat_map(|p| p.map(|c| (c.clamp(0.0, 1.0) * 255.0).round() as u8))
            .collect()
    }

    pub fn to_lab(&self) -> Vec<LabNorm> {
        self.pixels.iter().map(|&p| srgb_to_lab_norm(p)).collect()
    }
}

/// Peak signal-to-noise ratio for signals on a unit range.
pub fn psnr(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let mse = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}
