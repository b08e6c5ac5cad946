//! Training losses on splatted buffers, each paired with its gradient.
//!
//! Weight buffers are pixel-major `N·K` slices with the grey channel first.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::color::{Ab, Palette};
use crate::ssim::{ssim, ssim_grad, SsimConfig};

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("{what}: expected {expected} values, got {found}")]
    Shape { what: &'static str, expected: usize, found: usize },
}

/// Data term of the lightness loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LightnessNorm {
    /// Mean squared error.
    #[default]
    L2Squared,
    /// Mean absolute error.
    L1,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_sparse: f64,
    pub lambda_grey: f64,
    pub lambda_palette: f64,
    /// Data term vs SSIM mix in the lightness loss.
    pub lambda_l: f64,
    pub d_min: f64,
    pub epsilon: f64,
    pub lightness_norm: LightnessNorm,
    pub ssim: SsimConfig,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_sparse: 0.002,
            lambda_grey: 0.03,
            lambda_palette: 0.1,
            lambda_l: 0.8,
            d_min: 0.1,
            epsilon: 1e-8,
            lightness_norm: LightnessNorm::L2Squared,
            ssim: SsimConfig::default(),
        }
    }
}

fn expect(what: &'static str, found: usize, expected: usize) -> Result<(), LossError> {
    if found == expected {
        Ok(())
    } else {
        Err(LossError::Shape { what, expected, found })
    }
}

/// Mean over pixels of `‖W̃ - W_bary‖²`, with gradients for both inputs.
pub fn geometric_loss(w_norm: &[f64], w_bary: &[f64], k: usize) -> Result<(f64, Vec<f64>), LossError> {
    expect("target weights", w_bary.len(), w_norm.len())?;
    expect("weights", w_norm.len() % k.max(1), 0)?;
    let n = (w_norm.len() / k.max(1)).max(1) as f64;
    let mut total = 0.0;
    let grad = w_norm
        .iter()
        .zip(w_bary)
        .map(|(a, b)| {
            let d = a - b;
            total += d * d;
            2.0 * d / n
        })
        .collect();
    Ok((total / n, grad))
}

/// Mean over pixels of `Σc / (Σc² + ε) - 1` over the chromatic channels.
pub fn sparsity_loss(w_norm: &[f64], k: usize, epsilon: f64) -> (f64, Vec<f64>) {
    let n = w_norm.len() / k;
    let inv_n = 1.0 / n.max(1) as f64;
    let mut grad = vec![0.0; w_norm.len()];
    let mut total = 0.0;
    for p in 0..n {
        let chroma = &w_norm[p * k + 1..(p + 1) * k];
        let s: f64 = chroma.iter().sum();
        let q: f64 = chroma.iter().map(|w| w * w).sum::<f64>() + epsilon;
        total += s / q - 1.0;
        for (j, &w) in chroma.iter().enumerate() {
            grad[p * k + 1 + j] = (1.0 / q - 2.0 * s * w / (q * q)) * inv_n;
        }
    }
    (total * inv_n, grad)
}

/// Mean grey weight.
pub fn grey_loss(w_norm: &[f64], k: usize) -> (f64, Vec<f64>) {
    let n = w_norm.len() / k;
    let inv_n = 1.0 / n.max(1) as f64;
    let mut grad = vec![0.0; w_norm.len()];
    let mut total = 0.0;
    for p in 0..n {
        total += w_norm[p * k];
        grad[p * k] = inv_n;
    }
    (total * inv_n, grad)
}

/// Hinge on the distance between every pair of chromatic vertices.
/// Coincident vertices get a zero subgradient.
pub fn palette_separation_loss(palette: &Palette, d_min: f64) -> (f64, Vec<Ab>) {
    let v = &palette.vertices;
    let mut grad = vec![[0.0; 2]; v.len()];
    let mut total = 0.0;
    for i in 1..v.len() {
        for j in i + 1..v.len() {
            let d = [v[i][0] - v[j][0], v[i][1] - v[j][1]];
            let dist = d[0].hypot(d[1]);
            if dist >= d_min {
                continue;
            }
            total += d_min - dist;
            if dist > 0.0 {
                for a in 0..2 {
                    grad[i][a] -= d[a] / dist;
                    grad[j][a] += d[a] / dist;
                }
            }
        }
    }
    (total, grad)
}

/// `λ_l · data(l, l_gt) + (1 - λ_l)(1 - SSIM(l, l_gt))` and its gradient on `l`.
pub fn lightness_loss(
    l: &[f64],
    l_gt: &[f64],
    width: usize,
    height: usize,
    weights: &LossWeights,
) -> Result<(f64, Vec<f64>), LossError> {
    expect("lightness", l.len(), width * height)?;
    expect("target lightness", l_gt.len(), width * height)?;
    let n = l.len().max(1) as f64;
    let lam = weights.lambda_l;
    let mut data = 0.0;
    let mut grad: Vec<f64> = l
        .iter()
        .zip(l_gt)
        .map(|(a, b)| {
            let d = a - b;
            match weights.lightness_norm {
                LightnessNorm::L2Squared => {
                    data += d * d;
                    lam * 2.0 * d / n
                }
                LightnessNorm::L1 => {
                    data += d.abs();
                    lam * d.signum() / n
                }
            }
        })
        .collect();
    let mut value = lam * data / n;
    if lam < 1.0 {
        let (s, gs) = ssim_grad(l, l_gt, width, height, &weights.ssim);
        value += (1.0 - lam) * (1.0 - s);
        for (g, d) in grad.iter_mut().zip(gs) {
            *g -= (1.0 - lam) * d;
        }
    }
    Ok((value, grad))
}

/// Lightness loss value only.
pub fn lightness_loss_value(
    l: &[f64],
    l_gt: &[f64],
    width: usize,
    height: usize,
    weights: &LossWeights,
) -> Result<f64, LossError> {
    expect("lightness", l.len(), width * height)?;
    expect("target lightness", l_gt.len(), width * height)?;
    let n = l.len().max(1) as f64;
    let data: f64 = l
        .iter()
        .zip(l_gt)
        .map(|(a, b)| match weights.lightness_norm {
            LightnessNorm::L2Squared => (a - b) * (a - b),
            LightnessNorm::L1 => (a - b).abs(),
        })
        .sum();
    let mut value = weights.lambda_l * data / n;
    if weights.lambda_l < 1.0 {
        value += (1.0 - weights.lambda_l) * (1.0 - ssim(l, l_gt, width, height, &weights.ssim));
    }
    Ok(value)
}

/// Per-term loss values; `total` is the weighted sum.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub lightness: f64,
    pub geometric: f64,
    pub sparsity: f64,
    pub grey: f64,
    pub palette: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn combine(lightness: f64, geometric: f64, sparsity: f64, grey: f64, palette: f64, w: &LossWeights) -> Self {
        let total = lightness
            + geometric
            + w.lambda_sparse * sparsity
            + w.lambda_grey * grey
            + w.lambda_palette * palette;
        Self { lightness, geometric, sparsity, grey, palette, total }
    }
}

/// Buffers of one view entering the total loss.
#[derive(Debug, Clone, Copy)]
pub struct LossInputs<'a> {
    pub width: usize,
    pub height: usize,
    pub k: usize,
    pub w_norm: &'a [f64],
    pub l: &'a [f64],
    pub w_bary: &'a [f64],
    pub l_gt: &'a [f64],
}

/// Gradients of the weighted total.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGradients {
    pub w_norm: Vec<f64>,
    pub l: Vec<f64>,
    /// Gradient on the target weights (feeds back into the palette).
    pub w_bary: Vec<f64>,
    /// Direct gradient on palette vertices from the separation term.
    pub vertices: Vec<Ab>,
}

pub fn total_loss(
    inputs: &LossInputs,
    palette: &Palette,
    weights: &LossWeights,
) -> Result<(LossBreakdown, LossGradients), LossError> {
    let n = inputs.width * inputs.height;
    let k = inputs.k;
    expect("weights", inputs.w_norm.len(), n * k)?;
    expect("palette", palette.k(), k)?;
    let (lightness, g_l) = lightness_loss(inputs.l, inputs.l_gt, inputs.width, inputs.height, weights)?;
    let (geometric, g_geo) = geometric_loss(inputs.w_norm, inputs.w_bary, k)?;
    let (sparsity, g_sparse) = sparsity_loss(inputs.w_norm, k, weights.epsilon);
    let (grey, g_grey) = grey_loss(inputs.w_norm, k);
    let (sep, g_sep) = palette_separation_loss(palette, weights.d_min);
    let breakdown = LossBreakdown::combine(lightness, geometric, sparsity, grey, sep, weights);
    let w_norm = (0..n * k)
        .map(|i| g_geo[i] + weights.lambda_sparse * g_sparse[i] + weights.lambda_grey * g_grey[i])
        .collect();
    let w_bary = g_geo.iter().map(|g| -g).collect();
    let vertices = g_sep
        .iter()
        .map(|g| [weights.lambda_palette * g[0], weights.lambda_palette * g[1]])
        .collect();
    Ok((breakdown, LossGradients { w_norm, l: g_l, w_bary, vertices }))
}
