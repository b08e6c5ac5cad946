//! Normalized CIELAB conversions and the polar palette parameterization.
//!
//! All three Lab channels are mapped to `[0, 1]`: `L / 100`, `(a + 128) / 255`
//! and `(b + 128) / 255`. Neutral `a = b = 0` therefore lands on `128/255`,
//! slightly off the fixed grey vertex `(0.5, 0.5)`; the offset is below any
//! perceptual threshold and is left alone.

use std::f64::consts::PI;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::math::{softplus, softplus_grad};

/// A point in normalized ab-space.
pub type Ab = [f64; 2];

/// The fixed achromatic palette vertex.
pub const GREY: Ab = [0.5, 0.5];

// D65 reference white, Y normalized to 1.
const WHITE: [f64; 3] = [0.950_47, 1.0, 1.088_83];

const RGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.412_456_4, 0.357_576_1, 0.180_437_5],
    [0.212_672_9, 0.715_152_2, 0.072_175_0],
    [0.019_333_9, 0.119_192_0, 0.950_304_1],
];

const XYZ_TO_RGB: [[f64; 3]; 3] = [
    [3.240_454_2, -1.537_138_5, -0.498_531_4],
    [-0.969_266_0, 1.876_010_8, 0.041_556_0],
    [0.055_643_4, -0.204_025_9, 1.057_225_2],
];

const DELTA: f64 = 6.0 / 29.0;

#[derive(Debug, Error, PartialEq)]
pub enum PaletteError {
    #[error("palette needs at least 3 colors, got {0}")]
    TooFewColors(usize),
    #[error("palette parameter vectors differ in length ({0} angles vs {1} radii)")]
    LengthMismatch(usize, usize),
}

/// A normalized CIELAB color, every channel in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabNorm {
    #[serde(rename = "L", alias = "l")]
    pub l: f64,
    pub a: f64,
    pub b: f64,
}

impl LabNorm {
    /// Builds a color, clamping every channel into `[0, 1]`. Non-finite input maps to 0.
    pub fn new(l: f64, a: f64, b: f64) -> Self {
        let c = |v: f64| if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 };
        Self { l: c(l), a: c(a), b: c(b) }
    }

    pub fn ab(&self) -> Ab {
        [self.a, self.b]
    }
}

fn srgb_decode(c: f64) -> f64 {
    if c <= 0.040_45 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

fn srgb_encode(c: f64) -> f64 {
    if c <= 0.003_130_8 {
        12.92 * c
    } else {
        1.055 * c.powf(1.0 / 2.4) - 0.055
    }
}

fn lab_f(t: f64) -> f64 {
    if t > DELTA * DELTA * DELTA {
        t.cbrt()
    } else {
        t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
    }
}

fn lab_f_inv(t: f64) -> f64 {
    if t > DELTA {
        t * t * t
    } else {
        3.0 * DELTA * DELTA * (t - 4.0 / 29.0)
    }
}

fn mat3_mul(m: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

/// sRGB (D65) to normalized CIELAB. Inputs are clamped to `[0, 1]`.
pub fn srgb_to_lab_norm(rgb: [f64; 3]) -> LabNorm {
    let lin = rgb.map(|c| srgb_decode(if c.is_finite() { c.clamp(0.0, 1.0) } else { 0.0 }));
    let xyz = mat3_mul(&RGB_TO_XYZ, lin);
    let fx = lab_f(xyz[0] / WHITE[0]);
    let fy = lab_f(xyz[1] / WHITE[1]);
    let fz = lab_f(xyz[2] / WHITE[2]);
    let l = 116.0 * fy - 16.0;
    let a = 500.0 * (fx - fy);
    let b = 200.0 * (fy - fz);
    LabNorm::new(l / 100.0, (a + 128.0) / 255.0, (b + 128.0) / 255.0)
}

fn lab_norm_to_linear(lab: LabNorm) -> [f64; 3] {
    let l = lab.l * 100.0;
    let a = lab.a * 255.0 - 128.0;
    let b = lab.b * 255.0 - 128.0;
    let fy = (l + 16.0) / 116.0;
    let fx = fy + a / 500.0;
    let fz = fy - b / 200.0;
    let xyz = [
        WHITE[0] * lab_f_inv(fx),
        WHITE[1] * lab_f_inv(fy),
        WHITE[2] * lab_f_inv(fz),
    ];
    mat3_mul(&XYZ_TO_RGB, xyz)
}

/// Whether a Lab color maps into the sRGB cube without clamping.
pub fn lab_norm_in_gamut(lab: LabNorm) -> bool {
    lab_norm_to_linear(lab).iter().all(|c| (0.0..=1.0).contains(c))
}

/// Normalized CIELAB to sRGB, clamping out-of-gamut results into `[0, 1]`.
pub fn lab_norm_to_srgb(lab: LabNorm) -> [f64; 3] {
    lab_norm_to_linear(lab).map(|c| srgb_encode(c.clamp(0.0, 1.0)))
}

const ENCODE_LUT_SIZE: usize = 4096;

fn encode_lut() -> &'static [f32] {
    static LUT: OnceLock<Vec<f32>> = OnceLock::new();
    LUT.get_or_init(|| {
        (0..=ENCODE_LUT_SIZE)
            .map(|i| srgb_encode(i as f64 / ENCODE_LUT_SIZE as f64) as f32)
            .collect()
    })
}

fn lab_f_inv32(t: f32) -> f32 {
    const D: f32 = 6.0 / 29.0;
    let lin = 3.0 * D * D * (t - 4.0 / 29.0);
    if t > D {
        t * t * t
    } else {
        lin
    }
}

const ROW_CHUNK: usize = 64;

/// Largest index into the encode table as an f32 scale, keeping `floor(v) + 1`
/// in bounds.
const LUT_SCALE: f32 = ENCODE_LUT_SIZE as f32 - 1.0 / 1024.0;

/// Display-path conversion to 8-bit sRGB.
///
/// Uses single precision and a tabulated transfer curve; the result is within
/// half a code value of rounding [`lab_norm_to_srgb`].
pub fn lab_norm_to_srgb8(lab: LabNorm) -> [u8; 3] {
    let mut out = [0u8; 3];
    lab_norm_row_to_srgb8(&[lab], &mut out);
    out
}

/// [`lab_norm_to_srgb8`] over a row of pixels into packed RGB bytes.
///
/// # Panics
/// If `out` is not exactly three bytes per pixel.
pub fn lab_norm_row_to_srgb8(lab: &[LabNorm], out: &mut [u8]) {
    // 2^23: adding and subtracting it rounds an f32 in [0, 2^22) to an integer.
    const MAGIC: f32 = 8_388_608.0;
    assert_eq!(out.len(), 3 * lab.len(), "rgb row length");
    let m = XYZ_TO_RGB.map(|r| r.map(|v| v as f32));
    let white = WHITE.map(|v| v as f32);
    let lut = encode_lut();
    let mut soa = [[0f32; ROW_CHUNK]; 3];
    let mut idx = [[0u32; ROW_CHUNK]; 3];
    let mut frac = [[0f32; ROW_CHUNK]; 3];
    for (src, dst) in lab.chunks(ROW_CHUNK).zip(out.chunks_mut(3 * ROW_CHUNK)) {
        for (i, c) in src.iter().enumerate() {
            soa[0][i] = c.l as f32;
            soa[1][i] = c.a as f32;
            soa[2][i] = c.b as f32;
        }
        // Written with selects and bit tricks instead of clamp and `as` casts
        // so that this loop vectorizes.
        for i in 0..ROW_CHUNK {
            let l = soa[0][i] * 100.0;
            let a = soa[1][i] * 255.0 - 128.0;
            let b = soa[2][i] * 255.0 - 128.0;
            let fy = (l + 16.0) * (1.0 / 116.0);
            let x = white[0] * lab_f_inv32(fy + a * (1.0 / 500.0));
            let y = white[1] * lab_f_inv32(fy);
            let z = white[2] * lab_f_inv32(fy - b * (1.0 / 200.0));
            for ch in 0..3 {
                let v = m[ch][0] * x + m[ch][1] * y + m[ch][2] * z;
                let v = if v > 0.0 { v } else { 0.0 };
                let v = if v < 1.0 { v } else { 1.0 } * LUT_SCALE;
                let r = (v + MAGIC) - MAGIC;
                let fl = if r > v { r - 1.0 } else { r };
                idx[ch][i] = (fl + MAGIC).to_bits() & 0x7f_ffff;
                frac[ch][i] = v - fl;
            }
        }
        for (i, px) in dst.chunks_exact_mut(3).enumerate() {
            for ch in 0..3 {
                let j = idx[ch][i] as usize;
                let (lo, hi) = (lut[j], lut[j + 1]);
                px[ch] = ((lo + (hi - lo) * frac[ch][i]) * 255.0 + 0.5) as u8;
            }
        }
    }
}

/// Unconstrained palette parameters: clockwise angle offsets and radius
/// pre-activations for the `K - 1` chromatic vertices, plus a global
/// clockwise rotation of the whole fan.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PaletteParams {
    pub delta_theta: Vec<f64>,
    pub log_r: Vec<f64>,
    #[serde(default)]
    pub rotation: f64,
}

impl PaletteParams {
    /// Parameters that decode to `k - 1` vertices evenly spaced on a circle of `radius`.
    pub fn regular(k: usize, radius: f64) -> Self {
        let n = k.saturating_sub(1);
        Self {
            delta_theta: vec![0.0; n],
            log_r: vec![crate::math::softplus_inv(radius); n],
            rotation: 0.0,
        }
    }

    /// Palette size including the grey vertex.
    pub fn k(&self) -> usize {
        self.delta_theta.len() + 1
    }

    pub fn validate(&self) -> Result<(), PaletteError> {
        if self.delta_theta.len() != self.log_r.len() {
            return Err(PaletteError::LengthMismatch(
                self.delta_theta.len(),
                self.log_r.len(),
            ));
        }
        if self.k() < 3 {
            return Err(PaletteError::TooFewColors(self.k()));
        }
        Ok(())
    }

    /// Flattened as `[delta_theta.., log_r.., rotation]`.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.delta_theta.iter().chain(&self.log_r).copied().collect();
        v.push(self.rotation);
        v
    }

    pub fn from_flat(flat: &[f64]) -> Self {
        let n = flat.len().saturating_sub(1) / 2;
        Self {
            delta_theta: flat[..n].to_vec(),
            log_r: flat[n..2 * n].to_vec(),
            rotation: flat.get(2 * n).copied().unwrap_or(0.0),
        }
    }
}

/// The palette in normalized ab-space; vertex 0 is the fixed grey.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Palette {
    pub vertices: Vec<Ab>,
}

impl Palette {
    pub fn new(vertices: Vec<Ab>) -> Result<Self, PaletteError> {
        if vertices.len() < 3 {
            return Err(PaletteError::TooFewColors(vertices.len()));
        }
        Ok(Self { vertices })
    }

    pub fn k(&self) -> usize {
        self.vertices.len()
    }

    /// Chromaticity `Wᵀ P` for a weight vector.
    #[inline]
    pub fn mix(&self, weights: &[f64]) -> Ab {
        let mut a = 0.0;
        let mut b = 0.0;
        for (w, v) in weights.iter().zip(&self.vertices) {
            a += w * v[0];
            b += w * v[1];
        }
        [a, b]
    }
}

struct Decoded {
    angles: Vec<f64>,
    radii: Vec<f64>,
    raw: Vec<Ab>,
}

fn decode_raw(params: &PaletteParams) -> Decoded {
    let steps: Vec<f64> = params.delta_theta.iter().map(|&d| softplus(d)).collect();
    let total: f64 = steps.iter().sum();
    let mut cum = 0.0;
    let angles: Vec<f64> = steps
        .iter()
        .map(|s| {
            cum += s;
            params.rotation + 2.0 * PI * cum / total
        })
        .collect();
    let radii: Vec<f64> = params.log_r.iter().map(|&r| softplus(r)).collect();
    let raw = angles
        .iter()
        .zip(&radii)
        .map(|(&t, &r)| [GREY[0] + r * t.cos(), GREY[1] - r * t.sin()])
        .collect();
    Decoded { angles, radii, raw }
}

/// Decodes polar parameters into palette vertices.
///
/// Angles are the cumulative softplus offsets rescaled to one full turn, so
/// the vertices come out ordered clockwise about grey without sorting.
pub fn decode_palette(params: &PaletteParams) -> Result<Palette, PaletteError> {
    params.validate()?;
    let decoded = decode_raw(params);
    let mut vertices = Vec::with_capacity(params.k());
    vertices.push(GREY);
    vertices.extend(
        decoded
            .raw
            .iter()
            .map(|v| [v[0].clamp(0.0, 1.0), v[1].clamp(0.0, 1.0)]),
    );
    Palette::new(vertices)
}

/// Chain rule from vertex gradients (grey included, ignored) back to palette parameters.
///
/// Clamped coordinates receive no gradient.
pub fn decode_palette_backward(params: &PaletteParams, grad_vertices: &[Ab]) -> PaletteParams {
    let n = params.delta_theta.len();
    let d = decode_raw(params);
    let total: f64 = params.delta_theta.iter().map(|&x| softplus(x)).sum();
    let mut g_theta = vec![0.0; n];
    let mut g_logr = vec![0.0; n];
    // d vertex / d angle and d vertex / d radius, masked by the clamp.
    let mut g_angle = vec![0.0; n];
    for i in 0..n {
        let g = grad_vertices[i + 1];
        let gx = if (0.0..=1.0).contains(&d.raw[i][0]) { g[0] } else { 0.0 };
        let gy = if (0.0..=1.0).contains(&d.raw[i][1]) { g[1] } else { 0.0 };
        let (s, c) = d.angles[i].sin_cos();
        g_angle[i] = gx * (-d.radii[i] * s) + gy * (-d.radii[i] * c);
        let g_r = gx * c - gy * s;
        g_logr[i] = g_r * softplus_grad(params.log_r[i]);
    }
    // angle_i = rotation + 2π C_i / S, C_i = Σ_{j≤i} s_j.
    let mut suffix = vec![0.0; n + 1];
    for i in (0..n).rev() {
        suffix[i] = suffix[i + 1] + g_angle[i];
    }
    let weighted: f64 = (0..n).map(|i| g_angle[i] * (d.angles[i] - params.rotation)).sum();
    for j in 0..n {
        let ds = 2.0 * PI * suffix[j] / total - weighted / total;
        g_theta[j] = ds * softplus_grad(params.delta_theta[j]);
    }
    PaletteParams {
        delta_theta: g_theta,
        log_r: g_logr,
        rotation: g_angle.iter().sum(),
    }
}

/// Clockwise angle of `v` about grey, in `[0, 2π)`.
pub fn clockwise_angle(v: Ab) -> f64 {
    let a = (-(v[1] - GREY[1])).atan2(v[0] - GREY[0]);
    a.rem_euclid(2.0 * PI)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn black_and_white_are_achromatic() {
        let black = srgb_to_lab_norm([0.0, 0.0, 0.0]);
        assert_abs_diff_eq!(black.l, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(black.a, 128.0 / 255.0, epsilon = 1e-6);
        assert_abs_diff_eq!(black.b, 128.0 / 255.0, epsilon = 1e-6);
        let white = srgb_to_lab_norm([1.0, 1.0, 1.0]);
        assert_abs_diff_eq!(white.l, 1.0, epsilon = 1e-6);
        assert_abs_diff_eq!(white.a, 128.0 / 255.0, epsilon = 1e-4);
        assert_abs_diff_eq!(white.b, 128.0 / 255.0, epsilon = 1e-4);
    }

    #[test]
    fn pure_red_matches_reference_lab() {
        // Published D65 reference: L* 53.2408, a* 80.0925, b* 67.2032.
        let red = srgb_to_lab_norm([1.0, 0.0, 0.0]);
        assert_abs_diff_eq!(red.l, 0.532_408, epsilon = 1e-4);
        assert_abs_diff_eq!(red.a, (80.0925 + 128.0) / 255.0, epsilon = 1e-4);
        assert_abs_diff_eq!(red.b, (67.2032 + 128.0) / 255.0, epsilon = 1e-4);
    }

    #[test]
    fn mid_lightness_is_mid_grey() {
        let rgb = lab_norm_to_srgb(LabNorm::new(0.5, 0.502, 0.502));
        for c in rgb {
            assert_abs_diff_eq!(c, 0.466, epsilon = 3e-3);
        }
    }

    #[test]
    fn out_of_gamut_lab_is_clamped() {
        let rgb = lab_norm_to_srgb(LabNorm::new(0.9, 1.0, 0.0));
        assert!(rgb.iter().all(|c| (0.0..=1.0).contains(c)));
    }

    #[test]
    fn lab_norm_clamps_and_sanitizes() {
        let c = LabNorm::new(1.5, -0.2, f64::NAN);
        assert_eq!((c.l, c.a, c.b), (1.0, 0.0, 0.0));
    }

    #[test]
    fn regular_params_decode_to_circle() {
        let p = decode_palette(&PaletteParams::regular(5, 0.2)).unwrap();
        assert_eq!(p.vertices[0], GREY);
        for (i, v) in p.vertices[1..].iter().enumerate() {
            let r = ((v[0] - 0.5).powi(2) + (v[1] - 0.5).powi(2)).sqrt();
            assert_abs_diff_eq!(r, 0.2, epsilon = 1e-12);
            let angle = 2.0 * PI * (i + 1) as f64 / 4.0;
            assert_abs_diff_eq!(v[0], 0.5 + 0.2 * angle.cos(), epsilon = 1e-12);
            assert_abs_diff_eq!(v[1], 0.5 - 0.2 * angle.sin(), epsilon = 1e-12);
        }
    }

    #[test]
    fn tiny_radii_collapse_onto_grey() {
        let params = PaletteParams {
            delta_theta: vec![0.3, -1.0, 2.0],
            log_r: vec![-40.0; 3],
            rotation: 0.9,
        };
        let p = decode_palette(&params).unwrap();
        for v in &p.vertices[1..] {
            assert_abs_diff_eq!(v[0], 0.5, epsilon = 1e-12);
            assert_abs_diff_eq!(v[1], 0.5, epsilon = 1e-12);
        }
    }

    #[test]
    fn too_small_palettes_are_rejected() {
        let params = PaletteParams {
            delta_theta: vec![0.0],
            log_r: vec![0.0],
            rotation: 0.0,
        };
        assert_eq!(decode_palette(&params), Err(PaletteError::TooFewColors(2)));
    }

    #[test]
    fn srgb8_display_path_matches_exact_conversion() {
        for i in 0..200 {
            let t = i as f64 / 199.0;
            let lab = LabNorm::new(t, 0.3 + 0.4 * t, 0.7 - 0.4 * t);
            let exact = lab_norm_to_srgb(lab);
            let fast = lab_norm_to_srgb8(lab);
            for c in 0..3 {
                assert!((exact[c] * 255.0 - fast[c] as f64).abs() <= 0.51, "{lab:?}");
            }
        }
    }

    fn finite_difference_check(params: &PaletteParams) {
        let h = 1e-5;
        // Random but fixed projection of the vertices onto a scalar.
        let weights: Vec<Ab> = (0..params.k())
            .map(|i| [0.3 + 0.17 * i as f64, -0.8 + 0.29 * i as f64])
            .collect();
        let objective = |p: &PaletteParams| -> f64 {
            let pal = decode_palette(p).unwrap();
            pal.vertices
                .iter()
                .zip(&weights)
                .map(|(v, w)| v[0] * w[0] + v[1] * w[1])
                .sum()
        };
        let analytic = decode_palette_backward(params, &weights).to_flat();
        let flat = params.to_flat();
        for i in 0..flat.len() {
            let mut plus = flat.clone();
            plus[i] += h;
            let mut minus = flat.clone();
            minus[i] -= h;
            let fd = (objective(&PaletteParams::from_flat(&plus))
                - objective(&PaletteParams::from_flat(&minus)))
                / (2.0 * h);
            let denom = fd.abs().max(analytic[i].abs()).max(1e-6);
            assert!(
                (fd - analytic[i]).abs() / denom < 1e-4,
                "param {i}: fd {fd} analytic {}",
                analytic[i]
            );
        }
    }

    #[test]
    fn decode_gradient_matches_finite_differences() {
        finite_difference_check(&PaletteParams {
            delta_theta: vec![0.2, -0.7, 1.1, 0.4],
            log_r: vec![-1.5, -2.0, -1.2, -1.8],
            rotation: 0.35,
        });
    }

    proptest! {
        #[test]
        fn lab_roundtrip_within_one_code_value(r in 0.0f64..=1.0, g in 0.0f64..=1.0, b in 0.0f64..=1.0) {
            let back = lab_norm_to_srgb(srgb_to_lab_norm([r, g, b]));
            for (x, y) in back.iter().zip([r, g, b]) {
                prop_assert!((x - y).abs() < 1.0 / 255.0);
            }
        }

        #[test]
        fn decoded_angles_increase_clockwise(
            dt in proptest::collection::vec(-3.0f64..3.0, 4),
            lr in proptest::collection::vec(-4.0f64..-1.0, 4),
        ) {
            let rotation = 0.0;
            let params = PaletteParams { delta_theta: dt, log_r: lr, rotation };
            let pal = decode_palette(&params).unwrap();
            let angles: Vec<f64> = pal.vertices[1..].iter().map(|v| clockwise_angle(*v)).collect();
            // The last vertex closes the turn at 2π ≡ 0; unwrap it.
            let mut unwrapped = angles.clone();
            if let Some(last) = unwrapped.last_mut() {
                if *last < 1e-9 { *last += 2.0 * PI; }
            }
            for w in unwrapped.windows(2) {
                prop_assert!(w[1] > w[0], "{unwrapped:?}");
            }
        }

        #[test]
        fn decode_gradient_is_exact_for_random_params(
            dt in proptest::collection::vec(-2.0f64..2.0, 4),
            lr in proptest::collection::vec(-3.0f64..-1.5, 4),
            rotation in -3.0f64..3.0,
        ) {
            finite_difference_check(&PaletteParams { delta_theta: dt, log_r: lr, rotation });
        }
    }
}
