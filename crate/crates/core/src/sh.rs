//! Real spherical harmonics up to degree 3.
//!
//! Basis ordering is `l² + l + m` for `m ∈ [-l, l]`, with the Condon–Shortley
//! phase folded into the constants (the convention used by splatting renderers).

pub const MAX_DEGREE: usize = 3;
pub const MAX_COEFFS: usize = 16;

const C0: f64 = 0.282_094_791_773_878_14;
const C1: f64 = 0.488_602_511_902_919_9;
const C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];
const C3: [f64; 7] = [
    -0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    -0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    -0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    -0.590_043_589_926_643_5,
];

/// Number of coefficients per channel for a given degree.
pub const fn coeff_count(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

/// Evaluates the basis at a unit direction. Entries past `coeff_count(degree)` are zero.
pub fn basis(degree: usize, dir: [f64; 3]) -> [f64; MAX_COEFFS] {
    let [x, y, z] = dir;
    let mut out = [0.0; MAX_COEFFS];
    out[0] = C0;
    if degree >= 1 {
        out[1] = -C1 * y;
        out[2] = C1 * z;
        out[3] = -C1 * x;
    }
    if degree >= 2 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        out[4] = C2[0] * x * y;
        out[5] = C2[1] * y * z;
        out[6] = C2[2] * (2.0 * zz - xx - yy);
        out[7] = C2[3] * x * z;
        out[8] = C2[4] * (xx - yy);
        if degree >= 3 {
            out[9] = C3[0] * y * (3.0 * xx - yy);
            out[10] = C3[1] * x * y * z;
            out[11] = C3[2] * y * (4.0 * zz - xx - yy);
            out[12] = C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy);
            out[13] = C3[4] * x * (4.0 * zz - xx - yy);
            out[14] = C3[5] * z * (xx - yy);
            out[15] = C3[6] * x * (xx - 3.0 * yy);
        }
    }
    out
}

/// Partial derivatives of each basis polynomial with respect to `(x, y, z)`.
pub fn basis_grad(degree: usize, dir: [f64; 3]) -> [[f64; 3]; MAX_COEFFS] {
    let [x, y, z] = dir;
    let mut g = [[0.0; 3]; MAX_COEFFS];
    if degree >= 1 {
        g[1] = [0.0, -C1, 0.0];
        g[2] = [0.0, 0.0, C1];
        g[3] = [-C1, 0.0, 0.0];
    }
    if degree >= 2 {
        g[4] = [C2[0] * y, C2[0] * x, 0.0];
        g[5] = [0.0, C2[1] * z, C2[1] * y];
        g[6] = [-2.0 * C2[2] * x, -2.0 * C2[2] * y, 4.0 * C2[2] * z];
        g[7] = [C2[3] * z, 0.0, C2[3] * x];
        g[8] = [2.0 * C2[4] * x, -2.0 * C2[4] * y, 0.0];
        if degree >= 3 {
            let (xx, yy, zz) = (x * x, y * y, z * z);
            g[9] = [C3[0] * 6.0 * x * y, C3[0] * (3.0 * xx - 3.0 * yy), 0.0];
            g[10] = [C3[1] * y * z, C3[1] * x * z, C3[1] * x * y];
            g[11] = [
                C3[2] * (-2.0 * x * y),
                C3[2] * (4.0 * zz - xx - 3.0 * yy),
                C3[2] * 8.0 * y * z,
            ];
            g[12] = [
                C3[3] * (-6.0 * x * z),
                C3[3] * (-6.0 * y * z),
                C3[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy),
            ];
            g[13] = [
                C3[4] * (4.0 * zz - 3.0 * xx - yy),
                C3[4] * (-2.0 * x * y),
                C3[4] * 8.0 * x * z,
            ];
            g[14] = [
                C3[5] * 2.0 * x * z,
                C3[5] * (-2.0 * y * z),
                C3[5] * (xx - yy),
            ];
            g[15] = [
                C3[6] * (3.0 * xx - 3.0 * yy),
                C3[6] * (-6.0 * x * y),
                0.0,
            ];
        }
    }
    g
}

/// Evaluates `Σ coeff[c][d] · Y_c(dir)` for a coefficient block laid out
/// coefficient-major (`coeffs[c * dims + d]`).
pub fn eval_sh(coeffs: &[f64], dims: usize, degree: usize, dir: [f64; 3]) -> Vec<f64> {
    let mut out = vec![0.0; dims];
    eval_sh_into(coeffs, dims, degree, dir, &mut out);
    out
}

pub fn eval_sh_into(coeffs: &[f64], dims: usize, degree: usize, dir: [f64; 3], out: &mut [f64]) {
    let y = basis(degree, dir);
    out.iter_mut().for_each(|o| *o = 0.0);
    for (c, yc) in y.iter().take(coeff_count(degree)).enumerate() {
        let row = &coeffs[c * dims..(c + 1) * dims];
        for (o, f) in out.iter_mut().zip(row) {
            *o += f * yc;
        }
    }
}
