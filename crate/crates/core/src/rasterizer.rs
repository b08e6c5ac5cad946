//! Projection, depth-sorted alpha blending of palette weights and lightness,
//! and the matching reverse-mode pass.
//!
//! Forward per pixel, front to back:
//! `acc += value_i · α'_i · T`, `T *= 1 - α'_i`, stopping once `T < 1e-4`,
//! with `α'_i = min(opacity_i · exp(-½ dᵀ Σ'⁻¹ d), 0.99)`. Splatted weights go
//! through a per-pixel softmax and splatted lightness through a sigmoid.
//!
//! Rows are rasterized independently; the backward pass reduces per-Gaussian
//! partials over a fixed row chunking so results do not depend on the thread count.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};
use rayon::prelude::*;
use thiserror::Error;

use crate::color::{LabNorm, Palette};
use crate::math::{sigmoid, softmax_backward, softmax_into};
use crate::scene::{quat_to_matrix_backward, Camera, Gaussian, GaussianCloud, SceneError};
use crate::sh::{basis, basis_grad, coeff_count};

pub const NEAR_PLANE: f64 = 0.01;
/// Screen-space low-pass added to every projected covariance.
pub const LOW_PASS: f64 = 0.3;
pub const ALPHA_MAX: f64 = 0.99;
pub const MIN_TRANSMITTANCE: f64 = 1e-4;
/// Footprint cutoff on the squared Mahalanobis distance (≈6.3σ), where the
/// kernel is below 2e-9 and truncation is invisible to finite differences.
pub const FOOTPRINT_Q_MAX: f64 = 40.0;

const BACKWARD_CHUNKS: usize = 8;

#[derive(Debug, Error, PartialEq)]
pub enum RasterError {
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error("upstream gradient has {found} entries, expected {expected}")]
    GradientShape { found: usize, expected: usize },
    #[error("buffers carry no contributor trace (loaded from file?)")]
    MissingTrace,
    #[error("buffers were rendered from a cloud with {expected} gaussians, got {found}")]
    CloudMismatch { expected: usize, found: usize },
}

/// A Gaussian projected to the image plane.
#[derive(Debug, Clone, PartialEq)]
pub struct Projected {
    pub mu2d: [f64; 2],
    pub cov2d: Matrix2<f64>,
    pub depth: f64,
    pub base_opacity: f64,
    pub conic: Matrix2<f64>,
    /// Half-extent of the footprint in pixels.
    pub radius: f64,
}

struct ProjectionParts {
    t: Vector3<f64>,
    j: Matrix2x3<f64>,
    w: Matrix3<f64>,
    r: Matrix3<f64>,
    scale2: Vector3<f64>,
    m: Matrix3<f64>,
}

fn projection_parts(g: &Gaussian, cam: &Camera) -> ProjectionParts {
    let w = cam.rotation();
    let t = w * Vector3::from(g.mu) + cam.translation();
    let (tx, ty, tz) = (t.x, t.y, t.z);
    let j = Matrix2x3::new(
        cam.fx / tz,
        0.0,
        -cam.fx * tx / (tz * tz),
        0.0,
        cam.fy / tz,
        -cam.fy * ty / (tz * tz),
    );
    let r = g.rotation_matrix();
    let scale2 = Vector3::from(g.log_scale.map(|s| (2.0 * s).exp()));
    let sigma = r * Matrix3::from_diagonal(&scale2) * r.transpose();
    let m = w * sigma * w.transpose();
    ProjectionParts { t, j, w, r, scale2, m }
}

/// EWA projection of one Gaussian; `None` when culled (behind the near plane,
/// degenerate, or entirely off-screen).
pub fn project(g: &Gaussian, cam: &Camera) -> Option<Projected> {
    let parts = projection_parts(g, cam);
    let t = parts.t;
    if t.z <= NEAR_PLANE {
        return None;
    }
    let cov2d = parts.j * parts.m * parts.j.transpose() + Matrix2::identity() * LOW_PASS;
    let det = cov2d.determinant();
    if !(det > 0.0) || !det.is_finite() {
        return None;
    }
    let conic = Matrix2::new(cov2d[(1, 1)], -cov2d[(0, 1)], -cov2d[(1, 0)], cov2d[(0, 0)]) / det;
    let mid = 0.5 * (cov2d[(0, 0)] + cov2d[(1, 1)]);
    let lambda_max = mid + (mid * mid - det).max(0.0).sqrt();
    let radius = (FOOTPRINT_Q_MAX * lambda_max).sqrt();
    let mu2d = [cam.fx * t.x / t.z + cam.cx, cam.fy * t.y / t.z + cam.cy];
    if mu2d[0] + radius < 0.0
        || mu2d[0] - radius > (cam.width as f64 - 1.0)
        || mu2d[1] + radius < 0.0
        || mu2d[1] - radius > (cam.height as f64 - 1.0)
    {
        return None;
    }
    Some(Projected {
        mu2d,
        cov2d,
        depth: t.z,
        base_opacity: g.opacity(),
        conic,
        radius,
    })
}

/// Per-Gaussian state kept from the forward pass.
#[derive(Debug, Clone)]
pub struct SplatInfo {
    pub projected: Projected,
    /// Unit view direction from the camera center toward the Gaussian.
    pub dir: [f64; 3],
    pub dir_len: f64,
    /// SH-evaluated `[w_0 .. w_{K-1}, L]`.
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Contribution {
    pub id: u32,
    pub alpha: f64,
    /// Transmittance in front of this contributor.
    pub transmittance: f64,
}

/// Per-pixel contributor lists in CSR form (pixel `p` owns `entries[offsets[p]..offsets[p+1]]`).
#[derive(Debug, Clone, Default)]
pub struct Contributors {
    pub offsets: Vec<usize>,
    pub entries: Vec<Contribution>,
}

impl Contributors {
    pub fn pixel(&self, p: usize) -> &[Contribution] {
        &self.entries[self.offsets[p]..self.offsets[p + 1]]
    }
}

/// Everything the backward pass needs beyond the image buffers.
#[derive(Debug, Clone)]
pub struct SplatTrace {
    pub camera: Camera,
    pub splats: Vec<Option<SplatInfo>>,
    pub contributors: Contributors,
}

/// Splatted per-pixel buffers for one view. Pixel-major: weights of pixel `p` live at `p*K..(p+1)*K`.
#[derive(Debug, Clone)]
pub struct ViewBuffers {
    pub width: usize,
    pub height: usize,
    pub k: usize,
    pub w_raw: Vec<f64>,
    pub w_norm: Vec<f64>,
    pub l_raw: Vec<f64>,
    pub l: Vec<f64>,
    pub trace: Option<SplatTrace>,
}

impl ViewBuffers {
    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn weights(&self, p: usize) -> &[f64] {
        &self.w_norm[p * self.k..(p + 1) * self.k]
    }

    /// Rebuilds buffers from normalized weights and lightness only (no trace).
    pub fn from_normalized(width: usize, height: usize, k: usize, w_norm: Vec<f64>, l: Vec<f64>) -> Self {
        let w_raw = w_norm.iter().map(|w| w.max(f64::MIN_POSITIVE).ln()).collect();
        let l_raw = l.iter().map(|&v| crate::math::logit(v.clamp(1e-300, 1.0 - 1e-16))).collect();
        Self { width, height, k, w_raw, w_norm, l_raw, l, trace: None }
    }

    /// Unedited Lab render: `[L, W̃ᵀP]`.
    pub fn render_lab(&self, palette: &Palette) -> Vec<LabNorm> {
        (0..self.pixels())
            .map(|p| {
                let ab = palette.mix(self.weights(p));
                LabNorm { l: self.l[p], a: ab[0], b: ab[1] }
            })
            .collect()
    }
}

struct Prepared {
    splats: Vec<Option<SplatInfo>>,
    row_bins: Vec<Vec<u32>>,
}

fn prepare(
    gaussians: &[Gaussian],
    cam: &Camera,
    values: impl Fn(usize, &Gaussian, [f64; 3]) -> Vec<f64> + Sync,
) -> Prepared {
    let center = cam.center();
    let splats: Vec<Option<SplatInfo>> = gaussians
        .par_iter()
        .enumerate()
        .map(|(i, g)| {
            let projected = project(g, cam)?;
            let v = Vector3::from(g.mu) - center;
            let dir_len = v.norm();
            let dir = if dir_len > 0.0 { (v / dir_len).into() } else { [0.0, 0.0, 1.0] };
            let values = values(i, g, dir);
            Some(SplatInfo { projected, dir, dir_len, values })
        })
        .collect();
    let mut order: Vec<u32> = (0..splats.len() as u32)
        .filter(|&i| splats[i as usize].is_some())
        .collect();
    // Stable by depth with the index as tiebreak.
    order.sort_by(|&a, &b| {
        let da = splats[a as usize].as_ref().unwrap().projected.depth;
        let db = splats[b as usize].as_ref().unwrap().projected.depth;
        da.total_cmp(&db).then(a.cmp(&b))
    });
    let mut row_bins = vec![Vec::new(); cam.height];
    for &i in &order {
        let p = &splats[i as usize].as_ref().unwrap().projected;
        let y0 = (p.mu2d[1] - p.radius).ceil().max(0.0) as usize;
        let y1 = (p.mu2d[1] + p.radius).floor().min(cam.height as f64 - 1.0);
        if y1 < 0.0 {
            continue;
        }
        for bin in row_bins.iter_mut().take(y1 as usize + 1).skip(y0) {
            bin.push(i);
        }
    }
    Prepared { splats, row_bins }
}

#[inline]
fn footprint(p: &Projected, x: f64, y: f64) -> Option<(f64, f64, f64)> {
    let dx = x - p.mu2d[0];
    let dy = y - p.mu2d[1];
    let c = &p.conic;
    let q = c[(0, 0)] * dx * dx + 2.0 * c[(0, 1)] * dx * dy + c[(1, 1)] * dy * dy;
    if q > FOOTPRINT_Q_MAX {
        return None;
    }
    Some((dx, dy, q))
}

struct RowOutput {
    accum: Vec<f64>,
    counts: Vec<usize>,
    entries: Vec<Contribution>,
}

fn blend(prep: &Prepared, width: usize, dims: usize, record: bool) -> (Vec<f64>, Contributors) {
    let rows: Vec<RowOutput> = prep
        .row_bins
        .par_iter()
        .enumerate()
        .map(|(y, bin)| {
            let mut accum = vec![0.0; width * dims];
            let mut counts = vec![0usize; width];
            let mut entries = Vec::new();
            for x in 0..width {
                let mut t = 1.0;
                let acc = &mut accum[x * dims..(x + 1) * dims];
                for &id in bin {
                    let s = prep.splats[id as usize].as_ref().unwrap();
                    let p = &s.projected;
                    if (x as f64 - p.mu2d[0]).abs() > p.radius {
                        continue;
                    }
                    let Some((_, _, q)) = footprint(p, x as f64, y as f64) else {
                        continue;
                    };
                    let alpha = (p.base_opacity * (-0.5 * q).exp()).min(ALPHA_MAX);
                    let w = alpha * t;
                    for (a, v) in acc.iter_mut().zip(&s.values) {
                        *a += v * w;
                    }
                    if record {
                        entries.push(Contribution { id, alpha, transmittance: t });
                        counts[x] += 1;
                    }
                    t *= 1.0 - alpha;
                    if t < MIN_TRANSMITTANCE {
                        break;
                    }
                }
            }
            RowOutput { accum, counts, entries }
        })
        .collect();
    let mut accum = Vec::with_capacity(prep.row_bins.len() * width * dims);
    let mut contributors = Contributors { offsets: vec![0], entries: Vec::new() };
    for row in rows {
        accum.extend_from_slice(&row.accum);
        for c in row.counts {
            let last = *contributors.offsets.last().unwrap();
            contributors.offsets.push(last + c);
        }
        contributors.entries.extend(row.entries);
    }
    (accum, contributors)
}

fn sh_values(g: &Gaussian, k: usize, degree: usize, dir: [f64; 3]) -> Vec<f64> {
    let y = basis(degree, dir);
    let mut out = vec![0.0; k + 1];
    for c in 0..coeff_count(degree) {
        let row = &g.weight_sh[c * k..(c + 1) * k];
        for (o, f) in out.iter_mut().zip(row) {
            *o += f * y[c];
        }
        out[k] += g.lightness_sh[c] * y[c];
    }
    out
}

/// Splats SH-evaluated palette weights and lightness, then normalizes them.
pub fn splat(cloud: &GaussianCloud, cam: &Camera) -> Result<ViewBuffers, RasterError> {
    cloud.validate()?;
    cam.validate()?;
    let (k, degree) = (cloud.k, cloud.sh_degree);
    let prep = prepare(&cloud.gaussians, cam, |_, g, dir| sh_values(g, k, degree, dir));
    let dims = k + 1;
    let (accum, contributors) = blend(&prep, cam.width, dims, true);
    let n = cam.width * cam.height;
    let mut w_raw = vec![0.0; n * k];
    let mut w_norm = vec![0.0; n * k];
    let mut l_raw = vec![0.0; n];
    let mut l = vec![0.0; n];
    for p in 0..n {
        let src = &accum[p * dims..(p + 1) * dims];
        w_raw[p * k..(p + 1) * k].copy_from_slice(&src[..k]);
        softmax_into(&src[..k], &mut w_norm[p * k..(p + 1) * k]);
        l_raw[p] = src[k];
        l[p] = sigmoid(src[k]);
    }
    Ok(ViewBuffers {
        width: cam.width,
        height: cam.height,
        k,
        w_raw,
        w_norm,
        l_raw,
        l,
        trace: Some(SplatTrace { camera: cam.clone(), splats: prep.splats, contributors }),
    })
}

/// Standard color splatting: blends one fixed RGB color per Gaussian (no SH).
/// Uncovered pixels blend toward `background`.
pub fn splat_colors(
    gaussians: &[Gaussian],
    colors: &[[f64; 3]],
    cam: &Camera,
    background: [f64; 3],
) -> Vec<[f64; 3]> {
    let prep = prepare(gaussians, cam, |i, _, _| colors[i].to_vec());
    let (accum, contributors) = blend(&prep, cam.width, 3, true);
    (0..cam.width * cam.height)
        .map(|p| {
            let t = contributors
                .pixel(p)
                .last()
                .map(|c| c.transmittance * (1.0 - c.alpha))
                .unwrap_or(1.0);
            let a = &accum[p * 3..p * 3 + 3];
            [0, 1, 2].map(|i| a[i] + t * background[i])
        })
        .collect()
}

/// Gradients of a scalar loss with respect to every Gaussian parameter,
/// given the loss gradients on `w_norm` (pixel-major, `HW·K`) and `l` (`HW`).
pub fn splat_backward(
    cloud: &GaussianCloud,
    buffers: &ViewBuffers,
    grad_w_norm: &[f64],
    grad_l: &[f64],
) -> Result<Vec<Gaussian>, RasterError> {
    let trace = buffers.trace.as_ref().ok_or(RasterError::MissingTrace)?;
    let n_pix = buffers.pixels();
    let k = buffers.k;
    if grad_w_norm.len() != n_pix * k {
        return Err(RasterError::GradientShape { found: grad_w_norm.len(), expected: n_pix * k });
    }
    if grad_l.len() != n_pix {
        return Err(RasterError::GradientShape { found: grad_l.len(), expected: n_pix });
    }
    if trace.splats.len() != cloud.len() {
        return Err(RasterError::CloudMismatch { expected: trace.splats.len(), found: cloud.len() });
    }
    let dims = k + 1;
    // Per-Gaussian screen-space partials: [mu2d(2), conic(4), opacity_logit(1), values(dims)].
    let stride = 7 + dims;
    let n_g = cloud.len();
    let width = buffers.width;
    let height = buffers.height;
    let chunks = BACKWARD_CHUNKS.min(height.max(1));
    let rows_per = height.div_ceil(chunks);

    let partials: Vec<Vec<f64>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut acc = vec![0.0; n_g * stride];
            let mut g_raw = vec![0.0; dims];
            let mut suffix = vec![0.0; dims];
            for y in (c * rows_per)..((c + 1) * rows_per).min(height) {
                for x in 0..width {
                    let p = y * width + x;
                    let wn = &buffers.w_norm[p * k..(p + 1) * k];
                    softmax_backward(wn, &grad_w_norm[p * k..(p + 1) * k], &mut g_raw[..k]);
                    let l = buffers.l[p];
                    g_raw[k] = grad_l[p] * l * (1.0 - l);
                    if g_raw.iter().all(|&v| v == 0.0) {
                        continue;
                    }
                    suffix.iter_mut().for_each(|s| *s = 0.0);
                    for e in trace.contributors.pixel(p).iter().rev() {
                        let s = trace.splats[e.id as usize].as_ref().unwrap();
                        let w = e.alpha * e.transmittance;
                        let base = e.id as usize * stride;
                        let mut dot_c = 0.0;
                        let mut dot_s = 0.0;
                        for d in 0..dims {
                            acc[base + 7 + d] += w * g_raw[d];
                            dot_c += g_raw[d] * s.values[d];
                            dot_s += g_raw[d] * suffix[d];
                        }
                        // The suffix already carries transmittance, so only the own term is scaled by T.
                        let d_alpha = e.transmittance * dot_c - dot_s / (1.0 - e.alpha);
                        for d in 0..dims {
                            suffix[d] += s.values[d] * w;
                        }
                        let pr = &s.projected;
                        let raw_alpha = pr.base_opacity
                            * (-0.5 * footprint_q(pr, x as f64, y as f64)).exp();
                        if raw_alpha > ALPHA_MAX {
                            continue;
                        }
                        let (dx, dy) = (x as f64 - pr.mu2d[0], y as f64 - pr.mu2d[1]);
                        acc[base + 6] += d_alpha * e.alpha * (1.0 - pr.base_opacity);
                        let d_q = -0.5 * e.alpha * d_alpha;
                        let cn = &pr.conic;
                        let ad_x = cn[(0, 0)] * dx + cn[(0, 1)] * dy;
                        let ad_y = cn[(1, 0)] * dx + cn[(1, 1)] * dy;
                        acc[base] += -2.0 * d_q * ad_x;
                        acc[base + 1] += -2.0 * d_q * ad_y;
                        acc[base + 2] += d_q * dx * dx;
                        acc[base + 3] += d_q * dx * dy;
                        acc[base + 4] += d_q * dy * dx;
                        acc[base + 5] += d_q * dy * dy;
                    }
                }
            }
            acc
        })
        .collect();

    let mut total = vec![0.0; n_g * stride];
    for part in &partials {
        for (t, v) in total.iter_mut().zip(part) {
            *t += v;
        }
    }

    let cam = &trace.camera;
    let degree = cloud.sh_degree;
    let grads = cloud
        .gaussians
        .par_iter()
        .enumerate()
        .map(|(i, g)| {
            let mut out = g.zeros_like();
            let Some(s) = trace.splats[i].as_ref() else {
                return out;
            };
            let t = &total[i * stride..(i + 1) * stride];
            gaussian_backward(g, cam, s, t, k, degree, &mut out);
            out
        })
        .collect();
    Ok(grads)
}

#[inline]
fn footprint_q(p: &Projected, x: f64, y: f64) -> f64 {
    let dx = x - p.mu2d[0];
    let dy = y - p.mu2d[1];
    let c = &p.conic;
    c[(0, 0)] * dx * dx + 2.0 * c[(0, 1)] * dx * dy + c[(1, 1)] * dy * dy
}

/// Chains screen-space partials of one Gaussian back to its parameters.
fn gaussian_backward(
    g: &Gaussian,
    cam: &Camera,
    s: &SplatInfo,
    partial: &[f64],
    k: usize,
    degree: usize,
    out: &mut Gaussian,
) {
    let dims = k + 1;
    let g_values = &partial[7..7 + dims];
    out.opacity_logit = partial[6];

    // SH coefficients and the view-direction path.
    let y = basis(degree, s.dir);
    let yg = basis_grad(degree, s.dir);
    let mut g_dir = Vector3::zeros();
    for c in 0..coeff_count(degree) {
        let mut dv = 0.0;
        for kk in 0..k {
            out.weight_sh[c * k + kk] = y[c] * g_values[kk];
            dv += g.weight_sh[c * k + kk] * g_values[kk];
        }
        out.lightness_sh[c] = y[c] * g_values[k];
        dv += g.lightness_sh[c] * g_values[k];
        g_dir += Vector3::from(yg[c]) * dv;
    }
    let dir = Vector3::from(s.dir);
    let mut g_mu = if s.dir_len > 0.0 {
        (g_dir - dir * dir.dot(&g_dir)) / s.dir_len
    } else {
        Vector3::zeros()
    };

    // Conic -> 2D covariance.
    let conic = s.projected.conic;
    let g_conic = Matrix2::new(partial[2], partial[3], partial[4], partial[5]);
    let g_cov2d = -(conic * g_conic * conic);
    let g_mu2d = Vector2::new(partial[0], partial[1]);

    let parts = projection_parts(g, cam);
    let ProjectionParts { t, j, w, r, scale2, m } = parts;
    let g_m = j.transpose() * g_cov2d * j;
    let g_j = 2.0 * g_cov2d * j * m;

    let (fx, fy) = (cam.fx, cam.fy);
    let (tx, ty, tz) = (t.x, t.y, t.z);
    let tz2 = tz * tz;
    let tz3 = tz2 * tz;
    let mut g_t = Vector3::zeros();
    g_t.x += g_mu2d.x * fx / tz;
    g_t.y += g_mu2d.y * fy / tz;
    g_t.z += -g_mu2d.x * fx * tx / tz2 - g_mu2d.y * fy * ty / tz2;
    g_t.z += -g_j[(0, 0)] * fx / tz2;
    g_t.x += -g_j[(0, 2)] * fx / tz2;
    g_t.z += g_j[(0, 2)] * 2.0 * fx * tx / tz3;
    g_t.z += -g_j[(1, 1)] * fy / tz2;
    g_t.y += -g_j[(1, 2)] * fy / tz2;
    g_t.z += g_j[(1, 2)] * 2.0 * fy * ty / tz3;
    g_mu += w.transpose() * g_t;
    out.mu = g_mu.into();

    // Σ = R D Rᵀ.
    let g_sigma = w.transpose() * g_m * w;
    let d = Matrix3::from_diagonal(&scale2);
    let rt_g_r = r.transpose() * g_sigma * r;
    for a in 0..3 {
        out.log_scale[a] = 2.0 * scale2[a] * rt_g_r[(a, a)];
    }
    let g_r = 2.0 * g_sigma * r * d;
    let q_hat = g.unit_rotation();
    let g_qhat = quat_to_matrix_backward(q_hat, &g_r);
    let norm = g.rotation.iter().map(|v| v * v).sum::<f64>().sqrt();
    let dot: f64 = q_hat.iter().zip(&g_qhat).map(|(a, b)| a * b).sum();
    for a in 0..4 {
        out.rotation[a] = (g_qhat[a] - q_hat[a] * dot) / norm;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn axis_camera(w: usize, h: usize) -> Camera {
        Camera::look_at([0.0, 0.0, -4.0], [0.0, 0.0, 0.0], [0.0, -1.0, 0.0], w, h, 0.8)
    }

    #[test]
    fn on_axis_gaussian_projects_to_principal_point() {
        let cam = axis_camera(32, 24);
        let g = Gaussian::new(0, 3);
        let p = project(&g, &cam).unwrap();
        assert!((p.mu2d[0] - cam.cx).abs() < 1e-12);
        assert!((p.mu2d[1] - cam.cy).abs() < 1e-12);
        // Isotropic scale on axis stays isotropic.
        assert!((p.cov2d[(0, 0)] - p.cov2d[(1, 1)]).abs() < 1e-12);
        assert!(p.cov2d[(0, 1)].abs() < 1e-12);
    }

    #[test]
    fn gaussians_behind_the_camera_are_culled() {
        let cam = axis_camera(16, 16);
        let mut g = Gaussian::new(0, 3);
        g.mu = [0.0, 0.0, -5.0];
        assert!(project(&g, &cam).is_none());
        g.mu = [0.0, 0.0, -3.995];
        assert!(project(&g, &cam).is_none());
    }

    #[test]
    fn far_off_screen_gaussians_are_culled() {
        let cam = axis_camera(16, 16);
        let mut g = Gaussian::new(0, 3);
        g.log_scale = [-3.0; 3];
        g.mu = [50.0, 0.0, 0.0];
        assert!(project(&g, &cam).is_none());
    }

    #[test]
    fn covariance_matches_numeric_projection_jacobian() {
        let cam = Camera::look_at([1.0, -0.5, -3.0], [0.2, 0.1, 0.3], [0.1, -1.0, 0.0], 40, 30, 0.9);
        let mut g = Gaussian::new(0, 3);
        g.mu = [0.4, -0.2, 0.5];
        g.log_scale = [-1.0, -1.6, -0.7];
        g.rotation = [0.8, 0.3, -0.2, 0.4];
        let p = project(&g, &cam).unwrap();
        // Central-difference Jacobian of the full pinhole map in world space.
        let proj = |x: Vector3<f64>| -> Vector2<f64> {
            let t = cam.rotation() * x + cam.translation();
            Vector2::new(cam.fx * t.x / t.z + cam.cx, cam.fy * t.y / t.z + cam.cy)
        };
        let mu = Vector3::from(g.mu);
        let h = 1e-6;
        let mut jac = nalgebra::Matrix2x3::zeros();
        for a in 0..3 {
            let mut e = Vector3::zeros();
            e[a] = h;
            let col = (proj(mu + e) - proj(mu - e)) / (2.0 * h);
            jac.set_column(a, &col);
        }
        let expected = jac * g.covariance() * jac.transpose() + Matrix2::identity() * LOW_PASS;
        for i in 0..2 {
            for j in 0..2 {
                let rel = (expected[(i, j)] - p.cov2d[(i, j)]).abs() / expected.abs().max();
                assert!(rel < 1e-3, "({i},{j}) {} vs {}", expected[(i, j)], p.cov2d[(i, j)]);
            }
        }
    }

    fn single(values: &[f64], opacity_logit: f64) -> GaussianCloud {
        let k = values.len() - 1;
        let mut cloud = GaussianCloud::new(0, k);
        let mut g = Gaussian::new(0, k);
        g.opacity_logit = opacity_logit;
        g.log_scale = [-1.5; 3];
        for (i, v) in values[..k].iter().enumerate() {
            g.weight_sh[i] = v / 0.282_094_791_773_878_14;
        }
        g.lightness_sh[0] = values[k] / 0.282_094_791_773_878_14;
        cloud.gaussians.push(g);
        cloud
    }

    #[test]
    fn single_opaque_gaussian_writes_its_values_at_center() {
        let cloud = single(&[0.3, -0.2, 1.1, 0.5], 50.0);
        let cam = axis_camera(16, 16);
        let b = splat(&cloud, &cam).unwrap();
        let p = 8 * 16 + 8;
        // α' is clamped to 0.99 at the center.
        for (i, v) in [0.3, -0.2, 1.1].iter().enumerate() {
            assert!((b.w_raw[p * 3 + i] - 0.99 * v).abs() < 1e-9);
        }
        assert!((b.l_raw[p] - 0.99 * 0.5).abs() < 1e-9);
    }

    #[test]
    fn two_layer_blend_arithmetic() {
        let cam = axis_camera(16, 16);
        let mut cloud = GaussianCloud::new(0, 3);
        for (z, value, alpha) in [(0.0, 1.0, 0.6), (1.0, 0.0, 0.99)] {
            let mut g = Gaussian::new(0, 3);
            g.mu = [0.0, 0.0, z];
            g.log_scale = [-1.0; 3];
            g.opacity_logit = crate::math::logit(alpha);
            g.weight_sh[0] = value / 0.282_094_791_773_878_14;
            cloud.gaussians.push(g);
        }
        let b = splat(&cloud, &cam).unwrap();
        let p = 8 * 16 + 8;
        assert!((b.w_raw[p * 3] - 0.6).abs() < 1e-9, "{}", b.w_raw[p * 3]);
        // Reversing the input order changes nothing.
        cloud.gaussians.reverse();
        let r = splat(&cloud, &cam).unwrap();
        assert_eq!(b.w_raw, r.w_raw);
        assert_eq!(b.l_raw, r.l_raw);
    }

    #[test]
    fn empty_pixels_normalize_to_uniform_weights() {
        let cloud = GaussianCloud::new(0, 5);
        let b = splat(&cloud, &axis_camera(4, 4)).unwrap();
        for v in &b.w_norm {
            assert!((v - 0.2).abs() < 1e-15);
        }
        for v in &b.l {
            assert_eq!(*v, 0.5);
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let cloud = single(&[0.3, -0.2, 1.1, 0.5], 0.5);
        let cam = axis_camera(16, 16);
        let b = splat(&cloud, &cam).unwrap();
        let grads = splat_backward(&cloud, &b, &vec![0.0; 256 * 3], &vec![0.0; 256]).unwrap();
        assert_eq!(grads[0].squared_norm(), 0.0);
    }

    #[test]
    fn backward_rejects_bad_shapes_and_missing_trace() {
        let cloud = single(&[0.3, -0.2, 1.1, 0.5], 0.5);
        let cam = axis_camera(8, 8);
        let b = splat(&cloud, &cam).unwrap();
        assert!(matches!(
            splat_backward(&cloud, &b, &[0.0; 3], &[0.0; 64]),
            Err(RasterError::GradientShape { .. })
        ));
        let frozen = ViewBuffers::from_normalized(8, 8, 3, b.w_norm.clone(), b.l.clone());
        assert_eq!(
            splat_backward(&cloud, &frozen, &vec![0.0; 192], &[0.0; 64]).unwrap_err(),
            RasterError::MissingTrace
        );
    }

    #[test]
    fn mismatched_palette_size_is_rejected() {
        let mut cloud = single(&[0.3, -0.2, 1.1, 0.5], 0.5);
        cloud.gaussians[0].weight_sh.pop();
        assert!(matches!(splat(&cloud, &axis_camera(8, 8)), Err(RasterError::Scene(_))));
    }
}
