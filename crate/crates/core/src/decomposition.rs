//! Soft inverse-barycentric targets: which palette mix explains a chroma.
//!
//! The palette polygon is fanned into `K - 1` wedges around the grey vertex.
//! Each wedge gives raw barycentric coordinates and a reconstruction error
//! from softplus-projected coordinates; a very cold softmax over the errors
//! picks the wedge whose raw coordinates become the target.

use rayon::prelude::*;
use thiserror::Error;

use crate::color::{Ab, Palette};
use crate::math::{sigmoid, softplus};

/// Wedge-selection temperature.
pub const TEMPERATURE: f64 = 1e-7;
/// Softplus sharpness used to project wedge coordinates onto the simplex.
/// With unit sharpness the projection error of the containing wedge is not
/// reliably the smallest, so points inside the polygon (and palette vertices
/// themselves) could be assigned extrapolated coordinates of another wedge.
pub const PROJECTION_SHARPNESS: f64 = 200.0;
/// Wedges with a smaller triangle area are treated as degenerate.
pub const DEGENERATE_AREA: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum DecompositionError {
    #[error("palette needs at least 3 colors, got {0}")]
    TooFewColors(usize),
    #[error("wedge {wedge} out of range for {count} wedges")]
    WedgeIndex { wedge: usize, count: usize },
    #[error("wedge {0} is degenerate")]
    DegenerateWedge(usize),
    #[error("every wedge of the palette is degenerate")]
    AllDegenerate,
    #[error("expected {expected} values, got {found}")]
    Shape { expected: usize, found: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct WedgeResult {
    /// K-vector with the wedge's coordinates in its three slots, zero elsewhere.
    pub raw: Vec<f64>,
    /// Softplus-normalized `(center, first, second)` coordinates.
    pub projected: [f64; 3],
    /// Squared distance between the projected reconstruction and the chroma.
    pub error: f64,
}

/// Palette slots `(grey, p_i, p_{i+1})` of a wedge, with wraparound.
pub fn wedge_slots(k: usize, wedge: usize) -> [usize; 3] {
    let first = wedge + 1;
    let second = if wedge + 2 >= k { 1 } else { wedge + 2 };
    [0, first, second]
}

struct Solved {
    slots: [usize; 3],
    verts: [Ab; 3],
    /// Inverse of `[v1 - v0, v2 - v0]`.
    inv: [[f64; 2]; 2],
    coords: [f64; 3],
    projected: [f64; 3],
    sum_sp: f64,
    recon: Ab,
    error: f64,
}

fn solve(c: Ab, palette: &Palette, wedge: usize) -> Result<Solved, DecompositionError> {
    let k = palette.k();
    if k < 3 {
        return Err(DecompositionError::TooFewColors(k));
    }
    if wedge >= k - 1 {
        return Err(DecompositionError::WedgeIndex { wedge, count: k - 1 });
    }
    let slots = wedge_slots(k, wedge);
    let verts = slots.map(|s| palette.vertices[s]);
    let e1 = [verts[1][0] - verts[0][0], verts[1][1] - verts[0][1]];
    let e2 = [verts[2][0] - verts[0][0], verts[2][1] - verts[0][1]];
    let det = e1[0] * e2[1] - e2[0] * e1[1];
    if 0.5 * det.abs() < DEGENERATE_AREA {
        return Err(DecompositionError::DegenerateWedge(wedge));
    }
    let inv = [[e2[1] / det, -e2[0] / det], [-e1[1] / det, e1[0] / det]];
    let r = [c[0] - verts[0][0], c[1] - verts[0][1]];
    let beta = inv[0][0] * r[0] + inv[0][1] * r[1];
    let gamma = inv[1][0] * r[0] + inv[1][1] * r[1];
    let coords = [1.0 - beta - gamma, beta, gamma];
    let sp = coords.map(|x| softplus(PROJECTION_SHARPNESS * x));
    let sum_sp: f64 = sp.iter().sum();
    let projected = sp.map(|s| s / sum_sp);
    let mut recon = [0.0; 2];
    for j in 0..3 {
        recon[0] += projected[j] * verts[j][0];
        recon[1] += projected[j] * verts[j][1];
    }
    let error = (recon[0] - c[0]).powi(2) + (recon[1] - c[1]).powi(2);
    Ok(Solved { slots, verts, inv, coords, projected, sum_sp, recon, error })
}

/// Barycentric coordinates of `c` in one wedge.
pub fn wedge_coords(c: Ab, palette: &Palette, wedge: usize) -> Result<WedgeResult, DecompositionError> {
    let s = solve(c, palette, wedge)?;
    let mut raw = vec![0.0; palette.k()];
    for j in 0..3 {
        raw[s.slots[j]] = s.coords[j];
    }
    Ok(WedgeResult { raw, projected: s.projected, error: s.error })
}

/// Min-shifted softmax of `-e / τ` over the usable wedges.
fn selection(solved: &[Option<Solved>]) -> Result<Vec<f64>, DecompositionError> {
    let min = solved
        .iter()
        .flatten()
        .map(|s| s.error)
        .fold(f64::INFINITY, f64::min);
    if !min.is_finite() {
        return Err(DecompositionError::AllDegenerate);
    }
    let mut pi: Vec<f64> = solved
        .iter()
        .map(|s| s.as_ref().map_or(0.0, |s| (-(s.error - min) / TEMPERATURE).exp()))
        .collect();
    let total: f64 = pi.iter().sum();
    pi.iter_mut().for_each(|p| *p /= total);
    Ok(pi)
}

fn solve_all(c: Ab, palette: &Palette) -> Result<Vec<Option<Solved>>, DecompositionError> {
    let k = palette.k();
    if k < 3 {
        return Err(DecompositionError::TooFewColors(k));
    }
    Ok((0..k - 1).map(|i| solve(c, palette, i).ok()).collect())
}

/// Target weights `W_bary` for one chroma. Entries may be negative outside the polygon.
pub fn target_weights(c: Ab, palette: &Palette) -> Result<Vec<f64>, DecompositionError> {
    let solved = solve_all(c, palette)?;
    let pi = selection(&solved)?;
    let mut w = vec![0.0; palette.k()];
    for (s, p) in solved.iter().zip(&pi) {
        let Some(s) = s else { continue };
        if *p == 0.0 {
            continue;
        }
        for j in 0..3 {
            w[s.slots[j]] += p * s.coords[j];
        }
    }
    Ok(w)
}

/// Gradient of `⟨grad_w, W_bary(c, P)⟩` with respect to every palette vertex
/// (the grey entry is included for completeness).
pub fn target_weights_backward(
    c: Ab,
    palette: &Palette,
    grad_w: &[f64],
) -> Result<Vec<Ab>, DecompositionError> {
    let k = palette.k();
    if grad_w.len() != k {
        return Err(DecompositionError::Shape { expected: k, found: grad_w.len() });
    }
    let solved = solve_all(c, palette)?;
    let pi = selection(&solved)?;
    let mut g_vert = vec![[0.0; 2]; k];

    // Selection probabilities.
    let g_pi: Vec<f64> = solved
        .iter()
        .map(|s| {
            s.as_ref()
                .map_or(0.0, |s| (0..3).map(|j| grad_w[s.slots[j]] * s.coords[j]).sum())
        })
        .collect();
    let mean: f64 = pi.iter().zip(&g_pi).map(|(p, g)| p * g).sum();

    for (i, s) in solved.iter().enumerate() {
        let Some(s) = s else { continue };
        let g_e = -pi[i] * (g_pi[i] - mean) / TEMPERATURE;
        let mut g_coords: [f64; 3] = std::array::from_fn(|j| pi[i] * grad_w[s.slots[j]]);

        if g_e != 0.0 {
            // Error through the projected reconstruction.
            let g_recon = [2.0 * (s.recon[0] - c[0]) * g_e, 2.0 * (s.recon[1] - c[1]) * g_e];
            let g_proj: [f64; 3] =
                std::array::from_fn(|j| g_recon[0] * s.verts[j][0] + g_recon[1] * s.verts[j][1]);
            let dot: f64 = (0..3).map(|j| s.projected[j] * g_proj[j]).sum();
            for j in 0..3 {
                let v = &mut g_vert[s.slots[j]];
                v[0] += s.projected[j] * g_recon[0];
                v[1] += s.projected[j] * g_recon[1];
                g_coords[j] += (g_proj[j] - dot) / s.sum_sp
                    * PROJECTION_SHARPNESS
                    * sigmoid(PROJECTION_SHARPNESS * s.coords[j]);
            }
        }

        // Coordinates through the 2x2 solve: u = M⁻¹ (c - v0), alpha = 1 - β - γ.
        let g_u = [g_coords[1] - g_coords[0], g_coords[2] - g_coords[0]];
        let u = [s.coords[1], s.coords[2]];
        // M⁻ᵀ g_u
        let h = [
            s.inv[0][0] * g_u[0] + s.inv[1][0] * g_u[1],
            s.inv[0][1] * g_u[0] + s.inv[1][1] * g_u[1],
        ];
        // dL/dM = -M⁻ᵀ g_u uᵀ; column 0 is v1 - v0, column 1 is v2 - v0.
        let g_col = [[-h[0] * u[0], -h[1] * u[0]], [-h[0] * u[1], -h[1] * u[1]]];
        for a in 0..2 {
            g_vert[s.slots[1]][a] += g_col[0][a];
            g_vert[s.slots[2]][a] += g_col[1][a];
            g_vert[s.slots[0]][a] += -g_col[0][a] - g_col[1][a] - h[a];
        }
    }
    Ok(g_vert)
}

/// Whether `c` lies inside (or on) the palette polygon fanned around grey.
pub fn palette_contains(c: Ab, palette: &Palette) -> bool {
    let k = palette.k();
    k >= 3
        && (0..k - 1).any(|i| {
            wedge_coords(c, palette, i).is_ok_and(|w| wedge_slots(k, i).iter().all(|&s| w.raw[s] >= -1e-12))
        })
}

/// Target weights for every pixel chroma, pixel-major `N·K`.
pub fn target_weights_image(chroma: &[Ab], palette: &Palette) -> Result<Vec<f64>, DecompositionError> {
    let k = palette.k();
    let rows: Result<Vec<Vec<f64>>, _> = chroma.par_iter().map(|&c| target_weights(c, palette)).collect();
    let mut out = Vec::with_capacity(chroma.len() * k);
    for r in rows? {
        out.extend(r);
    }
    Ok(out)
}

/// Sum over pixels of the per-pixel vertex gradients, reduced in pixel order.
pub fn target_weights_image_backward(
    chroma: &[Ab],
    palette: &Palette,
    grad_w: &[f64],
) -> Result<Vec<Ab>, DecompositionError> {
    let k = palette.k();
    if grad_w.len() != chroma.len() * k {
        return Err(DecompositionError::Shape { expected: chroma.len() * k, found: grad_w.len() });
    }
    let per_pixel: Result<Vec<Vec<Ab>>, _> = chroma
        .par_iter()
        .enumerate()
        .map(|(p, &c)| {
            let g = &grad_w[p * k..(p + 1) * k];
            if g.iter().all(|&v| v == 0.0) {
                Ok(vec![[0.0; 2]; k])
            } else {
                target_weights_backward(c, palette, g)
            }
        })
        .collect();
    let mut total = vec![[0.0; 2]; k];
    for g in per_pixel? {
        for (t, v) in total.iter_mut().zip(g) {
            t[0] += v[0];
            t[1] += v[1];
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::color::{decode_palette, PaletteParams, GREY};

    fn square() -> Palette {
        Palette::new(vec![GREY, [0.7, 0.5], [0.5, 0.3], [0.3, 0.5], [0.5, 0.7]]).unwrap()
    }

    #[test]
    fn center_maps_to_grey() {
        let p = square();
        let r = wedge_coords(GREY, &p, 0).unwrap();
        assert_eq!(r.raw, vec![1.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(target_weights(GREY, &p).unwrap(), vec![1.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn edge_midpoint_splits_evenly() {
        let p = square();
        let r = wedge_coords([0.6, 0.5], &p, 0).unwrap();
        assert!((r.raw[0] - 0.5).abs() < 1e-12);
        assert!((r.raw[1] - 0.5).abs() < 1e-12);
        assert!(r.raw[2].abs() < 1e-12);
    }

    #[test]
    fn wraparound_wedge_uses_last_and_first_vertices() {
        assert_eq!(wedge_slots(5, 3), [0, 4, 1]);
        assert_eq!(wedge_slots(3, 1), [0, 2, 1]);
    }

    #[test]
    fn vertex_gives_one_hot() {
        let p = square();
        for k in 1..5 {
            let w = target_weights(p.vertices[k], &p).unwrap();
            for (j, v) in w.iter().enumerate() {
                let want = if j == k { 1.0 } else { 0.0 };
                assert!((v - want).abs() < 1e-12, "vertex {k}: {w:?}");
            }
        }
    }

    #[test]
    fn irregular_palettes_pick_the_containing_wedge() {
        // Uneven angular steps where unit sharpness chose an extrapolating wedge.
        let params = PaletteParams {
            delta_theta: vec![-0.3, 0.4, -0.3],
            log_r: vec![-1.3, -1.4, -2.8],
            rotation: 1.7,
        };
        let p = decode_palette(&params).unwrap();
        for k in 0..p.k() {
            let w = target_weights(p.vertices[k], &p).unwrap();
            assert!((w[k] - 1.0).abs() < 1e-9, "vertex {k}: {w:?}");
        }
        for wedge in 0..p.k() - 1 {
            let s = wedge_slots(p.k(), wedge);
            let c = [0, 1].map(|d| 0.2 * p.vertices[s[0]][d] + 0.5 * p.vertices[s[1]][d] + 0.3 * p.vertices[s[2]][d]);
            let w = target_weights(c, &p).unwrap();
            assert!(w.iter().all(|&x| x > -1e-9), "wedge {wedge}: {w:?}");
        }
    }

    #[test]
    fn outside_point_extrapolates() {
        let p = square();
        let c = [0.5 + 1.5 * 0.2, 0.5];
        let w = target_weights(c, &p).unwrap();
        assert!((w[1] - 1.5).abs() < 1e-12);
        assert!((w[0] + 0.5).abs() < 1e-12);
    }

    #[test]
    fn containment() {
        let p = square();
        assert!(palette_contains([0.55, 0.52], &p));
        assert!(palette_contains([0.7, 0.5], &p));
        assert!(!palette_contains([0.65, 0.65], &p));
        assert!(!palette_contains([0.9, 0.5], &p));
    }

    #[test]
    fn degenerate_wedges_are_skipped() {
        let p = Palette::new(vec![GREY, [0.7, 0.5], [0.7, 0.5], [0.4, 0.4]]).unwrap();
        assert_eq!(wedge_coords([0.6, 0.5], &p, 0), Err(DecompositionError::DegenerateWedge(0)));
        let w = target_weights([0.55, 0.48], &p).unwrap();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let flat = Palette::new(vec![GREY, [0.6, 0.5], [0.7, 0.5]]).unwrap();
        assert_eq!(target_weights([0.6, 0.5], &flat), Err(DecompositionError::AllDegenerate));
    }

    #[test]
    fn backward_matches_finite_differences_inside_wedges() {
        let params = PaletteParams { delta_theta: vec![0.3, -0.2, 0.5, 0.1], log_r: vec![-1.8, -1.5, -2.0, -1.7], rotation: 0.0 };
        let palette = decode_palette(&params).unwrap();
        let grad = [0.3, -0.7, 0.2, 0.9, -0.4];
        for c in [[0.52, 0.55], [0.45, 0.47], [0.58, 0.44], [0.9, 0.1]] {
            let an = target_weights_backward(c, &palette, &grad).unwrap();
            let f = |v: &[Ab]| -> f64 {
                let p = Palette { vertices: v.to_vec() };
                target_weights(c, &p).unwrap().iter().zip(&grad).map(|(a, b)| a * b).sum()
            };
            for k in 1..5 {
                for a in 0..2 {
                    let h = 1e-6;
                    let mut plus = palette.vertices.clone();
                    plus[k][a] += h;
                    let mut minus = palette.vertices.clone();
                    minus[k][a] -= h;
                    let fd = (f(&plus) - f(&minus)) / (2.0 * h);
                    let err = (fd - an[k][a]).abs() / fd.abs().max(an[k][a].abs()).max(1e-3);
                    assert!(err < 1e-5, "c {c:?} vertex {k}.{a}: fd {fd} an {}", an[k][a]);
                }
            }
        }
    }
}
