//! Color grading on frozen view buffers: palette moves, per-color tone
//! curves, and the sparsest-change pixel constraint solver.
//!
//! Grey is palette index 0 here. Nothing in this module touches Gaussian
//! parameters; every edit is a function of `W̃`, `L0` and an [`EditState`].

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::color::{lab_norm_row_to_srgb8, Ab, LabNorm, Palette, PaletteError, GREY};
use crate::rasterizer::ViewBuffers;

/// Uniform samples per tone curve.
pub const CURVE_SAMPLES: usize = 256;
/// Factor applied to the grey weight before renormalizing in the lightness blend.
pub const GREY_WEIGHT_SCALE: f64 = 0.01;
/// Control points closer than half a sample spacing are duplicates.
pub const MIN_CONTROL_GAP: f64 = 0.5 / CURVE_SAMPLES as f64;

#[derive(Debug, Error, PartialEq)]
pub enum EditError {
    #[error("control point ({0}, {1}) must have t in (0, 1) and v in [0, 1]")]
    ControlOutOfRange(f64, f64),
    #[error("control points at t = {0} and t = {1} are closer than half a sample")]
    DuplicateControl(f64, f64),
    #[error("control points sharing one sample cell cannot all be interpolated")]
    SingularCurve,
    #[error("state has {got} tone curves but the palette has {want} colors")]
    CurveCount { got: usize, want: usize },
    #[error("palette vertex 0 must stay at grey, found {0:?}")]
    GreyMoved(Ab),
    #[error(transparent)]
    Palette(#[from] PaletteError),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("buffers carry K = {buffers} weights, state has K = {state}")]
    KMismatch { buffers: usize, state: usize },
    #[error("constraint {index} references unknown view {view}")]
    UnknownView { index: usize, view: usize },
    #[error("constraint {index} pixel ({x}, {y}) is outside the {width}x{height} view")]
    PixelOutOfBounds { index: usize, x: usize, y: usize, width: usize, height: usize },
    #[error("pinned palette index {0} is out of range")]
    PinnedIndex(usize),
    #[error("pinned curve point ({curve}, {t}) is invalid")]
    PinnedCurvePoint { curve: usize, t: f64 },
}

/// A tone curve `f: [0, 1] → R` with `f(0) = 0`, `f(1) = 1`, stored as
/// [`CURVE_SAMPLES`] uniform samples and evaluated by linear interpolation.
///
/// Serializes as its control points only; samples are refit on load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CurveDoc", into = "CurveDoc")]
pub struct ToneCurve {
    control_points: Vec<[f64; 2]>,
    samples: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CurveDoc {
    #[serde(default)]
    control_points: Vec<[f64; 2]>,
}

impl TryFrom<CurveDoc> for ToneCurve {
    type Error = EditError;
    fn try_from(doc: CurveDoc) -> Result<Self, EditError> {
        fit_tone_curve(&doc.control_points)
    }
}

impl From<ToneCurve> for CurveDoc {
    fn from(c: ToneCurve) -> Self {
        CurveDoc { control_points: c.control_points }
    }
}

impl Default for ToneCurve {
    fn default() -> Self {
        Self::identity()
    }
}

impl ToneCurve {
    pub fn identity() -> Self {
        Self { control_points: Vec::new(), samples: linear_samples() }
    }

    /// Control points sorted by `t`.
    pub fn control_points(&self) -> &[[f64; 2]] {
        &self.control_points
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn is_identity(&self) -> bool {
        self.control_points.is_empty()
    }

    #[inline]
    pub fn eval(&self, x: f64) -> f64 {
        interpolate(&self.samples, x)
    }
}

fn linear_samples() -> Vec<f64> {
    (0..CURVE_SAMPLES).map(|j| j as f64 / (CURVE_SAMPLES - 1) as f64).collect()
}

#[inline]
fn interpolate(samples: &[f64], x: f64) -> f64 {
    let u = x.clamp(0.0, 1.0) * (CURVE_SAMPLES - 1) as f64;
    let j = (u as usize).min(CURVE_SAMPLES - 2);
    let s = u - j as f64;
    samples[j] + s * (samples[j + 1] - samples[j])
}

/// Sample cell and interpolation fraction of `t`.
fn cell(t: f64) -> (usize, f64) {
    let u = t * (CURVE_SAMPLES - 1) as f64;
    let j = (u as usize).min(CURVE_SAMPLES - 2);
    (j, u - j as f64)
}

/// Fits the smoothest sampled curve through the control points.
///
/// Minimizes the summed squared second differences over all samples with
/// `f[0] = 0`, `f[N-1] = 1` and every control point interpolated exactly;
/// the ends carry no second-derivative condition.
pub fn fit_tone_curve(points: &[[f64; 2]]) -> Result<ToneCurve, EditError> {
    let mut pts = points.to_vec();
    for p in &pts {
        if !(p[0] > 0.0 && p[0] < 1.0 && (0.0..=1.0).contains(&p[1])) {
            return Err(EditError::ControlOutOfRange(p[0], p[1]));
        }
    }
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]));
    for w in pts.windows(2) {
        if w[1][0] - w[0][0] < MIN_CONTROL_GAP {
            return Err(EditError::DuplicateControl(w[0][0], w[1][0]));
        }
    }
    let samples = if pts.is_empty() { linear_samples() } else { solve_samples(&pts, 1.0)? };
    Ok(ToneCurve { control_points: pts, samples })
}

/// Solves `T x = rhs` for the `(1, -2, 1)` second-difference matrix.
fn second_difference_solve(rhs: &[f64]) -> Vec<f64> {
    let n = rhs.len();
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    c[0] = 1.0 / -2.0;
    d[0] = rhs[0] / -2.0;
    for i in 1..n {
        let m = -2.0 - c[i - 1];
        c[i] = 1.0 / m;
        d[i] = (rhs[i] - d[i - 1]) / m;
    }
    let mut x = vec![0.0; n];
    x[n - 1] = d[n - 1];
    for i in (0..n - 1).rev() {
        x[i] = d[i] - c[i] * x[i + 1];
    }
    x
}

/// Core curve solve with `f[0] = 0` and `f[N-1] = end`.
///
/// Eliminating the two fixed ends leaves `min ‖T x + c‖²` with `T` the
/// square second-difference matrix, so `Q = TᵀT` is inverted by two
/// tridiagonal solves and the interpolation rows go through a small Schur
/// complement.
fn solve_samples(points: &[[f64; 2]], end: f64) -> Result<Vec<f64>, EditError> {
    let n = CURVE_SAMPLES - 2;
    let mut c = vec![0.0; n];
    c[n - 1] = end;
    let x0: Vec<f64> = second_difference_solve(&c).into_iter().map(|v| -v).collect();

    // Interpolation rows on the interior unknowns (sample j ↦ unknown j-1).
    let m = points.len();
    let mut rows: Vec<Vec<(usize, f64)>> = Vec::with_capacity(m);
    let mut b = DVector::zeros(m);
    for (r, p) in points.iter().enumerate() {
        let (j, s) = cell(p[0]);
        let mut row = Vec::with_capacity(2);
        let mut rhs = p[1];
        for (idx, coef) in [(j, 1.0 - s), (j + 1, s)] {
            if idx == 0 {
                continue;
            } else if idx == CURVE_SAMPLES - 1 {
                rhs -= coef * end;
            } else {
                row.push((idx - 1, coef));
            }
        }
        rows.push(row);
        b[r] = rhs;
    }
    let dot = |row: &[(usize, f64)], v: &[f64]| row.iter().map(|&(i, a)| a * v[i]).sum::<f64>();

    // G = Q⁻¹ Aᵀ, column per row of A.
    let g: Vec<Vec<f64>> = rows
        .iter()
        .map(|row| {
            let mut e = vec![0.0; n];
            for &(i, a) in row {
                e[i] += a;
            }
            second_difference_solve(&second_difference_solve(&e))
        })
        .collect();
    let s = DMatrix::from_fn(m, m, |r, l| dot(&rows[r], &g[l]));
    let lu = s.lu();
    let mut x = x0.clone();
    let mut residual = DVector::from_fn(m, |r, _| dot(&rows[r], &x0) - b[r]);
    // One refinement pass recovers the digits lost to the ill-conditioned Schur system.
    for _ in 0..2 {
        let lambda = lu.solve(&residual).ok_or(EditError::SingularCurve)?;
        for (l, gl) in g.iter().enumerate() {
            for (xi, gi) in x.iter_mut().zip(gl) {
                *xi -= lambda[l] * gi;
            }
        }
        residual = DVector::from_fn(m, |r, _| dot(&rows[r], &x) - b[r]);
    }
    if !x.iter().all(|v| v.is_finite()) || residual.amax() > 1e-9 {
        return Err(EditError::SingularCurve);
    }
    let mut samples = Vec::with_capacity(CURVE_SAMPLES);
    samples.push(0.0);
    samples.extend(x);
    samples.push(end);
    Ok(samples)
}

/// One tone curve per palette color, grey first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ToneCurveSet {
    pub curves: Vec<ToneCurve>,
}

impl ToneCurveSet {
    pub fn identity(k: usize) -> Self {
        Self { curves: vec![ToneCurve::identity(); k] }
    }

    pub fn len(&self) -> usize {
        self.curves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.curves.is_empty()
    }

    pub fn is_identity(&self) -> bool {
        self.curves.iter().all(ToneCurve::is_identity)
    }
}

/// Lightness blend weights `Ũ`: the grey weight scaled by
/// [`GREY_WEIGHT_SCALE`], then renormalized to sum 1.
pub fn scaled_weights_into(w: &[f64], out: &mut [f64]) {
    out.copy_from_slice(w);
    out[0] *= GREY_WEIGHT_SCALE;
    let s: f64 = out.iter().sum();
    if s > 0.0 {
        out.iter_mut().for_each(|v| *v /= s);
    }
}

pub fn scaled_weights(w: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; w.len()];
    scaled_weights_into(w, &mut out);
    out
}

/// Which channels of a pixel constraint are enforced.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConstraintKind {
    #[default]
    Color,
    Chroma,
    Lightness,
}

impl ConstraintKind {
    fn has_chroma(self) -> bool {
        self != ConstraintKind::Lightness
    }

    fn has_lightness(self) -> bool {
        self != ConstraintKind::Chroma
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelConstraint {
    pub view: usize,
    pub x: usize,
    pub y: usize,
    pub target: LabNorm,
    #[serde(default)]
    pub kind: ConstraintKind,
}

/// A point on a tone curve held at its current value during solves.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePin {
    pub curve: usize,
    pub t: f64,
}

/// Everything a grading session changes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditState {
    pub palette: Palette,
    pub curves: ToneCurveSet,
    #[serde(default)]
    pub constraints: Vec<PixelConstraint>,
    /// Palette indices the solver must not move; grey is always fixed.
    #[serde(default)]
    pub pinned_palette: Vec<usize>,
    #[serde(default)]
    pub pinned_curve_points: Vec<CurvePin>,
}

impl EditState {
    /// The unedited state for a trained palette.
    pub fn identity(palette: Palette) -> Self {
        let k = palette.k();
        Self {
            palette,
            curves: ToneCurveSet::identity(k),
            constraints: Vec::new(),
            pinned_palette: Vec::new(),
            pinned_curve_points: Vec::new(),
        }
    }

    pub fn k(&self) -> usize {
        self.palette.k()
    }

    pub fn validate(&self) -> Result<(), EditError> {
        let k = self.k();
        if k < 3 {
            return Err(PaletteError::TooFewColors(k).into());
        }
        if self.palette.vertices[0] != GREY {
            return Err(EditError::GreyMoved(self.palette.vertices[0]));
        }
        if !self.palette.vertices.iter().flatten().all(|v| v.is_finite()) {
            return Err(EditError::NonFinite("palette"));
        }
        if self.curves.len() != k {
            return Err(EditError::CurveCount { got: self.curves.len(), want: k });
        }
        if let Some(&i) = self.pinned_palette.iter().find(|&&i| i >= k) {
            return Err(EditError::PinnedIndex(i));
        }
        for pin in &self.pinned_curve_points {
            if pin.curve >= k || !(pin.t > 0.0 && pin.t < 1.0) {
                return Err(EditError::PinnedCurvePoint { curve: pin.curve, t: pin.t });
            }
        }
        for c in &self.constraints {
            if ![c.target.l, c.target.a, c.target.b].iter().all(|v| v.is_finite()) {
                return Err(EditError::NonFinite("constraint target"));
            }
        }
        Ok(())
    }

    /// Checks constraint pixels against per-view `(width, height)`.
    pub fn validate_views(&self, sizes: &[(usize, usize)]) -> Result<(), EditError> {
        for (index, c) in self.constraints.iter().enumerate() {
            let &(width, height) =
                sizes.get(c.view).ok_or(EditError::UnknownView { index, view: c.view })?;
            if c.x >= width || c.y >= height {
                return Err(EditError::PixelOutOfBounds { index, x: c.x, y: c.y, width, height });
            }
        }
        Ok(())
    }
}

/// Curve samples interleaved by sample index, so one pixel's `K` lookups
/// share a cache line.
struct CurveTable {
    k: usize,
    /// `None` when every curve is the identity.
    table: Option<Vec<f64>>,
}

impl CurveTable {
    fn new(curves: &ToneCurveSet) -> Self {
        let k = curves.len();
        let table = (!curves.is_identity()).then(|| {
            let mut t = vec![0.0; CURVE_SAMPLES * k];
            for (i, c) in curves.curves.iter().enumerate() {
                for (j, v) in c.samples.iter().enumerate() {
                    t[j * k + i] = *v;
                }
            }
            t
        });
        Self { k, table }
    }

    /// `Σ Ũ_i f_i(L0)`, or `L0` itself at identity.
    #[inline]
    fn lightness(&self, w: &[f64], l0: f64) -> f64 {
        let Some(t) = &self.table else { return l0 };
        let (j, s) = cell(l0.clamp(0.0, 1.0));
        let lo = &t[j * self.k..(j + 1) * self.k];
        let hi = &t[(j + 1) * self.k..(j + 2) * self.k];
        // Ũ_i = c_i w_i / Σ c w with c_0 = GREY_WEIGHT_SCALE and c_i = 1 otherwise.
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..self.k {
            let c = if i == 0 { GREY_WEIGHT_SCALE * w[0] } else { w[i] };
            num += c * (lo[i] + s * (hi[i] - lo[i]));
            den += c;
        }
        if den > 0.0 {
            num / den
        } else {
            0.0
        }
    }
}

/// Edited Lab of pixel `p`, unclamped.
pub fn compose_pixel(buffers: &ViewBuffers, p: usize, state: &EditState) -> [f64; 3] {
    let table = CurveTable::new(&state.curves);
    let w = buffers.weights(p);
    let ab = state.palette.mix(w);
    [table.lightness(w, buffers.l[p]), ab[0], ab[1]]
}

#[derive(Debug, Clone, PartialEq)]
pub struct EditedImage {
    pub width: usize,
    pub height: usize,
    pub lab: Vec<LabNorm>,
    /// Interleaved 8-bit sRGB.
    pub rgb8: Vec<u8>,
}

/// Composites an edited view: chroma `W̃ᵀP`, lightness `Σ Ũ_i f_i(L0)`.
///
/// With all curves at identity the lightness is `L0` itself, so the
/// unedited state reproduces [`ViewBuffers::render_lab`] bit for bit.
pub fn compose_edited(buffers: &ViewBuffers, state: &EditState) -> Result<EditedImage, EditError> {
    if buffers.k != state.k() {
        return Err(EditError::KMismatch { buffers: buffers.k, state: state.k() });
    }
    if state.curves.len() != state.k() {
        return Err(EditError::CurveCount { got: state.curves.len(), want: state.k() });
    }
    let (w, h, k) = (buffers.width, buffers.height, buffers.k);
    let table = CurveTable::new(&state.curves);
    let mut lab = vec![LabNorm { l: 0.0, a: 0.0, b: 0.0 }; w * h];
    let mut rgb8 = vec![0u8; w * h * 3];
    lab.par_chunks_mut(w.max(1))
        .zip(rgb8.par_chunks_mut((3 * w).max(1)))
        .enumerate()
        .for_each(|(y, (lab_row, rgb_row))| {
            let wrow = &buffers.w_norm[y * w * k..(y + 1) * w * k];
            let lrow = &buffers.l[y * w..(y + 1) * w];
            for ((out, wp), &l0) in lab_row.iter_mut().zip(wrow.chunks_exact(k)).zip(lrow) {
                let ab = state.palette.mix(wp);
                *out = LabNorm::new(table.lightness(wp, l0), ab[0], ab[1]);
            }
            lab_norm_row_to_srgb8(lab_row, rgb_row);
        });
    Ok(EditedImage { width: w, height: h, lab, rgb8 })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    /// Initial ADMM penalty, rescaled adaptively.
    pub rho: f64,
    /// Primal and dual residual tolerance.
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Largest per-channel Lab error that still counts as satisfied.
    pub satisfied: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { rho: 1.0, tolerance: 1e-4, max_iterations: 500, satisfied: 1e-3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolveOutcome {
    pub state: EditState,
    /// Largest per-channel Lab error over the enforced constraint channels.
    pub residual: f64,
    /// Set when the constraints could not all be met and the least-squares path was taken.
    pub fallback: bool,
    pub iterations: usize,
    pub active_palette: Vec<usize>,
    pub active_curves: Vec<usize>,
}

/// Variables of one tone curve: slots are control points after merging in
/// knots and pins; `free` lists the slots the solver may move.
struct CurveVars {
    slots: Vec<[f64; 2]>,
    free: Vec<usize>,
    /// Influence samples per free slot.
    basis: Vec<Vec<f64>>,
}

fn curve_vars(curve: &ToneCurve, curve_index: usize, knots: &[f64], pins: &[CurvePin]) -> Result<CurveVars, EditError> {
    // (t, value, free)
    let mut slots: Vec<(f64, f64, bool)> = curve.control_points().iter().map(|p| (p[0], p[1], false)).collect();
    let pinned: Vec<f64> = pins.iter().filter(|p| p.curve == curve_index).map(|p| p.t).collect();
    let find = |slots: &[(f64, f64, bool)], t: f64| slots.iter().position(|s| (s.0 - t).abs() < MIN_CONTROL_GAP);
    let mut locked = vec![false; slots.len()];
    for &t in &pinned {
        match find(&slots, t) {
            Some(i) => locked[i] = true,
            None => {
                slots.push((t, curve.eval(t), false));
                locked.push(true);
            }
        }
    }
    for &t in knots {
        match find(&slots, t) {
            Some(i) => slots[i].2 = !locked[i],
            None => {
                slots.push((t, curve.eval(t), true));
                locked.push(false);
            }
        }
    }
    let mut order: Vec<usize> = (0..slots.len()).collect();
    order.sort_by(|&a, &b| slots[a].0.total_cmp(&slots[b].0));
    let slots: Vec<(f64, f64, bool)> = order.iter().map(|&i| slots[i]).collect();
    let free: Vec<usize> = (0..slots.len()).filter(|&i| slots[i].2).collect();
    let basis = free
        .iter()
        .map(|&j| {
            let unit: Vec<[f64; 2]> =
                slots.iter().enumerate().map(|(i, s)| [s.0, if i == j { 1.0 } else { 0.0 }]).collect();
            solve_samples(&unit, 0.0)
        })
        .collect::<Result<_, _>>()?;
    Ok(CurveVars { slots: slots.iter().map(|s| [s.0, s.1]).collect(), free, basis })
}

struct Group {
    start: usize,
    len: usize,
}

fn shrink_groups(v: &DVector<f64>, groups: &[Group], threshold: f64) -> DVector<f64> {
    let mut out = v.clone();
    for g in groups {
        let mut seg = out.rows_mut(g.start, g.len);
        let norm = seg.norm();
        if norm <= threshold {
            seg.fill(0.0);
        } else {
            seg *= 1.0 - threshold / norm;
        }
    }
    out
}

fn pseudo_inverse(m: &DMatrix<f64>) -> DMatrix<f64> {
    let svd = m.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let eps = (smax * 1e-10).max(1e-300);
    svd.pseudo_inverse(eps).unwrap_or_else(|_| DMatrix::zeros(m.ncols(), m.nrows()))
}

/// Finds the sparsest palette and tone-curve change meeting the pixel constraints.
///
/// Variables are chromatic vertex displacements and control-value deltas at
/// knots placed on each constrained pixel's `L0`. The objective is the sum of
/// per-color group norms, solved by ADMM with adaptive penalty followed by a
/// least-norm polish on the active groups. Inconsistent systems are solved
/// over the least-squares solution set and flagged as fallback.
///
/// `buffers[v]` holds the frozen buffers of view `v`.
pub fn solve_constraints(state: &EditState, buffers: &[ViewBuffers], cfg: &SolverConfig) -> Result<SolveOutcome, EditError> {
    state.validate()?;
    let sizes: Vec<(usize, usize)> = buffers.iter().map(|b| (b.width, b.height)).collect();
    state.validate_views(&sizes)?;
    let k = state.k();
    for c in &state.constraints {
        let b = &buffers[c.view];
        if b.k != k {
            return Err(EditError::KMismatch { buffers: b.k, state: k });
        }
    }
    let unchanged = |residual: f64| SolveOutcome {
        state: state.clone(),
        residual,
        fallback: residual > cfg.satisfied,
        iterations: 0,
        active_palette: Vec::new(),
        active_curves: Vec::new(),
    };
    if state.constraints.is_empty() {
        return Ok(unchanged(0.0));
    }

    struct Pixel {
        w: Vec<f64>,
        u: Vec<f64>,
        l0: f64,
        current: [f64; 3],
        target: [f64; 3],
        kind: ConstraintKind,
    }
    let pixels: Vec<Pixel> = state
        .constraints
        .iter()
        .map(|c| {
            let b = &buffers[c.view];
            let p = c.y * b.width + c.x;
            let w = b.weights(p).to_vec();
            Pixel {
                u: scaled_weights(&w),
                w,
                l0: b.l[p],
                current: compose_pixel(b, p, state),
                target: [c.target.l, c.target.a, c.target.b],
                kind: c.kind,
            }
        })
        .collect();

    // Palette variables.
    let movable: Vec<usize> = (1..k).filter(|i| !state.pinned_palette.contains(i)).collect();
    let mut groups: Vec<Group> = movable.iter().enumerate().map(|(g, _)| Group { start: 2 * g, len: 2 }).collect();
    let mut nvar = 2 * movable.len();

    // Curve variables at merged knots.
    let mut knots: Vec<f64> = Vec::new();
    for px in pixels.iter().filter(|p| p.kind.has_lightness()) {
        let t = px.l0;
        if t > MIN_CONTROL_GAP && t < 1.0 - MIN_CONTROL_GAP && knots.iter().all(|&q| (q - t).abs() >= MIN_CONTROL_GAP) {
            knots.push(t);
        }
    }
    let mut curves: Vec<Option<(CurveVars, usize)>> = Vec::with_capacity(k);
    for (i, curve) in state.curves.curves.iter().enumerate() {
        if knots.is_empty() {
            curves.push(None);
            continue;
        }
        let vars = curve_vars(curve, i, &knots, &state.pinned_curve_points)?;
        if vars.free.is_empty() {
            curves.push(None);
            continue;
        }
        groups.push(Group { start: nvar, len: vars.free.len() });
        let start = nvar;
        nvar += vars.free.len();
        curves.push(Some((vars, start)));
    }

    // Linear system M z = r.
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut rhs: Vec<f64> = Vec::new();
    let mut enforced: Vec<(usize, usize)> = Vec::new();
    for (pi, px) in pixels.iter().enumerate() {
        if px.kind.has_lightness() {
            let mut row = vec![0.0; nvar];
            for (i, entry) in curves.iter().enumerate() {
                if let Some((vars, start)) = entry {
                    for (j, basis) in vars.basis.iter().enumerate() {
                        row[start + j] += px.u[i] * interpolate(basis, px.l0);
                    }
                }
            }
            rows.push(row);
            rhs.push(px.target[0] - px.current[0]);
            enforced.push((pi, 0));
        }
        if px.kind.has_chroma() {
            for c in 0..2 {
                let mut row = vec![0.0; nvar];
                for (g, &v) in movable.iter().enumerate() {
                    row[2 * g + c] = px.w[v];
                }
                rows.push(row);
                rhs.push(px.target[1 + c] - px.current[1 + c]);
                enforced.push((pi, 1 + c));
            }
        }
    }
    let r = DVector::from_vec(rhs);
    if r.amax() < 1e-12 || nvar == 0 {
        let residual = r.amax();
        return Ok(unchanged(residual));
    }
    let m = DMatrix::from_fn(rows.len(), nvar, |i, j| rows[i][j]);
    let m_pinv = pseudo_inverse(&m);
    let project = |v: &DVector<f64>| v - &m_pinv * (&m * v - &r);

    // ADMM on  min Σ‖y_g‖  s.t.  x ∈ {M x = r} (or its least-squares set),  x = y.
    let mut rho = cfg.rho;
    let mut y = DVector::zeros(nvar);
    let mut u = DVector::zeros(nvar);
    let mut iterations = 0;
    for it in 0..cfg.max_iterations {
        iterations = it + 1;
        let x = project(&(&y - &u));
        let y_prev = y.clone();
        y = shrink_groups(&(&x + &u), &groups, 1.0 / rho);
        u += &x - &y;
        let primal = (&x - &y).norm();
        let dual = rho * (&y - &y_prev).norm();
        if primal < cfg.tolerance && dual < cfg.tolerance {
            break;
        }
        if primal > 10.0 * dual {
            rho *= 2.0;
            u /= 2.0;
        } else if dual > 10.0 * primal {
            rho /= 2.0;
            u *= 2.0;
        }
    }

    // Polish: least-norm solve restricted to the groups ADMM left active.
    let group_norm = |z: &DVector<f64>, g: &Group| z.rows(g.start, g.len).norm();
    let active: Vec<bool> = groups.iter().map(|g| group_norm(&y, g) > 1e-9).collect();
    let cols: Vec<usize> = groups
        .iter()
        .zip(&active)
        .filter(|(_, &a)| a)
        .flat_map(|(g, _)| g.start..g.start + g.len)
        .collect();
    let dense = project(&y);
    let mut z = dense.clone();
    if !cols.is_empty() {
        let ma = DMatrix::from_fn(m.nrows(), cols.len(), |i, j| m[(i, cols[j])]);
        let za = pseudo_inverse(&ma) * &r;
        let mut polished = DVector::zeros(nvar);
        for (j, &c) in cols.iter().enumerate() {
            polished[c] = za[j];
        }
        let err = |v: &DVector<f64>| (&m * v - &r).norm();
        if err(&polished) <= err(&dense) + 1e-9 {
            z = polished;
        }
    }

    // Apply.
    let mut next = state.clone();
    let mut active_palette = Vec::new();
    for (g, &v) in movable.iter().enumerate() {
        let d = [z[2 * g], z[2 * g + 1]];
        if d[0] != 0.0 || d[1] != 0.0 {
            next.palette.vertices[v][0] += d[0];
            next.palette.vertices[v][1] += d[1];
            active_palette.push(v);
        }
    }
    let mut active_curves = Vec::new();
    for (i, entry) in curves.iter().enumerate() {
        let Some((vars, start)) = entry else { continue };
        let delta: Vec<f64> = (0..vars.free.len()).map(|j| z[start + j]).collect();
        if delta.iter().all(|&d| d == 0.0) {
            continue;
        }
        let mut points = vars.slots.clone();
        for (j, &slot) in vars.free.iter().enumerate() {
            points[slot][1] = (points[slot][1] + delta[j]).clamp(0.0, 1.0);
        }
        next.curves.curves[i] = fit_tone_curve(&points)?;
        active_curves.push(i);
    }

    let mut residual = 0.0f64;
    for &(pi, channel) in &enforced {
        let c = &state.constraints[pi];
        let b = &buffers[c.view];
        let lab = compose_pixel(b, c.y * b.width + c.x, &next);
        residual = residual.max((lab[channel] - pixels[pi].target[channel]).abs());
    }
    Ok(SolveOutcome {
        state: next,
        residual,
        fallback: residual > cfg.satisfied,
        iterations,
        active_palette,
        active_curves,
    })
}
