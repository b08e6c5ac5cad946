//! Python bindings: palette math, tone curves, scene files, compositing and
//! the constraint solver. Images cross the boundary as `(width, height, rgb8 bytes)`.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;
use splatgrade::color::{self, LabNorm, Palette, PaletteParams};
use splatgrade::decomposition;
use splatgrade::editing::{self, compose_edited, solve_constraints, EditState, SolverConfig};
use splatgrade::formats::{self, buffers_from_bytes, buffers_to_bytes, CameraManifest, FormatError, SceneFile};
use splatgrade::rasterizer::{splat, ViewBuffers};
use splatgrade::trainer;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BindingError {
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("{0}")]
    Invalid(String),
}

impl From<BindingError> for PyErr {
    fn from(e: BindingError) -> Self {
        match e {
            BindingError::Format(FormatError::Io { .. }) => PyIOError::new_err(e.to_string()),
            _ => PyValueError::new_err(e.to_string()),
        }
    }
}

fn invalid(e: impl std::fmt::Display) -> BindingError {
    BindingError::Invalid(e.to_string())
}

pub fn parse_state(json: &str) -> Result<EditState, BindingError> {
    Ok(formats::edit_state_from_json(json)?)
}

pub fn compose_rgb8(buffer: &[u8], state_json: &str) -> Result<(usize, usize, Vec<u8>), BindingError> {
    let b = buffers_from_bytes(buffer)?;
    let img = compose_edited(&b, &parse_state(state_json)?).map_err(invalid)?;
    Ok((img.width, img.height, img.rgb8))
}

/// Solver outcome as JSON (state, residual, fallback, active groups).
pub fn solve_json(state_json: &str, buffers: &[Vec<u8>], solver_json: Option<&str>) -> Result<String, BindingError> {
    let state = parse_state(state_json)?;
    let views: Vec<ViewBuffers> = buffers.iter().map(|b| buffers_from_bytes(b)).collect::<Result<_, _>>()?;
    let cfg: SolverConfig = match solver_json {
        Some(s) => serde_json::from_str(s).map_err(invalid)?,
        None => SolverConfig::default(),
    };
    let out = solve_constraints(&state, &views, &cfg).map_err(invalid)?;
    serde_json::to_string(&out).map_err(invalid)
}

#[pyfunction]
fn srgb_to_lab(rgb: [f64; 3]) -> (f64, f64, f64) {
    let c = color::srgb_to_lab_norm(rgb);
    (c.l, c.a, c.b)
}

#[pyfunction]
fn lab_to_srgb(lab: [f64; 3]) -> [f64; 3] {
    color::lab_norm_to_srgb(LabNorm { l: lab[0], a: lab[1], b: lab[2] })
}

/// Palette vertices (grey first) from angle and radius parameters.
#[pyfunction]
#[pyo3(signature = (delta_theta, log_r, rotation = 0.0))]
fn decode_palette(delta_theta: Vec<f64>, log_r: Vec<f64>, rotation: f64) -> PyResult<Vec<[f64; 2]>> {
    let p = color::decode_palette(&PaletteParams { delta_theta, log_r, rotation }).map_err(invalid)?;
    Ok(p.vertices)
}

/// Inverse-barycentric target weights of chroma `ab` in a palette.
#[pyfunction]
fn target_weights(ab: [f64; 2], vertices: Vec<[f64; 2]>) -> PyResult<Vec<f64>> {
    let p = Palette::new(vertices).map_err(invalid)?;
    Ok(decomposition::target_weights(ab, &p).map_err(invalid)?)
}

/// Sampled tone curve through `points` (`[[t, value], ...]`).
#[pyfunction]
fn fit_tone_curve(points: Vec<[f64; 2]>) -> PyResult<Vec<f64>> {
    Ok(editing::fit_tone_curve(&points).map_err(invalid)?.samples().to_vec())
}

/// `(train, test)` view indices; every `stride`-th view is held out.
#[pyfunction]
#[pyo3(signature = (n_views, stride = 8))]
fn eval_split(n_views: usize, stride: usize) -> (Vec<usize>, Vec<usize>) {
    trainer::eval_split(n_views, stride)
}

/// Composites a BufferFile under an EditState JSON document.
#[pyfunction]
fn compose<'py>(py: Python<'py>, buffer: &[u8], state_json: &str) -> PyResult<(usize, usize, Bound<'py, PyBytes>)> {
    let (w, h, rgb) = compose_rgb8(buffer, state_json)?;
    Ok((w, h, PyBytes::new(py, &rgb)))
}

/// Runs the constraint solver over BufferFiles (one per view); returns JSON.
#[pyfunction]
#[pyo3(signature = (state_json, buffers, solver_json = None))]
fn solve(state_json: &str, buffers: Vec<Vec<u8>>, solver_json: Option<&str>) -> PyResult<String> {
    Ok(solve_json(state_json, &buffers, solver_json)?)
}

/// A trained scene file.
#[pyclass(frozen)]
struct Scene {
    file: SceneFile,
    palette: Palette,
}

#[pymethods]
impl Scene {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let file = SceneFile::load(&path).map_err(BindingError::from)?;
        let palette = color::decode_palette(&file.palette).map_err(invalid)?;
        Ok(Self { file, palette })
    }

    #[getter]
    fn count(&self) -> usize {
        self.file.cloud.len()
    }

    #[getter]
    fn k(&self) -> usize {
        self.file.cloud.k
    }

    #[getter]
    fn sh_degree(&self) -> usize {
        self.file.cloud.sh_degree
    }

    #[getter]
    fn palette(&self) -> Vec<[f64; 2]> {
        self.palette.vertices.clone()
    }

    /// Identity EditState JSON for this scene's palette.
    fn identity_state(&self) -> PyResult<String> {
        serde_json::to_string(&EditState::identity(self.palette.clone())).map_err(|e| invalid(e).into())
    }

    /// BufferFile bytes for view `view` of a camera manifest.
    fn buffers<'py>(&self, py: Python<'py>, manifest: PathBuf, view: usize) -> PyResult<Bound<'py, PyBytes>> {
        let cams = CameraManifest::load(&manifest).map_err(BindingError::from)?.cameras().map_err(invalid)?;
        let cam = cams.get(view).ok_or_else(|| invalid(format!("view {view} out of range ({} views)", cams.len())))?;
        let b = splat(&self.file.cloud, cam).map_err(invalid)?;
        Ok(PyBytes::new(py, &buffers_to_bytes(&b)))
    }
}

#[pymodule]
fn splatgrade_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(srgb_to_lab, m)?)?;
    m.add_function(wrap_pyfunction!(lab_to_srgb, m)?)?;
    m.add_function(wrap_pyfunction!(decode_palette, m)?)?;
    m.add_function(wrap_pyfunction!(target_weights, m)?)?;
    m.add_function(wrap_pyfunction!(fit_tone_curve, m)?)?;
    m.add_function(wrap_pyfunction!(eval_split, m)?)?;
    m.add_function(wrap_pyfunction!(compose, m)?)?;
    m.add_function(wrap_pyfunction!(solve, m)?)?;
    m.add_class::<Scene>()?;
    Ok(())
}
