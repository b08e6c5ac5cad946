//! On-disk formats: trained scenes, exported view buffers, camera manifests
//! and edit states. Binary layouts are little-endian.
//!
//! Scene layout (`PGSS`): magic, then `version, count, K, sh_degree` as u32;
//! per Gaussian the f32 record `mu(3) log_scale(3) quat(4) opacity_logit(1)
//! weight_sh(C·K) lightness_sh(C)` with `C = (L+1)²`; then the palette as
//! `(Δθ, log_r)` f64 pairs for the `K - 1` chromatic vertices, followed by the
//! palette rotation as one f64.
//!
//! Buffer layout (`PGSB`): magic, `width, height, K` as u32, then `K` f32
//! weight planes of `H×W` and one f32 lightness plane.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::color::PaletteParams;
use crate::editing::{EditError, EditState};
use crate::rasterizer::ViewBuffers;
use crate::scene::{Camera, Gaussian, GaussianCloud, SceneError};
use crate::sh::{coeff_count, MAX_DEGREE};

pub const SCENE_MAGIC: [u8; 4] = *b"PGSS";
pub const SCENE_VERSION: u32 = 1;
pub const BUFFER_MAGIC: [u8; 4] = *b"PGSB";
/// Allowed deviation of a read-back pixel's weight sum from 1.
pub const WEIGHT_SUM_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic {found:?}, expected {expected:?}")]
    BadMagic { found: [u8; 4], expected: [u8; 4] },
    #[error("file truncated: need {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("unsupported version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("file length {found} does not match the {expected} bytes implied by its header")]
    LengthMismatch { expected: usize, found: usize },
    #[error("invalid header: {0}")]
    Header(String),
    #[error("pixel {pixel} weights sum to {sum}")]
    WeightSum { pixel: usize, sum: f64 },
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Edit(#[from] EditError),
    #[error("manifest entry {index}: image {path} does not exist")]
    MissingImage { index: usize, path: PathBuf },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> FormatError + '_ {
    move |source| FormatError::Io { path: path.to_path_buf(), source }
}

/// A trained scene: Gaussians plus palette parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneFile {
    pub cloud: GaussianCloud,
    pub palette: PaletteParams,
}

impl SceneFile {
    fn record_floats(sh_degree: usize, k: usize) -> usize {
        let c = coeff_count(sh_degree);
        11 + c * k + c
    }

    fn implied_len(count: usize, sh_degree: usize, k: usize) -> usize {
        20 + count * 4 * Self::record_floats(sh_degree, k) + 16 * (k - 1) + 8
    }

    /// Rounds every Gaussian parameter to f32, the precision stored on disk.
    pub fn quantized(&self) -> Self {
        let q = |v: f64| v as f32 as f64;
        let mut out = self.clone();
        for g in &mut out.cloud.gaussians {
            g.mu = g.mu.map(q);
            g.log_scale = g.log_scale.map(q);
            g.rotation = g.rotation.map(q);
            g.opacity_logit = q(g.opacity_logit);
            g.weight_sh.iter_mut().for_each(|v| *v = q(*v));
            g.lightness_sh.iter_mut().for_each(|v| *v = q(*v));
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, FormatError> {
        self.cloud.validate()?;
        let k = self.cloud.k;
        if self.palette.k() != k {
            return Err(FormatError::Header(format!(
                "palette has {} colors but the cloud has K = {k}",
                self.palette.k()
            )));
        }
        let n = self.cloud.len();
        let mut out = Vec::with_capacity(Self::implied_len(n, self.cloud.sh_degree, k));
        out.extend_from_slice(&SCENE_MAGIC);
        for v in [SCENE_VERSION, n as u32, k as u32, self.cloud.sh_degree as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for g in &self.cloud.gaussians {
            let fields = g
                .mu
                .iter()
                .chain(&g.log_scale)
                .chain(&g.rotation)
                .chain(std::iter::once(&g.opacity_logit))
                .chain(&g.weight_sh)
                .chain(&g.lightness_sh);
            for &v in fields {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        for (t, r) in self.palette.delta_theta.iter().zip(&self.palette.log_r) {
            out.extend_from_slice(&t.to_le_bytes());
            out.extend_from_slice(&r.to_le_bytes());
        }
        out.extend_from_slice(&self.palette.rotation.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FormatError> {
        let mut r = Reader::new(bytes);
        r.magic(SCENE_MAGIC)?;
        let version = r.u32()?;
        if version != SCENE_VERSION {
            return Err(FormatError::VersionMismatch { found: version, expected: SCENE_VERSION });
        }
        let count = r.u32()? as usize;
        let k = r.u32()? as usize;
        let sh_degree = r.u32()? as usize;
        if k < 3 {
            return Err(FormatError::Header(format!("palette size {k} is below 3")));
        }
        if sh_degree > MAX_DEGREE {
            return Err(FormatError::Header(format!("SH degree {sh_degree} exceeds {MAX_DEGREE}")));
        }
        r.expect_len(Self::implied_len(count, sh_degree, k))?;
        let c = coeff_count(sh_degree);
        let mut cloud = GaussianCloud::new(sh_degree, k);
        cloud.gaussians.reserve(count);
        for _ in 0..count {
            let mut f = || r.f32();
            let mu = [f()?, f()?, f()?];
            let log_scale = [f()?, f()?, f()?];
            let rotation = [f()?, f()?, f()?, f()?];
            let opacity_logit = f()?;
            let weight_sh = (0..c * k).map(|_| r.f32()).collect::<Result<_, _>>()?;
            let lightness_sh = (0..c).map(|_| r.f32()).collect::<Result<_, _>>()?;
            cloud.gaussians.push(Gaussian { mu, log_scale, rotation, opacity_logit, weight_sh, lightness_sh });
        }
        let mut delta_theta = Vec::with_capacity(k - 1);
        let mut log_r = Vec::with_capacity(k - 1);
        for _ in 0..k - 1 {
            delta_theta.push(r.f64()?);
            log_r.push(r.f64()?);
        }
        let rotation = r.f64()?;
        Ok(Self { cloud, palette: PaletteParams { delta_theta, log_r, rotation } })
    }

    pub fn save(&self, path: &Path) -> Result<(), FormatError> {
        fs::write(path, self.to_bytes()?).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self, FormatError> {
        Self::from_bytes(&fs::read(path).map_err(io_err(path))?)
    }
}

/// Serializes normalized weights and lightness of one view.
pub fn buffers_to_bytes(b: &ViewBuffers) -> Vec<u8> {
    let n = b.pixels();
    let mut out = Vec::with_capacity(16 + 4 * n * (b.k + 1));
    out.extend_from_slice(&BUFFER_MAGIC);
    for v in [b.width, b.height, b.k] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for ch in 0..b.k {
        for p in 0..n {
            out.extend_from_slice(&(b.w_norm[p * b.k + ch] as f32).to_le_bytes());
        }
    }
    for &l in &b.l {
        out.extend_from_slice(&(l as f32).to_le_bytes());
    }
    out
}

/// Parses a buffer file, checking every pixel's weight sum.
pub fn buffers_from_bytes(bytes: &[u8]) -> Result<ViewBuffers, FormatError> {
    let mut r = Reader::new(bytes);
    r.magic(BUFFER_MAGIC)?;
    let width = r.u32()? as usize;
    let height = r.u32()? as usize;
    let k = r.u32()? as usize;
    if k == 0 {
        return Err(FormatError::Header("zero weight planes".into()));
    }
    let n = width * height;
    r.expect_len(16 + 4 * n * (k + 1))?;
    let mut w_norm = vec![0.0; n * k];
    for ch in 0..k {
        for p in 0..n {
            w_norm[p * k + ch] = r.f32()?;
        }
    }
    let l = (0..n).map(|_| r.f32()).collect::<Result<Vec<_>, _>>()?;
    for p in 0..n {
        let sum: f64 = w_norm[p * k..(p + 1) * k].iter().sum();
        if (sum - 1.0).abs() > WEIGHT_SUM_TOLERANCE || !sum.is_finite() {
            return Err(FormatError::WeightSum { pixel: p, sum });
        }
    }
    Ok(ViewBuffers::from_normalized(width, height, k, w_norm, l))
}

pub fn save_buffers(b: &ViewBuffers, path: &Path) -> Result<(), FormatError> {
    fs::write(path, buffers_to_bytes(b)).map_err(io_err(path))
}

pub fn load_buffers(path: &Path) -> Result<ViewBuffers, FormatError> {
    buffers_from_bytes(&fs::read(path).map_err(io_err(path))?)
}

/// One calibrated image of a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image_path: PathBuf,
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Row-major 4×4.
    pub world_to_camera: [f64; 16],
}

impl ManifestEntry {
    pub fn from_camera(image_path: PathBuf, cam: &Camera) -> Self {
        let m = &cam.world_to_camera;
        let mut flat = [0.0; 16];
        for i in 0..4 {
            flat[4 * i..4 * i + 4].copy_from_slice(&m[i]);
        }
        Self {
            image_path,
            width: cam.width,
            height: cam.height,
            fx: cam.fx,
            fy: cam.fy,
            cx: cam.cx,
            cy: cam.cy,
            world_to_camera: flat,
        }
    }

    pub fn camera(&self) -> Result<Camera, SceneError> {
        let mut m = [[0.0; 4]; 4];
        for (i, row) in m.iter_mut().enumerate() {
            row.copy_from_slice(&self.world_to_camera[4 * i..4 * i + 4]);
        }
        if m[3] != [0.0, 0.0, 0.0, 1.0] {
            return Err(SceneError::NotRigid);
        }
        let cam = Camera {
            width: self.width,
            height: self.height,
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
            world_to_camera: m,
        };
        cam.validate()?;
        Ok(cam)
    }
}

/// A JSON list of cameras; image paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CameraManifest {
    pub entries: Vec<ManifestEntry>,
}

impl CameraManifest {
    pub fn cameras(&self) -> Result<Vec<Camera>, SceneError> {
        self.entries.iter().map(ManifestEntry::camera).collect()
    }

    /// Loads a manifest, resolving image paths and checking that each exists.
    pub fn load(path: &Path) -> Result<Self, FormatError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let mut manifest: Self = serde_json::from_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for (index, e) in manifest.entries.iter_mut().enumerate() {
            e.camera()?;
            let resolved = base.join(&e.image_path);
            if !resolved.is_file() {
                return Err(FormatError::MissingImage { index, path: resolved });
            }
            e.image_path = resolved;
        }
        Ok(manifest)
    }

    pub fn save(&self, path: &Path) -> Result<(), FormatError> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(io_err(path))
    }
}

/// Parses and validates an edit state document.
pub fn edit_state_from_json(text: &str) -> Result<EditState, FormatError> {
    let state: EditState = serde_json::from_str(text)?;
    state.validate()?;
    Ok(state)
}

pub fn load_edit_state(path: &Path) -> Result<EditState, FormatError> {
    edit_state_from_json(&fs::read_to_string(path).map_err(io_err(path))?)
}

pub fn save_edit_state(state: &EditState, path: &Path) -> Result<(), FormatError> {
    let text = serde_json::to_string_pretty(state)?;
    fs::write(path, text).map_err(io_err(path))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take<const N: usize>(&mut self) -> Result<[u8; N], FormatError> {
        let end = self.pos + N;
        let slice = self
            .bytes
            .get(self.pos..end)
            .ok_or(FormatError::Truncated { expected: end, found: self.bytes.len() })?;
        self.pos = end;
        Ok(slice.try_into().expect("slice length matches"))
    }

    fn magic(&mut self, expected: [u8; 4]) -> Result<(), FormatError> {
        let found = self.take::<4>()?;
        if found != expected {
            return Err(FormatError::BadMagic { found, expected });
        }
        Ok(())
    }

    fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take()?))
    }

    fn f32(&mut self) -> Result<f64, FormatError> {
        Ok(f32::from_le_bytes(self.take()?) as f64)
    }

    fn f64(&mut self) -> Result<f64, FormatError> {
        Ok(f64::from_le_bytes(self.take()?))
    }

    fn expect_len(&self, expected: usize) -> Result<(), FormatError> {
        let found = self.bytes.len();
        if found < expected {
            Err(FormatError::Truncated { expected, found })
        } else if found > expected {
            Err(FormatError::LengthMismatch { expected, found })
        } else {
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::color::{decode_palette, Palette, GREY};
    use crate::synthetic::random_cloud;

    fn scene() -> SceneFile {
        let cam = Camera::look_at([0.0, 0.0, -4.0], [0.0; 3], [0.0, -1.0, 0.0], 8, 6, 0.6);
        SceneFile {
            cloud: random_cloud(3, 7, 2, 4, &cam),
            palette: PaletteParams { delta_theta: vec![0.1, -0.3, 0.7], log_r: vec![-1.5, -2.0, -1.1], rotation: 0.4 },
        }
    }

    #[test]
    fn scene_round_trip_is_bit_exact_after_quantization() {
        let s = scene();
        let bytes = s.to_bytes().unwrap();
        assert_eq!(bytes.len(), SceneFile::implied_len(7, 2, 4));
        let back = SceneFile::from_bytes(&bytes).unwrap();
        assert_eq!(back, s.quantized());
        assert_eq!(back.palette, s.palette);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn scene_errors_are_distinct() {
        let bytes = scene().to_bytes().unwrap();
        assert!(matches!(SceneFile::from_bytes(&bytes[..bytes.len() - 1]), Err(FormatError::Truncated { .. })));
        assert!(matches!(SceneFile::from_bytes(&bytes[..10]), Err(FormatError::Truncated { .. })));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(SceneFile::from_bytes(&long), Err(FormatError::LengthMismatch { .. })));
        let mut foreign = bytes.clone();
        foreign[..4].copy_from_slice(b"PNG\0");
        assert!(matches!(SceneFile::from_bytes(&foreign), Err(FormatError::BadMagic { .. })));
        let mut v2 = bytes;
        v2[4] = 2;
        assert!(matches!(SceneFile::from_bytes(&v2), Err(FormatError::VersionMismatch { found: 2, expected: 1 })));
    }

    #[test]
    fn one_pixel_buffer_layout() {
        let b = ViewBuffers::from_normalized(1, 1, 5, vec![0.2; 5], vec![0.5]);
        let bytes = buffers_to_bytes(&b);
        assert_eq!(bytes.len(), 4 + 12 + 4 * 5 + 4);
        let back = buffers_from_bytes(&bytes).unwrap();
        assert_eq!(back.l, vec![0.5]);
        assert_eq!(buffers_to_bytes(&back), bytes);
    }

    #[test]
    fn buffer_weight_sums_are_checked() {
        let b = ViewBuffers::from_normalized(2, 1, 3, vec![0.5, 0.5, 0.0, 0.3, 0.3, 0.3], vec![0.5, 0.5]);
        assert!(matches!(buffers_from_bytes(&buffers_to_bytes(&b)), Err(FormatError::WeightSum { pixel: 1, .. })));
        let mut bytes = buffers_to_bytes(&b);
        bytes[0] = b'X';
        assert!(matches!(buffers_from_bytes(&bytes), Err(FormatError::BadMagic { .. })));
        assert!(matches!(buffers_from_bytes(&bytes[..20]), Err(FormatError::BadMagic { .. })));
    }

    #[test]
    fn manifest_entries_round_trip_cameras() {
        let cam = Camera::look_at([0.3, -0.2, -4.0], [0.0; 3], [0.0, -1.0, 0.0], 32, 24, 0.5);
        let e = ManifestEntry::from_camera("img.png".into(), &cam);
        assert_eq!(e.camera().unwrap(), cam);
        let mut bad = e.clone();
        bad.world_to_camera[0] = 2.0;
        assert!(bad.camera().is_err());
    }

    #[test]
    fn manifest_load_resolves_and_checks_paths() {
        let dir = tempfile::tempdir().unwrap();
        let cam = Camera::look_at([0.0, 0.0, -4.0], [0.0; 3], [0.0, -1.0, 0.0], 4, 4, 0.5);
        let m = CameraManifest { entries: vec![ManifestEntry::from_camera("a.png".into(), &cam)] };
        let path = dir.path().join("cameras.json");
        m.save(&path).unwrap();
        assert!(matches!(CameraManifest::load(&path), Err(FormatError::MissingImage { index: 0, .. })));
        fs::write(dir.path().join("a.png"), b"").unwrap();
        let loaded = CameraManifest::load(&path).unwrap();
        assert_eq!(loaded.entries[0].image_path, dir.path().join("a.png"));
    }

    #[test]
    fn edit_state_json_is_validated() {
        let state = EditState::identity(decode_palette(&scene().palette).unwrap());
        let text = serde_json::to_string(&state).unwrap();
        assert_eq!(edit_state_from_json(&text).unwrap(), state);
        let mut moved = state.clone();
        moved.palette = Palette { vertices: vec![[0.4, 0.5], GREY, GREY, GREY] };
        let text = serde_json::to_string(&moved).unwrap();
        assert!(matches!(edit_state_from_json(&text), Err(FormatError::Edit(EditError::GreyMoved(_)))));
        assert!(matches!(edit_state_from_json("{"), Err(FormatError::Json(_))));
    }
}
