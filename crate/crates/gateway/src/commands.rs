//! The CLI subcommands as library functions.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use splatgrade::color::{decode_palette, Palette};
use splatgrade::editing::{compose_edited, EditState, EditedImage};
use splatgrade::formats::{buffers_from_bytes, buffers_to_bytes, CameraManifest, SceneFile};
use splatgrade::rasterizer::{splat, ViewBuffers};
use splatgrade::scene::Camera;
use splatgrade::trainer::{eval_split, evaluate, train_with_observer, EpochRecord, EvalMetrics, TrainConfig, TrainReport};

use crate::dataset::{initial_cloud, initial_palette, load_views};
use crate::images::write_png;
use crate::{GatewayError, Result};

/// Held-out stride of the evaluation protocol.
pub const EVAL_STRIDE: usize = 8;

/// Parses a TOML document with the fields of [`TrainConfig`]; missing fields keep their defaults.
pub fn parse_config(text: &str) -> Result<TrainConfig> {
    let cfg: TrainConfig = toml::from_str(text).map_err(|e| GatewayError::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<TrainConfig> {
    parse_config(&fs::read_to_string(path).map_err(|e| GatewayError::io(path, e))?)
}

/// Where training starts from.
#[derive(Debug, Clone)]
pub enum Init {
    /// An existing scene file (its palette size wins).
    Scene(PathBuf),
    Random { gaussians: usize, sh_degree: usize, k: usize },
}

pub fn train(
    manifest: &Path,
    out: &Path,
    config: &TrainConfig,
    init: &Init,
    mut progress: impl FnMut(&EpochRecord),
) -> Result<TrainReport> {
    let manifest = CameraManifest::load(manifest)?;
    let views = load_views(&manifest)?;
    let (cloud, params) = match init {
        Init::Scene(path) => {
            let s = SceneFile::load(path)?;
            (s.cloud, s.palette)
        }
        Init::Random { gaussians, sh_degree, k } => {
            let cams: Vec<Camera> = views.iter().map(|v| v.camera.clone()).collect();
            (initial_cloud(&cams, *gaussians, *sh_degree, *k, config.seed), initial_palette(*k, config.seed))
        }
    };
    let outcome = train_with_observer(cloud, params, &views, config, &mut |rec, _, _| progress(rec))?;
    SceneFile { cloud: outcome.cloud, palette: outcome.palette_params }.save(out)?;
    Ok(outcome.report)
}

/// A loaded scene with its decoded palette.
pub struct LoadedScene {
    pub file: SceneFile,
    pub palette: Palette,
}

impl LoadedScene {
    pub fn load(path: &Path) -> Result<Self> {
        let file = SceneFile::load(path)?;
        let palette = decode_palette(&file.palette)?;
        Ok(Self { file, palette })
    }

    /// Splats a view and passes it through the buffer file encoding, so that
    /// every consumer composites exactly what a client would receive.
    pub fn buffers(&self, camera: &Camera) -> Result<ViewBuffers> {
        let b = splat(&self.file.cloud, camera)?;
        Ok(buffers_from_bytes(&buffers_to_bytes(&b))?)
    }
}

pub fn load_cameras(manifest: &Path) -> Result<Vec<Camera>> {
    Ok(CameraManifest::load(manifest)?.cameras()?)
}

pub fn pick_camera(cameras: &[Camera], view: usize) -> Result<&Camera> {
    cameras.get(view).ok_or(GatewayError::UnknownView { view, count: cameras.len() })
}

/// Composites one view under an edit state.
pub fn edit_apply(scene: &LoadedScene, state: &EditState, camera: &Camera) -> Result<EditedImage> {
    state.validate()?;
    Ok(compose_edited(&scene.buffers(camera)?, state)?)
}

/// Unedited render: the identity edit of the trained palette.
pub fn render(scene: &LoadedScene, camera: &Camera) -> Result<EditedImage> {
    edit_apply(scene, &EditState::identity(scene.palette.clone()), camera)
}

pub fn save_image(img: &EditedImage, path: &Path) -> Result<()> {
    write_png(path, img.width, img.height, &img.rgb8)
}

/// Writes `view_NNN.pgsb` for every camera; returns the paths in view order.
pub fn export_buffers(scene: &LoadedScene, cameras: &[Camera], outdir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(outdir).map_err(|e| GatewayError::io(outdir, e))?;
    cameras
        .iter()
        .enumerate()
        .map(|(i, cam)| {
            let path = outdir.join(format!("view_{i:03}.pgsb"));
            let bytes = buffers_to_bytes(&splat(&scene.file.cloud, cam)?);
            fs::write(&path, bytes).map_err(|e| GatewayError::io(&path, e))?;
            Ok(path)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalSummary {
    pub test_views: Vec<usize>,
    pub metrics: EvalMetrics,
}

/// Metrics on the held-out views: every 8th image starting with the first.
pub fn eval(scene: &LoadedScene, manifest: &Path) -> Result<EvalSummary> {
    let views = load_views(&CameraManifest::load(manifest)?)?;
    let (_, test_views) = eval_split(views.len(), EVAL_STRIDE);
    let held_out: Vec<_> = test_views.iter().map(|&i| &views[i]).collect();
    let metrics = evaluate(&scene.file.cloud, &scene.palette, &held_out)?;
    Ok(EvalSummary { test_views, metrics })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_fields_mirror_train_config() {
        let cfg = parse_config(
            "epochs = 12\nseed = 4\n[learning_rates]\npalette = 0.02\n[densify]\nenabled = false\n[loss]\nlambda_grey = 0.05\nlightness_norm = \"l1\"\n",
        )
        .unwrap();
        assert_eq!(cfg.epochs, 12);
        assert_eq!(cfg.learning_rates.palette, 0.02);
        assert_eq!(cfg.learning_rates.scale, TrainConfig::default().learning_rates.scale);
        assert!(!cfg.densify.enabled);
        assert_eq!(cfg.loss.lambda_grey, 0.05);
        assert_eq!(parse_config("").unwrap(), TrainConfig::default());
        assert!(matches!(parse_config("epochs = \"many\""), Err(GatewayError::Config(_))));
        assert!(matches!(parse_config("eval_stride = 1"), Err(GatewayError::Train(_))));
    }

    #[test]
    fn unknown_view_is_reported() {
        let err = pick_camera(&[], 3).unwrap_err();
        assert!(matches!(err, GatewayError::UnknownView { view: 3, count: 0 }));
    }
}
