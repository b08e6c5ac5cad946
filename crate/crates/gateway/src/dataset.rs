//! Posed image sets on disk: loading, initial clouds, and the synthetic fixture.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use splatgrade::color::PaletteParams;
use splatgrade::formats::{CameraManifest, ManifestEntry, SceneFile};
use splatgrade::scene::{Camera, Gaussian, GaussianCloud};
use splatgrade::synthetic::{make_synthetic_scene, training_init};
use splatgrade::trainer::View;

use crate::images::{read_png, write_png};
use crate::{GatewayError, Result};

/// Reads every image of a loaded manifest and pairs it with its camera.
pub fn load_views(manifest: &CameraManifest) -> Result<Vec<View>> {
    manifest
        .entries
        .iter()
        .enumerate()
        .map(|(index, e)| {
            let img = read_png(&e.image_path)?;
            if (img.width, img.height) != (e.width, e.height) {
                return Err(GatewayError::ImageSize {
                    index,
                    expected: (e.width, e.height),
                    found: (img.width, img.height),
                });
            }
            Ok(View::new(e.camera()?, img))
        })
        .collect()
}

/// Point closest (least squares) to every camera's optical axis.
pub fn focus_point(cameras: &[Camera]) -> Vector3<f64> {
    let mut a = Matrix3::zeros();
    let mut b = Vector3::zeros();
    for cam in cameras {
        let d = cam.rotation().row(2).transpose();
        let proj = Matrix3::identity() - d * d.transpose();
        a += proj;
        b += proj * cam.center();
    }
    match a.try_inverse() {
        Some(inv) if cameras.len() > 1 => inv * b,
        _ => {
            // Parallel axes: one unit in front of the mean camera.
            let n = cameras.len().max(1) as f64;
            let c: Vector3<f64> = cameras.iter().map(|c| c.center()).sum::<Vector3<f64>>() / n;
            let d: Vector3<f64> = cameras.iter().map(|c| c.rotation().row(2).transpose()).sum::<Vector3<f64>>() / n;
            c + d
        }
    }
}

/// Isotropic Gaussians uniformly filling a ball around the cameras' focus,
/// neutral SH, half opacity.
pub fn initial_cloud(cameras: &[Camera], n: usize, sh_degree: usize, k: usize, seed: u64) -> GaussianCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let focus = focus_point(cameras);
    let mean_dist = cameras.iter().map(|c| (c.center() - focus).norm()).sum::<f64>() / cameras.len().max(1) as f64;
    let radius = 0.3 * mean_dist.max(1e-3);
    let log_scale = (radius / (n.max(1) as f64).cbrt()).ln();
    let mut cloud = GaussianCloud::new(sh_degree, k);
    while cloud.len() < n {
        let p: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        if p.iter().map(|v| v * v).sum::<f64>() > 1.0 {
            continue;
        }
        let mut g = Gaussian::new(sh_degree, k);
        g.mu = std::array::from_fn(|a| focus[a] + radius * p[a]);
        g.log_scale = [log_scale; 3];
        cloud.gaussians.push(g);
    }
    cloud
}

/// Small palette spread evenly around grey with a random rotation.
pub fn initial_palette(k: usize, seed: u64) -> PaletteParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    PaletteParams { rotation: rng.random_range(0.0..std::f64::consts::TAU), ..PaletteParams::regular(k, 0.06) }
}

#[derive(Debug, Clone, Copy)]
pub struct SynthOptions {
    pub seed: u64,
    pub gaussians: usize,
    pub k: usize,
    pub views: usize,
    pub resolution: usize,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self { seed: 7, gaussians: 200, k: 5, views: 8, resolution: 64 }
    }
}

pub struct SynthOutput {
    pub manifest: PathBuf,
    /// Starting scene: jittered ground-truth geometry and a random small palette.
    pub init: PathBuf,
    pub cluster_chroma: Vec<[f64; 2]>,
}

/// Writes the synthetic fixture as PNGs, a manifest, and a training start point.
pub fn write_synthetic(dir: &Path, opts: SynthOptions) -> Result<SynthOutput> {
    if opts.k < 3 || opts.gaussians == 0 || opts.views == 0 || opts.resolution == 0 {
        return Err(GatewayError::Config(format!("invalid fixture options {opts:?}")));
    }
    fs::create_dir_all(dir).map_err(|e| GatewayError::io(dir, e))?;
    let scene = make_synthetic_scene(opts.seed, opts.gaussians, opts.k, opts.views, opts.resolution);
    let mut entries = Vec::with_capacity(scene.cameras.len());
    for (i, (cam, img)) in scene.cameras.iter().zip(&scene.targets).enumerate() {
        let name = format!("view_{i:03}.png");
        write_png(&dir.join(&name), img.width, img.height, &img.to_rgb8())?;
        entries.push(ManifestEntry::from_camera(PathBuf::from(name), cam));
    }
    let manifest = dir.join("manifest.json");
    CameraManifest { entries }.save(&manifest)?;
    let (cloud, palette) = training_init(&scene, 1);
    let init = dir.join("init.pgss");
    SceneFile { cloud, palette }.save(&init)?;
    Ok(SynthOutput { manifest, init, cluster_chroma: scene.cluster_chroma })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn focus_of_a_ring_is_its_target() {
        let cams: Vec<Camera> = (0..6)
            .map(|i| {
                let t = i as f64;
                Camera::look_at([3.0 * t.cos(), 0.5, 3.0 * t.sin()], [0.2, -0.1, 0.3], [0.0, 1.0, 0.0], 8, 8, 0.8)
            })
            .collect();
        let f = focus_point(&cams);
        assert!((f - Vector3::new(0.2, -0.1, 0.3)).norm() < 1e-9, "{f}");
    }

    #[test]
    fn initial_cloud_is_deterministic_and_in_front() {
        let cam = Camera::look_at([0.0, 0.0, -4.0], [0.0; 3], [0.0, -1.0, 0.0], 16, 16, 0.6);
        let a = initial_cloud(std::slice::from_ref(&cam), 50, 1, 4, 3);
        assert_eq!(a, initial_cloud(std::slice::from_ref(&cam), 50, 1, 4, 3));
        assert_eq!(a.len(), 50);
        a.validate().unwrap();
        assert!(a.gaussians.iter().all(|g| (cam.rotation() * Vector3::from(g.mu) + cam.translation())[2] > 0.0));
    }
}
