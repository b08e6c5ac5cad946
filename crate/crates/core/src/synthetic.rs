//! Deterministic desk-scale scenes with a known palette structure.
//!
//! The fixture is a slab of opaque blobs seen by a ring of forward-facing
//! cameras. Each blob takes its chroma from one of `K - 1` chromatic clusters
//! or from neutral grey, so a `K`-color palette has a known good answer.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::color::{lab_norm_in_gamut, lab_norm_to_srgb, Ab, LabNorm, PaletteParams};
use crate::image::RgbImage;
use crate::math::{logit, softplus_inv};
use crate::rasterizer::splat_colors;
use crate::scene::{Camera, Gaussian, GaussianCloud};
use crate::sh::coeff_count;

/// Chroma of the neutral cluster: `a = b = 0` after normalization.
pub const NEUTRAL_AB: Ab = [128.0 / 255.0, 128.0 / 255.0];

const SLAB_HALF_EXTENT: f64 = 1.3;
const SLAB_HALF_DEPTH: f64 = 0.25;
const CAMERA_DISTANCE: f64 = 4.0;
const RING_RADIUS: f64 = 0.4;
const FOV_X: f64 = 0.39;
const CHROMA_RADIUS: (f64, f64) = (0.12, 0.15);
const CHROMA_JITTER: f64 = 0.02;
const BACKGROUND: [f64; 3] = [0.5, 0.5, 0.5];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticScene {
    /// Ground-truth geometry; lightness SH holds the blob lightness, weight SH is zero.
    pub cloud: GaussianCloud,
    /// sRGB color of every Gaussian.
    pub colors: Vec<[f64; 3]>,
    /// Cluster index per Gaussian; index 0 is the neutral cluster.
    pub cluster_of: Vec<usize>,
    /// Generating chroma per cluster (index 0 neutral).
    pub cluster_chroma: Vec<Ab>,
    pub cameras: Vec<Camera>,
    pub targets: Vec<RgbImage>,
}

/// Builds the fixture. Identical arguments give bit-identical scenes.
pub fn make_synthetic_scene(
    seed: u64,
    n_gaussians: usize,
    k: usize,
    n_views: usize,
    resolution: usize,
) -> SyntheticScene {
    assert!(n_gaussians >= 1, "need at least one gaussian");
    assert!(k >= 3, "palette size must be at least 3");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sh_degree = 3;

    let base = rng.random_range(0.0..2.0 * PI);
    let mut cluster_chroma = vec![NEUTRAL_AB];
    for j in 0..k - 1 {
        let angle = base + 2.0 * PI * j as f64 / (k - 1) as f64 + rng.random_range(-0.2..0.2);
        let r = rng.random_range(CHROMA_RADIUS.0..CHROMA_RADIUS.1);
        cluster_chroma.push([0.5 + r * angle.cos(), 0.5 + r * angle.sin()]);
    }

    // Colors come in contiguous wedge-shaped patches around the slab center,
    // so every view sees every cluster.
    let sectors = 2 * k;
    let sector_offset = rng.random_range(0.0..2.0 * PI);
    let hub = [rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1)];

    // Jittered grid over the slab so every view is covered without holes.
    let cols = (n_gaussians as f64).sqrt().ceil() as usize;
    let rows = n_gaussians.div_ceil(cols);
    let cell = [2.0 * SLAB_HALF_EXTENT / cols as f64, 2.0 * SLAB_HALF_EXTENT / rows as f64];
    let spacing = cell[0].max(cell[1]);
    let mut cloud = GaussianCloud::new(sh_degree, k);
    let mut colors = Vec::with_capacity(n_gaussians);
    let mut cluster_of = Vec::with_capacity(n_gaussians);
    for i in 0..n_gaussians {
        let mut g = Gaussian::new(sh_degree, k);
        let (col, row) = ((i % cols) as f64, (i / cols) as f64);
        g.mu = [
            -SLAB_HALF_EXTENT + (col + 0.5 + rng.random_range(-0.3..0.3)) * cell[0],
            -SLAB_HALF_EXTENT + (row + 0.5 + rng.random_range(-0.3..0.3)) * cell[1],
            rng.random_range(-SLAB_HALF_DEPTH..SLAB_HALF_DEPTH),
        ];
        let s = (0.8 * spacing).ln();
        g.log_scale = [
            s + rng.random_range(-0.2..0.2),
            s + rng.random_range(-0.2..0.2),
            s + rng.random_range(-0.2..0.2),
        ];
        g.rotation = random_unit_quaternion(&mut rng);
        g.opacity_logit = logit(rng.random_range(0.9..0.98));

        let angle = (g.mu[1] - hub[1]).atan2(g.mu[0] - hub[0]) + sector_offset;
        let cluster = (angle.rem_euclid(2.0 * PI) / (2.0 * PI) * sectors as f64) as usize % k;
        let center = cluster_chroma[cluster];
        let (lab, rgb) = loop {
            let (da, db) = if cluster == 0 {
                (0.0, 0.0)
            } else {
                let r = CHROMA_JITTER * rng.random::<f64>().sqrt();
                let t = rng.random_range(0.0..2.0 * PI);
                (r * t.cos(), r * t.sin())
            };
            let lab = LabNorm::new(rng.random_range(0.45..0.75), center[0] + da, center[1] + db);
            if lab_norm_in_gamut(lab) {
                break (lab, lab_norm_to_srgb(lab));
            }
        };
        g.lightness_sh[0] = logit(lab.l) / crate::sh::basis(0, [0.0, 0.0, 1.0])[0];
        cloud.gaussians.push(g);
        colors.push(rgb);
        cluster_of.push(cluster);
    }

    let cameras: Vec<Camera> = (0..n_views)
        .map(|v| {
            let phi = 2.0 * PI * v as f64 / n_views as f64;
            Camera::look_at(
                [RING_RADIUS * phi.cos(), RING_RADIUS * phi.sin(), -CAMERA_DISTANCE],
                [0.0, 0.0, 0.0],
                [0.0, -1.0, 0.0],
                resolution,
                resolution,
                FOV_X,
            )
        })
        .collect();
    let targets = cameras
        .iter()
        .map(|cam| {
            let px = splat_colors(&cloud.gaussians, &colors, cam, BACKGROUND);
            RgbImage::new(cam.width, cam.height, px)
        })
        .collect();
    SyntheticScene { cloud, colors, cluster_of, cluster_chroma, cameras, targets }
}

fn random_unit_quaternion(rng: &mut impl Rng) -> [f64; 4] {
    loop {
        let q: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.1 && n <= 1.0 {
            return q.map(|v| v / n);
        }
    }
}

/// Starting point for training on a fixture: ground-truth geometry with
/// jittered positions and scales, neutral SH, and a small random palette.
pub fn training_init(scene: &SyntheticScene, seed: u64) -> (GaussianCloud, PaletteParams) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cloud = scene.cloud.clone();
    for g in &mut cloud.gaussians {
        for a in 0..3 {
            g.mu[a] += rng.random_range(-0.02..0.02);
            g.log_scale[a] += rng.random_range(-0.1..0.1);
        }
        g.opacity_logit = logit(0.5);
        g.weight_sh.iter_mut().for_each(|v| *v = 0.0);
        g.lightness_sh.iter_mut().for_each(|v| *v = 0.0);
    }
    let k = cloud.k;
    let params = PaletteParams {
        delta_theta: (1..k).map(|_| rng.random_range(-0.5..0.5)).collect(),
        log_r: (1..k).map(|_| softplus_inv(rng.random_range(0.04..0.08))).collect(),
        rotation: rng.random_range(0.0..std::f64::consts::TAU),
    };
    (cloud, params)
}

/// Random cloud in front of `camera` with moderate opacities and random SH,
/// sized so footprints span a few pixels. Used by gradient checks.
pub fn random_cloud(seed: u64, n: usize, sh_degree: usize, k: usize, camera: &Camera) -> GaussianCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cloud = GaussianCloud::new(sh_degree, k);
    let center = camera.center();
    let rot = camera.rotation();
    let c = coeff_count(sh_degree);
    let half_w = camera.width as f64 / camera.fx / 2.0;
    let half_h = camera.height as f64 / camera.fy / 2.0;
    for _ in 0..n {
        let depth = rng.random_range(3.0..5.0);
        let local = nalgebra::Vector3::new(
            rng.random_range(-0.8..0.8) * half_w * depth,
            rng.random_range(-0.8..0.8) * half_h * depth,
            depth,
        );
        let world = rot.transpose() * local + center;
        let mut g = Gaussian::new(sh_degree, k);
        g.mu = world.into();
        let pixel = depth / camera.fx;
        g.log_scale = std::array::from_fn(|_| (pixel * rng.random_range(1.2..3.5)).ln());
        g.rotation = random_unit_quaternion(&mut rng);
        g.opacity_logit = logit(rng.random_range(0.2..0.7));
        for (i, v) in g.weight_sh.iter_mut().enumerate() {
            let band_scale = if i < k { 1.5 } else { 0.4 };
            *v = rng.random_range(-band_scale..band_scale);
        }
        for (i, v) in g.lightness_sh.iter_mut().enumerate() {
            *v = rng.random_range(-1.0..1.0) * if i == 0 { 1.5 } else { 0.4 };
        }
        debug_assert_eq!(g.lightness_sh.len(), c);
        cloud.gaussians.push(g);
    }
    cloud
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::color::srgb_to_lab_norm;

    #[test]
    fn same_seed_is_bit_identical() {
        let a = make_synthetic_scene(3, 40, 5, 2, 16);
        let b = make_synthetic_scene(3, 40, 5, 2, 16);
        assert_eq!(a.cloud, b.cloud);
        assert_eq!(a.targets, b.targets);
        assert_eq!(a.cameras, b.cameras);
    }

    #[test]
    fn single_opaque_blob_shows_its_color_at_center() {
        let mut scene = make_synthetic_scene(9, 1, 5, 1, 32);
        let cam = scene.cameras[0].clone();
        let g = &mut scene.cloud.gaussians[0];
        g.mu = [0.0, 0.0, 0.0];
        g.log_scale = [-1.0; 3];
        g.opacity_logit = 40.0;
        let img = splat_colors(&scene.cloud.gaussians, &scene.colors, &cam, [0.0; 3]);
        let center = img[16 * 32 + 16];
        for c in 0..3 {
            // α' saturates at 0.99 over a black background.
            assert!((center[c] - 0.99 * scene.colors[0][c]).abs() < 1e-9);
        }
    }

    #[test]
    fn views_are_fully_covered() {
        let scene = make_synthetic_scene(1, 200, 5, 8, 64);
        for cam in &scene.cameras {
            let white = vec![[1.0; 3]; scene.cloud.len()];
            let cover = splat_colors(&scene.cloud.gaussians, &white, cam, [0.0; 3]);
            let min = cover.iter().map(|c| c[0]).fold(f64::INFINITY, f64::min);
            assert!(min > 0.9, "uncovered pixel with coverage {min}");
        }
    }

    #[test]
    fn every_cluster_is_visible_in_the_targets() {
        let scene = make_synthetic_scene(5, 200, 5, 4, 48);
        let pts: Vec<Ab> = scene
            .targets
            .iter()
            .flat_map(|t| t.pixels.iter().map(|&p| srgb_to_lab_norm(p).ab()))
            .collect();
        for (j, c) in scene.cluster_chroma.iter().enumerate() {
            let near = pts
                .iter()
                .filter(|p| ((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2)).sqrt() < 0.03)
                .count();
            let share = near as f64 / pts.len() as f64;
            assert!(share > 0.03, "cluster {j} covers only {share}");
        }
    }
}
