//! Multi-view optimization of the Gaussians and the palette.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::color::{decode_palette, decode_palette_backward, Ab, Palette, PaletteError, PaletteParams};
use crate::decomposition::{target_weights_image, target_weights_image_backward, DecompositionError};
use crate::image::{psnr, RgbImage};
use crate::losses::{total_loss, LossBreakdown, LossError, LossInputs, LossWeights};
use crate::rasterizer::{splat, splat_backward, RasterError, ViewBuffers};
use crate::scene::{Camera, Gaussian, GaussianCloud, ParamGroup};
use crate::ssim::ssim;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("dataset has no views")]
    EmptyDataset,
    #[error("no training views left after holding out every {0}th view")]
    NoTrainingViews(usize),
    #[error("target for view {view} is {found:?}, camera is {expected:?}")]
    TargetSize { view: usize, expected: (usize, usize), found: (usize, usize) },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("cloud is empty at epoch {epoch}; every gaussian was pruned")]
    EmptyCloud { epoch: usize },
    #[error("non-finite values at epoch {epoch}, view {view}\n{diagnostic}")]
    NonFinite { epoch: usize, view: usize, diagnostic: String },
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Decomposition(#[from] DecompositionError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Palette(#[from] PaletteError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearningRates {
    pub position: f64,
    /// Position rate reached at the last epoch (exponential decay).
    pub position_final: f64,
    pub scale: f64,
    pub rotation: f64,
    pub opacity: f64,
    pub weight_sh: f64,
    pub lightness_sh: f64,
    pub palette: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            position: 1.6e-4,
            position_final: 1.6e-6,
            scale: 5e-3,
            rotation: 1e-3,
            opacity: 5e-2,
            weight_sh: 2.5e-3,
            lightness_sh: 2.5e-3,
            palette: 1e-3,
        }
    }
}

impl LearningRates {
    pub fn group(&self, group: ParamGroup, epoch: usize, epochs: usize) -> f64 {
        match group {
            ParamGroup::Position => {
                let t = if epochs > 1 { epoch as f64 / (epochs - 1) as f64 } else { 0.0 };
                (self.position.ln() * (1.0 - t) + self.position_final.ln() * t).exp()
            }
            ParamGroup::Scale => self.scale,
            ParamGroup::Rotation => self.rotation,
            ParamGroup::Opacity => self.opacity,
            ParamGroup::WeightSh => self.weight_sh,
            ParamGroup::LightnessSh => self.lightness_sh,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DensifyConfig {
    pub enabled: bool,
    /// Epochs between density updates.
    pub interval: usize,
    /// No density updates after this epoch.
    pub until_epoch: usize,
    pub grad_threshold: f64,
    pub prune_opacity: f64,
    pub max_gaussians: usize,
}

impl Default for DensifyConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            interval: 50,
            until_epoch: 150,
            grad_threshold: 2e-4,
            prune_opacity: 0.005,
            max_gaussians: 20_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rates: LearningRates,
    pub densify: DensifyConfig,
    pub seed: u64,
    pub loss: LossWeights,
    /// Every `eval_stride`-th view (index 0, stride, 2·stride, ...) is held out.
    pub eval_stride: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            learning_rates: LearningRates::default(),
            densify: DensifyConfig::default(),
            seed: 0,
            loss: LossWeights::default(),
            eval_stride: 8,
        }
    }
}

impl TrainConfig {
    /// Settings for the small synthetic fixture: a faster palette and no densification.
    pub fn desk() -> Self {
        Self {
            learning_rates: LearningRates { palette: 2e-2, ..Default::default() },
            densify: DensifyConfig { enabled: false, ..Default::default() },
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.eval_stride < 2 {
            return Err(TrainError::Config(format!("eval_stride must be at least 2, got {}", self.eval_stride)));
        }
        if self.densify.enabled && self.densify.interval == 0 {
            return Err(TrainError::Config("densify interval must be positive".into()));
        }
        Ok(())
    }
}

/// One posed view: camera plus its target image, with the Lab split cached.
#[derive(Debug, Clone)]
pub struct View {
    pub camera: Camera,
    pub target: RgbImage,
    pub lightness: Vec<f64>,
    pub chroma: Vec<Ab>,
}

impl View {
    pub fn new(camera: Camera, target: RgbImage) -> Self {
        let lab = target.to_lab();
        let lightness = lab.iter().map(|c| c.l).collect();
        let chroma = lab.iter().map(|c| c.ab()).collect();
        Self { camera, target, lightness, chroma }
    }
}

/// Indices of `(train, test)` views; every `stride`-th view starting at 0 is a test view.
pub fn eval_split(n_views: usize, stride: usize) -> (Vec<usize>, Vec<usize>) {
    (0..n_views).partition(|&i| i % stride.max(1) != 0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean over the epoch's training views.
    pub loss: LossBreakdown,
    pub gaussians: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub lightness_psnr: f64,
    pub lightness_ssim: f64,
    /// Mean Euclidean ab distance between `W̃ᵀP` and the target chroma.
    pub mean_ab_error: f64,
    pub mean_grey_weight: f64,
    /// PSNR of the composed sRGB render.
    pub rgb_psnr: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub test_views: Vec<usize>,
    pub test: EvalMetrics,
    pub train: EvalMetrics,
    pub palette: Option<Palette>,
    pub wall_clock_secs: f64,
}

pub struct TrainOutcome {
    pub cloud: GaussianCloud,
    pub palette_params: PaletteParams,
    pub report: TrainReport,
}

/// Loss breakdown and gradients for one view.
pub struct ViewGradients {
    pub loss: LossBreakdown,
    pub gaussians: Vec<Gaussian>,
    pub palette: PaletteParams,
    pub buffers: ViewBuffers,
}

/// Forward and backward pass for one view: splat, targets from the view's
/// chroma, total loss, then gradients back to the Gaussians and palette.
pub fn view_gradients(
    cloud: &GaussianCloud,
    params: &PaletteParams,
    view: &View,
    weights: &LossWeights,
) -> Result<ViewGradients, TrainError> {
    let palette = decode_palette(params)?;
    let buffers = splat(cloud, &view.camera)?;
    let w_bary = target_weights_image(&view.chroma, &palette)?;
    let inputs = LossInputs {
        width: buffers.width,
        height: buffers.height,
        k: buffers.k,
        w_norm: &buffers.w_norm,
        l: &buffers.l,
        w_bary: &w_bary,
        l_gt: &view.lightness,
    };
    let (loss, grads) = total_loss(&inputs, &palette, weights)?;
    let gaussians = splat_backward(cloud, &buffers, &grads.w_norm, &grads.l)?;
    let mut g_vertices = target_weights_image_backward(&view.chroma, &palette, &grads.w_bary)?;
    for (g, s) in g_vertices.iter_mut().zip(&grads.vertices) {
        g[0] += s[0];
        g[1] += s[1];
    }
    let palette_grad = decode_palette_backward(params, &g_vertices);
    Ok(ViewGradients { loss, gaussians, palette: palette_grad, buffers })
}

/// Total loss of one view, without gradients.
pub fn view_loss(
    cloud: &GaussianCloud,
    params: &PaletteParams,
    view: &View,
    weights: &LossWeights,
) -> Result<LossBreakdown, TrainError> {
    let palette = decode_palette(params)?;
    let buffers = splat(cloud, &view.camera)?;
    let w_bary = target_weights_image(&view.chroma, &palette)?;
    let inputs = LossInputs {
        width: buffers.width,
        height: buffers.height,
        k: buffers.k,
        w_norm: &buffers.w_norm,
        l: &buffers.l,
        w_bary: &w_bary,
        l_gt: &view.lightness,
    };
    Ok(total_loss(&inputs, &palette, weights)?.0)
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-15;

/// Adam with one learning rate per parameter group and shared step count.
#[derive(Debug, Clone)]
struct Adam {
    m: Vec<Gaussian>,
    v: Vec<Gaussian>,
    pm: Vec<f64>,
    pv: Vec<f64>,
    step: i32,
}

impl Adam {
    fn new(cloud: &GaussianCloud, params: &PaletteParams) -> Self {
        let n = params.to_flat().len();
        Self { m: cloud.zero_grads(), v: cloud.zero_grads(), pm: vec![0.0; n], pv: vec![0.0; n], step: 0 }
    }

    fn update(slice: &mut [f64], m: &mut [f64], v: &mut [f64], g: &[f64], lr: f64, c1: f64, c2: f64) {
        for i in 0..slice.len() {
            m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
            v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
            slice[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS);
        }
    }

    fn apply(
        &mut self,
        cloud: &mut GaussianCloud,
        params: &mut PaletteParams,
        grads: &ViewGradients,
        rates: &LearningRates,
        epoch: usize,
        epochs: usize,
    ) {
        self.step += 1;
        let c1 = 1.0 - BETA1.powi(self.step);
        let c2 = 1.0 - BETA2.powi(self.step);
        for (i, g) in cloud.gaussians.iter_mut().enumerate() {
            for group in ParamGroup::ALL {
                let lr = rates.group(group, epoch, epochs);
                Self::update(
                    g.group_mut(group),
                    self.m[i].group_mut(group),
                    self.v[i].group_mut(group),
                    grads.gaussians[i].group(group),
                    lr,
                    c1,
                    c2,
                );
            }
        }
        let mut flat = params.to_flat();
        let g = grads.palette.to_flat();
        Self::update(&mut flat, &mut self.pm, &mut self.pv, &g, rates.palette, c1, c2);
        *params = PaletteParams::from_flat(&flat);
    }
}

/// Running sums of position-gradient norms between density updates.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradAccumulator {
    pub norm_sum: Vec<f64>,
    /// Direction sum (unnormalized) used for clone offsets.
    pub direction: Vec<[f64; 3]>,
    pub count: Vec<u32>,
}

impl GradAccumulator {
    pub fn new(n: usize) -> Self {
        Self { norm_sum: vec![0.0; n], direction: vec![[0.0; 3]; n], count: vec![0; n] }
    }

    pub fn add(&mut self, grads: &[Gaussian]) {
        for (i, g) in grads.iter().enumerate() {
            let n = g.mu.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 0.0 {
                self.norm_sum[i] += n;
                for a in 0..3 {
                    self.direction[i][a] += g.mu[a];
                }
                self.count[i] += 1;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DensifyStats {
    pub cloned: usize,
    pub pruned: usize,
}

/// Clones Gaussians whose mean position-gradient norm exceeds the threshold
/// (offset by one mean scale along the descent direction) and prunes
/// Gaussians below the opacity floor. Returns, for every surviving Gaussian,
/// its source index in the input cloud and whether it is a new clone.
pub fn densify_prune(
    cloud: &mut GaussianCloud,
    accum: &GradAccumulator,
    config: &DensifyConfig,
) -> (DensifyStats, Vec<(usize, bool)>) {
    let n = cloud.len();
    let mut clones = Vec::new();
    for i in 0..n.min(accum.count.len()) {
        if accum.count[i] == 0 || n + clones.len() >= config.max_gaussians {
            continue;
        }
        let mean = accum.norm_sum[i] / accum.count[i] as f64;
        if mean <= config.grad_threshold {
            continue;
        }
        let d = accum.direction[i];
        let len = d.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut g = cloud.gaussians[i].clone();
        if len > 0.0 {
            let step = g.log_scale.iter().map(|s| s.exp()).sum::<f64>() / 3.0;
            for a in 0..3 {
                g.mu[a] -= step * d[a] / len;
            }
        }
        clones.push((i, g));
    }
    let cloned = clones.len();
    let mut origin: Vec<(usize, bool)> = (0..n).map(|i| (i, false)).collect();
    for (i, g) in clones {
        cloud.gaussians.push(g);
        origin.push((i, true));
    }
    let before = cloud.len();
    let mut keep = Vec::with_capacity(before);
    let mut kept = Vec::with_capacity(before);
    for (g, o) in cloud.gaussians.drain(..).zip(origin) {
        if g.opacity() >= config.prune_opacity {
            keep.push(g);
            kept.push(o);
        }
    }
    cloud.gaussians = keep;
    (DensifyStats { cloned, pruned: before - cloud.len() }, kept)
}

fn group_norms(cloud: &GaussianCloud, params: &PaletteParams) -> String {
    let mut s = String::new();
    for group in ParamGroup::ALL {
        let sq: f64 = cloud.gaussians.iter().map(|g| g.group(group).iter().map(|v| v * v).sum::<f64>()).sum();
        s.push_str(&format!("  |{}| = {:.6e}\n", group.name(), sq.sqrt()));
    }
    let p: f64 = params.to_flat().iter().map(|v| v * v).sum();
    s.push_str(&format!("  |palette| = {:.6e}\n", p.sqrt()));
    s
}

fn finite_grads(g: &ViewGradients) -> bool {
    g.loss.total.is_finite()
        && g.gaussians.iter().all(|x| x.squared_norm().is_finite())
        && g.palette.to_flat().iter().all(|v| v.is_finite())
}

/// Per-epoch hook: receives the epoch record and the current state.
pub type EpochObserver<'a> = dyn FnMut(&EpochRecord, &GaussianCloud, &PaletteParams) + 'a;

pub fn train(
    cloud: GaussianCloud,
    palette_params: PaletteParams,
    views: &[View],
    config: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    train_with_observer(cloud, palette_params, views, config, &mut |_, _, _| {})
}

pub fn train_with_observer(
    mut cloud: GaussianCloud,
    mut params: PaletteParams,
    views: &[View],
    config: &TrainConfig,
    observer: &mut EpochObserver,
) -> Result<TrainOutcome, TrainError> {
    let start = Instant::now();
    config.validate()?;
    params.validate()?;
    if views.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    for (i, v) in views.iter().enumerate() {
        let expected = (v.camera.width, v.camera.height);
        let found = (v.target.width, v.target.height);
        if expected != found {
            return Err(TrainError::TargetSize { view: i, expected, found });
        }
    }
    let (train_ids, test_ids) = eval_split(views.len(), config.eval_stride);
    let mut report = TrainReport { test_views: test_ids.clone(), ..Default::default() };
    if config.epochs == 0 {
        report.wall_clock_secs = start.elapsed().as_secs_f64();
        return Ok(TrainOutcome { cloud, palette_params: params, report });
    }
    if train_ids.is_empty() {
        return Err(TrainError::NoTrainingViews(config.eval_stride));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(&cloud, &params);
    let mut accum = GradAccumulator::new(cloud.len());
    let mut order = train_ids.clone();
    for epoch in 0..config.epochs {
        if cloud.is_empty() {
            return Err(TrainError::EmptyCloud { epoch });
        }
        order.shuffle(&mut rng);
        let mut sum = LossBreakdown::default();
        for &vi in &order {
            let grads = view_gradients(&cloud, &params, &views[vi], &config.loss)?;
            if !finite_grads(&grads) {
                return Err(TrainError::NonFinite {
                    epoch,
                    view: vi,
                    diagnostic: format!("loss terms: {:?}\nparameter norms:\n{}", grads.loss, group_norms(&cloud, &params)),
                });
            }
            accum.add(&grads.gaussians);
            adam.apply(&mut cloud, &mut params, &grads, &config.learning_rates, epoch, config.epochs);
            let l = grads.loss;
            sum.lightness += l.lightness;
            sum.geometric += l.geometric;
            sum.sparsity += l.sparsity;
            sum.grey += l.grey;
            sum.palette += l.palette;
            sum.total += l.total;
        }
        let n = order.len() as f64;
        let mean = LossBreakdown {
            lightness: sum.lightness / n,
            geometric: sum.geometric / n,
            sparsity: sum.sparsity / n,
            grey: sum.grey / n,
            palette: sum.palette / n,
            total: sum.total / n,
        };
        let d = &config.densify;
        if d.enabled && (epoch + 1) % d.interval == 0 && epoch + 1 <= d.until_epoch && epoch + 1 < config.epochs {
            let (_, kept) = densify_prune(&mut cloud, &accum, d);
            // Clones start with fresh optimizer moments.
            let remap = |old: &[Gaussian]| -> Vec<Gaussian> {
                kept.iter()
                    .map(|&(o, clone)| if clone { old[o].zeros_like() } else { old[o].clone() })
                    .collect()
            };
            adam.m = remap(&adam.m);
            adam.v = remap(&adam.v);
            accum = GradAccumulator::new(cloud.len());
        }
        let record = EpochRecord { epoch, loss: mean, gaussians: cloud.len() };
        observer(&record, &cloud, &params);
        report.epochs.push(record);
    }
    if cloud.is_empty() {
        return Err(TrainError::EmptyCloud { epoch: config.epochs });
    }
    let palette = decode_palette(&params)?;
    let test: Vec<&View> = test_ids.iter().map(|&i| &views[i]).collect();
    let train: Vec<&View> = train_ids.iter().map(|&i| &views[i]).collect();
    report.test = evaluate(&cloud, &palette, &test)?;
    report.train = evaluate(&cloud, &palette, &train)?;
    report.palette = Some(palette);
    report.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok(TrainOutcome { cloud, palette_params: params, report })
}

/// Metrics averaged over views (PSNR and SSIM per view, then averaged).
pub fn evaluate(cloud: &GaussianCloud, palette: &Palette, views: &[&View]) -> Result<EvalMetrics, TrainError> {
    if views.is_empty() {
        return Ok(EvalMetrics::default());
    }
    let mut m = EvalMetrics::default();
    let cfg = crate::ssim::SsimConfig::default();
    for v in views {
        let b = splat(cloud, &v.camera)?;
        m.lightness_psnr += psnr(&b.l, &v.lightness);
        m.lightness_ssim += ssim(&b.l, &v.lightness, b.width, b.height, &cfg);
        let n = b.pixels() as f64;
        let mut ab_err = 0.0;
        let mut grey = 0.0;
        for p in 0..b.pixels() {
            let ab = palette.mix(b.weights(p));
            let t = v.chroma[p];
            ab_err += (ab[0] - t[0]).hypot(ab[1] - t[1]);
            grey += b.w_norm[p * b.k];
        }
        m.mean_ab_error += ab_err / n;
        m.mean_grey_weight += grey / n;
        let img = RgbImage::from_lab(b.width, b.height, &b.render_lab(palette));
        let flat_a: Vec<f64> = img.pixels.iter().flatten().copied().collect();
        let flat_b: Vec<f64> = v.target.pixels.iter().flatten().copied().collect();
        m.rgb_psnr += psnr(&flat_a, &flat_b);
    }
    let n = views.len() as f64;
    m.lightness_psnr /= n;
    m.lightness_ssim /= n;
    m.mean_ab_error /= n;
    m.mean_grey_weight /= n;
    m.rgb_psnr /= n;
    Ok(m)
}

/// Worst relative error of one parameter group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupError {
    pub group: String,
    pub max_relative_error: f64,
    pub checked: usize,
}

pub const GRAD_CHECK_STEP: f64 = 1e-4;

/// Relative error `|fd - an| / max(|fd|, |an|, floor)`; `floor` keeps
/// entries that are tiny relative to the group from dominating.
pub fn relative_error(fd: f64, an: f64, floor: f64) -> f64 {
    let d = fd.abs().max(an.abs()).max(floor);
    if d == 0.0 {
        0.0
    } else {
        (fd - an).abs() / d
    }
}

/// Central differences of the total loss against the analytic gradient, for
/// every parameter of every Gaussian and the palette. The floor for each group
/// is `1e-3` times its largest gradient magnitude.
pub fn grad_check(
    cloud: &GaussianCloud,
    params: &PaletteParams,
    view: &View,
    weights: &LossWeights,
) -> Result<Vec<GroupError>, TrainError> {
    let grads = view_gradients(cloud, params, view, weights)?;
    let h = GRAD_CHECK_STEP;
    let f = |c: &GaussianCloud, p: &PaletteParams| view_loss(c, p, view, weights).map(|l| l.total);
    let mut out = Vec::new();
    for group in ParamGroup::ALL {
        let mut pairs = Vec::new();
        for (i, g) in grads.gaussians.iter().enumerate() {
            for j in 0..g.group(group).len() {
                let mut plus = cloud.clone();
                plus.gaussians[i].group_mut(group)[j] += h;
                let mut minus = cloud.clone();
                minus.gaussians[i].group_mut(group)[j] -= h;
                let fd = (f(&plus, params)? - f(&minus, params)?) / (2.0 * h);
                pairs.push((fd, g.group(group)[j]));
            }
        }
        out.push(summarize(group.name(), &pairs));
    }
    let flat = params.to_flat();
    let g_flat = grads.palette.to_flat();
    let mut pairs = Vec::new();
    for j in 0..flat.len() {
        let mut p = flat.clone();
        p[j] += h;
        let mut m = flat.clone();
        m[j] -= h;
        let fd = (f(cloud, &PaletteParams::from_flat(&p))? - f(cloud, &PaletteParams::from_flat(&m))?) / (2.0 * h);
        pairs.push((fd, g_flat[j]));
    }
    out.push(summarize("palette", &pairs));
    Ok(out)
}

fn summarize(name: &str, pairs: &[(f64, f64)]) -> GroupError {
    let scale = pairs.iter().map(|(f, a)| f.abs().max(a.abs())).fold(0.0, f64::max);
    let max_relative_error = pairs
        .iter()
        .map(|&(f, a)| relative_error(f, a, 1e-3 * scale))
        .fold(0.0, f64::max);
    GroupError { group: name.to_string(), max_relative_error, checked: pairs.len() }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_holds_out_every_eighth_view() {
        let (train, test) = eval_split(17, 8);
        assert_eq!(test, vec![0, 8, 16]);
        assert_eq!(train.len(), 14);
        assert!(!train.contains(&8));
    }

    #[test]
    fn position_rate_decays_exponentially() {
        let r = LearningRates::default();
        assert!((r.group(ParamGroup::Position, 0, 11) - 1.6e-4).abs() < 1e-18);
        assert!((r.group(ParamGroup::Position, 10, 11) - 1.6e-6).abs() < 1e-18);
        assert!((r.group(ParamGroup::Position, 5, 11) - 1.6e-5).abs() < 1e-16);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 1.1, 0.0) - 0.1 / 1.1).abs() < 1e-15);
        assert!((relative_error(1e-9, 0.0, 1e-3) - 1e-6).abs() < 1e-15);
    }

    #[test]
    fn densify_without_history_is_noop() {
        let mut cloud = GaussianCloud::new(0, 3);
        cloud.gaussians.push(Gaussian::new(0, 3));
        let before = cloud.clone();
        let (stats, kept) = densify_prune(&mut cloud, &GradAccumulator::new(1), &DensifyConfig::default());
        assert_eq!(stats, DensifyStats::default());
        assert_eq!(kept, vec![(0, false)]);
        assert_eq!(cloud, before);
    }

    #[test]
    fn densify_clones_one_and_prunes_transparent() {
        let mut cloud = GaussianCloud::new(0, 3);
        for i in 0..3 {
            let mut g = Gaussian::new(0, 3);
            g.mu = [i as f64, 0.0, 0.0];
            g.weight_sh = vec![0.1 * i as f64, 0.2, 0.3];
            cloud.gaussians.push(g);
        }
        let mut acc = GradAccumulator::new(3);
        let mut grads = cloud.zero_grads();
        grads[1].mu = [0.0, 1e-3, 0.0];
        grads[2].mu = [1e-5, 0.0, 0.0];
        acc.add(&grads);
        let cfg = DensifyConfig::default();
        let (stats, kept) = densify_prune(&mut cloud, &acc, &cfg);
        assert_eq!(stats.cloned, 1);
        assert_eq!(cloud.len(), 4);
        assert_eq!(kept, vec![(0, false), (1, false), (2, false), (1, true)]);
        let clone = &cloud.gaussians[3];
        assert_eq!(clone.weight_sh, cloud.gaussians[1].weight_sh);
        assert_eq!(clone.lightness_sh, cloud.gaussians[1].lightness_sh);
        // Offset against the gradient by one scale unit.
        assert!((clone.mu[1] + 1.0).abs() < 1e-12);

        for g in &mut cloud.gaussians {
            g.opacity_logit = -10.0;
        }
        let (stats, kept) = densify_prune(&mut cloud, &GradAccumulator::new(4), &cfg);
        assert_eq!(stats.pruned, 4);
        assert!(kept.is_empty() && cloud.is_empty());
    }
}
