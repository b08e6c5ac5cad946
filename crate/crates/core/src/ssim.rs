//! Structural similarity on single-channel images, with its gradient.
//!
//! Local statistics use a separable Gaussian window with half-sample
//! symmetric padding (`d c b a | a b c d | d c b a`); the score is the mean
//! of the SSIM map over all pixels.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsimConfig {
    /// Odd window width in pixels.
    pub window: usize,
    pub sigma: f64,
    pub c1: f64,
    pub c2: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self { window: 11, sigma: 1.5, c1: 0.01 * 0.01, c2: 0.03 * 0.03 }
    }
}

impl SsimConfig {
    fn kernel(&self) -> Vec<f64> {
        let r = (self.window / 2) as isize;
        let raw: Vec<f64> = (-r..=r)
            .map(|i| (-(i * i) as f64 / (2.0 * self.sigma * self.sigma)).exp())
            .collect();
        let s: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / s).collect()
    }
}

/// Index into `0..n` after symmetric reflection about the half-sample borders.
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

/// Separable filter; `adjoint` applies the transpose of the padded convolution.
struct Filter {
    kernel: Vec<f64>,
    width: usize,
    height: usize,
}

impl Filter {
    fn apply(&self, src: &[f64], adjoint: bool) -> Vec<f64> {
        let tmp = self.pass(src, true, adjoint);
        self.pass(&tmp, false, adjoint)
    }

    fn pass(&self, src: &[f64], horizontal: bool, adjoint: bool) -> Vec<f64> {
        let (w, h) = (self.width, self.height);
        let r = (self.kernel.len() / 2) as isize;
        let mut out = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                let v = src[y * w + x];
                for (t, &kt) in self.kernel.iter().enumerate() {
                    let off = t as isize - r;
                    let (sx, sy) = if horizontal {
                        (reflect(x as isize + off, w), y)
                    } else {
                        (x, reflect(y as isize + off, h))
                    };
                    if adjoint {
                        out[sy * w + sx] += kt * v;
                    } else {
                        out[y * w + x] += kt * src[sy * w + sx];
                    }
                }
            }
        }
        out
    }
}

struct Stats {
    map: Vec<f64>,
    mu_a: Vec<f64>,
    mu_b: Vec<f64>,
    a1: Vec<f64>,
    a2: Vec<f64>,
    b1: Vec<f64>,
    b2: Vec<f64>,
}

fn stats(a: &[f64], b: &[f64], f: &Filter, cfg: &SsimConfig) -> Stats {
    let mu_a = f.apply(a, false);
    let mu_b = f.apply(b, false);
    let sq_a: Vec<f64> = a.iter().map(|v| v * v).collect();
    let sq_b: Vec<f64> = b.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    let f_aa = f.apply(&sq_a, false);
    let f_bb = f.apply(&sq_b, false);
    let f_ab = f.apply(&ab, false);
    let n = a.len();
    let mut s = Stats {
        map: vec![0.0; n],
        mu_a,
        mu_b,
        a1: vec![0.0; n],
        a2: vec![0.0; n],
        b1: vec![0.0; n],
        b2: vec![0.0; n],
    };
    for i in 0..n {
        let (ma, mb) = (s.mu_a[i], s.mu_b[i]);
        let var_a = f_aa[i] - ma * ma;
        let var_b = f_bb[i] - mb * mb;
        let cov = f_ab[i] - ma * mb;
        s.a1[i] = 2.0 * ma * mb + cfg.c1;
        s.a2[i] = 2.0 * cov + cfg.c2;
        s.b1[i] = ma * ma + mb * mb + cfg.c1;
        s.b2[i] = var_a + var_b + cfg.c2;
        s.map[i] = s.a1[i] * s.a2[i] / (s.b1[i] * s.b2[i]);
    }
    s
}

fn check(a: &[f64], b: &[f64], width: usize, height: usize) {
    assert_eq!(a.len(), width * height, "image size does not match dimensions");
    assert_eq!(b.len(), width * height, "image size does not match dimensions");
}

/// Mean SSIM of two `width × height` images.
pub fn ssim(a: &[f64], b: &[f64], width: usize, height: usize, cfg: &SsimConfig) -> f64 {
    check(a, b, width, height);
    let f = Filter { kernel: cfg.kernel(), width, height };
    let s = stats(a, b, &f, cfg);
    s.map.iter().sum::<f64>() / a.len() as f64
}

/// Mean SSIM and its gradient with respect to `a`.
pub fn ssim_grad(a: &[f64], b: &[f64], width: usize, height: usize, cfg: &SsimConfig) -> (f64, Vec<f64>) {
    check(a, b, width, height);
    let f = Filter { kernel: cfg.kernel(), width, height };
    let s = stats(a, b, &f, cfg);
    let n = a.len();
    let inv_n = 1.0 / n as f64;
    let mut g_mu = vec![0.0; n];
    let mut g_ab = vec![0.0; n];
    let mut g_aa = vec![0.0; n];
    for i in 0..n {
        let m = s.map[i] * inv_n;
        let (ma, mb) = (s.mu_a[i], s.mu_b[i]);
        g_mu[i] = m * (2.0 * mb / s.a1[i] - 2.0 * mb / s.a2[i] - 2.0 * ma / s.b1[i] + 2.0 * ma / s.b2[i]);
        g_ab[i] = m * 2.0 / s.a2[i];
        g_aa[i] = -m / s.b2[i];
    }
    let t_mu = f.apply(&g_mu, true);
    let t_ab = f.apply(&g_ab, true);
    let t_aa = f.apply(&g_aa, true);
    let grad = (0..n).map(|i| t_mu[i] + b[i] * t_ab[i] + 2.0 * a[i] * t_aa[i]).collect();
    (s.map.iter().sum::<f64>() * inv_n, grad)
}
