use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use splatgrade::color::{decode_palette, LabNorm, PaletteParams};
use splatgrade::editing::{compose_edited, compose_pixel, fit_tone_curve, solve_constraints, ConstraintKind, EditState, PixelConstraint, SolverConfig};
use splatgrade::rasterizer::ViewBuffers;

fn random_buffers(seed: u64, width: usize, height: usize, k: usize) -> ViewBuffers {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = Vec::with_capacity(width * height * k);
    for _ in 0..width * height {
        let raw: Vec<f64> = (0..k).map(|_| rng.random::<f64>().powi(3)).collect();
        let s: f64 = raw.iter().sum();
        w.extend(raw.iter().map(|v| v / s));
    }
    let l = (0..width * height).map(|_| rng.random_range(0.05..0.95)).collect();
    ViewBuffers::from_normalized(width, height, k, w, l)
}

fn edited_state(k: usize) -> EditState {
    let mut s = EditState::identity(decode_palette(&PaletteParams::regular(k, 0.15)).unwrap());
    s.palette.vertices[1] = [0.7, 0.45];
    s.curves.curves[0] = fit_tone_curve(&[[0.3, 0.35], [0.7, 0.8]]).unwrap();
    s.curves.curves[2] = fit_tone_curve(&[[0.5, 0.4]]).unwrap();
    s
}

fn best_of(n: usize, mut f: impl FnMut()) -> Duration {
    (0..n)
        .map(|_| {
            let t = Instant::now();
            f();
            t.elapsed()
        })
        .min()
        .unwrap()
}

#[test]
fn compose_800x600_single_threaded_under_16ms() {
    let b = random_buffers(1, 800, 600, 5);
    let state = edited_state(5);
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let best = pool.install(|| best_of(7, || drop(compose_edited(&b, &state).unwrap())));
    let identity = EditState::identity(state.palette.clone());
    let best_identity = pool.install(|| best_of(7, || drop(compose_edited(&b, &identity).unwrap())));
    println!("compose 800x600 K=5: edited {best:?}, identity curves {best_identity:?}");
    assert!(best < Duration::from_millis(16), "{best:?}");
    assert!(best_identity < Duration::from_millis(16), "{best_identity:?}");
}

#[test]
fn ten_constraints_solve_under_100ms() {
    let b = random_buffers(2, 64, 64, 5);
    let state = edited_state(5);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut s = state.clone();
    for i in 0..10 {
        let (x, y) = (rng.random_range(0..64), rng.random_range(0..64));
        let cur = compose_pixel(&b, y * 64 + x, &state);
        let kind = [ConstraintKind::Color, ConstraintKind::Chroma, ConstraintKind::Lightness][i % 3];
        s.constraints.push(PixelConstraint {
            view: 0,
            x,
            y,
            target: LabNorm::new(cur[0] + rng.random_range(-0.03..0.03), cur[1] + 0.01, cur[2] - 0.01),
            kind,
        });
    }
    let bufs = [b];
    let mut outcome = None;
    let best = best_of(3, || outcome = Some(solve_constraints(&s, &bufs, &SolverConfig::default()).unwrap()));
    let outcome = outcome.unwrap();
    println!("10 constraints: {best:?}, residual {:.1e}, fallback {}", outcome.residual, outcome.fallback);
    assert!(best < Duration::from_millis(100), "{best:?}");
}
