#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use streamopt::blocktridiag::BlockTridiagSystem;
use streamopt::dense::{Mat, Vector};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut impl Rng, rows: usize, cols: usize) -> Mat {
    Mat::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
}

pub fn gaussian_vec(rng: &mut impl Rng, n: usize) -> Vector {
    Vector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// Symmetric matrix with spectral norm exactly `scale` (0 for `n = 0`).
pub fn sym_with_norm(rng: &mut impl Rng, n: usize, scale: f64) -> Mat {
    let g = gaussian(rng, n, n);
    let s = &g + g.transpose();
    let top = s.clone().symmetric_eigenvalues().iter().map(|v| v.abs()).fold(0.0, f64::max);
    if top == 0.0 {
        s
    } else {
        s * (scale / top)
    }
}

pub fn with_norm(rng: &mut impl Rng, n: usize, scale: f64) -> Mat {
    let g = gaussian(rng, n, n);
    let top = g.clone().singular_values().max();
    g * (scale / top)
}

/// `H_t = κ(I + δ S_t)`, `E_t = κ θ R_t` with `‖S_t‖ = ‖R_t‖ = 1`.
pub fn structured_system(rng: &mut impl Rng, n: usize, frames: usize, kappa: f64, delta: f64, theta: f64) -> BlockTridiagSystem {
    let diag = (0..frames)
        .map(|_| {
            let d = rng.random_range(0.0..=delta);
            (Mat::identity(n, n) + sym_with_norm(rng, n, d)) * kappa
        })
        .collect();
    let off = (1..frames).map(|_| with_norm(rng, n, kappa * theta)).collect();
    let rhs = (0..frames).map(|_| gaussian_vec(rng, n)).collect();
    BlockTridiagSystem::new(n, diag, off, rhs).expect("valid system")
}

/// A dominant system with random `κ`, `δ`, `θ < (1 − δ)/2`.
pub fn dominant_system(rng: &mut impl Rng, n: usize, frames: usize) -> BlockTridiagSystem {
    let kappa = 10f64.powf(rng.random_range(-1.0..1.0));
    let delta = rng.random_range(0.0..0.6);
    let theta = rng.random_range(0.0..0.95) * 0.5 * (1.0 - delta);
    structured_system(rng, n, frames, kappa, delta, theta)
}

pub fn max_rel(a: &[Vector], b: &[Vector]) -> f64 {
    streamopt::dense::relative_error(a, b)
}

pub fn max_block_diff(a: &[Vector], b: &[Vector]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max)
}
