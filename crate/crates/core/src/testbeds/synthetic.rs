//! Random least-squares and convex streams with controlled coupling.

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::blocktridiag::{ConditioningReport, Depth};
use crate::convex_frames::{SharedLoss, SoftplusFrame};
use crate::dense::{Mat, Vector};
use crate::error::{Error, Result};
use crate::stream_ls::{LsBatch, LsStream};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticLsConfig {
    pub n: usize,
    pub m: usize,
    /// Number of frames `T + 1`.
    pub frames: usize,
    pub gamma: f64,
    /// Scale of the coupling matrices `B_t`.
    pub coupling: f64,
    /// Range of the singular values of `A_t`.
    pub sv_range: (f64, f64),
}

impl SyntheticLsConfig {
    pub fn new(n: usize, m: usize, frames: usize, gamma: f64) -> Self {
        Self {
            n,
            m,
            frames,
            gamma,
            coupling: 0.1,
            sv_range: (0.9, 1.1),
        }
    }
}

fn gaussian(rng: &mut impl Rng, rows: usize, cols: usize) -> Mat {
    Mat::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// `m × n` matrix with orthonormal columns scaled by singular values drawn from `range`.
fn well_conditioned(rng: &mut impl Rng, m: usize, n: usize, range: (f64, f64)) -> Mat {
    let q = gaussian(rng, m, n).qr().q();
    let s: Vec<f64> = (0..n).map(|_| rng.random_range(range.0..=range.1)).collect();
    Mat::from_fn(m, n, |i, j| q[(i, j)] * s[j])
}

/// A random stream: `A_t` well conditioned, `B_t` Gaussian with scale `coupling/√m`.
pub fn ls_stream(cfg: &SyntheticLsConfig, seed: u64) -> Result<Vec<LsBatch>> {
    if cfg.m < cfg.n {
        return Err(Error::Argument(format!("need m ≥ n, got m = {}, n = {}", cfg.m, cfg.n)));
    }
    let mut rng = super::rng(seed, 1);
    let scale = cfg.coupling / (cfg.m as f64).sqrt();
    (0..cfg.frames)
        .map(|t| {
            let a = well_conditioned(&mut rng, cfg.m, cfg.n, cfg.sv_range);
            let b = (t > 0).then(|| gaussian(&mut rng, cfg.m, cfg.n) * scale);
            let y = Vector::from_fn(cfg.m, |_, _| rng.sample::<f64, _>(StandardNormal));
            LsBatch::new(t, a, b, y)
        })
        .collect()
}

/// Like [`ls_stream`] but redrawn until the running conditioning report is dominant.
pub fn dominant_ls_stream(cfg: &SyntheticLsConfig, seed: u64) -> Result<(Vec<LsBatch>, ConditioningReport)> {
    for attempt in 0..64u64 {
        let batches = ls_stream(cfg, seed.wrapping_mul(1_000_003).wrapping_add(attempt))?;
        let mut s = LsStream::new(cfg.n, cfg.gamma, Depth::Frames(1))?;
        for b in &batches {
            s.ingest(b)?;
        }
        if let Some(r) = s.conditioning().filter(|r| r.dominant) {
            return Ok((batches, r));
        }
    }
    Err(Error::Argument("could not draw a dominant stream; reduce the coupling".into()))
}

/// `B_t = 0` and `A_t` with orthonormal columns.
pub fn decoupled_ls_stream(n: usize, m: usize, frames: usize, seed: u64) -> Result<Vec<LsBatch>> {
    let mut rng = super::rng(seed, 2);
    (0..frames)
        .map(|t| {
            let a = well_conditioned(&mut rng, m, n, (1.0, 1.0));
            let y = Vector::from_fn(m, |_, _| rng.sample::<f64, _>(StandardNormal));
            LsBatch::new(t, a, (t > 0).then(|| Mat::zeros(m, n)), y)
        })
        .collect()
}

/// Strongly coupled stream: `B_t = s·A_t` so that `‖E_t‖` is comparable to `H_t`.
pub fn coupled_ls_stream(n: usize, m: usize, frames: usize, strength: f64, seed: u64) -> Result<Vec<LsBatch>> {
    let mut rng = super::rng(seed, 3);
    (0..frames)
        .map(|t| {
            let a = well_conditioned(&mut rng, m, n, (1.0, 1.0));
            let b = (t > 0).then(|| &a * strength);
            let y = Vector::from_fn(m, |_, _| rng.sample::<f64, _>(StandardNormal));
            LsBatch::new(t, a, b, y)
        })
        .collect()
}

/// Smooth strongly convex losses: softplus of random affine maps plus a ridge.
pub fn softplus_losses(n: usize, m: usize, frames: usize, ridge: f64, coupling: f64, seed: u64) -> Result<Vec<SharedLoss>> {
    let mut rng = super::rng(seed, 4);
    let scale = 1.0 / (m as f64).sqrt();
    (0..frames)
        .map(|_| {
            let p = gaussian(&mut rng, m, n) * (coupling * scale);
            let c = gaussian(&mut rng, m, n) * scale;
            let y = Vector::from_fn(m, |_, _| rng.sample::<f64, _>(StandardNormal));
            SoftplusFrame::new(p, c, y, ridge).map(|f| Arc::new(f) as SharedLoss)
        })
        .collect()
}
