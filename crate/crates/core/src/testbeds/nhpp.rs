//! Intensity estimation for a non-homogeneous Poisson process with hat
//! (order-2 B-spline) bases, one bundle of `N` hats per frame.

use std::io::Write;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::convex_frames::{FrameLoss, HessianBlocks, SharedLoss};
use crate::dense::{Mat, Vector};
use crate::error::{Error, Result};
use crate::stream_ls::format_f64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplineNhppConfig {
    pub spline_order: usize,
    /// Splines per frame.
    pub n: usize,
    pub frame_length: f64,
    /// Number of loss terms; coefficients exist for frames `0..=frames`.
    pub frames: usize,
    pub rate_seed: u64,
    pub event_seed: u64,
    pub floor: f64,
    pub bumps: (usize, usize),
    /// Bump amplitudes as multiples of the floor.
    pub amplitude: (f64, f64),
    /// Bump widths as multiples of the frame length.
    pub width: (f64, f64),
    /// Declared coefficient box as multiples of `(floor, λ_max)`.
    pub box_factors: (f64, f64),
}

impl Default for SplineNhppConfig {
    fn default() -> Self {
        Self {
            spline_order: 2,
            n: 8,
            frame_length: 1.0,
            frames: 40,
            rate_seed: 0,
            event_seed: 0,
            floor: 70.0,
            bumps: (3, 6),
            amplitude: (0.5, 1.5),
            width: (0.5, 3.0),
            box_factors: (0.05, 4.0),
        }
    }
}

impl SplineNhppConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            rate_seed: seed,
            event_seed: seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.spline_order != 2 {
            return Err(Error::Argument(format!(
                "only order-2 splines are supported, got {}",
                self.spline_order
            )));
        }
        if self.n == 0 || self.frames == 0 || !(self.frame_length > 0.0) {
            return Err(Error::Argument("need n ≥ 1, frames ≥ 1 and a positive frame length".into()));
        }
        if !(self.floor > 0.0) || self.bumps.0 > self.bumps.1 {
            return Err(Error::Argument("need a positive floor and a valid bump count range".into()));
        }
        if !(self.amplitude.0 >= 0.0 && self.amplitude.0 <= self.amplitude.1) || !(self.width.0 > 0.0 && self.width.0 <= self.width.1) {
            return Err(Error::Argument("invalid bump amplitude or width range".into()));
        }
        if !(self.box_factors.0 > 0.0 && self.box_factors.1 > 0.0) {
            return Err(Error::Argument("box factors must be positive".into()));
        }
        Ok(())
    }

    /// Observation horizon `[−L, T·L)`.
    pub fn horizon(&self) -> (f64, f64) {
        (-self.frame_length, self.frames as f64 * self.frame_length)
    }

    /// Interval of loss `k ∈ 1..=T`; the first loss covers two frame lengths.
    pub fn interval(&self, k: usize) -> (f64, f64) {
        let l = self.frame_length;
        if k == 1 {
            (-l, l)
        } else {
            ((k - 1) as f64 * l, k as f64 * l)
        }
    }

    pub fn basis(&self) -> HatBasis {
        HatBasis {
            length: self.frame_length,
            n: self.n,
        }
    }
}

/// Floor plus Gaussian bumps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateModel {
    pub floor: f64,
    /// `(amplitude, center, width)`.
    pub bumps: Vec<(f64, f64, f64)>,
}

impl RateModel {
    pub fn constant(rate: f64) -> Self {
        Self {
            floor: rate,
            bumps: Vec::new(),
        }
    }

    pub fn random(cfg: &SplineNhppConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = super::rng(cfg.rate_seed, 20);
        let (lo, hi) = cfg.horizon();
        let count = rng.random_range(cfg.bumps.0..=cfg.bumps.1);
        let bumps = (0..count)
            .map(|_| {
                let a = cfg.floor * rng.random_range(cfg.amplitude.0..=cfg.amplitude.1);
                let c = rng.random_range(lo..hi);
                let w = cfg.frame_length * rng.random_range(cfg.width.0..=cfg.width.1);
                (a, c, w)
            })
            .collect();
        Ok(Self { floor: cfg.floor, bumps })
    }

    pub fn value(&self, t: f64) -> f64 {
        self.floor
            + self
                .bumps
                .iter()
                .map(|(a, c, w)| a * (-0.5 * ((t - c) / w).powi(2)).exp())
                .sum::<f64>()
    }

    pub fn upper_bound(&self) -> f64 {
        self.floor + self.bumps.iter().map(|b| b.0.max(0.0)).sum::<f64>()
    }
}

/// Lewis–Shedler thinning on `[start, end)`: candidates at rate `lambda_max`,
/// each kept with probability `λ(t)/lambda_max`.
pub fn simulate_nhpp(rate: impl Fn(f64) -> f64, lambda_max: f64, start: f64, end: f64, rng: &mut impl Rng) -> Result<Vec<f64>> {
    if !(lambda_max >= 0.0) || !lambda_max.is_finite() {
        return Err(Error::Argument(format!("invalid rate bound {lambda_max}")));
    }
    let mut events = Vec::new();
    if lambda_max == 0.0 {
        return Ok(events);
    }
    let gap = Exp::new(lambda_max).map_err(|e| Error::Argument(e.to_string()))?;
    let mut t = start;
    loop {
        t += gap.sample(rng);
        if t >= end {
            return Ok(events);
        }
        let lambda = rate(t);
        if lambda > lambda_max {
            return Err(Error::Bound(format!("λ({t}) = {lambda} exceeds λ_max = {lambda_max}")));
        }
        if rng.random::<f64>() * lambda_max < lambda {
            events.push(t);
        }
    }
}

/// Events of the configured rate model over the horizon.
pub fn simulate_events(cfg: &SplineNhppConfig, rate: &RateModel) -> Result<Vec<f64>> {
    let (lo, hi) = cfg.horizon();
    let mut rng = super::rng(cfg.event_seed, 21);
    simulate_nhpp(|t| rate.value(t), rate.upper_bound(), lo, hi, &mut rng)
}

/// `∫_lo^hi` of the hat with the given center and half-width.
pub fn hat_integral(center: f64, h: f64, lo: f64, hi: f64) -> f64 {
    let g = |t: f64| {
        let u = (t - center) / h;
        if u <= -1.0 {
            0.0
        } else if u <= 0.0 {
            0.5 * (u + 1.0) * (u + 1.0)
        } else if u <= 1.0 {
            1.0 - 0.5 * (1.0 - u) * (1.0 - u)
        } else {
            1.0
        }
    };
    if hi <= lo {
        0.0
    } else {
        h * (g(hi) - g(lo))
    }
}

pub fn hat(center: f64, h: f64, t: f64) -> f64 {
    (1.0 - (t - center).abs() / h).max(0.0)
}

/// Bundle `k` has hats of half-width `h = L/N` centered at `(k−1)L + (i+1)h`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HatBasis {
    length: f64,
    n: usize,
}

impl HatBasis {
    pub fn width(&self) -> f64 {
        self.length / self.n as f64
    }

    pub fn center(&self, k: usize, i: usize) -> f64 {
        (k as f64 - 1.0) * self.length + (i + 1) as f64 * self.width()
    }

    pub fn eval(&self, k: usize, t: f64) -> Vector {
        Vector::from_fn(self.n, |i, _| hat(self.center(k, i), self.width(), t))
    }

    pub fn integrals(&self, k: usize, lo: f64, hi: f64) -> Vector {
        Vector::from_fn(self.n, |i, _| hat_integral(self.center(k, i), self.width(), lo, hi))
    }

    /// `λ̂(t) = Σ_k ⟨x_k, ψ_k(t)⟩`.
    pub fn intensity(&self, coeffs: &[Vector], t: f64) -> f64 {
        let k = (t / self.length).floor() + 1.0;
        let k = if k < 0.0 { 0 } else { k as usize };
        (k.saturating_sub(1)..=k + 1)
            .filter(|j| *j < coeffs.len())
            .map(|j| self.eval(j, t).dot(&coeffs[j]))
            .sum()
    }
}

/// Events of one loss term and the basis data built from them.
#[derive(Clone, Debug, PartialEq)]
pub struct EventBatch {
    pub k: usize,
    pub events: Vec<f64>,
    /// `∫_{I_k} ψ_k`.
    pub a: Vector,
    /// `∫_{I_k} ψ_{k−1}`.
    pub b: Vector,
    /// Rows `ψ_k(τ_m)`.
    pub c: Mat,
    /// Rows `ψ_{k−1}(τ_m)`.
    pub d: Mat,
}

/// Sorts events into loss terms `1..=T` and evaluates the basis.
pub fn event_batches(cfg: &SplineNhppConfig, events: &[f64]) -> Result<Vec<EventBatch>> {
    cfg.validate()?;
    let (lo, hi) = cfg.horizon();
    let mut sorted = events.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut per: Vec<Vec<f64>> = vec![Vec::new(); cfg.frames];
    for &t in &sorted {
        if !(t >= lo && t < hi) {
            return Err(Error::Argument(format!("event at {t} outside the horizon [{lo}, {hi})")));
        }
        let k = ((t / cfg.frame_length).floor() as i64 + 1).max(1) as usize;
        per[k - 1].push(t);
    }
    let basis = cfg.basis();
    Ok(per
        .into_iter()
        .enumerate()
        .map(|(j, events)| {
            let k = j + 1;
            let (s, e) = cfg.interval(k);
            let mut c = Mat::zeros(events.len(), cfg.n);
            let mut d = Mat::zeros(events.len(), cfg.n);
            for (m, t) in events.iter().enumerate() {
                c.row_mut(m).copy_from(&basis.eval(k, *t).transpose());
                d.row_mut(m).copy_from(&basis.eval(k - 1, *t).transpose());
            }
            EventBatch {
                k,
                a: basis.integrals(k, s, e),
                b: basis.integrals(k - 1, s, e),
                c,
                d,
                events,
            }
        })
        .collect())
}

/// `⟨x_k, a⟩ + ⟨x_{k−1}, b⟩ − Σ_m log(⟨x_k, c_m⟩ + ⟨x_{k−1}, d_m⟩)`.
#[derive(Clone, Debug)]
pub struct NhppFrame {
    a: Vector,
    b: Vector,
    c: Mat,
    d: Mat,
    bounds: Option<(f64, f64)>,
    l: f64,
    start: f64,
}

impl NhppFrame {
    /// `bounds` is the componentwise box assumed by the declared constants.
    pub fn new(a: Vector, b: Vector, c: Mat, d: Mat, bounds: Option<(f64, f64)>) -> Result<Self> {
        let n = a.len();
        if b.len() != n || c.ncols() != n || d.shape() != c.shape() || n == 0 {
            return Err(Error::Dimension("a, b, c and d do not agree".into()));
        }
        if a.iter().chain(b.iter()).chain(c.iter()).chain(d.iter()).any(|v| !(*v >= 0.0)) {
            return Err(Error::Argument("basis data must be nonnegative".into()));
        }
        if let Some((lo, hi)) = bounds {
            if !(lo > 0.0 && lo < hi) {
                return Err(Error::Argument(format!("invalid box [{lo}, {hi}]")));
            }
        }
        let l = match bounds {
            Some((lo, _)) => (0..c.nrows())
                .map(|m| {
                    let sq = c.row(m).norm_squared() + d.row(m).norm_squared();
                    let sum = c.row(m).sum() + d.row(m).sum();
                    if sum > 0.0 {
                        sq / (lo * sum).powi(2)
                    } else {
                        0.0
                    }
                })
                .sum(),
            None => f64::INFINITY,
        };
        let mass = a.sum() + b.sum();
        let start = if c.nrows() > 0 && mass > 0.0 {
            c.nrows() as f64 / mass
        } else {
            1.0
        };
        Ok(Self {
            a,
            b,
            c,
            d,
            bounds,
            l,
            start,
        })
    }

    pub fn from_batch(batch: &EventBatch, bounds: Option<(f64, f64)>) -> Result<Self> {
        Self::new(batch.a.clone(), batch.b.clone(), batch.c.clone(), batch.d.clone(), bounds)
    }

    fn arguments(&self, prev: &Vector, cur: &Vector) -> Vector {
        &self.c * cur + &self.d * prev
    }
}

impl FrameLoss for NhppFrame {
    fn dim(&self) -> usize {
        self.a.len()
    }

    fn value(&self, prev: &Vector, cur: &Vector) -> f64 {
        let s = self.arguments(prev, cur);
        if s.iter().any(|v| !(*v > 0.0)) {
            return f64::INFINITY;
        }
        self.a.dot(cur) + self.b.dot(prev) - s.iter().map(|v| v.ln()).sum::<f64>()
    }

    fn gradient(&self, prev: &Vector, cur: &Vector) -> (Vector, Vector) {
        let inv = self.arguments(prev, cur).map(|v| 1.0 / v);
        (&self.b - self.d.transpose() * &inv, &self.a - self.c.transpose() * &inv)
    }

    fn hessian(&self, prev: &Vector, cur: &Vector) -> HessianBlocks {
        let w = self.arguments(prev, cur).map(|v| 1.0 / (v * v));
        let wc = Mat::from_fn(self.c.nrows(), self.c.ncols(), |i, j| w[i] * self.c[(i, j)]);
        let wd = Mat::from_fn(self.d.nrows(), self.d.ncols(), |i, j| w[i] * self.d[(i, j)]);
        HessianBlocks {
            prev_prev: self.d.transpose() * &wd,
            cross: self.c.transpose() * &wd,
            cur_cur: self.c.transpose() * &wc,
        }
    }

    fn curvature(&self) -> (f64, f64) {
        (0.0, self.l)
    }

    fn in_domain(&self, prev: &Vector, cur: &Vector) -> bool {
        self.arguments(prev, cur).iter().all(|v| *v > 0.0)
    }

    fn domain_box(&self) -> Option<(f64, f64)> {
        self.bounds
    }

    fn interior_point(&self) -> (Vector, Vector) {
        let n = self.dim();
        (Vector::from_element(n, self.start), Vector::from_element(n, self.start))
    }
}

/// A simulated intensity-estimation problem.
#[derive(Clone, Debug)]
pub struct NhppInstance {
    pub config: SplineNhppConfig,
    pub rate: RateModel,
    pub events: Vec<f64>,
    pub batches: Vec<EventBatch>,
    pub losses: Vec<SharedLoss>,
}

impl NhppInstance {
    pub fn events_per_frame(&self) -> f64 {
        let (lo, hi) = self.config.horizon();
        self.events.len() as f64 * self.config.frame_length / (hi - lo)
    }

    pub fn write_events_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["time", "value"])?;
        for t in &self.events {
            w.write_record([format_f64(*t), format_f64(self.rate.value(*t))])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Declared coefficient box for a rate model.
pub fn coefficient_box(cfg: &SplineNhppConfig, rate: &RateModel) -> (f64, f64) {
    (cfg.box_factors.0 * rate.floor, cfg.box_factors.1 * rate.upper_bound())
}

pub fn build_nhpp_losses(cfg: &SplineNhppConfig, rate: &RateModel, events: &[f64]) -> Result<(Vec<EventBatch>, Vec<SharedLoss>)> {
    let batches = event_batches(cfg, events)?;
    let bounds = coefficient_box(cfg, rate);
    let losses = batches
        .iter()
        .map(|b| NhppFrame::from_batch(b, Some(bounds)).map(|f| Arc::new(f) as SharedLoss))
        .collect::<Result<_>>()?;
    Ok((batches, losses))
}

pub fn nhpp_instance(cfg: &SplineNhppConfig) -> Result<NhppInstance> {
    let rate = RateModel::random(cfg)?;
    let events = simulate_events(cfg, &rate)?;
    let (batches, losses) = build_nhpp_losses(cfg, &rate, &events)?;
    Ok(NhppInstance {
        config: cfg.clone(),
        rate,
        events,
        batches,
        losses,
    })
}

/// `‖λ̂ − λ̂_ref‖ / ‖λ̂_ref‖` in `L²(lo, hi)`, exact for piecewise-linear intensities.
pub fn intensity_relative_l2(basis: &HatBasis, estimate: &[Vector], reference: &[Vector], lo: f64, hi: f64) -> f64 {
    let h = basis.width();
    let first = (lo / h).floor() as i64;
    let last = (hi / h).ceil() as i64;
    let node = 0.5 / 3f64.sqrt();
    let (mut num, mut den) = (0.0, 0.0);
    for j in first..last {
        let s = (j as f64 * h).max(lo);
        let e = ((j + 1) as f64 * h).min(hi);
        if e <= s {
            continue;
        }
        let mid = 0.5 * (s + e);
        for t in [mid - node * (e - s), mid + node * (e - s)] {
            let r = basis.intensity(reference, t);
            let d = basis.intensity(estimate, t) - r;
            num += 0.5 * (e - s) * d * d;
            den += 0.5 * (e - s) * r * r;
        }
    }
    if den == 0.0 {
        num.sqrt()
    } else {
        (num / den).sqrt()
    }
}
