//! Level-crossing sampling of a random bandlimited signal, reconstructed in a
//! lapped orthogonal (windowed cosine-IV) basis.

use std::f64::consts::PI;
use std::io::Write;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dense::{Mat, Vector};
use crate::error::{Error, Result};
use crate::stream_ls::{format_f64, LsBatch};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LotConfig {
    /// Basis functions per frame.
    pub n: usize,
    pub eta: f64,
    pub frames: usize,
    /// Crossing levels, strictly increasing.
    pub levels: Vec<f64>,
    pub signal_seed: u64,
    pub sinc_spacing: f64,
    pub sinc_window: (f64, f64),
    pub sample_window: (f64, f64),
    pub grid_step: f64,
    pub time_tol: f64,
    pub gamma: f64,
}

impl Default for LotConfig {
    fn default() -> Self {
        Self {
            n: 75,
            eta: 0.25,
            frames: 16,
            levels: (0..16).map(|k| -2.5 + k as f64 * 5.0 / 16.0).collect(),
            signal_seed: 0,
            sinc_spacing: 1.0 / 64.0,
            sinc_window: (-5.0, 21.0),
            sample_window: (-0.25, 16.25),
            grid_step: 1e-3,
            time_tol: 1e-10,
            gamma: 1e-3,
        }
    }
}

impl LotConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            signal_seed: seed,
            ..Self::default()
        }
    }

    pub fn frame_length(&self) -> f64 {
        (self.sample_window.1 - self.sample_window.0) / self.frames as f64
    }

    /// Left edge `a_k` of frame `k`.
    pub fn edge(&self, k: usize) -> f64 {
        self.sample_window.0 + k as f64 * self.frame_length()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.frames == 0 {
            return Err(Error::Argument("need at least one frame and one basis function".into()));
        }
        if !(self.eta > 0.0 && self.eta <= 0.5) {
            return Err(Error::Argument(format!("eta = {} outside (0, 1/2]", self.eta)));
        }
        if self.frame_length() < 2.0 * self.eta {
            return Err(Error::Argument("frames shorter than two transition widths".into()));
        }
        if self.levels.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Argument("levels must be strictly increasing".into()));
        }
        if !(self.sinc_spacing > 0.0 && self.grid_step > 0.0 && self.time_tol > 0.0) {
            return Err(Error::Argument("spacings and tolerances must be positive".into()));
        }
        if !(self.gamma >= 0.0) {
            return Err(Error::Argument("gamma must be nonnegative".into()));
        }
        Ok(())
    }
}

/// `x(t) = Σ_j h_j sinc((t − t_j)/s)` with nodes `t_j = t_0 + j s`.
#[derive(Clone, Debug, PartialEq)]
pub struct BandlimitedSignal {
    start: f64,
    spacing: f64,
    heights: Vec<f64>,
}

impl BandlimitedSignal {
    pub fn new(start: f64, spacing: f64, heights: Vec<f64>) -> Self {
        Self { start, spacing, heights }
    }

    pub fn random(cfg: &LotConfig) -> Self {
        let (lo, hi) = cfg.sinc_window;
        let count = ((hi - lo) / cfg.sinc_spacing).round() as usize + 1;
        let mut rng = super::rng(cfg.signal_seed, 10);
        let heights = (0..count).map(|_| StandardNormal.sample(&mut rng)).collect();
        Self::new(lo, cfg.sinc_spacing, heights)
    }

    pub fn heights(&self) -> &[f64] {
        &self.heights
    }

    fn direct(&self, u: f64) -> f64 {
        self.heights
            .iter()
            .enumerate()
            .map(|(j, h)| {
                let z = PI * (u - j as f64);
                if z == 0.0 {
                    *h
                } else {
                    h * z.sin() / z
                }
            })
            .sum()
    }

    pub fn value(&self, t: f64) -> f64 {
        // sin(π(u − j)) = (−1)^j sin(πu), so one sine serves every node.
        let u = (t - self.start) / self.spacing;
        if (u - u.round()).abs() < 1e-6 {
            return self.direct(u);
        }
        let s = (PI * u).sin() / PI;
        let sum: f64 = self
            .heights
            .iter()
            .enumerate()
            .map(|(j, h)| if j % 2 == 0 { h / (u - j as f64) } else { -h / (u - j as f64) })
            .sum();
        s * sum
    }
}

/// Level-crossing times and the level crossed.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Crossings {
    pub times: Vec<f64>,
    pub levels: Vec<f64>,
    /// Grid points that touch a level without crossing it.
    pub skipped: usize,
}

impl Crossings {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["time", "value"])?;
        for (t, v) in self.times.iter().zip(&self.levels) {
            w.write_record([format_f64(*t), format_f64(*v)])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn bisect(f: &impl Fn(f64) -> f64, level: f64, mut lo: f64, mut hi: f64, tol: f64) -> f64 {
    let below = f(lo) < level;
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        let v = f(mid);
        if v == level {
            return mid;
        }
        if (v < level) == below {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// All crossings of `levels` by `f` on `[start, end]`: sign changes on a grid,
/// refined by bisection to `tol`. Sorted by time.
pub fn find_crossings(f: impl Fn(f64) -> f64, start: f64, end: f64, step: f64, levels: &[f64], tol: f64) -> Crossings {
    let cells = ((end - start) / step).ceil().max(1.0) as usize;
    let grid: Vec<f64> = (0..=cells).map(|i| (start + i as f64 * step).min(end)).collect();
    let values: Vec<f64> = grid.iter().map(|t| f(*t)).collect();
    let mut found: Vec<(f64, f64)> = Vec::new();
    let mut skipped = 0;
    for &level in levels {
        let d: Vec<f64> = values.iter().map(|v| v - level).collect();
        for i in 0..cells {
            if d[i] * d[i + 1] < 0.0 {
                found.push((bisect(&f, level, grid[i], grid[i + 1], tol), level));
            } else if d[i + 1] == 0.0 && i + 1 < cells {
                if d[i] * d[i + 2] < 0.0 {
                    found.push((grid[i + 1], level));
                } else {
                    skipped += 1;
                }
            }
        }
    }
    if skipped > 0 {
        log::warn!("{skipped} level touches without a sign change were skipped");
    }
    found.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (times, levels) = found.into_iter().unzip();
    Crossings { times, levels, skipped }
}

/// Rising cut `r` with `r(s)² + r(−s)² = 1`, `r = 0` for `s ≤ −1` and `1` for `s ≥ 1`.
pub fn rising_cut(s: f64) -> f64 {
    if s <= -1.0 {
        0.0
    } else if s >= 1.0 {
        1.0
    } else {
        (PI / 4.0 * (1.0 + (PI * s / 2.0).sin())).sin()
    }
}

/// The windowed cosine-IV basis of a [`LotConfig`] on the whole line.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LotBasis {
    origin: f64,
    length: f64,
    eta: f64,
    n: usize,
}

impl LotBasis {
    pub fn new(cfg: &LotConfig) -> Self {
        Self {
            origin: cfg.sample_window.0,
            length: cfg.frame_length(),
            eta: cfg.eta,
            n: cfg.n,
        }
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn edge(&self, k: i64) -> f64 {
        self.origin + k as f64 * self.length
    }

    /// Closed support `[a_k − η, a_{k+1} + η]` of bundle `k`.
    pub fn support(&self, k: i64) -> (f64, f64) {
        (self.edge(k) - self.eta, self.edge(k + 1) + self.eta)
    }

    pub fn window(&self, k: i64, t: f64) -> f64 {
        rising_cut((t - self.edge(k)) / self.eta) * rising_cut((self.edge(k + 1) - t) / self.eta)
    }

    /// `ψ_{k,n}(t)` for all `n`; exactly zero outside the support.
    pub fn eval(&self, k: i64, t: f64) -> Vector {
        let w = self.window(k, t);
        if w == 0.0 {
            return Vector::zeros(self.n);
        }
        let scale = w * (2.0 / self.length).sqrt();
        let u = (t - self.edge(k)) / self.length;
        Vector::from_fn(self.n, |i, _| scale * (PI * (i as f64 + 0.5) * u).cos())
    }

    /// `Σ_k ⟨x_k, ψ_k(t)⟩` over the supplied frames.
    pub fn synthesize(&self, coeffs: &[Vector], t: f64) -> f64 {
        let k = ((t - self.origin) / self.length).floor() as i64;
        (k - 1..=k + 1)
            .filter(|j| *j >= 0 && (*j as usize) < coeffs.len())
            .map(|j| self.eval(j, t).dot(&coeffs[j as usize]))
            .sum()
    }
}

/// A generated level-crossing problem.
#[derive(Clone, Debug)]
pub struct LotStream {
    pub config: LotConfig,
    pub signal: BandlimitedSignal,
    pub crossings: Crossings,
    pub batches: Vec<LsBatch>,
}

/// Packs samples `(t_m, y_m)` into per-frame batches: frame `k` holds the samples in
/// `[a_k − η, a_{k+1} − η)`, with `A_k` the bundle-`k` basis and `B_k` the bundle-`k−1` basis.
pub fn pack_batches(cfg: &LotConfig, times: &[f64], values: &[f64]) -> Result<Vec<LsBatch>> {
    let basis = LotBasis::new(cfg);
    let mut rows: Vec<Vec<usize>> = vec![Vec::new(); cfg.frames];
    let (lo, hi) = cfg.sample_window;
    for (m, &t) in times.iter().enumerate() {
        if !(lo..=hi).contains(&t) {
            return Err(Error::Argument(format!("sample time {t} outside the sample window")));
        }
        let k = ((t - lo + cfg.eta) / cfg.frame_length()).floor() as usize;
        rows[k.min(cfg.frames - 1)].push(m);
    }
    rows.into_iter()
        .enumerate()
        .map(|(k, idx)| {
            let mut a = Mat::zeros(idx.len(), cfg.n);
            let mut b = Mat::zeros(idx.len(), cfg.n);
            for (r, &m) in idx.iter().enumerate() {
                a.row_mut(r).copy_from(&basis.eval(k as i64, times[m]).transpose());
                if k > 0 {
                    b.row_mut(r).copy_from(&basis.eval(k as i64 - 1, times[m]).transpose());
                }
            }
            let y = Vector::from_fn(idx.len(), |r, _| values[idx[r]]);
            LsBatch::new(k, a, (k > 0).then_some(b), y)
        })
        .collect()
}

/// Crossings of an arbitrary signal packed into batches.
pub fn lot_stream_for(cfg: &LotConfig, signal: impl Fn(f64) -> f64) -> Result<(Crossings, Vec<LsBatch>)> {
    cfg.validate()?;
    let (lo, hi) = cfg.sample_window;
    let crossings = find_crossings(signal, lo, hi, cfg.grid_step, &cfg.levels, cfg.time_tol);
    let batches = pack_batches(cfg, &crossings.times, &crossings.levels)?;
    Ok((crossings, batches))
}

pub fn generate_lot_stream(cfg: &LotConfig) -> Result<LotStream> {
    cfg.validate()?;
    let signal = BandlimitedSignal::random(cfg);
    let (crossings, batches) = lot_stream_for(cfg, |t| signal.value(t))?;
    Ok(LotStream {
        config: cfg.clone(),
        signal,
        crossings,
        batches,
    })
}

const GAUSS5: [(f64, f64); 5] = [
    (0.0, 0.568_888_888_888_888_9),
    (-0.538_469_310_105_683_1, 0.478_628_670_499_366_47),
    (0.538_469_310_105_683_1, 0.478_628_670_499_366_47),
    (-0.906_179_845_938_664, 0.236_926_885_056_189_08),
    (0.906_179_845_938_664, 0.236_926_885_056_189_08),
];

/// Composite 5-point Gauss–Legendre nodes on `[lo, hi]` with panel breaks at `breaks`.
fn quadrature(lo: f64, hi: f64, breaks: &[f64], panels_per_piece: usize) -> Vec<(f64, f64)> {
    let mut cuts: Vec<f64> = breaks.iter().copied().filter(|b| *b > lo && *b < hi).collect();
    cuts.push(lo);
    cuts.push(hi);
    cuts.sort_by(f64::total_cmp);
    let mut out = Vec::new();
    for piece in cuts.windows(2) {
        let h = (piece[1] - piece[0]) / panels_per_piece as f64;
        for p in 0..panels_per_piece {
            let mid = piece[0] + (p as f64 + 0.5) * h;
            out.extend(GAUSS5.iter().map(|(x, w)| (mid + 0.5 * h * x, 0.5 * h * w)));
        }
    }
    out
}

/// Max `|⟨ψ_i, ψ_j⟩ − δ_ij|` over pairs within each frame and across adjacent frames.
pub fn lot_basis_orthonormality(cfg: &LotConfig) -> Result<f64> {
    cfg.validate()?;
    let basis = LotBasis::new(cfg);
    let n = cfg.n;
    let pairs = cfg.frames.saturating_sub(1).max(1);
    let mut worst: f64 = 0.0;
    for k in 0..pairs as i64 {
        let lo = basis.support(k).0;
        let hi = basis.support(k + 1).1;
        let breaks: Vec<f64> = (k..=k + 2)
            .flat_map(|j| [basis.edge(j) - cfg.eta, basis.edge(j) + cfg.eta])
            .collect();
        let nodes = quadrature(lo, hi, &breaks, 400);
        let mut p0 = Mat::zeros(nodes.len(), n);
        let mut p1 = Mat::zeros(nodes.len(), n);
        for (r, (t, w)) in nodes.iter().enumerate() {
            let sw = w.sqrt();
            p0.row_mut(r).copy_from(&(basis.eval(k, *t) * sw).transpose());
            p1.row_mut(r).copy_from(&(basis.eval(k + 1, *t) * sw).transpose());
        }
        let id = Mat::identity(n, n);
        let g00 = p0.transpose() * &p0 - &id;
        let g11 = p1.transpose() * &p1 - &id;
        let g01 = p0.transpose() * &p1;
        for g in [g00, g11, g01] {
            worst = worst.max(g.amax());
        }
    }
    Ok(worst)
}
