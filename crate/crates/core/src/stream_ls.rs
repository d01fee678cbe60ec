//! Streaming regularized least squares.
//!
//! Frame `t` contributes `‖B_t x_{t−1} + A_t x_t − y_t‖² + γ‖x_t‖²` (frame 0
//! has no `B_0`). The normal equations are block tridiagonal with
//!
//! ```text
//! H_t = A_tᵀA_t + B_{t+1}ᵀB_{t+1} + γI,   E_t = A_{t+1}ᵀB_{t+1},   g_t = A_tᵀy_t + B_{t+1}ᵀy_{t+1}
//! ```
//!
//! where the `B_{T+1}` terms are absent for the newest frame. Each
//! [`LsStream::ingest`] finalizes the pivot of the previous frame, forms a
//! provisional pivot for the new one, and back-substitutes over the buffer.

use std::collections::VecDeque;
use std::io::Write;

use crate::blocktridiag::{BlockTridiagSystem, ConditioningReport, Depth, LuStreamCache};
use crate::dense::{self, Factored, Mat, Vector, CONDITION_CAP};
use crate::error::{Error, Result};
use crate::fit;

/// Measurements of one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct LsBatch {
    pub t: usize,
    pub y: Vector,
    pub a: Mat,
    /// Coupling to the previous frame; `None` at `t = 0` (and means zero otherwise).
    pub b: Option<Mat>,
}

impl LsBatch {
    pub fn new(t: usize, a: Mat, b: Option<Mat>, y: Vector) -> Result<Self> {
        if a.nrows() != y.len() {
            return Err(Error::Dimension(format!("A_{t} has {} rows but y_{t} has {}", a.nrows(), y.len())));
        }
        if let Some(b) = &b {
            if b.shape() != a.shape() {
                return Err(Error::Dimension(format!("B_{t} is {:?} but A_{t} is {:?}", b.shape(), a.shape())));
            }
        }
        if t == 0 && b.is_some() {
            return Err(Error::Argument("frame 0 has no previous frame to couple to".into()));
        }
        Ok(Self { t, y, a, b })
    }

    pub fn rows(&self) -> usize {
        self.y.len()
    }

    pub fn cols(&self) -> usize {
        self.a.ncols()
    }
}

/// One backtracking update `‖x̂_{T−lag|T+1} − x̂_{T−lag|T}‖`, recorded at append `T + 1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UpdateRecord {
    pub append: usize,
    pub lag: usize,
    pub magnitude: f64,
}

/// Fitted geometric decay of backtracking updates.
#[derive(Clone, Debug, PartialEq)]
pub struct DecayFit {
    pub lags: Vec<usize>,
    /// Median update magnitude per lag.
    pub magnitudes: Vec<f64>,
    pub fitted_ratio: f64,
    /// `θ/(1 − ε★)` of the running conditioning report, when dominant.
    pub bound_ratio: Option<f64>,
}

/// Streaming least-squares state with a full or truncated buffer.
pub struct LsStream {
    n: usize,
    gamma: f64,
    buffer: Depth,
    cache: LuStreamCache,
    provisional: Option<(Mat, Vector, Mat)>,
    e_prev: Option<Mat>,
    live: VecDeque<Vector>,
    live_start: usize,
    archive: Vec<Vector>,
    sink: Option<csv::Writer<Box<dyn Write>>>,
    updates: Vec<UpdateRecord>,
    history: Option<Vec<Vec<Vector>>>,
    eig_lo: f64,
    eig_hi: f64,
    coupling_max: f64,
    rhs_max: f64,
    peak_live: usize,
}

impl std::fmt::Debug for LsStream {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LsStream")
            .field("n", &self.n)
            .field("gamma", &self.gamma)
            .field("buffer", &self.buffer)
            .field("frames", &self.frames())
            .finish_non_exhaustive()
    }
}

impl LsStream {
    pub fn new(n: usize, gamma: f64, buffer: Depth) -> Result<Self> {
        if n == 0 {
            return Err(Error::Dimension("frame size must be positive".into()));
        }
        if !(gamma >= 0.0) {
            return Err(Error::Argument(format!("gamma must be nonnegative, got {gamma}")));
        }
        if buffer == Depth::Frames(0) {
            return Err(Error::Argument("buffer must hold at least one frame".into()));
        }
        let cache = match buffer {
            Depth::Full => LuStreamCache::new(n),
            Depth::Frames(b) => LuStreamCache::new(n).with_retention(b + 1),
        };
        Ok(Self {
            n,
            gamma,
            buffer,
            cache,
            provisional: None,
            e_prev: None,
            live: VecDeque::new(),
            live_start: 0,
            archive: Vec::new(),
            sink: None,
            updates: Vec::new(),
            history: None,
            eig_lo: f64::INFINITY,
            eig_hi: f64::NEG_INFINITY,
            coupling_max: 0.0,
            rhs_max: 0.0,
            peak_live: 0,
        })
    }

    /// Spools every archived frame to `writer` as `frame,component,value` rows.
    pub fn with_archive_sink<W: Write + 'static>(mut self, writer: W) -> Result<Self> {
        let mut w = csv::Writer::from_writer(Box::new(writer) as Box<dyn Write>);
        w.write_record(["frame", "component", "value"])?;
        self.sink = Some(w);
        Ok(self)
    }

    /// Keeps a snapshot of the live estimates after every append (for lag tables).
    pub fn with_history(mut self) -> Self {
        self.history = Some(Vec::new());
        self
    }

    pub fn block_size(&self) -> usize {
        self.n
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn buffer(&self) -> Depth {
        self.buffer
    }

    /// Number of frames ingested.
    pub fn frames(&self) -> usize {
        self.live_start + self.live.len()
    }

    /// Frozen estimates `z★_t`, oldest first.
    pub fn archive(&self) -> &[Vector] {
        &self.archive
    }

    /// Current estimates of the frames still in the buffer, oldest first.
    pub fn live(&self) -> impl ExactSizeIterator<Item = &Vector> {
        self.live.iter()
    }

    /// Index of the oldest live frame.
    pub fn live_start(&self) -> usize {
        self.live_start
    }

    /// Largest number of live frames held at once.
    pub fn peak_live(&self) -> usize {
        self.peak_live
    }

    /// Archived frames followed by the current live estimates.
    pub fn estimates(&self) -> Vec<Vector> {
        self.archive.iter().chain(self.live.iter()).cloned().collect()
    }

    pub fn updates(&self) -> &[UpdateRecord] {
        &self.updates
    }

    /// Live estimates after each append, when history is enabled.
    pub fn history(&self) -> Option<&[Vec<Vector>]> {
        self.history.as_deref()
    }

    pub fn cache(&self) -> &LuStreamCache {
        &self.cache
    }

    /// Largest right-hand-side block norm seen (finalized or provisional).
    pub fn rhs_bound(&self) -> f64 {
        self.rhs_max
    }

    /// Conditioning constants covering every system solved so far.
    pub fn conditioning(&self) -> Option<ConditioningReport> {
        (self.frames() > 0).then(|| ConditioningReport::from_parts(&[(self.eig_lo, self.eig_hi)], &[self.coupling_max]))
    }

    fn track_block(&mut self, h: &Mat, g: &Vector) {
        let (lo, hi) = dense::sym_extremes(h);
        self.eig_lo = self.eig_lo.min(lo);
        self.eig_hi = self.eig_hi.max(hi);
        self.rhs_max = self.rhs_max.max(g.norm());
    }

    /// Consumes the next frame's measurements.
    pub fn ingest(&mut self, batch: &LsBatch) -> Result<()> {
        let t = self.frames();
        if batch.t != t {
            return Err(Error::Argument(format!("expected frame {t}, got frame {}", batch.t)));
        }
        if batch.cols() != self.n {
            return Err(Error::Dimension(format!(
                "frame {t} has {} columns, expected {}",
                batch.cols(),
                self.n
            )));
        }
        let a = &batch.a;
        let gamma_i = Mat::identity(self.n, self.n) * self.gamma;
        let g_new = a.transpose() * &batch.y;

        let (q_new, newest) = if t == 0 {
            if batch.b.is_some() {
                return Err(Error::Argument("frame 0 has no previous frame to couple to".into()));
            }
            let q = a.transpose() * a + gamma_i;
            let fac = factor(&q, 0)?;
            let x = fac.solve_vec(&g_new);
            (q, x)
        } else {
            let b = batch.b.clone().unwrap_or_else(|| Mat::zeros(a.nrows(), self.n));
            let (q_prov, g_prov, h_prov) = self.provisional.take().expect("provisional pivot of the previous frame");
            let btb = b.transpose() * &b;
            let q_prev = q_prov + &btb;
            let g_prev = g_prov + b.transpose() * &batch.y;
            let h_prev = h_prov + btb;
            self.track_block(&h_prev, &g_prev);
            self.cache.push_pivot(q_prev)?;
            self.cache.forward_step(&g_prev, self.e_prev.as_ref())?;

            let e = a.transpose() * &b;
            self.coupling_max = self.coupling_max.max(dense::spectral_norm(&e));
            let u = self.cache.schur_update(&e)?.clone();
            let q = a.transpose() * a - &e * &u + gamma_i;
            let fac = factor(&q, t)?;
            let v_prev = self.cache.v(t - 1).expect("forward variable just computed");
            let x = fac.solve_vec(&(&g_new - &e * v_prev));
            self.e_prev = Some(e);
            (q, x)
        };
        let h_new = a.transpose() * a + Mat::identity(self.n, self.n) * self.gamma;
        self.track_block(&h_new, &g_new);
        self.provisional = Some((q_new, g_new, h_new));

        // Back-substitute over the buffer.
        let depth = match self.buffer {
            Depth::Full => t,
            Depth::Frames(b) => (b - 1).min(t),
        };
        let mut next = newest.clone();
        let mut revised = Vec::with_capacity(depth);
        for l in 1..=depth {
            let s = t - l;
            let v = self.cache.v(s).expect("retained forward variable");
            let u = self.cache.u(s).expect("retained U block");
            next = v - u * &next;
            revised.push(next.clone());
        }
        for (l, x) in revised.into_iter().enumerate() {
            let s = t - 1 - l;
            let slot = &mut self.live[s - self.live_start];
            self.updates.push(UpdateRecord {
                append: t,
                lag: l,
                magnitude: (&x - &*slot).norm(),
            });
            *slot = x;
        }
        self.live.push_back(newest);
        if let Depth::Frames(b) = self.buffer {
            while self.live.len() > b {
                self.evict()?;
            }
        }
        self.peak_live = self.peak_live.max(self.live.len());
        if let Some(h) = &mut self.history {
            h.push(self.live.iter().cloned().collect());
        }
        Ok(())
    }

    fn evict(&mut self) -> Result<()> {
        if let Some(x) = self.live.pop_front() {
            let frame = self.live_start;
            if let Some(w) = &mut self.sink {
                for (i, v) in x.iter().enumerate() {
                    w.write_record([frame.to_string(), i.to_string(), format_f64(*v)])?;
                }
            }
            self.archive.push(x);
            self.live_start += 1;
        }
        Ok(())
    }

    /// Moves every live frame to the archive (end of stream) and flushes the sink.
    pub fn finish(&mut self) -> Result<()> {
        while !self.live.is_empty() {
            self.evict()?;
        }
        if let Some(w) = &mut self.sink {
            w.flush()?;
        }
        Ok(())
    }

    /// Median backtracking update per lag and its fitted geometric ratio.
    pub fn decay_profile(&self) -> Result<DecayFit> {
        if !self.buffer.is_full() {
            return Err(Error::Argument("decay profile needs a full-buffer run".into()));
        }
        if self.frames() < 10 {
            return Err(Error::Argument(format!(
                "decay profile needs at least 10 appends, have {}",
                self.frames()
            )));
        }
        let max_lag = self.updates.iter().map(|r| r.lag).max().unwrap_or(0);
        let mut by_lag = vec![Vec::new(); max_lag + 1];
        for r in &self.updates {
            by_lag[r.lag].push(r.magnitude);
        }
        let magnitudes: Vec<f64> = by_lag.iter().map(|v| fit::median(v).unwrap_or(0.0)).collect();
        let fitted_ratio = fit::geometric_ratio(&magnitudes);
        let bound_ratio = self.conditioning().filter(|r| r.dominant).and_then(|r| r.rho);
        Ok(DecayFit {
            lags: (0..=max_lag).collect(),
            magnitudes,
            fitted_ratio,
            bound_ratio,
        })
    }

    /// Writes the update log as `append_T,lag,magnitude`.
    pub fn write_decay_log<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["append_T", "lag", "magnitude"])?;
        for r in &self.updates {
            w.write_record([r.append.to_string(), r.lag.to_string(), format_f64(r.magnitude)])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn factor(q: &Mat, frame: usize) -> Result<Factored> {
    let fac = Factored::new(q).ok_or(Error::Breakdown {
        frame,
        condition: f64::INFINITY,
    })?;
    if fac.condition() > CONDITION_CAP {
        return Err(Error::Breakdown {
            frame,
            condition: fac.condition(),
        });
    }
    Ok(fac)
}

/// Round-trip decimal form with 17 significant digits.
pub fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Runs a whole stream and returns the final estimates of every frame.
pub fn solve_stream(n: usize, gamma: f64, buffer: Depth, batches: &[LsBatch]) -> Result<Vec<Vector>> {
    let mut s = LsStream::new(n, gamma, buffer)?;
    for b in batches {
        s.ingest(b)?;
    }
    s.finish()?;
    Ok(s.estimates())
}

/// The block-tridiagonal normal equations of a complete stream.
pub fn normal_equations(n: usize, gamma: f64, batches: &[LsBatch]) -> Result<BlockTridiagSystem> {
    if batches.is_empty() {
        return Err(Error::Argument("empty stream".into()));
    }
    let count = batches.len();
    let mut diag = Vec::with_capacity(count);
    let mut offdiag = Vec::with_capacity(count - 1);
    let mut rhs = Vec::with_capacity(count);
    for (t, bt) in batches.iter().enumerate() {
        if bt.t != t || bt.cols() != n {
            return Err(Error::Argument(format!("batch {t} is out of order or has the wrong width")));
        }
        let mut h = bt.a.transpose() * &bt.a + Mat::identity(n, n) * gamma;
        let mut g = bt.a.transpose() * &bt.y;
        if let Some(next) = batches.get(t + 1) {
            if let Some(b) = &next.b {
                h += b.transpose() * b;
                g += b.transpose() * &next.y;
                offdiag.push(next.a.transpose() * b);
            } else {
                offdiag.push(Mat::zeros(n, n));
            }
        }
        diag.push(h);
        rhs.push(g);
    }
    BlockTridiagSystem::new(n, diag, offdiag, rhs)
}

/// Per-frame distance `‖x★_t − z★_t‖` between a reference run and a truncated run.
pub fn truncation_error(reference: &[Vector], truncated: &[Vector]) -> Result<Vec<f64>> {
    if reference.len() != truncated.len() {
        return Err(Error::Argument(format!(
            "runs cover {} and {} frames",
            reference.len(),
            truncated.len()
        )));
    }
    reference
        .iter()
        .zip(truncated)
        .enumerate()
        .map(|(t, (x, z))| {
            if x.len() != z.len() {
                Err(Error::Argument(format!("frame {t} sizes differ")))
            } else {
                Ok((x - z).norm())
            }
        })
        .collect()
}

/// Maximum truncation error per buffer size and the slope of its logarithm.
#[derive(Clone, Debug, PartialEq)]
pub struct TruncationSweep {
    pub buffers: Vec<usize>,
    pub max_errors: Vec<f64>,
    /// Slope of `ln(max error)` against `B` over the nonzero errors.
    pub slope: Option<f64>,
}

/// Runs the stream once per buffer size and compares against the full-buffer run.
pub fn truncation_sweep(n: usize, gamma: f64, batches: &[LsBatch], buffers: &[usize]) -> Result<TruncationSweep> {
    let reference = solve_stream(n, gamma, Depth::Full, batches)?;
    let mut max_errors = Vec::with_capacity(buffers.len());
    for &b in buffers {
        let z = solve_stream(n, gamma, Depth::Frames(b), batches)?;
        max_errors.push(truncation_error(&reference, &z)?.into_iter().fold(0.0, f64::max));
    }
    let xs: Vec<f64> = buffers.iter().map(|&b| b as f64).collect();
    let slope = fit::log_slope(&xs, &max_errors);
    Ok(TruncationSweep {
        buffers: buffers.to_vec(),
        max_errors,
        slope,
    })
}

/// `log₁₀` relative errors of intermediate estimates against final ones.
///
/// `rows[k][j]` is `log₁₀(‖x̂_{j|k} − x★_j‖ / ‖x★_j‖)` for `j ≤ k` and `None`
/// otherwise. Values are clamped below at `-17`.
#[derive(Clone, Debug, PartialEq)]
pub struct LagTable {
    pub rows: Vec<Vec<Option<f64>>>,
}

pub const LAG_TABLE_FLOOR: f64 = -17.0;

impl LagTable {
    /// Builds the table from full-buffer history and the final estimates.
    pub fn from_history(history: &[Vec<Vector>], reference: &[Vector]) -> Result<Self> {
        let frames = reference.len();
        if history.len() != frames {
            return Err(Error::Argument(format!(
                "history has {} appends for {frames} frames",
                history.len()
            )));
        }
        let mut rows = Vec::with_capacity(frames);
        for (k, snap) in history.iter().enumerate() {
            if snap.len() != k + 1 {
                return Err(Error::Argument("lag table needs a full-buffer history".into()));
            }
            let row = (0..frames)
                .map(|j| {
                    (j <= k).then(|| {
                        let scale = reference[j].norm();
                        let err = (&snap[j] - &reference[j]).norm();
                        let rel = if scale > 0.0 { err / scale } else { err };
                        rel.log10().max(LAG_TABLE_FLOOR)
                    })
                })
                .collect();
            rows.push(row);
        }
        Ok(Self { rows })
    }

    /// Entries `(k, j)` with `k − j = lag`, excluding the final row (the reference itself).
    pub fn lag_entries(&self, lag: usize) -> Vec<f64> {
        (lag..self.rows.len().saturating_sub(1))
            .filter_map(|k| self.rows[k][k - lag])
            .collect()
    }

    /// Median over the entries at `lag`.
    pub fn lag_median(&self, lag: usize) -> Option<f64> {
        fit::median(&self.lag_entries(lag))
    }

    /// True when every column is nonincreasing from the diagonal down.
    pub fn columns_nonincreasing(&self, slack: f64) -> bool {
        let frames = self.rows.len();
        (0..frames).all(|j| {
            (j + 1..frames).all(|k| match (self.rows[k - 1][j], self.rows[k][j]) {
                (Some(above), Some(here)) => here <= above + slack,
                _ => true,
            })
        })
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let frames = self.rows.len();
        let mut header = vec!["k".to_string()];
        header.extend((0..frames).map(|j| j.to_string()));
        w.write_record(&header)?;
        for (k, row) in self.rows.iter().enumerate() {
            let mut rec = vec![k.to_string()];
            rec.extend(row.iter().map(|e| e.map_or_else(|| "-".to_string(), format_f64)));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Aligned text rendering with two decimals.
    pub fn to_text(&self) -> String {
        let mut out = String::from("   k |");
        for j in 0..self.rows.len() {
            out.push_str(&format!("{j:>7}"));
        }
        out.push('\n');
        for (k, row) in self.rows.iter().enumerate() {
            out.push_str(&format!("{k:>4} |"));
            for e in row {
                match e {
                    Some(v) => out.push_str(&format!("{v:>7.2}")),
                    None => out.push_str(&format!("{:>7}", "-")),
                }
            }
            out.push('\n');
        }
        out
    }
}
