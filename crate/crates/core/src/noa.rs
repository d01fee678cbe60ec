//! Newton online algorithm.
//!
//! At time step `T` the newest loss `f_T` is appended, a block for `x_T` is
//! initialized, and damped Newton is run on the window objective
//!
//! ```text
//! J_{T_B}(z_{T−B+1}, …, z_T) = Σ_{t=T−B+1}^T f_t(z_{t−1}, z_t),   z_{T−B} = z★_{T−B} fixed
//! ```
//!
//! Blocks that leave the window are frozen into the archive; frames outside
//! the window are never revisited.

use std::io::Write;

use crate::blocktridiag::{Depth, LuStreamCache};
use crate::convex_frames::{isolated_minimizer, tail_minimizer, LogBarrier, NewtonIter, NewtonOptions, SharedLoss, WindowObjective};
use crate::dense::Vector;
use crate::error::{Error, Result};
use crate::stream_ls::{format_f64, UpdateRecord};

/// How the block of a new frame is initialized before the Newton iterations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum FrameInit {
    /// Second block of the isolated minimizer of `f_T`.
    #[default]
    Isolated,
    /// `argmin_w f_T(ẑ_{T−1}, w)`.
    TailMin,
}

/// Path-following schedule for the log barrier `−(1/μ) Σ log x`.
///
/// `μ` starts at `start` and is multiplied by `factor` until `dim/μ < gap`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BarrierSchedule {
    pub start: f64,
    pub factor: f64,
    pub gap: f64,
    pub dim: usize,
}

impl BarrierSchedule {
    /// Default schedule for `buffer` blocks of size `n`.
    pub fn for_window(buffer: usize, n: usize) -> Self {
        Self {
            start: 1.0,
            factor: 10.0,
            gap: 1e-6,
            dim: buffer * n,
        }
    }

    /// The sequence of `μ` values, ending with the first that meets the gap.
    pub fn stages(&self) -> Vec<f64> {
        let mut mu = self.start;
        let mut out = vec![mu];
        while self.dim as f64 / mu >= self.gap {
            mu *= self.factor;
            out.push(mu);
        }
        out
    }

    pub fn final_mu(&self) -> f64 {
        *self.stages().last().expect("at least one stage")
    }

    /// Barrier weight `1/μ` of the final stage.
    pub fn final_weight(&self) -> f64 {
        1.0 / self.final_mu()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoaConfig {
    pub buffer: Depth,
    /// Stop when `‖F‖² < eps0`.
    pub eps0: f64,
    pub max_newton_iters: usize,
    pub armijo: f64,
    pub backtrack: f64,
    pub init: FrameInit,
    /// Reuse the previous factorization prefix on the first Newton iteration.
    pub reuse_factorization: bool,
    pub barrier: Option<BarrierSchedule>,
}

impl Default for NoaConfig {
    fn default() -> Self {
        Self {
            buffer: Depth::Frames(4),
            eps0: 1e-16,
            max_newton_iters: 50,
            armijo: 1e-4,
            backtrack: 0.5,
            init: FrameInit::Isolated,
            reuse_factorization: false,
            barrier: None,
        }
    }
}

impl NoaConfig {
    pub fn with_buffer(buffer: Depth) -> Self {
        Self { buffer, ..Self::default() }
    }

    fn validate(&self) -> Result<()> {
        if !(self.eps0 > 0.0) {
            return Err(Error::Argument("eps0 must be positive".into()));
        }
        if self.buffer == Depth::Frames(0) {
            return Err(Error::Argument("buffer must hold at least one frame".into()));
        }
        if let Some(b) = &self.barrier {
            if !(b.start > 0.0 && b.factor > 1.0 && b.gap > 0.0) {
                return Err(Error::Argument("invalid barrier schedule".into()));
            }
        }
        Ok(())
    }

    fn options(&self) -> NewtonOptions {
        NewtonOptions {
            tol_sq: self.eps0,
            max_iters: self.max_newton_iters,
            armijo: self.armijo,
            backtrack: self.backtrack,
            ..NewtonOptions::default()
        }
    }
}

/// Newton iterations of one time step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub time_step: usize,
    pub iterations: usize,
    pub trace: Vec<NewtonIter>,
    pub final_grad_norm: f64,
    pub block_ops: usize,
}

/// Online solver state.
#[derive(Debug)]
pub struct NoaState {
    config: NoaConfig,
    n: Option<usize>,
    time: usize,
    losses: Vec<SharedLoss>,
    window: Vec<Vector>,
    window_start: usize,
    boundary: Option<Vector>,
    archive: Vec<Vector>,
    steps: Vec<StepRecord>,
    updates: Vec<UpdateRecord>,
    factorization: Option<LuStreamCache>,
    history: Option<Vec<Vec<Vector>>>,
}

impl NoaState {
    pub fn new(config: NoaConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            n: None,
            time: 0,
            losses: Vec::new(),
            window: Vec::new(),
            window_start: 0,
            boundary: None,
            archive: Vec::new(),
            steps: Vec::new(),
            updates: Vec::new(),
            factorization: None,
            history: None,
        })
    }

    /// Keeps the window estimates after every time step.
    pub fn with_history(mut self) -> Self {
        self.history = Some(Vec::new());
        self
    }

    pub fn config(&self) -> &NoaConfig {
        &self.config
    }

    /// Number of losses consumed (`T`).
    pub fn time(&self) -> usize {
        self.time
    }

    pub fn window(&self) -> &[Vector] {
        &self.window
    }

    /// Frame index of the first window block.
    pub fn window_start(&self) -> usize {
        self.window_start
    }

    pub fn boundary(&self) -> Option<&Vector> {
        self.boundary.as_ref()
    }

    pub fn archive(&self) -> &[Vector] {
        &self.archive
    }

    pub fn steps(&self) -> &[StepRecord] {
        &self.steps
    }

    pub fn updates(&self) -> &[UpdateRecord] {
        &self.updates
    }

    pub fn history(&self) -> Option<&[Vec<Vector>]> {
        self.history.as_deref()
    }

    /// Archived frames followed by the window.
    pub fn estimates(&self) -> Vec<Vector> {
        self.archive.iter().chain(&self.window).cloned().collect()
    }

    /// Barrier weight in effect after the first time step.
    pub fn barrier_weight(&self) -> f64 {
        self.config.barrier.map_or(0.0, |b| b.final_weight())
    }

    fn capacity(&self) -> usize {
        match self.config.buffer {
            Depth::Full => usize::MAX,
            Depth::Frames(b) => b,
        }
    }

    fn barrier_wrapped(&self, f: &SharedLoss, weight: f64, first: bool) -> SharedLoss {
        if weight == 0.0 {
            f.clone()
        } else {
            std::sync::Arc::new(LogBarrier::new(f.clone(), if first { weight } else { 0.0 }, weight))
        }
    }

    fn initial_block(&self, f: &SharedLoss, prev: &Vector, weight: f64) -> Result<Vector> {
        let wrapped = self.barrier_wrapped(f, weight, false);
        match self.config.init {
            FrameInit::Isolated => Ok(isolated_minimizer(wrapped.as_ref())?.1),
            FrameInit::TailMin => {
                let start = wrapped.interior_point().1;
                let start = if wrapped.in_domain(prev, &start) { start } else { prev.clone() };
                tail_minimizer(wrapped.as_ref(), prev, start)
            }
        }
    }

    /// Consumes the next loss `f_T` and re-optimizes the window.
    pub fn advance(&mut self, f_new: SharedLoss) -> Result<&StepRecord> {
        let n = *self.n.get_or_insert(f_new.dim());
        if f_new.dim() != n {
            return Err(Error::Dimension(format!("loss has frame size {}, expected {n}", f_new.dim())));
        }
        let t = self.time + 1;
        let stages: Vec<f64> = match self.config.barrier {
            None => vec![0.0],
            Some(b) if t == 1 => b.stages().into_iter().map(|mu| 1.0 / mu).collect(),
            Some(b) => vec![b.final_weight()],
        };
        let first_weight = stages[0];

        let previous = self.window.clone();
        let prev_start = self.window_start;
        if self.window.is_empty() {
            let wrapped = self.barrier_wrapped(&f_new, first_weight, true);
            let (x0, x1) = isolated_minimizer(wrapped.as_ref())?;
            let x1 = match self.config.init {
                FrameInit::Isolated => x1,
                FrameInit::TailMin => tail_minimizer(wrapped.as_ref(), &x0, x1)?,
            };
            self.window = vec![x0, x1];
        } else {
            let prev = self.window.last().expect("nonempty window").clone();
            let w = self.initial_block(&f_new, &prev, first_weight)?;
            self.window.push(w);
        }
        self.losses.push(f_new);

        let mut slid = false;
        while self.window.len() > self.capacity() {
            let x = self.window.remove(0);
            self.archive.push(x.clone());
            self.boundary = Some(x);
            self.window_start += 1;
            slid = true;
        }
        while self.losses.len() > self.window.len() - usize::from(self.boundary.is_none()) {
            self.losses.remove(0);
        }

        let reuse = if self.config.reuse_factorization && !slid {
            self.factorization.take().map(|c| (c, previous.len().saturating_sub(1)))
        } else {
            None
        };
        let opts = self.config.options();
        let mut reuse = reuse;
        let mut y = self.window.clone();
        let mut record = StepRecord {
            time_step: t,
            iterations: 0,
            trace: Vec::new(),
            final_grad_norm: 0.0,
            block_ops: 0,
        };
        for (i, &weight) in stages.iter().enumerate() {
            let obj = WindowObjective::new(&self.losses, self.boundary.as_ref(), weight)?;
            if !obj.in_domain(&y) {
                return Err(Error::Infeasible(format!("warm start at time step {t} is not strictly feasible")));
            }
            let last = i + 1 == stages.len();
            let out = obj.minimize(y, &opts, reuse.take(), last && self.config.reuse_factorization)?;
            record.iterations += out.iterations;
            record.trace.extend(out.trace);
            record.final_grad_norm = out.final_grad_norm;
            record.block_ops += out.block_ops;
            if last {
                self.factorization = out.factorization;
            }
            y = out.y;
        }
        self.window = y;

        // Backtracking updates of frames that were already estimated.
        let newest_old = prev_start + previous.len();
        for (i, x) in self.window.iter().enumerate() {
            let frame = self.window_start + i;
            if frame < prev_start || frame >= newest_old {
                continue;
            }
            let old = &previous[frame - prev_start];
            self.updates.push(UpdateRecord {
                append: t,
                lag: newest_old - 1 - frame,
                magnitude: (x - old).norm(),
            });
        }
        self.time = t;
        if let Some(h) = &mut self.history {
            h.push(self.window.clone());
        }
        self.steps.push(record);
        Ok(self.steps.last().expect("just pushed"))
    }

    /// Moves the window into the archive.
    pub fn finish(&mut self) {
        self.archive.append(&mut self.window);
        self.window_start = self.archive.len();
    }

    /// Writes the Newton trace as `time_step,newton_iter,grad_norm,step_norm,damping`.
    ///
    /// Each time step ends with a row for the converged point (step and damping 0).
    pub fn write_trace<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["time_step", "newton_iter", "grad_norm", "step_norm", "damping"])?;
        for s in &self.steps {
            for (k, it) in s.trace.iter().enumerate() {
                w.write_record([
                    s.time_step.to_string(),
                    k.to_string(),
                    format_f64(it.grad_norm),
                    format_f64(it.step_norm),
                    format_f64(it.damping),
                ])?;
            }
            w.write_record([
                s.time_step.to_string(),
                s.trace.len().to_string(),
                format_f64(s.final_grad_norm),
                format_f64(0.0),
                format_f64(0.0),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Runs NOA over a whole loss sequence and returns the final estimates `x_0..x_T`.
pub fn run_noa(config: NoaConfig, losses: &[SharedLoss]) -> Result<(Vec<Vector>, NoaState)> {
    let mut state = NoaState::new(config)?;
    for f in losses {
        state.advance(f.clone())?;
    }
    state.finish();
    Ok((state.estimates(), state))
}
