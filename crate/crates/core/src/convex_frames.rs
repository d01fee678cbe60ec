//! Convex frame losses `f_t(x_{t−1}, x_t)` and the objectives built from them.
//!
//! The aggregate objective `J_T = Σ_{t=1}^T f_t(x_{t−1}, x_t)` has a
//! block-tridiagonal Hessian with
//!
//! ```text
//! H_0 = ∇²_{prev} f_1,   H_t = ∇²_{cur} f_t + ∇²_{prev} f_{t+1},   H_T = ∇²_{cur} f_T
//! E_t = ∂²f_{t+1} / ∂x_{t+1} ∂x_t
//! ```
//!
//! A [`WindowObjective`] is the same sum over a trailing run of losses, with
//! the variable just before the window optionally held fixed. Both the batch
//! oracle and the online solver run damped Newton on it.

use std::fmt::Debug;
use std::sync::Arc;

use crate::blocktridiag::{BlockTridiagSystem, ConditioningReport, Depth, LuStreamCache};
use crate::dense::{self, Mat, Vector};
use crate::error::{Error, Result};
use crate::stream_ls::LsBatch;

/// The three distinct second-derivative blocks of a frame loss.
#[derive(Clone, Debug, PartialEq)]
pub struct HessianBlocks {
    pub prev_prev: Mat,
    /// `∂²f / ∂x_cur ∂x_prev` (rows index `x_cur`).
    pub cross: Mat,
    pub cur_cur: Mat,
}

impl HessianBlocks {
    /// The full `2n × 2n` Hessian over `(x_prev, x_cur)`.
    pub fn dense(&self) -> Mat {
        let n = self.prev_prev.nrows();
        let mut m = Mat::zeros(2 * n, 2 * n);
        m.view_mut((0, 0), (n, n)).copy_from(&self.prev_prev);
        m.view_mut((n, 0), (n, n)).copy_from(&self.cross);
        m.view_mut((0, n), (n, n)).copy_from(&self.cross.transpose());
        m.view_mut((n, n), (n, n)).copy_from(&self.cur_cur);
        m
    }
}

/// One convex loss term coupling two consecutive frames.
pub trait FrameLoss: Debug + Send + Sync {
    /// Frame size `n`.
    fn dim(&self) -> usize;

    /// Loss value; `+∞` outside the domain.
    fn value(&self, prev: &Vector, cur: &Vector) -> f64;

    fn gradient(&self, prev: &Vector, cur: &Vector) -> (Vector, Vector);

    fn hessian(&self, prev: &Vector, cur: &Vector) -> HessianBlocks;

    /// Declared `(μ, L)`: strong convexity and gradient Lipschitz constants.
    fn curvature(&self) -> (f64, f64);

    fn in_domain(&self, _prev: &Vector, _cur: &Vector) -> bool {
        true
    }

    /// Componentwise box the declared curvature constants assume, if any.
    fn domain_box(&self) -> Option<(f64, f64)> {
        None
    }

    /// A point strictly inside the domain.
    fn interior_point(&self) -> (Vector, Vector) {
        (Vector::zeros(self.dim()), Vector::zeros(self.dim()))
    }
}

pub type SharedLoss = Arc<dyn FrameLoss>;

/// `‖P x_prev + C x_cur − y‖² + r_p‖x_prev‖² + r_c‖x_cur‖²`.
#[derive(Clone, Debug)]
pub struct QuadraticFrame {
    p: Mat,
    c: Mat,
    y: Vector,
    ridge_prev: f64,
    ridge_cur: f64,
    mu: f64,
    l: f64,
}

impl QuadraticFrame {
    pub fn new(p: Mat, c: Mat, y: Vector, ridge_prev: f64, ridge_cur: f64) -> Result<Self> {
        if p.shape() != c.shape() || p.nrows() != y.len() {
            return Err(Error::Dimension(format!(
                "P is {:?}, C is {:?}, y has {} rows",
                p.shape(),
                c.shape(),
                y.len()
            )));
        }
        if p.ncols() == 0 {
            return Err(Error::Dimension("frame size must be positive".into()));
        }
        if !(ridge_prev >= 0.0 && ridge_cur >= 0.0) {
            return Err(Error::Argument("ridge weights must be nonnegative".into()));
        }
        let mut f = Self {
            p,
            c,
            y,
            ridge_prev,
            ridge_cur,
            mu: 0.0,
            l: 0.0,
        };
        let n = f.dim();
        let h = f.hessian(&Vector::zeros(n), &Vector::zeros(n)).dense();
        let (lo, hi) = dense::sym_extremes(&h);
        f.mu = lo.max(0.0);
        f.l = hi;
        Ok(f)
    }

    /// The loss of least-squares frame `t ≥ 1`: `‖B_t x_{t−1} + A_t x_t − y_t‖² + γ‖x_t‖²`.
    pub fn from_batch(batch: &LsBatch, gamma: f64) -> Result<Self> {
        let b = batch.b.clone().unwrap_or_else(|| Mat::zeros(batch.rows(), batch.cols()));
        Self::new(b, batch.a.clone(), batch.y.clone(), 0.0, gamma)
    }

    /// Frames 0 and 1 of a least-squares stream merged into one loss over `(x_0, x_1)`.
    pub fn first_pair(first: &LsBatch, second: &LsBatch, gamma: f64) -> Result<Self> {
        let n = first.cols();
        let (m0, m1) = (first.rows(), second.rows());
        let b1 = second.b.clone().unwrap_or_else(|| Mat::zeros(m1, n));
        let mut p = Mat::zeros(m0 + m1, n);
        let mut c = Mat::zeros(m0 + m1, n);
        p.view_mut((0, 0), (m0, n)).copy_from(&first.a);
        p.view_mut((m0, 0), (m1, n)).copy_from(&b1);
        c.view_mut((m0, 0), (m1, n)).copy_from(&second.a);
        let y = dense::stack(&[first.y.clone(), second.y.clone()]);
        Self::new(p, c, y, gamma, gamma)
    }

    fn residual(&self, prev: &Vector, cur: &Vector) -> Vector {
        &self.p * prev + &self.c * cur - &self.y
    }
}

impl FrameLoss for QuadraticFrame {
    fn dim(&self) -> usize {
        self.p.ncols()
    }

    fn value(&self, prev: &Vector, cur: &Vector) -> f64 {
        self.residual(prev, cur).norm_squared() + self.ridge_prev * prev.norm_squared() + self.ridge_cur * cur.norm_squared()
    }

    fn gradient(&self, prev: &Vector, cur: &Vector) -> (Vector, Vector) {
        let r = self.residual(prev, cur);
        (
            (self.p.transpose() * &r + prev * self.ridge_prev) * 2.0,
            (self.c.transpose() * &r + cur * self.ridge_cur) * 2.0,
        )
    }

    fn hessian(&self, _prev: &Vector, _cur: &Vector) -> HessianBlocks {
        let n = self.dim();
        let id = Mat::identity(n, n);
        HessianBlocks {
            prev_prev: (self.p.transpose() * &self.p + &id * self.ridge_prev) * 2.0,
            cross: self.c.transpose() * &self.p * 2.0,
            cur_cur: (self.c.transpose() * &self.c + id * self.ridge_cur) * 2.0,
        }
    }

    fn curvature(&self) -> (f64, f64) {
        (self.mu, self.l)
    }
}

/// The losses of a least-squares stream with frames 0 and 1 merged.
pub fn ls_losses(batches: &[LsBatch], gamma: f64) -> Result<Vec<SharedLoss>> {
    if batches.len() < 2 {
        return Err(Error::Argument("a loss sequence needs at least two frames".into()));
    }
    let mut out: Vec<SharedLoss> = vec![Arc::new(QuadraticFrame::first_pair(&batches[0], &batches[1], gamma)?)];
    for b in &batches[2..] {
        out.push(Arc::new(QuadraticFrame::from_batch(b, gamma)?));
    }
    Ok(out)
}

/// `Σ_i softplus(⟨p_i, x_prev⟩ + ⟨c_i, x_cur⟩ − y_i) + (r/2)(‖x_prev‖² + ‖x_cur‖²)`.
#[derive(Clone, Debug)]
pub struct SoftplusFrame {
    p: Mat,
    c: Mat,
    y: Vector,
    ridge: f64,
    l: f64,
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl SoftplusFrame {
    pub fn new(p: Mat, c: Mat, y: Vector, ridge: f64) -> Result<Self> {
        if p.shape() != c.shape() || p.nrows() != y.len() || p.ncols() == 0 {
            return Err(Error::Dimension("P, C and y do not agree".into()));
        }
        if !(ridge > 0.0) {
            return Err(Error::Argument("ridge must be positive".into()));
        }
        let mut full = Mat::zeros(p.nrows(), 2 * p.ncols());
        full.view_mut((0, 0), p.shape()).copy_from(&p);
        full.view_mut((0, p.ncols()), c.shape()).copy_from(&c);
        let top = if full.nrows() == 0 {
            0.0
        } else {
            dense::spectral_norm(&full).powi(2)
        };
        Ok(Self {
            p,
            c,
            y,
            ridge,
            l: ridge + 0.25 * top,
        })
    }

    fn arguments(&self, prev: &Vector, cur: &Vector) -> Vector {
        &self.p * prev + &self.c * cur - &self.y
    }
}

impl FrameLoss for SoftplusFrame {
    fn dim(&self) -> usize {
        self.p.ncols()
    }

    fn value(&self, prev: &Vector, cur: &Vector) -> f64 {
        self.arguments(prev, cur).iter().map(|z| softplus(*z)).sum::<f64>() + 0.5 * self.ridge * (prev.norm_squared() + cur.norm_squared())
    }

    fn gradient(&self, prev: &Vector, cur: &Vector) -> (Vector, Vector) {
        let s = self.arguments(prev, cur).map(sigmoid);
        (
            self.p.transpose() * &s + prev * self.ridge,
            self.c.transpose() * &s + cur * self.ridge,
        )
    }

    fn hessian(&self, prev: &Vector, cur: &Vector) -> HessianBlocks {
        let n = self.dim();
        let w = self.arguments(prev, cur).map(|z| {
            let s = sigmoid(z);
            s * (1.0 - s)
        });
        let dp = Mat::from_fn(self.p.nrows(), n, |i, j| w[i] * self.p[(i, j)]);
        let dc = Mat::from_fn(self.c.nrows(), n, |i, j| w[i] * self.c[(i, j)]);
        let id = Mat::identity(n, n);
        HessianBlocks {
            prev_prev: self.p.transpose() * &dp + &id * self.ridge,
            cross: self.c.transpose() * &dp,
            cur_cur: self.c.transpose() * &dc + id * self.ridge,
        }
    }

    fn curvature(&self) -> (f64, f64) {
        (self.ridge, self.l)
    }
}

/// `f − w_p Σ log x_prev − w_c Σ log x_cur`.
#[derive(Clone, Debug)]
pub struct LogBarrier {
    inner: SharedLoss,
    weight_prev: f64,
    weight_cur: f64,
}

impl LogBarrier {
    pub fn new(inner: SharedLoss, weight_prev: f64, weight_cur: f64) -> Self {
        Self {
            inner,
            weight_prev,
            weight_cur,
        }
    }

    pub fn inner(&self) -> &SharedLoss {
        &self.inner
    }
}

fn barrier_ok(w: f64, x: &Vector) -> bool {
    w == 0.0 || x.iter().all(|v| *v > 0.0)
}

impl FrameLoss for LogBarrier {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn value(&self, prev: &Vector, cur: &Vector) -> f64 {
        if !self.in_domain(prev, cur) {
            return f64::INFINITY;
        }
        let logs = |w: f64, x: &Vector| if w == 0.0 { 0.0 } else { w * x.iter().map(|v| v.ln()).sum::<f64>() };
        self.inner.value(prev, cur) - logs(self.weight_prev, prev) - logs(self.weight_cur, cur)
    }

    fn gradient(&self, prev: &Vector, cur: &Vector) -> (Vector, Vector) {
        let (gp, gc) = self.inner.gradient(prev, cur);
        let pull = |w: f64, x: &Vector| if w == 0.0 { Vector::zeros(x.len()) } else { x.map(|v| w / v) };
        (gp - pull(self.weight_prev, prev), gc - pull(self.weight_cur, cur))
    }

    fn hessian(&self, prev: &Vector, cur: &Vector) -> HessianBlocks {
        let mut h = self.inner.hessian(prev, cur);
        for i in 0..self.dim() {
            if self.weight_prev > 0.0 {
                h.prev_prev[(i, i)] += self.weight_prev / (prev[i] * prev[i]);
            }
            if self.weight_cur > 0.0 {
                h.cur_cur[(i, i)] += self.weight_cur / (cur[i] * cur[i]);
            }
        }
        h
    }

    fn curvature(&self) -> (f64, f64) {
        let (mu, l) = self.inner.curvature();
        let w_lo = self.weight_prev.min(self.weight_cur);
        let w_hi = self.weight_prev.max(self.weight_cur);
        match self.inner.domain_box() {
            Some((lo, hi)) => (mu + w_lo / (hi * hi), l + w_hi / (lo * lo)),
            None if w_hi == 0.0 => (mu, l),
            None => (mu, f64::INFINITY),
        }
    }

    fn in_domain(&self, prev: &Vector, cur: &Vector) -> bool {
        barrier_ok(self.weight_prev, prev) && barrier_ok(self.weight_cur, cur) && self.inner.in_domain(prev, cur)
    }

    fn domain_box(&self) -> Option<(f64, f64)> {
        self.inner.domain_box()
    }

    fn interior_point(&self) -> (Vector, Vector) {
        let (p, c) = self.inner.interior_point();
        let lift = |w: f64, x: Vector| if w > 0.0 { x.map(|v| if v > 0.0 { v } else { 1.0 }) } else { x };
        (lift(self.weight_prev, p), lift(self.weight_cur, c))
    }
}

/// Finite-difference agreement of a loss's derivatives at one point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DerivativeCheck {
    pub gradient_error: f64,
    pub hessian_error: f64,
}

/// Compares analytic derivatives with central differences of step `h`
/// (value differences for the gradient, gradient differences for the Hessian).
pub fn check_derivatives(f: &dyn FrameLoss, prev: &Vector, cur: &Vector, h: f64) -> DerivativeCheck {
    let n = f.dim();
    let x = dense::stack(&[prev.clone(), cur.clone()]);
    let split = |v: &Vector| (v.rows(0, n).into_owned(), v.rows(n, n).into_owned());
    let (gp, gc) = f.gradient(prev, cur);
    let g = dense::stack(&[gp, gc]);
    let mut fd_g = Vector::zeros(2 * n);
    let mut fd_h = Mat::zeros(2 * n, 2 * n);
    for i in 0..2 * n {
        let step = h * x[i].abs().max(1.0);
        let mut up = x.clone();
        let mut dn = x.clone();
        up[i] += step;
        dn[i] -= step;
        let (up_p, up_c) = split(&up);
        let (dn_p, dn_c) = split(&dn);
        fd_g[i] = (f.value(&up_p, &up_c) - f.value(&dn_p, &dn_c)) / (2.0 * step);
        let (a, b) = f.gradient(&up_p, &up_c);
        let (c, d) = f.gradient(&dn_p, &dn_c);
        let col = (dense::stack(&[a, b]) - dense::stack(&[c, d])) / (2.0 * step);
        fd_h.set_column(i, &col);
    }
    let hess = f.hessian(prev, cur).dense();
    let rel = |diff: f64, scale: f64| if scale > 0.0 { diff / scale } else { diff };
    DerivativeCheck {
        gradient_error: rel((&fd_g - &g).norm(), g.norm()),
        hessian_error: rel((&fd_h - &hess).norm(), hess.norm()),
    }
}

/// Damped Newton parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NewtonOptions {
    /// Stop when the squared gradient norm falls below this.
    pub tol_sq: f64,
    pub max_iters: usize,
    /// Armijo sufficient-decrease constant.
    pub armijo: f64,
    /// Step shrink factor.
    pub backtrack: f64,
    pub max_backtracks: usize,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self {
            tol_sq: 1e-16,
            max_iters: 50,
            armijo: 1e-4,
            backtrack: 0.5,
            max_backtracks: 60,
        }
    }
}

/// One Newton iteration: gradient norm at the iterate, length of the taken step and its damping.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NewtonIter {
    pub grad_norm: f64,
    pub step_norm: f64,
    pub damping: f64,
}

/// Result of a Newton solve.
#[derive(Clone, Debug)]
pub struct NewtonOutcome {
    pub y: Vec<Vector>,
    pub iterations: usize,
    pub trace: Vec<NewtonIter>,
    pub final_grad_norm: f64,
    /// Dense `n × n` block kernels (factorizations, solves, products) used by the linear solves.
    pub block_ops: usize,
    /// Factorization of the Hessian at the returned point, when requested.
    pub factorization: Option<LuStreamCache>,
}

/// Solution of one Newton system.
#[derive(Clone, Debug)]
pub struct NewtonStep {
    pub step: Vec<Vector>,
    pub gradient: Vec<Vector>,
    pub block_ops: usize,
}

/// Solves `F′ s = −F` for block-tridiagonal `F′ = {diag, off}`.
///
/// `reuse` supplies a factorization whose first `keep` pivots and forward
/// variables are still valid for this system.
pub fn block_newton_solve(
    diag: &[Mat],
    off: &[Mat],
    grad: &[Vector],
    reuse: Option<(LuStreamCache, usize)>,
) -> Result<(Vec<Vector>, LuStreamCache, usize)> {
    let k = diag.len();
    if k == 0 || off.len() + 1 != k || grad.len() != k {
        return Err(Error::Dimension("Newton system layout mismatch".into()));
    }
    let n = diag[0].nrows();
    let (mut cache, start) = match reuse {
        Some((mut c, keep)) if keep >= 1 && keep <= k && c.first_retained() == 0 => {
            c.truncate(keep);
            let kept = c.len();
            (c, kept)
        }
        _ => (LuStreamCache::new(n), 0),
    };
    let mut ops = 0;
    for t in start..k {
        let e = (t > 0).then(|| &off[t - 1]);
        cache.lu_append(&diag[t], e)?;
        ops += if t == 0 { 1 } else { 3 };
        cache.forward_step(&-&grad[t], e)?;
    }
    let step = cache.backward_sweep(Depth::Full)?;
    Ok((step, cache, ops))
}

/// A sum of consecutive losses over a run of variables.
///
/// With a boundary, loss `j` couples `(y_{j−1}, y_j)` and `y_{−1}` is the fixed
/// boundary; there is one variable per loss. Without one, loss `j` couples
/// `(y_j, y_{j+1})` and there is one more variable than losses. A positive
/// `barrier` adds `−barrier · Σ log` over every component of every variable.
#[derive(Clone, Copy, Debug)]
pub struct WindowObjective<'a> {
    losses: &'a [SharedLoss],
    boundary: Option<&'a Vector>,
    barrier: f64,
    n: usize,
}

impl<'a> WindowObjective<'a> {
    pub fn new(losses: &'a [SharedLoss], boundary: Option<&'a Vector>, barrier: f64) -> Result<Self> {
        let n = losses
            .first()
            .map(|f| f.dim())
            .ok_or_else(|| Error::Argument("window needs at least one loss".into()))?;
        if losses.iter().any(|f| f.dim() != n) || boundary.is_some_and(|b| b.len() != n) {
            return Err(Error::Dimension("losses in a window must share one frame size".into()));
        }
        if !(barrier >= 0.0) {
            return Err(Error::Argument("barrier weight must be nonnegative".into()));
        }
        Ok(Self {
            losses,
            boundary,
            barrier,
            n,
        })
    }

    pub fn block_size(&self) -> usize {
        self.n
    }

    /// Number of free variable blocks.
    pub fn vars(&self) -> usize {
        self.losses.len() + usize::from(self.boundary.is_none())
    }

    fn shift(&self) -> usize {
        usize::from(self.boundary.is_none())
    }

    fn pair<'b>(&'b self, j: usize, y: &'b [Vector]) -> (&'b Vector, &'b Vector) {
        match self.boundary {
            Some(b) => (if j == 0 { b } else { &y[j - 1] }, &y[j]),
            None => (&y[j], &y[j + 1]),
        }
    }

    fn check(&self, y: &[Vector]) -> Result<()> {
        if y.len() != self.vars() || y.iter().any(|b| b.len() != self.n) {
            return Err(Error::Dimension(format!("expected {} blocks of size {}", self.vars(), self.n)));
        }
        Ok(())
    }

    pub fn in_domain(&self, y: &[Vector]) -> bool {
        (self.barrier == 0.0 || y.iter().all(|b| b.iter().all(|v| *v > 0.0)))
            && (0..self.losses.len()).all(|j| {
                let (p, c) = self.pair(j, y);
                self.losses[j].in_domain(p, c)
            })
    }

    pub fn value(&self, y: &[Vector]) -> Result<f64> {
        self.check(y)?;
        if !self.in_domain(y) {
            return Ok(f64::INFINITY);
        }
        let mut v = 0.0;
        for (j, f) in self.losses.iter().enumerate() {
            let (p, c) = self.pair(j, y);
            v += f.value(p, c);
        }
        if self.barrier > 0.0 {
            v -= self.barrier * y.iter().flat_map(|b| b.iter()).map(|x| x.ln()).sum::<f64>();
        }
        Ok(v)
    }

    pub fn gradient(&self, y: &[Vector]) -> Result<Vec<Vector>> {
        self.check(y)?;
        let s = self.shift();
        let mut g: Vec<Vector> = y
            .iter()
            .map(|b| -b.map(|v| if self.barrier > 0.0 { self.barrier / v } else { 0.0 }))
            .collect();
        for (j, f) in self.losses.iter().enumerate() {
            let (p, c) = self.pair(j, y);
            let (gp, gc) = f.gradient(p, c);
            if j + s >= 1 {
                g[j + s - 1] += gp;
            }
            g[j + s] += gc;
        }
        Ok(g)
    }

    /// Diagonal and sub-diagonal Hessian blocks.
    pub fn hessian(&self, y: &[Vector]) -> Result<(Vec<Mat>, Vec<Mat>)> {
        self.check(y)?;
        let s = self.shift();
        let n = self.n;
        let k = self.vars();
        let mut diag = vec![Mat::zeros(n, n); k];
        let mut off = vec![Mat::zeros(n, n); k - 1];
        for (j, f) in self.losses.iter().enumerate() {
            let (p, c) = self.pair(j, y);
            let h = f.hessian(p, c);
            let cur = j + s;
            diag[cur] += h.cur_cur;
            if cur >= 1 {
                diag[cur - 1] += h.prev_prev;
                off[cur - 1] = h.cross;
            }
        }
        if self.barrier > 0.0 {
            for (d, b) in diag.iter_mut().zip(y) {
                for i in 0..n {
                    d[(i, i)] += self.barrier / (b[i] * b[i]);
                }
            }
        }
        Ok((diag, off))
    }

    /// The Hessian as a block system with right-hand side `−∇`.
    pub fn newton_system(&self, y: &[Vector]) -> Result<BlockTridiagSystem> {
        let (diag, off) = self.hessian(y)?;
        let g = self.gradient(y)?;
        BlockTridiagSystem::new(self.n, diag, off, g.into_iter().map(|v| -v).collect())
    }

    /// One Newton direction at `y` via a block LU sweep.
    pub fn newton_step(&self, y: &[Vector]) -> Result<NewtonStep> {
        let gradient = self.gradient(y)?;
        let (diag, off) = self.hessian(y)?;
        let (step, _, block_ops) = block_newton_solve(&diag, &off, &gradient, None)?;
        Ok(NewtonStep { step, gradient, block_ops })
    }

    /// Damped Newton from `y0`; see [`NewtonOptions`].
    ///
    /// `reuse` is passed to the first linear solve. With `factor_at_solution`,
    /// the returned outcome carries the factorization at the final point.
    pub fn minimize(
        &self,
        y0: Vec<Vector>,
        opts: &NewtonOptions,
        mut reuse: Option<(LuStreamCache, usize)>,
        factor_at_solution: bool,
    ) -> Result<NewtonOutcome> {
        self.check(&y0)?;
        if !self.in_domain(&y0) {
            return Err(Error::Infeasible("Newton start point is outside the domain".into()));
        }
        let mut y = y0;
        let mut trace = Vec::new();
        let mut block_ops = 0;
        let mut f0 = self.value(&y)?;
        for k in 0..=opts.max_iters {
            let g = self.gradient(&y)?;
            let gn2: f64 = g.iter().map(|b| b.norm_squared()).sum();
            if gn2 < opts.tol_sq {
                let factorization = if factor_at_solution {
                    let (diag, off) = self.hessian(&y)?;
                    let (_, cache, ops) = block_newton_solve(&diag, &off, &g, None)?;
                    block_ops += ops;
                    Some(cache)
                } else {
                    None
                };
                return Ok(NewtonOutcome {
                    y,
                    iterations: k,
                    trace,
                    final_grad_norm: gn2.sqrt(),
                    block_ops,
                    factorization,
                });
            }
            if k == opts.max_iters {
                let mut norms: Vec<f64> = trace.iter().map(|r: &NewtonIter| r.grad_norm).collect();
                norms.push(gn2.sqrt());
                return Err(Error::NonConvergence {
                    iterations: k,
                    trace: norms,
                });
            }
            let (diag, off) = self.hessian(&y)?;
            let (s, _, ops) = block_newton_solve(&diag, &off, &g, reuse.take())?;
            block_ops += ops;
            let decrement: f64 = -g.iter().zip(&s).map(|(a, b)| a.dot(b)).sum::<f64>();
            let step_len: f64 = s.iter().map(|b| b.norm_squared()).sum::<f64>().sqrt();
            let unresolvable = opts.armijo * decrement <= 64.0 * f64::EPSILON * f0.abs().max(1.0);
            let mut tau = 1.0;
            let mut accepted = None;
            for _ in 0..=opts.max_backtracks {
                let cand: Vec<Vector> = y.iter().zip(&s).map(|(a, b)| a + b * tau).collect();
                let f1 = self.value(&cand)?;
                if f1.is_finite() && (f1 <= f0 - opts.armijo * tau * decrement || unresolvable) {
                    accepted = Some((cand, f1));
                    break;
                }
                tau *= opts.backtrack;
            }
            let Some((cand, f1)) = accepted else {
                let mut norms: Vec<f64> = trace.iter().map(|r| r.grad_norm).collect();
                norms.push(gn2.sqrt());
                return Err(Error::NonConvergence {
                    iterations: k + 1,
                    trace: norms,
                });
            };
            trace.push(NewtonIter {
                grad_norm: gn2.sqrt(),
                step_norm: tau * step_len,
                damping: tau,
            });
            y = cand;
            f0 = f1;
        }
        unreachable!("loop returns on its last iteration")
    }
}

/// `J_T = Σ_{t=1}^T f_t(x_{t−1}, x_t)` over variables `x_0..x_T`, with an
/// optional log barrier on every component.
#[derive(Clone, Debug)]
pub struct AggregateObjective {
    losses: Vec<SharedLoss>,
    barrier: f64,
}

impl AggregateObjective {
    pub fn new(losses: Vec<SharedLoss>) -> Result<Self> {
        Self::with_barrier(losses, 0.0)
    }

    pub fn with_barrier(losses: Vec<SharedLoss>, barrier: f64) -> Result<Self> {
        WindowObjective::new(&losses, None, barrier)?;
        Ok(Self { losses, barrier })
    }

    pub fn losses(&self) -> &[SharedLoss] {
        &self.losses
    }

    pub fn barrier(&self) -> f64 {
        self.barrier
    }

    /// Number of losses `T`.
    pub fn frames(&self) -> usize {
        self.losses.len()
    }

    pub fn block_size(&self) -> usize {
        self.losses[0].dim()
    }

    pub fn window(&self) -> WindowObjective<'_> {
        WindowObjective::new(&self.losses, None, self.barrier).expect("validated at construction")
    }

    pub fn value(&self, x: &[Vector]) -> Result<f64> {
        self.window().value(x)
    }

    pub fn gradient(&self, x: &[Vector]) -> Result<Vec<Vector>> {
        self.window().gradient(x)
    }

    /// Hessian blocks as a system with zero right-hand side.
    pub fn hessian(&self, x: &[Vector]) -> Result<BlockTridiagSystem> {
        let (diag, off) = self.window().hessian(x)?;
        let zeros = vec![Vector::zeros(self.block_size()); diag.len()];
        BlockTridiagSystem::new(self.block_size(), diag, off, zeros)
    }

    /// `(min μ_t, max L_t)` over the declared constants.
    pub fn curvature(&self) -> (f64, f64) {
        self.losses
            .iter()
            .map(|f| f.curvature())
            .fold((f64::INFINITY, 0.0), |(m, l), (a, b)| (m.min(a), l.max(b)))
    }

    /// The loss of frame `t` (1-based) with its share of the barrier attached.
    ///
    /// Variables shared by two frames split their barrier evenly between them.
    pub fn frame_with_barrier(&self, t: usize) -> SharedLoss {
        let f = self.losses[t - 1].clone();
        if self.barrier == 0.0 {
            return f;
        }
        let w = self.barrier;
        let wp = if t == 1 { w } else { 0.5 * w };
        let wc = if t == self.frames() { w } else { 0.5 * w };
        Arc::new(LogBarrier::new(f, wp, wc))
    }

    /// Isolated minimizers `(x̄_{t−1|t}, x̄_{t|t})` of every frame.
    pub fn isolated_minimizers(&self) -> Result<Vec<(Vector, Vector)>> {
        (1..=self.frames())
            .map(|t| isolated_minimizer(self.frame_with_barrier(t).as_ref()))
            .collect()
    }

    /// Start point assembled from isolated minimizers.
    pub fn isolated_start(&self) -> Result<Vec<Vector>> {
        let iso = self.isolated_minimizers()?;
        let mut x = vec![iso[0].0.clone()];
        x.extend(iso.into_iter().map(|(_, c)| c));
        Ok(x)
    }

    /// Full-dimensional damped Newton to squared gradient norm `tol_sq`.
    pub fn batch_minimize(&self, init: Option<Vec<Vector>>, tol_sq: f64) -> Result<NewtonOutcome> {
        let y0 = match init {
            Some(y) => y,
            None => self.isolated_start()?,
        };
        let opts = NewtonOptions {
            tol_sq,
            max_iters: 200,
            ..NewtonOptions::default()
        };
        self.window().minimize(y0, &opts, None, false)
    }
}

/// Squared-gradient tolerance of the batch oracle (gradient norm below `1e-11`).
pub const BATCH_TOL_SQ: f64 = 1e-22;

const ISOLATED_TOL: f64 = 1e-10;
const ISOLATED_MAX_ITERS: usize = 100;

/// Minimizes `f` over both blocks, or over `x_cur` only when `fixed_prev` is given.
///
/// Steps use the pseudo-inverse of the Hessian so that directions the loss
/// does not depend on stay at the starting point.
fn local_minimize(f: &dyn FrameLoss, fixed_prev: Option<&Vector>, start: (Vector, Vector)) -> Result<(Vector, Vector)> {
    let n = f.dim();
    let (mut p, mut c) = start;
    if let Some(fp) = fixed_prev {
        p = fp.clone();
    }
    if !f.in_domain(&p, &c) || !f.value(&p, &c).is_finite() {
        return Err(Error::Infeasible("local solve start point is outside the domain".into()));
    }
    let mut trace = Vec::new();
    let mut val = f.value(&p, &c);
    for _ in 0..ISOLATED_MAX_ITERS {
        let (gp, gc) = f.gradient(&p, &c);
        let (g, h) = match fixed_prev {
            Some(_) => (gc, f.hessian(&p, &c).cur_cur),
            None => (dense::stack(&[gp, gc]), f.hessian(&p, &c).dense()),
        };
        let (s, gn) = pseudo_solve(&h, &g);
        let s = -s;
        trace.push(gn);
        if gn < ISOLATED_TOL {
            return Ok((p, c));
        }
        let decrement = -g.dot(&s);
        let unresolvable = 1e-4 * decrement <= 64.0 * f64::EPSILON * val.abs().max(1.0);
        let mut tau = 1.0;
        let mut moved = false;
        for _ in 0..60 {
            let (np, nc) = match fixed_prev {
                Some(_) => (p.clone(), &c + &s * tau),
                None => (&p + s.rows(0, n) * tau, &c + s.rows(n, n) * tau),
            };
            let nv = if f.in_domain(&np, &nc) { f.value(&np, &nc) } else { f64::INFINITY };
            if nv.is_finite() && (nv <= val - 1e-4 * tau * decrement || unresolvable) {
                p = np;
                c = nc;
                val = nv;
                moved = true;
                break;
            }
            tau *= 0.5;
        }
        if !moved {
            break;
        }
    }
    Err(Error::NonConvergence {
        iterations: trace.len(),
        trace,
    })
}

/// `H⁺ g` and the norm of the part of `g` in the resolved eigenspace.
fn pseudo_solve(h: &Mat, g: &Vector) -> (Vector, f64) {
    let sym = 0.5 * (h + h.transpose());
    let eig = sym.symmetric_eigen();
    let top = eig.eigenvalues.iter().map(|v| v.abs()).fold(0.0, f64::max);
    let cut = 1e-12 * top;
    let coeffs = eig.eigenvectors.transpose() * g;
    let resolved = |i: usize| eig.eigenvalues[i] > cut;
    let scaled = Vector::from_fn(coeffs.len(), |i, _| if resolved(i) { coeffs[i] / eig.eigenvalues[i] } else { 0.0 });
    let norm = (0..coeffs.len())
        .filter(|i| resolved(*i))
        .map(|i| coeffs[i] * coeffs[i])
        .sum::<f64>()
        .sqrt();
    (&eig.eigenvectors * scaled, norm)
}

/// The minimizer `(x̄_{t−1|t}, x̄_{t|t})` of a single loss.
pub fn isolated_minimizer(f: &dyn FrameLoss) -> Result<(Vector, Vector)> {
    local_minimize(f, None, f.interior_point())
}

/// `argmin_w f(prev, w)` for a fixed first argument.
pub fn tail_minimizer(f: &dyn FrameLoss, prev: &Vector, start: Vector) -> Result<Vector> {
    local_minimize(f, Some(prev), (prev.clone(), start)).map(|(_, c)| c)
}

/// Outcome of fixing one frame and re-solving the tail.
#[derive(Clone, Debug, PartialEq)]
pub struct DecouplingCheck {
    pub tau: usize,
    /// Largest `‖tail_t − x̂_{t|T}‖ / max(1, ‖x̂_{t|T}‖)` over `t > τ`.
    pub max_deviation: f64,
    pub passed: bool,
}

/// Fixes `x_τ = x̂_{τ|T}`, minimizes the remaining losses and compares the tail
/// with the batch solution `xhat` (tolerance `tol`).
pub fn conditional_decoupling_check(obj: &AggregateObjective, xhat: &[Vector], tau: usize, tol: f64) -> Result<DecouplingCheck> {
    let t_max = obj.frames();
    if xhat.len() != t_max + 1 {
        return Err(Error::Dimension("batch solution has the wrong number of frames".into()));
    }
    if tau >= t_max {
        return Err(Error::Argument(format!("tau must be below T = {t_max}")));
    }
    let tail = &obj.losses()[tau..];
    let win = WindowObjective::new(tail, Some(&xhat[tau]), obj.barrier())?;
    let start: Vec<Vector> = xhat[tau + 1..].iter().map(|x| x.map(|v| 1.05 * v + 0.01)).collect();
    let start = if win.in_domain(&start) { start } else { xhat[tau + 1..].to_vec() };
    let opts = NewtonOptions {
        tol_sq: BATCH_TOL_SQ,
        max_iters: 200,
        ..NewtonOptions::default()
    };
    let out = win.minimize(start, &opts, None, false)?;
    let max_deviation = out
        .y
        .iter()
        .zip(&xhat[tau + 1..])
        .map(|(a, b)| (a - b).norm() / b.norm().max(1.0))
        .fold(0.0, f64::max);
    Ok(DecouplingCheck {
        tau,
        max_deviation,
        passed: max_deviation <= tol,
    })
}

/// Constants of the convex decay bounds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConvexRateReport {
    pub mu_min: f64,
    pub l_max: f64,
    /// Contraction ratio `(2L − μ)/(2L + μ)`.
    pub a: f64,
    pub kappa: f64,
    pub delta: f64,
    /// Largest `‖E_t‖/κ` over the sampled points.
    pub theta: f64,
    pub eps_star: Option<f64>,
    pub rho: Option<f64>,
    pub dominant: bool,
    /// Largest stacked isolated-minimizer norm.
    pub m_x: f64,
    pub m_g: f64,
    pub c0: f64,
    pub c1: f64,
    /// `C_0 (1/(1−a) + 1/(1 − θ/(1−δ)))`; `None` when `θ ≥ 1 − δ`.
    pub c_b: Option<f64>,
}

impl ConvexRateReport {
    /// Bound on every `‖x̂_{t|T}‖` when the coupling is dominant.
    pub fn solution_bound(&self) -> Option<f64> {
        let (e, rho) = (self.eps_star?, self.rho?);
        (self.dominant && rho < 1.0).then(|| self.m_g / ((1.0 - e) * (1.0 - rho).powi(2)))
    }
}

/// Computes the rate constants from declared curvature, isolated minimizers
/// and the coupling blocks observed at `points` (each a full `x_0..x_T`).
pub fn rate_report(obj: &AggregateObjective, isolated: &[(Vector, Vector)], points: &[Vec<Vector>]) -> Result<ConvexRateReport> {
    if isolated.len() != obj.frames() {
        return Err(Error::Dimension("one isolated minimizer per loss is required".into()));
    }
    let mut mu_min = f64::INFINITY;
    let mut l_max: f64 = 0.0;
    for t in 1..=obj.frames() {
        let (m, l) = obj.frame_with_barrier(t).curvature();
        mu_min = mu_min.min(m);
        l_max = l_max.max(l);
    }
    let a = 1.0 - 2.0 * mu_min / (2.0 * l_max + mu_min);
    let kappa = 0.5 * (2.0 * l_max + mu_min);
    let delta = a;
    let mut coupling: f64 = 0.0;
    for x in points {
        let (_, off) = obj.window().hessian(x)?;
        for e in &off {
            coupling = coupling.max(dense::spectral_norm(e));
        }
    }
    let theta = coupling / kappa;
    let base = ConditioningReport::from_constants(kappa, delta, theta);
    let m_x = isolated
        .iter()
        .map(|(p, c)| (p.norm_squared() + c.norm_squared()).sqrt())
        .fold(0.0, f64::max);
    let m_g = 2.0 * m_x * kappa * (l_max * l_max + theta * theta).sqrt();
    let c0 = m_g / mu_min;
    let c1 = c0 * (2.0 * l_max - mu_min) / (2.0 * mu_min);
    let c_b = (theta < 1.0 - delta).then(|| c0 * (1.0 / (1.0 - a) + 1.0 / (1.0 - theta / (1.0 - delta))));
    Ok(ConvexRateReport {
        mu_min,
        l_max,
        a,
        kappa,
        delta,
        theta,
        eps_star: base.eps_star,
        rho: base.rho,
        dominant: base.dominant,
        m_x,
        m_g,
        c0,
        c1,
        c_b,
    })
}
