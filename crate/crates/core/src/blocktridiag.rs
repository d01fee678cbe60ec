//! Symmetric block-tridiagonal systems and their streaming block LU solver.
//!
//! The system has diagonal blocks `H_t`, sub-diagonal blocks `E_t` (block row
//! `t + 1`, column `t`; the super-diagonal holds `E_tᵀ`) and right-hand side
//! blocks `g_t`. It is factored as `L U` with
//!
//! ```text
//! Q_0 = H_0,   U_{t-1} = Q_{t-1}⁻¹ E_{t-1}ᵀ,   Q_t = H_t − E_{t-1} U_{t-1}
//! ```
//!
//! and solved by a forward sweep `v_t = Q_t⁻¹ (g_t − E_{t-1} v_{t-1})`
//! followed by a backward sweep `x_T = v_T`, `x_t = v_t − U_t x_{t+1}`.
//! Frames are appended one at a time, so the factorization grows with the
//! stream and can optionally keep only a trailing window of frames.

use std::collections::VecDeque;

use crate::dense::{self, Factored, Mat, Vector, CONDITION_CAP};
use crate::error::{Error, Result};

/// Relative Frobenius tolerance on the symmetry of diagonal blocks.
pub const SYMMETRY_TOL: f64 = 1e-12;

/// How many trailing frames a backward sweep (or a buffer) covers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Depth {
    Full,
    Frames(usize),
}

impl Depth {
    /// Number of frames covered when `available` frames exist.
    pub fn resolve(self, available: usize) -> usize {
        match self {
            Depth::Full => available,
            Depth::Frames(d) => d.min(available),
        }
    }

    pub fn is_full(self) -> bool {
        matches!(self, Depth::Full)
    }
}

impl std::fmt::Display for Depth {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Depth::Full => write!(f, "full"),
            Depth::Frames(d) => write!(f, "{d}"),
        }
    }
}

impl std::str::FromStr for Depth {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("full") {
            return Ok(Depth::Full);
        }
        match s.parse::<usize>() {
            Ok(d) if d >= 1 => Ok(Depth::Frames(d)),
            _ => Err(Error::Argument(format!("buffer must be a positive integer or 'full', got {s:?}"))),
        }
    }
}

/// A symmetric block-tridiagonal system `{H_t, E_t, g_t}` with uniform block size.
#[derive(Clone, Debug)]
pub struct BlockTridiagSystem {
    n: usize,
    diag: Vec<Mat>,
    offdiag: Vec<Mat>,
    rhs: Vec<Vector>,
}

impl BlockTridiagSystem {
    pub fn new(n: usize, diag: Vec<Mat>, offdiag: Vec<Mat>, rhs: Vec<Vector>) -> Result<Self> {
        if n == 0 {
            return Err(Error::Dimension("block size must be positive".into()));
        }
        if diag.is_empty() {
            return Err(Error::Dimension("system needs at least one diagonal block".into()));
        }
        if offdiag.len() + 1 != diag.len() || rhs.len() != diag.len() {
            return Err(Error::Dimension(format!(
                "expected {} off-diagonal and {} rhs blocks, got {} and {}",
                diag.len() - 1,
                diag.len(),
                offdiag.len(),
                rhs.len()
            )));
        }
        for (t, h) in diag.iter().enumerate() {
            if h.shape() != (n, n) {
                return Err(Error::Dimension(format!("H_{t} is {:?}, expected {n}x{n}", h.shape())));
            }
            if dense::asymmetry(h) > SYMMETRY_TOL {
                return Err(Error::Argument(format!("H_{t} is not symmetric")));
            }
        }
        for (t, e) in offdiag.iter().enumerate() {
            if e.shape() != (n, n) {
                return Err(Error::Dimension(format!("E_{t} is {:?}, expected {n}x{n}", e.shape())));
            }
        }
        for (t, g) in rhs.iter().enumerate() {
            if g.len() != n {
                return Err(Error::Dimension(format!("g_{t} has length {}, expected {n}", g.len())));
            }
        }
        Ok(Self { n, diag, offdiag, rhs })
    }

    pub fn block_size(&self) -> usize {
        self.n
    }

    /// Number of block rows (`T + 1`).
    pub fn frames(&self) -> usize {
        self.diag.len()
    }

    pub fn diag(&self) -> &[Mat] {
        &self.diag
    }

    pub fn offdiag(&self) -> &[Mat] {
        &self.offdiag
    }

    pub fn rhs(&self) -> &[Vector] {
        &self.rhs
    }

    pub fn with_rhs(mut self, rhs: Vec<Vector>) -> Result<Self> {
        if rhs.len() != self.diag.len() || rhs.iter().any(|g| g.len() != self.n) {
            return Err(Error::Dimension("rhs does not match the system layout".into()));
        }
        self.rhs = rhs;
        Ok(self)
    }

    /// The dense `n(T+1) × n(T+1)` matrix.
    pub fn assemble(&self) -> Mat {
        let n = self.n;
        let size = n * self.frames();
        let mut m = Mat::zeros(size, size);
        for (t, h) in self.diag.iter().enumerate() {
            m.view_mut((t * n, t * n), (n, n)).copy_from(h);
        }
        for (t, e) in self.offdiag.iter().enumerate() {
            m.view_mut(((t + 1) * n, t * n), (n, n)).copy_from(e);
            m.view_mut((t * n, (t + 1) * n), (n, n)).copy_from(&e.transpose());
        }
        m
    }

    /// Block matrix-vector product.
    pub fn multiply(&self, x: &[Vector]) -> Result<Vec<Vector>> {
        if x.len() != self.frames() || x.iter().any(|b| b.len() != self.n) {
            return Err(Error::Dimension("vector does not match the system layout".into()));
        }
        let last = self.frames() - 1;
        Ok((0..=last)
            .map(|t| {
                let mut y = &self.diag[t] * &x[t];
                if t > 0 {
                    y += &self.offdiag[t - 1] * &x[t - 1];
                }
                if t < last {
                    y += self.offdiag[t].transpose() * &x[t + 1];
                }
                y
            })
            .collect())
    }

    /// Factors the whole system and solves it with one forward and one backward sweep.
    pub fn solve(&self) -> Result<Vec<Vector>> {
        let mut cache = LuStreamCache::new(self.n);
        for t in 0..self.frames() {
            let e_prev = if t == 0 { None } else { Some(&self.offdiag[t - 1]) };
            cache.lu_append(&self.diag[t], e_prev)?;
            cache.forward_step(&self.rhs[t], e_prev)?;
        }
        cache.backward_sweep(Depth::Full)
    }
}

/// Exact solution through a dense pivoted LU of the assembled matrix.
///
/// Only used as an oracle for the block recursion.
pub fn solve_dense(system: &BlockTridiagSystem) -> Result<Vec<Vector>> {
    let m = system.assemble();
    let b = dense::stack(system.rhs());
    let x = m
        .lu()
        .solve(&b)
        .ok_or_else(|| Error::Singular("assembled block-tridiagonal matrix".into()))?;
    Ok(dense::unstack(&x, system.block_size()))
}

#[derive(Clone, Debug)]
struct Pivot {
    q: Mat,
    fac: Factored,
    u: Option<Mat>,
    v: Option<Vector>,
}

/// Recursively built block LU factorization `{Q_t, U_t, v_t}`.
///
/// Frames are appended with [`lu_append`](Self::lu_append) and
/// [`forward_step`](Self::forward_step). With a retention limit only the most
/// recent frames are kept; older pivots are dropped as new ones arrive.
#[derive(Clone, Debug)]
pub struct LuStreamCache {
    n: usize,
    condition_cap: f64,
    retain: Option<usize>,
    base: usize,
    frames: VecDeque<Pivot>,
}

impl LuStreamCache {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            condition_cap: CONDITION_CAP,
            retain: None,
            base: 0,
            frames: VecDeque::new(),
        }
    }

    pub fn with_condition_cap(mut self, cap: f64) -> Self {
        self.condition_cap = cap;
        self
    }

    /// Keep at most `frames` trailing pivots (at least one).
    pub fn with_retention(mut self, frames: usize) -> Self {
        self.retain = Some(frames.max(1));
        self
    }

    pub fn block_size(&self) -> usize {
        self.n
    }

    /// Total number of frames appended so far.
    pub fn len(&self) -> usize {
        self.base + self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Index of the oldest retained frame.
    pub fn first_retained(&self) -> usize {
        self.base
    }

    pub fn retained(&self) -> usize {
        self.frames.len()
    }

    fn pivot(&self, t: usize) -> Option<&Pivot> {
        t.checked_sub(self.base).and_then(|i| self.frames.get(i))
    }

    pub fn q(&self, t: usize) -> Option<&Mat> {
        self.pivot(t).map(|p| &p.q)
    }

    pub fn u(&self, t: usize) -> Option<&Mat> {
        self.pivot(t).and_then(|p| p.u.as_ref())
    }

    pub fn v(&self, t: usize) -> Option<&Vector> {
        self.pivot(t).and_then(|p| p.v.as_ref())
    }

    /// Condition estimate of the factored pivot `Q_t`.
    pub fn condition(&self, t: usize) -> Option<f64> {
        self.pivot(t).map(|p| p.fac.condition())
    }

    /// Applies `Q_t⁻¹` to a vector.
    pub fn solve_pivot(&self, t: usize, b: &Vector) -> Option<Vector> {
        self.pivot(t).map(|p| p.fac.solve_vec(b))
    }

    /// Appends an already Schur-complemented pivot block `Q_t`.
    pub fn push_pivot(&mut self, q: Mat) -> Result<()> {
        if q.shape() != (self.n, self.n) {
            return Err(Error::Dimension(format!(
                "pivot is {:?}, expected {}x{}",
                q.shape(),
                self.n,
                self.n
            )));
        }
        let frame = self.len();
        let fac = Factored::new(&q).ok_or(Error::Breakdown {
            frame,
            condition: f64::INFINITY,
        })?;
        if fac.condition() > self.condition_cap {
            return Err(Error::Breakdown {
                frame,
                condition: fac.condition(),
            });
        }
        self.frames.push_back(Pivot { q, fac, u: None, v: None });
        if let Some(keep) = self.retain {
            while self.frames.len() > keep {
                self.frames.pop_front();
                self.base += 1;
            }
        }
        Ok(())
    }

    /// Computes and stores `U_T = Q_T⁻¹ Eᵀ` for the newest frame `T`.
    pub fn schur_update(&mut self, e: &Mat) -> Result<&Mat> {
        if e.shape() != (self.n, self.n) {
            return Err(Error::Dimension(format!("E is {:?}, expected {}x{}", e.shape(), self.n, self.n)));
        }
        let last = self
            .frames
            .back_mut()
            .ok_or_else(|| Error::Argument("empty cache has no pivot".into()))?;
        let u = last.fac.solve_mat(&e.transpose());
        last.u = Some(u);
        Ok(last.u.as_ref().expect("just stored"))
    }

    /// Appends `H_new`; the seeding call passes no `E_prev` and sets `Q_0 = H_0`.
    pub fn lu_append(&mut self, h_new: &Mat, e_prev: Option<&Mat>) -> Result<()> {
        match (self.is_empty(), e_prev) {
            (true, None) => self.push_pivot(h_new.clone()),
            (true, Some(_)) => Err(Error::Argument("the seeding append takes no E_prev".into())),
            (false, None) => Err(Error::Argument(format!("frame {} needs E_prev", self.len()))),
            (false, Some(e)) => {
                if h_new.shape() != (self.n, self.n) {
                    return Err(Error::Dimension(format!(
                        "H is {:?}, expected {}x{}",
                        h_new.shape(),
                        self.n,
                        self.n
                    )));
                }
                let u = self.schur_update(e)?;
                let q = h_new - e * u;
                self.push_pivot(q)
            }
        }
    }

    /// Computes the forward variable of the newest frame.
    pub fn forward_step(&mut self, g: &Vector, e_prev: Option<&Mat>) -> Result<()> {
        if g.len() != self.n {
            return Err(Error::Dimension(format!("g has length {}, expected {}", g.len(), self.n)));
        }
        let t = self
            .len()
            .checked_sub(1)
            .ok_or_else(|| Error::Argument("forward step on an empty cache".into()))?;
        if self.v(t).is_some() {
            return Err(Error::Argument(format!(
                "frame {t} already has a forward variable; append its pivot first"
            )));
        }
        let rhs = if t == 0 {
            g.clone()
        } else {
            let e = e_prev.ok_or_else(|| Error::Argument(format!("frame {t} needs E_prev")))?;
            let v_prev = self
                .v(t - 1)
                .ok_or_else(|| Error::Argument(format!("frame {} has no forward variable", t - 1)))?;
            g - e * v_prev
        };
        let last = self.frames.back_mut().expect("nonempty");
        last.v = Some(last.fac.solve_vec(&rhs));
        Ok(())
    }

    /// Back-substitutes the trailing `depth` frames, oldest first.
    pub fn backward_sweep(&self, depth: Depth) -> Result<Vec<Vector>> {
        let total = self.len();
        if total == 0 {
            return Err(Error::Argument("backward sweep on an empty cache".into()));
        }
        let count = match depth {
            Depth::Full if self.base > 0 => {
                return Err(Error::Argument(format!(
                    "full sweep needs all frames but {} were evicted",
                    self.base
                )))
            }
            Depth::Full => total,
            Depth::Frames(d) if d == 0 || d > self.frames.len() => {
                return Err(Error::Argument(format!(
                    "depth {d} outside 1..={} retained frames",
                    self.frames.len()
                )))
            }
            Depth::Frames(d) => d,
        };
        let last = total - 1;
        let mut x = self
            .v(last)
            .cloned()
            .ok_or_else(|| Error::Argument(format!("forward sweep incomplete at frame {last}")))?;
        let mut out = Vec::with_capacity(count);
        out.push(x.clone());
        for t in (total - count..last).rev() {
            let v = self
                .v(t)
                .ok_or_else(|| Error::Argument(format!("frame {t} has no forward variable")))?;
            let u = self.u(t).ok_or_else(|| Error::Argument(format!("frame {t} has no U block")))?;
            x = v - u * &x;
            out.push(x.clone());
        }
        out.reverse();
        Ok(out)
    }

    /// Drops every frame at index `len` and later.
    pub fn truncate(&mut self, len: usize) {
        while self.len() > len && !self.frames.is_empty() {
            self.frames.pop_back();
        }
    }

    /// Clears all forward variables (the pivots and `U` blocks are kept).
    pub fn clear_forward(&mut self) {
        for p in &mut self.frames {
            p.v = None;
        }
    }
}

/// Measured conditioning constants of a block-tridiagonal system.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConditioningReport {
    /// Scaling: mean of the extreme eigenvalues over all diagonal blocks.
    pub kappa: f64,
    /// `max_t ‖κ⁻¹H_t − I‖`.
    pub delta: f64,
    /// `max_t ‖E_t‖ / κ`.
    pub theta: f64,
    /// Limit of the pivot-conditioning recursion; `None` when `θ > (1−δ)/2`.
    pub eps_star: Option<f64>,
    /// `θ / (1 − ε★)`.
    pub rho: Option<f64>,
    /// `θ < (1 − δ)/2`.
    pub dominant: bool,
}

impl ConditioningReport {
    /// Builds the report from per-block eigenvalue extremes `(λ_min, λ_max)`
    /// of the `H_t` and the spectral norms of the `E_t`.
    pub fn from_parts(block_extremes: &[(f64, f64)], coupling_norms: &[f64]) -> Self {
        let lo = block_extremes.iter().map(|e| e.0).fold(f64::INFINITY, f64::min);
        let hi = block_extremes.iter().map(|e| e.1).fold(f64::NEG_INFINITY, f64::max);
        let kappa = 0.5 * (lo + hi);
        let delta = block_extremes
            .iter()
            .map(|&(l, h)| (l / kappa - 1.0).abs().max((h / kappa - 1.0).abs()))
            .fold(0.0, f64::max);
        let theta = coupling_norms.iter().copied().fold(0.0, f64::max) / kappa;
        Self::from_constants(kappa, delta, theta)
    }

    pub fn from_constants(kappa: f64, delta: f64, theta: f64) -> Self {
        let eps_star = eps_star(delta, theta);
        let rho = eps_star.map(|e| theta / (1.0 - e));
        let dominant = delta < 1.0 && theta < 0.5 * (1.0 - delta);
        Self {
            kappa,
            delta,
            theta,
            eps_star,
            rho,
            dominant,
        }
    }

    /// Bound on `‖Q_t⁻¹‖`: `1 / (κ (1 − ε★))`.
    pub fn pivot_inverse_bound(&self) -> Option<f64> {
        self.eps_star.map(|e| 1.0 / (self.kappa * (1.0 - e)))
    }

    /// Uniform bound on every solution block when `‖g_t‖ ≤ m`.
    pub fn solution_bound(&self, m: f64) -> Option<f64> {
        let (e, rho) = (self.eps_star?, self.rho?);
        (rho < 1.0).then(|| m / (self.kappa * (1.0 - e) * (1.0 - rho).powi(2)))
    }

    /// Bound on the first correction `‖x̂_{T|T+1} − x̂_{T|T}‖` when `‖g_t‖ ≤ m`.
    pub fn first_update_bound(&self, m: f64) -> Option<f64> {
        let (e, rho) = (self.eps_star?, self.rho?);
        (rho < 1.0).then(|| m * (2.0 + rho) / (self.kappa * (1.0 - e) * (1.0 - rho)))
    }

    /// Constant `C` in `‖x̂_{t|T} − x★_t‖ ≤ C ρ^{T−t}` (the right-hand-side
    /// scale `m` is folded in).
    pub fn settling_constant(&self, m: f64) -> Option<f64> {
        let e = self.eps_star?;
        let denom = 1.0 - e - self.theta;
        (denom > 0.0).then(|| self.first_update_bound(m).map(|mx| mx * (1.0 - e) / denom))?
    }
}

/// Closed-form limit `ε★ = (1+δ)/2 − sqrt((1−δ)²/4 − θ²)`, defined for `θ ≤ (1−δ)/2`.
pub fn eps_star(delta: f64, theta: f64) -> Option<f64> {
    if !(0.0..1.0).contains(&delta) || theta < 0.0 {
        return None;
    }
    let half = 0.5 * (1.0 - delta);
    let disc = (half - theta) * (half + theta);
    if disc < 0.0 {
        return None;
    }
    Some(0.5 * (1.0 + delta) - disc.sqrt())
}

/// Iterates `ε_t = δ + θ²/(1 − ε_{t−1})` from `ε_0 = δ` until successive
/// iterates differ by less than `tol`.
///
/// Returns the final iterate and whether the sequence was nondecreasing.
pub fn eps_recursion(delta: f64, theta: f64, tol: f64, max_iters: usize) -> (f64, bool) {
    let mut eps = delta;
    let mut monotone = true;
    for _ in 0..max_iters {
        let next = delta + theta * theta / (1.0 - eps);
        if next < eps {
            monotone = false;
        }
        let done = (next - eps).abs() < tol;
        eps = next;
        if done || !eps.is_finite() || eps >= 1.0 {
            break;
        }
    }
    (eps, monotone)
}

/// Resolves `z_0 ≤ b, z_t ≤ b + a z_{t−1}` into `z_t ≤ b (1 − a^{t+1})/(1 − a)`.
pub fn contractive_bound(a: f64, b: f64, t: usize) -> f64 {
    if a == 1.0 {
        return b * (t as f64 + 1.0);
    }
    b * (1.0 - a.powi(t as i32 + 1)) / (1.0 - a)
}

/// Measures conditioning constants of a system.
pub fn conditioning_report(system: &BlockTridiagSystem) -> ConditioningReport {
    let extremes: Vec<(f64, f64)> = system.diag().iter().map(dense::sym_extremes).collect();
    let norms: Vec<f64> = system.offdiag().iter().map(dense::spectral_norm).collect();
    ConditioningReport::from_parts(&extremes, &norms)
}

/// Outcome of the bordered-system sensitivity check.
#[derive(Clone, Debug)]
pub struct SensitivityCheck {
    /// `‖V‖`, the coupling between the first block and the rest.
    pub alpha: f64,
    /// `‖B⁻¹‖` of the trailing block.
    pub beta: f64,
    /// Measured `‖y‖ / ‖h₀‖` (0 when `h₀ = 0`).
    pub ratio: f64,
    /// Largest per-block `‖y_i‖ / ‖h₀‖`.
    pub max_block_ratio: f64,
    pub holds: bool,
}

/// Solves a system whose right-hand side is zero outside the first block and
/// compares the trailing solution against `‖y_i‖ ≤ ‖V‖·‖B⁻¹‖·‖h₀‖`.
pub fn first_block_sensitivity(system: &BlockTridiagSystem) -> Result<SensitivityCheck> {
    let n = system.block_size();
    if system.frames() < 2 {
        return Err(Error::Argument("bordered system needs at least two blocks".into()));
    }
    if system.rhs().iter().skip(1).any(|g| g.iter().any(|v| *v != 0.0)) {
        return Err(Error::Argument("rhs must vanish outside the first block".into()));
    }
    let full = system.assemble();
    let size = full.nrows();
    let trailing = full.view((n, n), (size - n, size - n)).into_owned();
    let (lo, hi) = dense::sym_extremes(&trailing);
    let min_abs = if lo > 0.0 || hi < 0.0 {
        lo.abs().min(hi.abs())
    } else {
        trailing
            .clone()
            .symmetric_eigenvalues()
            .iter()
            .map(|v| v.abs())
            .fold(f64::INFINITY, f64::min)
    };
    if min_abs == 0.0 || (lo.abs().max(hi.abs()) / min_abs) > CONDITION_CAP {
        return Err(Error::Singular("trailing block of the bordered system".into()));
    }
    let beta = 1.0 / min_abs;
    let alpha = dense::spectral_norm(&system.offdiag()[0]);

    let x = solve_dense(system)?;
    let h0 = x[0].norm();
    let y: f64 = x[1..].iter().map(|b| b.norm_squared()).sum::<f64>().sqrt();
    let max_block = x[1..].iter().map(|b| b.norm()).fold(0.0, f64::max);
    let (ratio, max_block_ratio) = if h0 == 0.0 { (0.0, 0.0) } else { (y / h0, max_block / h0) };
    let slack = 1e-9 * (1.0 + alpha * beta);
    let holds = ratio <= alpha * beta + slack && max_block_ratio <= alpha * beta + slack;
    Ok(SensitivityCheck {
        alpha,
        beta,
        ratio,
        max_block_ratio,
        holds,
    })
}
