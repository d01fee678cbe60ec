//! Small dense kernels shared by the block solvers: pivoted LU with a
//! condition estimate, spectral norms and symmetric eigenvalue extremes.

use nalgebra::{DMatrix, DVector, Dyn, LU};

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Default cap on the 1-norm condition estimate of a pivot block.
pub const CONDITION_CAP: f64 = 1e12;

const POWER_TOL: f64 = 1e-10;
const POWER_MAX_ITERS: usize = 10_000;

/// A square block held in factored form (LU with partial pivoting).
#[derive(Clone, Debug)]
pub struct Factored {
    lu: LU<f64, Dyn, Dyn>,
    condition: f64,
}

impl Factored {
    /// Factors `m`; returns `None` when the block is exactly singular.
    pub fn new(m: &Mat) -> Option<Self> {
        let anorm = norm1(m);
        let lu = m.clone().lu();
        let inv = lu.try_inverse()?;
        let condition = anorm * norm1(&inv);
        if !condition.is_finite() {
            return None;
        }
        Some(Self { lu, condition })
    }

    pub fn condition(&self) -> f64 {
        self.condition
    }

    pub fn solve_vec(&self, b: &Vector) -> Vector {
        self.lu.solve(b).expect("factored block is nonsingular")
    }

    pub fn solve_mat(&self, b: &Mat) -> Mat {
        self.lu.solve(b).expect("factored block is nonsingular")
    }
}

/// Maximum absolute column sum.
pub fn norm1(m: &Mat) -> f64 {
    m.column_iter().map(|c| c.iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max)
}

/// Spectral norm by power iteration on `MᵀM`.
pub fn spectral_norm(m: &Mat) -> f64 {
    if m.nrows() == 0 || m.ncols() == 0 || m.iter().all(|v| *v == 0.0) {
        return 0.0;
    }
    let gram = m.transpose() * m;
    let k = gram.ncols();
    // Deterministic start with a small tilt so it is never orthogonal to a
    // dominant eigenvector aligned with a coordinate-symmetric direction.
    let mut x = Vector::from_fn(k, |i, _| 1.0 + 0.1 * (i as f64 + 1.0).sqrt());
    x /= x.norm();
    let mut lambda = 0.0;
    for _ in 0..POWER_MAX_ITERS {
        let y = &gram * &x;
        let ny = y.norm();
        if ny == 0.0 {
            return 0.0;
        }
        let next = x.dot(&y);
        x = y / ny;
        if (next - lambda).abs() <= POWER_TOL * next.abs().max(f64::MIN_POSITIVE) {
            lambda = next;
            break;
        }
        lambda = next;
    }
    lambda.max(0.0).sqrt()
}

/// Smallest and largest eigenvalue of a symmetric matrix.
pub fn sym_extremes(m: &Mat) -> (f64, f64) {
    let sym = 0.5 * (m + m.transpose());
    let eig = sym.symmetric_eigenvalues();
    let lo = eig.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = eig.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (lo, hi)
}

/// Relative Frobenius asymmetry `‖M − Mᵀ‖_F / ‖M‖_F` (0 for the zero matrix).
pub fn asymmetry(m: &Mat) -> f64 {
    let scale = m.norm();
    if scale == 0.0 {
        return 0.0;
    }
    (m - m.transpose()).norm() / scale
}

/// Stacks block vectors into one long vector.
pub fn stack(blocks: &[Vector]) -> Vector {
    let len = blocks.iter().map(|b| b.len()).sum();
    let mut out = Vector::zeros(len);
    let mut off = 0;
    for b in blocks {
        out.rows_mut(off, b.len()).copy_from(b);
        off += b.len();
    }
    out
}

/// Splits a long vector into `len / n` blocks of size `n`.
pub fn unstack(v: &Vector, n: usize) -> Vec<Vector> {
    (0..v.len() / n).map(|i| v.rows(i * n, n).into_owned()).collect()
}

/// `‖a − b‖ / ‖b‖` over stacked blocks, falling back to the absolute error when `b = 0`.
pub fn relative_error(a: &[Vector], b: &[Vector]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).norm_squared()).sum::<f64>().sqrt();
    let scale: f64 = b.iter().map(|y| y.norm_squared()).sum::<f64>().sqrt();
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spectral_norm_matches_svd() {
        let m = Mat::from_row_slice(3, 2, &[1.0, 2.0, -0.5, 0.3, 4.0, 1.0]);
        let svd = m.clone().svd(false, false);
        let top = svd.singular_values.max();
        assert!((spectral_norm(&m) - top).abs() < 1e-8 * top);
        assert_eq!(spectral_norm(&Mat::zeros(2, 2)), 0.0);
    }

    #[test]
    fn factored_solves_and_flags_singular() {
        let m = Mat::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 3.0]);
        let f = Factored::new(&m).unwrap();
        let x = f.solve_vec(&Vector::from_vec(vec![3.0, 4.0]));
        assert!((x[0] - 1.0).abs() < 1e-14 && (x[1] - 1.0).abs() < 1e-14);
        assert!(f.condition() > 1.0);
        assert!(Factored::new(&Mat::zeros(2, 2)).is_none());
    }

    #[test]
    fn stack_roundtrip() {
        let blocks = vec![Vector::from_vec(vec![1.0, 2.0]), Vector::from_vec(vec![3.0, 4.0])];
        assert_eq!(unstack(&stack(&blocks), 2), blocks);
    }
}
