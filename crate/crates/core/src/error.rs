use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A pivot block of the block LU recursion is singular or too badly conditioned.
    #[error("factorization breakdown at frame {frame}: condition estimate {condition:.3e} exceeds cap")]
    Breakdown { frame: usize, condition: f64 },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("singular matrix: {0}")]
    Singular(String),

    /// Newton-type iteration ran out of budget; carries the gradient-norm trace.
    #[error("no convergence after {iterations} iterations (last gradient norm {last:.3e})", last = trace.last().copied().unwrap_or(f64::NAN))]
    NonConvergence { iterations: usize, trace: Vec<f64> },

    #[error("infeasible point: {0}")]
    Infeasible(String),

    #[error("sampling bound violated: {0}")]
    Bound(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
