//! Streaming solvers for objectives of the form `Σ_t f_t(x_{t−1}, x_t)`.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod blocktridiag;
pub mod convex_frames;
pub mod dense;
pub mod error;
pub mod fit;
pub mod noa;
pub mod stream_ls;
pub mod testbeds;

pub use error::{Error, Result};
