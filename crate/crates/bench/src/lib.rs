//! Experiment runner for the streaming solvers.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod runner;
pub mod scenario;
pub mod selftest;
pub mod summary;
pub mod tables;

pub use runner::{run, run_seed, InvariantFailed};
pub use scenario::{Buffer, Kind, Scenario};
pub use summary::Summary;
