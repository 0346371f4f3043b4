//! Honest and adaptive confidence sets for low-rank matrix completion.
//!
//! The crate covers both sampling designs:
//!
//! * trace regression (entries sampled uniformly with replacement), where a
//!   residual-sum-of-squares set handles known noise variance and a
//!   U-statistic built from repeated entries handles unknown variance;
//! * Bernoulli masking (each entry seen at most once), where an infimum test
//!   for low rank drives a two-radius adaptive set under known variance, and a
//!   two-point prior shows why no such set exists when the variance is unknown.
//!
//! [`bench`] wraps everything in a seeded Monte Carlo harness behind the `uq`
//! command-line tool.

pub mod bench;
pub mod bernoulli_uq;
pub mod error;
pub mod estimate;
pub mod lbdemo;
pub mod matrix;
pub mod rng;
pub mod stats;
pub mod synth;
pub mod trace_uq;

pub use error::{Result, UqError};
pub use matrix::{DenseMatrix, RankClassSpec};
pub use synth::{BernoulliDataset, NoiseKind, NoiseSpec, TraceDataset};
