//! Normal approximation tools for stratified linear permutation statistics
//! `W = sum_i a_{i, pi(i)}` where `pi` permutes units only within strata.
//!
//! The crate computes exact moments and Berry–Esseen rate quantities, draws
//! the statistic and its Stein couplings, checks every coupling identity by
//! exhaustive enumeration on small instances, and applies the machinery to
//! stratified surveys, experiments, post-stratification, and permutation tests.

pub mod bounds;
pub mod designs;
pub mod distance;
pub mod error;
pub mod inference;
pub mod layout;
pub mod matrix;
pub mod moments;
pub mod montecarlo;
pub mod multivariate;
pub mod numeric;
pub mod oracle;
pub mod rng;
pub mod sampling;

pub use bounds::{BoundReport, RateMethod, Regime};
pub use error::{Error, Result};
pub use layout::StratumLayout;
pub use matrix::StratifiedMatrix;
pub use moments::{moments, transform, MomentReport, TransformMode};
pub use rng::RandomSource;
