//! Continuous-time sparse identification of SISO polynomial dynamics.
//!
//! The crate reconstructs output derivatives from noisy uniformly sampled
//! series, fits sparse multivariate polynomials `y^(n) = P(y, ..., y^(n-1), u)`
//! for every candidate order, selects the order with a percentile rule and
//! validates the result with an observer-based controller on the electronic
//! throttle benchmark plant.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod control;
pub mod derivkit;
pub mod error;
pub mod pipeline;
pub mod plant;
pub mod polyalg;
pub mod sparsereg;
pub mod stats;

pub use error::{Error, Result};
