#![allow(clippy::neg_cmp_op_on_partial_ord)]
//! Nonlinear filtering with optimal transport maps.
//!
//! The crate provides the optimal transport filter (a max-min trained map per
//! time step), its amortized variant that replaces online training with a
//! similarity-weighted combination of pre-trained maps selected by K-medoids
//! clustering, ensemble Kalman and bootstrap particle filter baselines, and a
//! config-driven benchmark harness.

#[cfg(test)]
macro_rules! assert_close {
    ($a:expr, $b:expr, $tol:expr) => {{
        let (a, b): (f64, f64) = ($a, $b);
        assert!((a - b).abs() <= $tol, "{a} vs {b} (tol {})", $tol);
    }};
}

pub mod amortize;
pub mod baselines;
pub mod bench;
pub mod diffnet;
pub mod ensemble;
pub mod error;
pub mod io;
pub mod metricspace;
pub mod otf;
pub mod rng;
pub mod ssm;
pub mod timing;

pub use error::{Error, Result};
