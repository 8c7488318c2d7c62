//! Partial mean behavior Poisson (PMBP) processes and their parent
//! multivariate Hawkes processes.
//!
//! A `PMBP(d, e)` process averages the Hawkes intensity over the stochastic
//! history of the first `e` dimensions while conditioning on the observed
//! timestamps of the remaining `d - e` dimensions. This makes it possible to
//! fit Hawkes parameters when some dimensions are only observed as counts over
//! windows (interval-censored) and the rest as exact timestamps.

pub mod closed_form;
pub mod conv;
pub mod data;
pub mod error;
pub mod eval;
pub mod fit;
pub mod gof;
pub mod gradient;
pub mod hawkes;
pub mod likelihood;
pub mod mc;
pub mod model;
pub mod rng;
pub mod sampling;

pub use error::{PmbpError, Result};
