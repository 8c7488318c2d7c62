//! Error type shared by every module of the crate.

use thiserror::Error;

/// Errors raised by parameter validation, evaluation, sampling and fitting.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum PmbpError {
    /// Parameters violate a structural invariant (sign, shape, split).
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    /// Shapes of inputs do not agree.
    #[error("dimension error: {0}")]
    Dimension(String),
    /// An argument lies outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),
    /// Evaluation produced a non-positive intensity or a non-finite value.
    #[error("evaluation error: {0}")]
    Evaluation(String),
    /// The censored block of the branching matrix is not subcritical.
    #[error("censored block is not subcritical (spectral radius {0})")]
    NotSubcritical(f64),
    /// The impulse-response series did not drop below the threshold.
    #[error("series truncation failed after {terms} terms (residual {residual})")]
    Truncation { terms: usize, residual: f64 },
    /// Closed-form evaluation hit a (near) zero denominator.
    #[error("degenerate parameters: {0}")]
    DegenerateParameters(String),
    /// A sampler accepted more events than the configured cap.
    #[error("explosion: more than {0} accepted events")]
    Explosion(usize),
    /// The thinning bound was exceeded by the intensity it should dominate.
    #[error("thinning bound violated at t = {t}: intensity {intensity} > bound {bound}")]
    BoundViolation { t: f64, intensity: f64, bound: f64 },
    /// Compensator increments or residuals are inconsistent.
    #[error("numerical consistency error: {0}")]
    NumericalConsistency(String),
    /// Too little data for a diagnostic.
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    /// Every optimizer start failed.
    #[error("fit failed for all starts: {0:?}")]
    FitFailure(Vec<String>),
    /// Malformed input file or record.
    #[error("parse error: {0}")]
    Parse(String),
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, PmbpError>;
