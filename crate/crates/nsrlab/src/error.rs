//! Error type shared across the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors surfaced by construction, validation, and estimation routines.
///
/// Numerical routines that cannot fail (pure arithmetic on validated
/// inputs) return plain values; everything that checks a precondition
/// returns `Result`.
#[derive(Debug, Error)]
pub enum Error {
    /// Dimension mismatch between operands or against a declared shape.
    #[error("dimension mismatch: {0}")]
    Dim(String),

    /// A value that must be finite was NaN or infinite.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// A matrix required to be positive semidefinite failed the check.
    /// `min_eig` is the smallest eigenvalue found by the validator.
    #[error("{what} is not positive semidefinite (min eigenvalue {min_eig:.3e}, floor -1e-10)")]
    NotPsd { what: String, min_eig: f64 },

    /// A covariance that must be strictly positive definite was singular
    /// or indefinite.
    #[error("{what} must be positive definite: {detail}")]
    NotPositiveDefinite { what: String, detail: String },

    /// Too many quadratic-form factors for the exact moment engine.
    #[error("moment order {k} exceeds the supported maximum of {max} quadratic-form factors")]
    FactorCountExceeded { k: usize, max: usize },

    /// Total monomial degree above the exact pairing evaluator's cap.
    #[error("monomial degree {degree} exceeds the supported maximum of {max}")]
    MonomialDegreeExceeded { degree: usize, max: usize },

    /// Symbolic propagation exceeded the configured polynomial degree cap.
    /// `step` is the time index at which the cap was first exceeded.
    #[error("polynomial degree {degree} exceeds cap {cap} at propagation step {step}")]
    DegreeCapExceeded { degree: usize, cap: usize, step: usize },

    /// Gradient norm below the configured floor; the NSR ratio is not
    /// meaningful at this point.
    #[error("gradient too small: squared norm {grad_norm_sq:.3e} below floor {floor:.3e}")]
    GradientTooSmall { grad_norm_sq: f64, floor: f64 },

    /// A Monte Carlo rollout produced a non-finite state or reward.
    #[error("rollout {rollout} diverged at step {step}")]
    DivergedRollout { rollout: u64, step: usize },

    /// The Monte Carlo mean gradient is statistically indistinguishable
    /// from zero, so no NSR estimate is reported.
    #[error(
        "NSR undetermined: mean-gradient norm {grad_norm:.3e} does not exceed 3x its \
         standard error ({three_se:.3e})"
    )]
    NsrUndetermined { grad_norm: f64, three_se: f64 },

    /// Optimizer parameters became non-finite at the given iteration.
    #[error("parameters became non-finite at iteration {iter}")]
    ParamsNonFinite { iter: usize },

    /// Invalid configuration value.
    #[error("invalid configuration: {0}")]
    Config(String),
}
