//! Crate-wide error type.

use thiserror::Error;

/// Convenience alias used across the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Everything that can go wrong in the laboratory, from kernel evaluation at
/// a singular point to an ill-posed regression.
#[derive(Debug, Error)]
pub enum Error {
    /// Kernel evaluated at zero lag where it diverges (hurst < 1/2).
    #[error("kernel is singular at zero lag for hurst = {hurst}")]
    DiagonalSingularity { hurst: f64 },

    /// Evaluation outside the kernel's domain (e.g. negative lag).
    #[error("domain error: {0}")]
    Domain(String),

    /// Adaptive quadrature exhausted its refinement budget.
    #[error("quadrature failed to reach tolerance {tolerance:.3e} (last correction {last_correction:.3e})")]
    QuadratureFailure { tolerance: f64, last_correction: f64 },

    /// Covariance matrix not numerically positive semidefinite after jitter.
    #[error("covariance factorization failed: {0}")]
    FactorizationFailure(String),

    /// Index out of range for a grid, path, or node.
    #[error("index error: {0}")]
    Index(String),

    /// Normal-equations condition number beyond the configured limit.
    #[error("singular regression: condition number {condition:.3e} exceeds {limit:.3e}")]
    SingularRegression { condition: f64, limit: f64 },

    /// Driver Lipschitz bound missing, invalid, or incompatible with the
    /// explicit time step.
    #[error("lipschitz violation: {0}")]
    LipschitzViolation(String),

    /// Bump direction evaluated to a non-finite value at a needed node.
    #[error("direction is not finite at node {node} (t = {t})")]
    DirectionSingularity { node: usize, t: f64 },

    /// Invalid model/grid/experiment parameter.
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// Invalid or inconsistent experiment configuration.
    #[error("config error: {0}")]
    Config(String),

    /// I/O failure while exporting or importing ensembles/reports.
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
