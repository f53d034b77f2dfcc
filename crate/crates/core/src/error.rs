//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid or inconsistent configuration (empty reference distribution,
    /// bad visit grid, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// Generative parameters are unusable (e.g. random-effects covariance is
    /// not positive semidefinite).
    #[error("parameter error: {0}")]
    Parameter(String),

    /// Input data violates an operation's preconditions.
    #[error("data error: {0}")]
    Data(String),

    /// Design matrix is rank deficient.
    #[error("singular design: {0}")]
    SingularDesign(String),

    /// Marginal covariance matrix is not positive definite.
    #[error("covariance error: {0}")]
    Covariance(String),

    /// Model training failed (e.g. single-class forest training set).
    #[error("training error: {0}")]
    Training(String),

    /// A downstream operation refused a fit (non-convergence, separation,
    /// missing covariance block, zero completers).
    #[error("fit refused: {0}")]
    FitRefused(String),

    /// Labeler threshold calibration failed to reach the target.
    #[error("calibration error: {0}")]
    Calibration(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error: {0}")]
    Parse(String),
}
