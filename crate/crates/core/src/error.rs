use thiserror::Error;

/// Errors produced by the filtering and diagnostics kernels.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("matrix is not positive semidefinite (min eigenvalue {min_eigenvalue:e})")]
    NotPsd { min_eigenvalue: f64 },

    /// A trajectory left the finite range. `member` is set when the failure
    /// happened while forecasting an ensemble member.
    #[error("numerical blow-up{}", match .member { Some(k) => format!(" in member {k}"), None => String::new() })]
    NumericalBlowup {
        member: Option<usize>,
        last_finite_state: Vec<f64>,
    },

    #[error("observation noise covariance is singular")]
    SingularObservationNoise,

    #[error("rank deficient: rank {rank}, required {required}")]
    RankDeficient { rank: usize, required: usize },

    #[error("ensemble needs at least 2 members, got {0}")]
    TooFewMembers(usize),

    #[error("additive inflation is only supported by the perturbed-observation EnKF")]
    UnsupportedInflation,

    #[error("eigenvalue {index} is not simple")]
    DegenerateEigenvalue { index: usize },

    #[error("audit failed: {0}")]
    AuditFailed(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}
