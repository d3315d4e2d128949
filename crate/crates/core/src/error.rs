use thiserror::Error;

/// Errors produced by the numeric layers (model, predict, criteria, simulate).
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("{what} is not positive definite (Cholesky failed, jitter ladder exhausted at {max_jitter:e})")]
    NotPositiveDefinite { what: String, max_jitter: f64 },

    #[error("singular design: smallest eigenvalue of X'V^-1 X is {ratio:e} of the largest (tolerance {tol:e})")]
    SingularDesign { ratio: f64, tol: f64 },

    #[error(
        "biased predictor: max |HX - X| or |H*X - X*| is {defect:e} (tolerance {tol:e}); \
         supply the true means and use the biased-mean variant"
    )]
    BiasedPredictor { defect: f64, tol: f64 },

    #[error("cross-covariance between prediction and training responses must be zero here (max |C| = {max_abs:e})")]
    CrossCovarianceNonzero { max_abs: f64 },

    #[error("joint covariance of training and prediction responses is not PSD (min eigenvalue {min_eig:e})")]
    JointCovarianceNotPsd { min_eig: f64 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("empty model set")]
    EmptyModelSet,

    #[error("candidate models must share the training response and prediction rows: {0}")]
    InconsistentModelSet(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
