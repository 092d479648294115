use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("invalid covariance: {0}")]
    InvalidCovariance(String),

    /// A Fourier eigenvalue of the periodized covariance fell below `-psd_tol * max`.
    #[error("covariance spectrum not positive: mode {mode:?} has eigenvalue {value:e} (max {max:e})")]
    SpectrumNotPsd { mode: Vec<usize>, value: f64, max: f64 },

    #[error("truncation level M = {0} must be >= 1")]
    BadTruncation(f64),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("field shape: {0}")]
    Shape(String),

    #[error("solver did not converge after {iterations} iterations (relative residual {residual:e})")]
    NoConvergence {
        iterations: usize,
        residual: f64,
        history: Vec<(usize, f64)>,
    },

    #[error("edge coefficient at site {site}, axis {axis} is not positive ({value})")]
    SingularCoefficient { site: usize, axis: usize, value: f64 },

    #[error("replicas do not share a configuration: {0}")]
    ConfigMismatch(String),

    #[error("ball radius {radius} exceeds the admissible maximum {max}")]
    BallTooLarge { radius: f64, max: f64 },

    #[error("not enough tail samples: {0}")]
    InsufficientTail(String),

    #[error("scale mismatch: {0}")]
    ScaleMismatch(String),

    #[error("test-function basis is rank deficient: {0}")]
    RankDeficient(String),

    #[error("records mix experiment kinds: {0}")]
    MixedKinds(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("too many replica failures: {failed} of {total}")]
    ReplicaFailures { failed: usize, total: usize },

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}
