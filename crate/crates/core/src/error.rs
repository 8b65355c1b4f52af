use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("matrix is not symmetric (relative asymmetry {asymmetry:.3e})")]
    NotSymmetric { asymmetry: f64 },

    #[error("Cholesky factorization failed at pivot {pivot} (value {value:.3e})")]
    FactorizationFailure { pivot: usize, value: f64 },

    #[error("power iteration did not converge within {iterations} iterations")]
    NoConvergence { iterations: usize },

    #[error("labels outside {{0,1}}: {values:?}")]
    LabelDomain { values: Vec<f64> },

    #[error("invalid curvature mode: {0}")]
    InvalidMode(String),

    #[error("client count {m} is not divisible into three equal groups")]
    InvalidGroups { m: usize },

    #[error("invalid sample-size range [{lo}, {hi}]")]
    InvalidRange { lo: usize, hi: usize },

    #[error("parse error at line {line}: {message}")]
    ParseError { line: usize, message: String },

    #[error("cannot split {samples} samples across {clients} clients")]
    TooManyClients { clients: usize, samples: usize },

    #[error("sigma for client {client} is not positive ({value:.3e})")]
    NonPositiveSigma { client: usize, value: f64 },

    #[error("inner Newton solve for client {client} failed: gradient norm {grad_norm:.3e} after {steps} steps")]
    InnerSolveFailure {
        client: usize,
        steps: usize,
        grad_norm: f64,
    },

    #[error("non-finite iterate at iteration {iteration}")]
    NonFiniteIterate { iteration: usize },

    #[error("theorem hypothesis violated: {0}")]
    HypothesisViolation(String),

    #[error("invalid hyper-parameters: {0}")]
    InvalidParams(String),

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
