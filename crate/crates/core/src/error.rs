use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("numeric overflow: {0}")]
    NumericOverflow(String),

    #[error("underdetermined regression at step {step}: {paths} paths for {basis} basis functions")]
    Underdetermined {
        step: usize,
        paths: usize,
        basis: usize,
    },

    #[error("rank-deficient regression matrix at step {step}")]
    RankDeficient { step: usize },

    #[error("quadratic aggregator is not Lipschitz in z; use the exponential-transform solver")]
    RouteToExponentialTransform,

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    #[error("quadrature did not reach tolerance {tolerance:e}; best estimate {estimate}")]
    Quadrature { estimate: f64, tolerance: f64 },

    #[error("finite-difference scheme unstable: {0}")]
    Scheme(String),

    #[error("domain too small: excursion fraction {fraction:.4} exceeds {allowed:.4}")]
    DomainTooSmall { fraction: f64, allowed: f64 },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("format error: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
