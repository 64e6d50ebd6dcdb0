//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dataset is degenerate: {0}")]
    DegenerateData(String),

    #[error("tied observation times at t = {time} (indices {first} and {second}); use the jitter policy or deduplicate")]
    TiedTimes { time: f64, first: usize, second: usize },

    #[error("p = {p} exceeds the dense-matrix cap {cap}; use hessian_vector_product or the operator solver")]
    Capacity { p: usize, cap: usize },

    #[error("solver did not converge after {outer_iters} outer iterations (KKT residual {kkt_residual:.3e})")]
    NonConvergence {
        outer_iters: usize,
        kkt_residual: f64,
        /// Last iterate, so callers can inspect or restart.
        last: Vec<f64>,
    },

    #[error("unbounded direction on coordinate {coord}: zero quadratic curvature with nonzero linear term")]
    UnboundedDirection { coord: usize },

    #[error("variance estimate is not positive ({value:.3e}); small-sample degeneracy")]
    DegenerateVariance { value: f64 },

    #[error("transport failure at center {center}: {message}")]
    Transport { center: usize, message: String },

    #[error("decode error: {0}")]
    Decode(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
