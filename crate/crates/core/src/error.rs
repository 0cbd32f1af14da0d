use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("grid too coarse: cell width {h} does not resolve correlation length {corr_len} (need h <= corr_len / 2)")]
    Resolution { h: f64, corr_len: f64 },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("coefficient not coercive: value {value} at cell {cell}")]
    Coercivity { cell: usize, value: f64 },

    #[error("conjugate gradients did not converge in {iterations} iterations (relative residual {residual:e})")]
    Solver {
        iterations: usize,
        residual: f64,
        /// Relative residual recorded every iteration.
        history: Vec<f64>,
    },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("grid structure error: {0}")]
    Structure(String),

    #[error("incompatible Neumann data: integral of f is {integral:e}")]
    Compatibility { integral: f64 },

    #[error("invalid sample plan: {0}")]
    Plan(String),

    #[error("degenerate regression: {0}")]
    DegenerateRegression(String),

    #[error("relative error undefined: reference has zero norm")]
    ZeroReference,

    #[error("sampler failed at level {level}, sample {index}: {source}")]
    Sample {
        level: usize,
        index: u64,
        #[source]
        source: Box<Error>,
    },

    #[error("cache file error: {0}")]
    Cache(String),
}

impl Error {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    pub(crate) fn at_sample(self, level: usize, index: u64) -> Self {
        Error::Sample {
            level,
            index,
            source: Box::new(self),
        }
    }
}
