use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("incompatible grids: {0}")]
    IncompatibleGrids(String),

    #[error("iterative solver did not converge after {iterations} iterations (relative residual {residual:.3e})")]
    NotConverged { iterations: usize, residual: f64 },

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("zero pivot at row {row} of tridiagonal system")]
    ZeroPivot { row: usize },

    /// The exponent of a mobility left the double-precision range. In the
    /// chemotaxis setting this means the concentration has concentrated
    /// beyond what the grid can represent (numerical blow-up).
    #[error("mobility exponent range {range:.3e} exceeds {limit} (max exponent {max:.3e}); solution is blowing up")]
    MobilityOverflow { range: f64, max: f64, limit: f64 },

    /// A scheme that is proven positivity preserving produced a negative
    /// density. This points at a bug, not at bad input.
    #[error("positivity violated: min density {min:.3e} at index {index} (max {max:.3e})")]
    PositivityViolated { min: f64, index: usize, max: f64 },

    #[error("Newton iteration failed to reach tolerance; residual history {history:?}")]
    NewtonFailed { history: Vec<f64> },

    #[error("config line {line}: {message}")]
    Config { line: usize, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed snapshot: {0}")]
    Snapshot(String),
}

impl Error {
    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
