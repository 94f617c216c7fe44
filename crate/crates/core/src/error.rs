use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Two operand shapes are incompatible for an operation.
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// Patch or grid geometry does not line up.
    #[error("geometry error: {0}")]
    Geometry(String),

    /// Invalid hyperparameters or run configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// A caller broke an API contract (non-scalar loss, stale variable, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// An operation produced NaN or infinity.
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },

    /// Bad input data (unmatched files, non-binary masks, size mismatches).
    #[error("data error: {0}")]
    Data(String),

    /// Training hit a non-finite loss or gradient.
    #[error("training failed at step {step}: {message}")]
    Training { step: usize, message: String },

    /// Corrupt, truncated or incompatible checkpoint file.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
