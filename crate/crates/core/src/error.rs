use std::path::PathBuf;

use crate::edge::BinaryMask;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("unsupported or malformed image: {0}")]
    Format(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    /// The anchor threshold loop never landed inside the target band.
    /// `best` is the mask whose count came closest to the target.
    #[error(
        "threshold adjustment did not converge after {iterations} iterations \
         (best ratio {best_ratio:.3})"
    )]
    Convergence {
        iterations: usize,
        best_ratio: f64,
        best_threshold: f64,
        best: Box<BinaryMask>,
    },

    #[error("non-finite value: {0}")]
    Numeric(String),

    /// Training produced a non-finite loss. `last_good` holds the most recent
    /// checkpoint bytes taken before the failure, if any.
    #[error("training diverged at iteration {iteration}: {reason}")]
    Divergence {
        iteration: usize,
        reason: String,
        last_good: Option<Vec<u8>>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }
}
