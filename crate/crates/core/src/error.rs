use std::io;
use std::path::PathBuf;

use farsight_nn::ArchiveError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    /// Malformed input data (truncated records, bad labels, wrong shapes).
    #[error("invalid data: {0}")]
    Data(String),
    /// A violated precondition on arguments or configuration.
    #[error("invalid argument: {0}")]
    Invalid(String),
    /// A loss or objective became NaN or infinite.
    #[error("numerical abort: {0}")]
    NonFinite(String),
    #[error(transparent)]
    Archive(#[from] ArchiveError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("image {}: {message}", path.display())]
    Image { path: PathBuf, message: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

macro_rules! ensure {
    ($cond:expr, $kind:ident, $($fmt:tt)+) => {
        // written as a negation so NaN fails the check
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !$cond {
            return Err($crate::Error::$kind(format!($($fmt)+)));
        }
    };
}
pub(crate) use ensure;
