use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke an operation's precondition (shapes, ranges, signs).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error(transparent)]
    Container(#[from] ContainerError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by what the user handed us (files, flags, data)
    /// rather than by a bug or numerical breakdown.
    pub fn is_user_error(&self) -> bool {
        matches!(
            self,
            Error::Input(_) | Error::Container(_) | Error::Io { .. }
        )
    }
}

/// Failures while reading or writing a `.kpz` container.
#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("bad magic bytes {found:?}, expected \"KPRZ\"")]
    BadMagic { found: [u8; 4] },

    #[error("unsupported container version {0}")]
    UnsupportedVersion(u32),

    #[error("file truncated: bytes {start}..{end} missing (file is {len} bytes)")]
    Truncated { start: u64, end: u64, len: u64 },

    #[error("malformed manifest: {0}")]
    Manifest(String),

    #[error("tensor `{name}`: shape mismatch: {detail}")]
    ShapeMismatch { name: String, detail: String },

    #[error("tensor `{0}` missing from manifest")]
    MissingTensor(String),

    #[error("tensor `{0}` contains non-finite values")]
    NonFinite(String),

    #[error("model validation failed: {0}")]
    Validation(String),
}
