use std::path::{Path, PathBuf};

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("usage: {0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{}: bad magic {found:?}, expected {expected:?}", path.display())]
    BadMagic {
        path: PathBuf,
        found: String,
        expected: &'static str,
    },
    #[error("{}: unknown dtype {dtype:?}", path.display())]
    UnknownDtype { path: PathBuf, dtype: String },
    #[error("{}: unsupported format version {found}, expected {expected}", path.display())]
    Version {
        path: PathBuf,
        found: u64,
        expected: u64,
    },
    #[error("{}: payload is {actual} bytes, header implies {expected}", path.display())]
    Integrity {
        path: PathBuf,
        expected: u64,
        actual: u64,
    },
    #[error("{}: corrupt file: {reason}", path.display())]
    Corrupt { path: PathBuf, reason: String },
    #[error("{}: invalid data: {reason}", path.display())]
    Invalid { path: PathBuf, reason: String },
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error(transparent)]
    Core(#[from] tpseg_core::Error),
}

impl Error {
    pub(crate) fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
        move |source| Error::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub(crate) fn corrupt(path: &Path, reason: impl ToString) -> Error {
        Error::Corrupt {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        }
    }

    pub(crate) fn invalid(path: &Path, reason: impl ToString) -> Error {
        Error::Invalid {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        }
    }

    /// Process exit code: 2 usage/config, 3 data/integrity, 4 numeric failure.
    pub fn exit_code(&self) -> u8 {
        use tpseg_core::Error as Core;
        match self {
            Error::Usage(_) | Error::Config(_) => 2,
            Error::Core(Core::Config(_) | Core::Precondition { .. }) => 2,
            Error::Numeric(_) | Error::Core(Core::NonFinite { .. }) => 4,
            _ => 3,
        }
    }
}
