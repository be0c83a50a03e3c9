use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised by the library. Load failures get their own variants so
/// callers can tell a truncated file from a version mismatch.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("rollout diverged at step {step}")]
    Divergence { step: usize },

    #[error("loss became NaN at epoch {epoch}, step {step}")]
    NanLoss { epoch: usize, step: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unsupported format version {found} (supported: {supported})")]
    VersionMismatch { found: u32, supported: u32 },

    #[error("bad magic bytes: not a {0} file")]
    BadMagic(&'static str),

    #[error("truncated payload: header declares {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("header/payload disagreement: {0}")]
    HeaderMismatch(String),

    #[error("malformed header: {0}")]
    Header(#[from] serde_json::Error),

    #[error("global assembly refused: {entries} matrix entries exceeds the guard (n_v*n_dof = {size} > {limit})")]
    AssemblyTooLarge {
        size: usize,
        limit: usize,
        entries: usize,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
