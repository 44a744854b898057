use std::path::PathBuf;

/// Errors raised anywhere in the network, data harness or training loop.
#[derive(thiserror::Error, Debug)]
pub enum Error {
    /// Two shapes that must agree do not.
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A value lies outside the domain an operation accepts.
    #[error("domain error in {op}: {msg}")]
    Domain { op: &'static str, msg: String },

    /// The caller used an API incorrectly (for example backward on a detached value).
    #[error("usage error: {0}")]
    Usage(String),

    /// NaN or infinity appeared in a forward or backward pass.
    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A file exists but its contents are not what we expect.
    #[error("malformed file {path}: {msg}")]
    Format { path: PathBuf, msg: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn domain(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Domain {
            op,
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }
}
