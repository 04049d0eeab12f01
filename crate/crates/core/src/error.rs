use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible tensor shapes.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Bad input data: label out of range, empty split, and the like.
    #[error("data error: {0}")]
    Data(String),

    /// Malformed on-disk format.
    #[error("format error in {what} at byte offset {offset}: {detail}")]
    Format {
        what: String,
        offset: u64,
        detail: String,
    },

    /// API misuse: backward on a non-scalar, empty inputs, unknown suite.
    #[error("usage error: {0}")]
    Usage(String),

    #[error("config error: {0}")]
    Config(String),

    /// NaN/Inf encountered during training or search.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// GraSP needs a nonzero gradient to normalise the probe step.
    #[error("degenerate gradient: {0}")]
    DegenerateGradient(String),

    /// A frozen weight changed during a search run.
    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }
}
