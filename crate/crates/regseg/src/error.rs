use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Shape or dimension mismatch; the message carries the full shape report.
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// Numeric domain violation (log of non-positive value, non-finite input, ...).
    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    /// Invalid configuration value.
    #[error("config error: {0}")]
    Config(String),

    /// Training-time failure (NaN loss/gradient, aborted step).
    #[error("training error: {0}")]
    Train(String),

    /// File format violation (bad magic, truncation, dim overflow).
    #[error("format error in {path}: {detail}")]
    Format { path: String, detail: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn domain(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Domain {
            op,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
