//! Crate-wide error type.
//!
//! Three families matter to callers: shape errors (programming or data layout
//! mistakes, always name the offending shapes), domain errors (valid shapes,
//! invalid values or preconditions), and parse errors (malformed files, always
//! position-annotated). The CLI maps all of them to exit code 2; only argument
//! parsing maps to exit code 1.

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error in {context}: {details}")]
    Shape { context: &'static str, details: String },

    #[error("{0}")]
    Domain(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("{}:{line}: {msg}", path.as_ref().map(|p| p.display().to_string()).unwrap_or_else(|| "<input>".into()))]
    Parse {
        path: Option<PathBuf>,
        /// 1-based line for text formats, byte offset for binary payloads.
        line: usize,
        msg: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn shape(context: &'static str, details: impl Into<String>) -> Self {
        Error::Shape { context, details: details.into() }
    }

    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub fn parse(path: Option<&std::path::Path>, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse { path: path.map(|p| p.to_path_buf()), line, msg: msg.into() }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
