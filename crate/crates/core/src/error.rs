use std::path::PathBuf;

use thiserror::Error;

use crate::autodiff::Shape;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left} vs {right}")]
    Shape {
        op: &'static str,
        left: Shape,
        right: Shape,
    },

    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite function value while perturbing parameter {param}")]
    Evaluation { param: String },

    #[error("not an FSEB file: {path}")]
    BadMagic { path: PathBuf },

    #[error("unsupported FSEB version {version} in {path}")]
    BadVersion { path: PathBuf, version: u32 },

    #[error("size mismatch in {path}: expected {expected} bytes, found {actual}")]
    SizeMismatch {
        path: PathBuf,
        expected: u64,
        actual: u64,
    },

    #[error("invalid data in {what}: {detail}")]
    Validation { what: String, detail: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn domain(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Domain {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short stable identifier, used for machine-parsable CLI errors and FFI codes.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::Domain { .. } => "domain",
            Error::Contract(_) => "contract",
            Error::Evaluation { .. } => "evaluation",
            Error::BadMagic { .. } | Error::BadVersion { .. } => "format",
            Error::SizeMismatch { .. } => "size_mismatch",
            Error::Validation { .. } => "validation",
            Error::Io { .. } => "io",
            Error::Json { .. } => "json",
        }
    }
}
