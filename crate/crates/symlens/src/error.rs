//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor/graph shape validation failure. Construction errors, never a
    /// silent broadcast at evaluation time.
    #[error("shape error: {0}")]
    Shape(String),

    /// Invalid configuration, naming the violated constraint.
    #[error("config error: {0}")]
    Config(String),

    /// Time-step stability (CFL) violation in the reference solver.
    #[error("stability error: dt={dt} exceeds limit {limit} ({detail})")]
    Stability { dt: f64, limit: f64, detail: String },

    /// Non-finite value produced during evaluation; carries the offending
    /// batch example when known.
    #[error("numeric failure: non-finite value{}", example.map(|i| format!(" at batch example {i}")).unwrap_or_default())]
    NonFinite { example: Option<usize> },

    /// Degenerate data that would poison downstream statistics.
    #[error("degenerate data: {0}")]
    Degenerate(String),

    /// Group-element misuse (e.g. composing a rotation with a translation).
    #[error("group error: {0}")]
    Group(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),

    /// Malformed on-disk artifact (bad magic, version, truncation).
    #[error("file format error in {path}: {detail}")]
    FileFormat { path: String, detail: String },
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn degenerate(msg: impl Into<String>) -> Self {
        Error::Degenerate(msg.into())
    }
}
