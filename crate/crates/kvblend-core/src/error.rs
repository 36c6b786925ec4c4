use thiserror::Error;

/// Crate-wide error type. Variants map to the CLI exit-code classes:
/// config (2), input parse (3), store miss (4), internal (5).
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {field}: {reason}")]
    Config { field: &'static str, reason: String },
    #[error("{0}")]
    Domain(String),
    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },
    #[error("capacity exceeded: need {needed} bytes, tier capacity {capacity}")]
    Capacity { needed: u64, capacity: u64 },
    #[error("integrity check failed: {0}")]
    Integrity(String),
    #[error("chunk {hash} not in store")]
    MissingChunk { hash: String },
    #[error("pipeline fetch failed: chunk {hash}, layer {layer}")]
    PipelineFetch { hash: String, layer: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(field: &'static str, reason: impl Into<String>) -> Self {
        Error::Config {
            field,
            reason: reason.into(),
        }
    }

    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub fn shape(expected: impl Into<String>, got: impl Into<String>) -> Self {
        Error::Shape {
            expected: expected.into(),
            got: got.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
