use std::path::PathBuf;

/// Errors produced by the training and evaluation toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid configuration or a contract violated by the caller.
    #[error("configuration error: {0}")]
    Config(String),

    /// Input tensor does not match what the model expects.
    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: String, actual: String },

    /// Student and teacher expose incompatible tap layers.
    #[error("tap mismatch at layer {layer}: student {student}, teacher {teacher}")]
    TapMismatch {
        layer: usize,
        student: String,
        teacher: String,
    },

    /// A gradient or loss contained NaN or infinity.
    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn non_finite(context: impl Into<String>) -> Self {
        Error::NonFinite {
            context: context.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
