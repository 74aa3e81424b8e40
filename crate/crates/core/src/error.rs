use std::path::PathBuf;

/// Errors surfaced by every layer of the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum CdmError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("index out of range: {0}")]
    Index(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("numeric error in layer {layer}: {detail}")]
    Numeric { layer: String, detail: String },

    #[error("training diverged at epoch {epoch}: {detail}")]
    Training { epoch: usize, detail: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("corrupted file: {0}")]
    Corruption(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CdmError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CdmError::Io { path: path.into(), source }
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            CdmError::Config(_) => 1,
            CdmError::Io { .. } => 3,
            CdmError::Format(_) | CdmError::Corruption(_) => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, CdmError>;
