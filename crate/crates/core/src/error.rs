use std::path::PathBuf;

/// Errors surfaced by the core library.
///
/// Configuration mistakes (bad shapes, invalid parameter ranges, malformed
/// input files) are reported through this type rather than panicking, so the
/// CLI can map them to exit codes. Panics are reserved for internal logic
/// bugs.
#[derive(Debug, thiserror::Error)]
pub enum CoreError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("invalid argument for {what}: {detail}")]
    InvalidArgument { what: &'static str, detail: String },

    #[error("{path}: {detail}")]
    MalformedFile { path: PathBuf, detail: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("training diverged: non-finite loss ({value}) at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize, value: f64 },
}

impl CoreError {
    pub fn invalid(what: &'static str, detail: impl Into<String>) -> Self {
        CoreError::InvalidArgument { what, detail: detail.into() }
    }

    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        CoreError::ShapeMismatch { op, detail: detail.into() }
    }

    pub fn malformed(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        CoreError::MalformedFile { path: path.into(), detail: detail.into() }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CoreError::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, CoreError>;
