use std::io;

/// Coarse failure class, used by front ends to pick an exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Usage,
    Data,
    Numeric,
}

impl ErrorCategory {
    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCategory::Usage => "usage",
            ErrorCategory::Data => "data",
            ErrorCategory::Numeric => "numeric",
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch at node `{node}`: {detail}")]
    Shape { node: String, detail: String },

    #[error("non-finite value produced by node `{node}`")]
    NonFinite { node: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown {kind} `{name}`")]
    Unknown { kind: &'static str, name: String },

    #[error("bad magic in {what}: expected {expected:?}, found {found:?}")]
    BadMagic {
        what: &'static str,
        expected: [u8; 4],
        found: [u8; 4],
    },

    #[error("unsupported {what} version {version}")]
    UnsupportedVersion { what: &'static str, version: u32 },

    #[error("truncated {what}")]
    Truncated { what: &'static str },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("malformed {what}: {detail}")]
    Malformed { what: &'static str, detail: String },

    #[error("base model hash mismatch: adapter expects {expected}, base is {found}")]
    BaseMismatch { expected: String, found: String },

    #[error("training diverged at step {step}: loss {loss}, t = {timesteps:?}")]
    Diverged {
        step: u64,
        loss: f64,
        timesteps: Vec<usize>,
    },

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("io error: {0}")]
    Io(#[from] io::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::InvalidArgument(_) | Error::Unknown { .. } => ErrorCategory::Usage,
            Error::NonFinite { .. } | Error::Diverged { .. } | Error::Singular(_) => {
                ErrorCategory::Numeric
            }
            _ => ErrorCategory::Data,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
