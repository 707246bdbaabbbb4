use std::path::PathBuf;

use ross_autograd::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RossError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid range: {0}")]
    InvalidRange(String),
    #[error("unknown {what}: {value}")]
    UnknownKind { what: &'static str, value: String },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("timestep {t} out of range 1..={max}")]
    TimestepOutOfRange { t: usize, max: usize },
    #[error("unsupported operation: {0}")]
    Unsupported(String),
    #[error("missing component for objective {variant}: {component}")]
    MissingComponent {
        variant: &'static str,
        component: &'static str,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite loss at step {step}: text={text_loss}, visual={visual_loss}")]
    NonFinite {
        step: u64,
        text_loss: f64,
        visual_loss: f64,
    },
    #[error("tokenizer did not converge: held-out mse {mse:.3e} above threshold {threshold:.3e}")]
    NonConvergence { mse: f64, threshold: f64 },
    #[error("empty {0}")]
    Empty(&'static str),
    #[error("sequence of length {len} exceeds max_seq {max}")]
    SequenceOverflow { len: usize, max: usize },
    #[error("degenerate sample: {0}")]
    Degenerate(String),
    #[error("bad container {path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl RossError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        RossError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        RossError::Shape(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        RossError::Config(msg.into())
    }

    /// Whether the error stems from user input rather than a runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            RossError::InvalidRange(_)
                | RossError::UnknownKind { .. }
                | RossError::Config(_)
                | RossError::MissingComponent { .. }
        )
    }
}

pub type Result<T, E = RossError> = std::result::Result<T, E>;
