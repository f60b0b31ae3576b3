use dpn_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DpnError {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("metric undefined: {0}")]
    Metric(String),

    #[error("training diverged at epoch {epoch}, step {step}; restored last finite parameters")]
    Diverged { epoch: usize, step: usize },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl DpnError {
    pub fn config(msg: impl Into<String>) -> Self {
        DpnError::Config(msg.into())
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        DpnError::Io { path: path.as_ref().display().to_string(), source }
    }

    /// Whether the error stems from user input rather than a runtime failure.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            DpnError::Config(_)
                | DpnError::Parse { .. }
                | DpnError::Io { .. }
                | DpnError::Tensor(TensorError::Config(_))
        )
    }
}

pub type Result<T, E = DpnError> = std::result::Result<T, E>;
