use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },

    #[error("axis {axis} out of range for {op} on rank-{rank} tensor")]
    Axis {
        op: &'static str,
        axis: usize,
        rank: usize,
    },

    #[error("{what}: index {index} out of range [0, {len})")]
    Index {
        what: String,
        index: usize,
        len: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("runtime error: {0}")]
    Runtime(String),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;
