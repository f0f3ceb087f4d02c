use thiserror::Error;

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },

    #[error("division domain error: |divisor| below {floor:e} at flat positions {positions:?}")]
    DivisionDomain { floor: f64, positions: Vec<usize> },

    #[error("numerical domain error in {op}: {reason}")]
    NumericalDomain { op: &'static str, reason: String },

    #[error("reduction over an empty axis set")]
    EmptyReduction,

    #[error("axis {axis} invalid for rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },

    #[error("dimension mismatch in {op}: {reason}")]
    DimensionMismatch { op: &'static str, reason: String },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("graph already consumed by a previous backward pass")]
    GraphConsumed,

    #[error("unknown variable id {0}")]
    UnknownVar(usize),

    #[error("dtype mismatch: expected {expected}, found {found}")]
    DType { expected: String, found: String },

    #[error("tensor format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
