//! Minimal deterministic numerical core.
//!
//! Dense row-major `f64` tensors, a tape that records matrix-level operations
//! and replays them in reverse to produce gradients, an Adam optimizer over a
//! named [`ParameterStore`], a central-difference gradient verifier and a
//! flat binary checkpoint format.
//!
//! The tape is rebuilt for every forward pass. Parameter values are borrowed
//! from the store, so building a graph never copies an embedding table.

mod checkpoint;
mod gradcheck;
mod graph;
mod optim;
mod store;
mod tensor;

pub use checkpoint::{read_checkpoint, read_payload, write_checkpoint, write_payload, CheckpointHeader};
pub use gradcheck::{finite_diff_check, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use optim::{adam_step, Adam, AdamConfig};
pub use store::{ParamId, ParameterStore};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("invalid shape {0:?}")]
    InvalidShape(Vec<usize>),
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("rows have different lengths")]
    RaggedRows,
    #[error("expected a matrix, got shape {0:?}")]
    NotMatrix(Vec<usize>),
    #[error("expected a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("index {index} out of range for {len} rows")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("duplicate parameter `{0}`")]
    DuplicateParam(String),
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("loss function failed: {0}")]
    Callback(String),
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
