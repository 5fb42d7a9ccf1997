//! Encoder-decoder model, its gradient engine, optimizer and checkpoints.

mod checkpoint;
mod config;
mod matrix;
mod optim;
mod scalar;
mod tape;
mod transformer;

use thiserror::Error;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta, FORMAT_VERSION, MAGIC};
pub use config::ModelConfig;
pub use matrix::{gemm, matmul, Matrix, View, ViewMut};
pub use optim::{AdamW, AdamWConfig};
pub use scalar::Scalar;
pub use tape::{
    gelu, gelu_grad, log_softmax, EngineError, Gradients, ParamId, ParamStore, Tape, Var, LAYER_NORM_EPS,
};
pub use transformer::{prompt_param_name, BatchGrad, Encoded, Example, ForwardOutput, Init, Seq2Seq};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("sequence of {len} positions exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("token id {id} outside vocabulary of {vocab_size}")]
    TokenOutOfRange { id: u32, vocab_size: usize },
    #[error("whole-word index {index} outside capacity {capacity}")]
    WholeWordOutOfRange { index: u32, capacity: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("target sequence is empty")]
    EmptyTarget,
    #[error("non-finite values after {layer}")]
    NonFinite { layer: String },
    #[error("non-finite gradient for {0}")]
    NanGradient(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint format version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint checksum mismatch")]
    Checksum,
    #[error("checkpoint was written for a different model config: {0}")]
    ConfigMismatch(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
