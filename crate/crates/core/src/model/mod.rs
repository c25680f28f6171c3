//! Conditional decoder-only transformer.
//!
//! Condition vectors form a prefix ahead of the material tokens; positions
//! (and RoPE angles) count from the start of the prefix. Each block is
//! pre-norm: `x + Attn(RMSNorm(x))`, then `x + SwiGLU(RMSNorm(x))`.

mod checkpoint;
mod conditions;
mod config;
mod graph;
mod infer;
pub mod ops;
mod params;
mod real;

use thiserror::Error;

pub use checkpoint::{Checkpoint, ExtraTensor};
pub use conditions::{prefix_slots, scalar_slots, Condition, ConditionSet, PrefixSlot};
pub use config::ModelConfig;
pub use graph::{backward, embed_conditions, forward, forward_logits, Graph, Mode, SeqInput, SeqSpan};
pub use infer::{InferenceModel, KvCache};
pub use params::{count_params, Layout, ModelParams, TensorEntry};
pub use real::{dot, gemm, Real};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    BadConfig(String),
    #[error("head dimension {0} is odd")]
    OddHeadDim(usize),
    #[error("condition `{0}` is not in the model's schema")]
    UnknownCondition(String),
    #[error("invalid condition: {0}")]
    InvalidCondition(String),
    #[error("stoichiometric count {count} exceeds the table size {max}")]
    StoichOutOfTable { count: u32, max: usize },
    #[error("sequence of length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("token id {0} outside the vocabulary")]
    UnknownToken(u32),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("vocabulary hash mismatch: expected {expected}, checkpoint has {found}")]
    VocabMismatch { expected: String, found: String },
    #[error("tensor {name}: expected shape {expected:?}, found {found:?}")]
    ShapeMismatch { name: String, expected: Vec<usize>, found: Vec<usize> },
    #[error("parameters contain non-finite values")]
    NonFinite,
    #[error("i/o: {0}")]
    Io(String),
}
