//! Instruction-driven image and video segmentation at desk scale.
//!
//! Everything numeric runs on a tape-based reverse-mode autodiff core
//! (`tensor`). A small transformer co-decodes visual tokens, compressed
//! reference-frame tokens, instruction text, and learnable mask tokens;
//! text embeddings are fused with image features at two granularities and
//! score mask proposals decoded from a pixel map. Training data is a
//! procedural moving-shapes corpus with machine-checkable instruction
//! semantics, so every stage can be tested against an oracle.

pub mod checkpoint;
pub mod config;
pub mod dataio;
pub mod decoder;
pub mod fusion;
pub mod gradcheck;
pub mod llm;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod perceiver;
pub mod synth;
pub mod tensor;
pub mod trainer;
pub mod vocab;

/// Scalar type for all tensor math. Tests and gradient checks rely on the
/// default f64 build; the `single` feature trades precision for speed.
#[cfg(not(feature = "single"))]
pub type Real = f64;
#[cfg(feature = "single")]
pub type Real = f32;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("backward already ran on this graph")]
    BackwardTwice,
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("config: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Invalid { op, msg: msg.into() }
    }
}
