//! Dense-tensor computation with reverse-mode automatic differentiation.
//!
//! [`Tensor`] is a flat row-major value; [`Tape`] records operations eagerly
//! and [`Tape::backward`] accumulates gradients into the [`Params`] registry
//! that owns a model's trainable tensors. [`optim`] provides Adam and the
//! warmup-then-linear-decay learning-rate schedule; [`checkpoint`] the binary
//! parameter file format.
//!
//! Training runs in `f32`; gradient checks instantiate the same code in `f64`
//! (see [`gradcheck`]).

mod tensor;

pub mod checkpoint;
pub mod gradcheck;
pub mod optim;
pub mod tape;

#[cfg(test)]
mod op_tests;

pub use optim::{warmup_linear_lr, AdamState};
pub use tape::{AttnMask, Tape, Var};
pub use tensor::{ParamId, Parameter, Params, Real, Tensor};

use thiserror::Error;

/// Errors raised by tensor construction, tape operations and the optimizer.
#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("shape {shape:?} does not match data length {len}")]
    ShapeDataMismatch { shape: Vec<usize>, len: usize },
    #[error("dimension mismatch in {op}: lhs {lhs:?} vs rhs {rhs:?}")]
    DimMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid axis {axis} for shape {shape:?}")]
    InvalidAxis {
        op: &'static str,
        axis: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: expected a scalar, got shape {shape:?}")]
    NotScalar { op: &'static str, shape: Vec<usize> },
    #[error("target id {id} out of range for vocabulary size {vocab}")]
    TargetOutOfRange { id: u32, vocab: usize },
    #[error("embedding id {id} out of range for table with {rows} rows")]
    EmbeddingOutOfRange { id: usize, rows: usize },
    #[error("duplicate parameter name {0:?}")]
    DuplicateParam(String),
    #[error("parameter {0:?} has no gradient; run backward first")]
    MissingGrad(String),
    #[error("{0}")]
    Contract(String),
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format error at byte {offset}: {reason}")]
    CheckpointFormat { offset: u64, reason: String },
}

pub type Result<T> = std::result::Result<T, NumericsError>;
