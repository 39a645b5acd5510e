//! Dense tensors, a recorded-tape autodiff, masked attention and a
//! finite-difference gradient checker.

mod gradcheck;
mod kernels;
mod mask;
mod tape;
mod tensor;

use std::sync::Arc;

use thiserror::Error;

pub use gradcheck::grad_check;
pub use kernels::LAYER_NORM_EPS;
pub use mask::AttentionMask;
pub use tape::{Tape, Var};
pub use tensor::{Scalar, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SubstrateError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("query row {0} has no visible key")]
    FullyMaskedRow(usize),
    #[error("non-finite value in {0}")]
    NonFiniteValue(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// Single-head scaled dot-product attention under `mask`.
pub fn masked_attention<S: Scalar>(
    q: &Tensor<S>,
    k: &Tensor<S>,
    v: &Tensor<S>,
    mask: &AttentionMask,
) -> Result<Tensor<S>, SubstrateError> {
    let mut tape = Tape::new();
    let (qv, kv, vv) = (
        tape.constant(q.clone()),
        tape.constant(k.clone()),
        tape.constant(v.clone()),
    );
    let out = tape.attention(qv, kv, vv, 1, Arc::new(mask.clone()))?;
    Ok(tape.value(out).clone())
}

pub fn layer_norm<S: Scalar>(
    x: &Tensor<S>,
    gain: &Tensor<S>,
    bias: &Tensor<S>,
) -> Result<Tensor<S>, SubstrateError> {
    let mut tape = Tape::new();
    let (xv, g, b) = (
        tape.constant(x.clone()),
        tape.constant(gain.clone()),
        tape.constant(bias.clone()),
    );
    let out = tape.layer_norm(xv, g, b)?;
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests;
