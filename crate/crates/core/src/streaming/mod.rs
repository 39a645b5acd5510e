//! Causal few-step student over the interleaved super-chunk layout: block-causal
//! masking, cached autoregressive rollout, and two-phase distillation from the
//! bidirectional teacher.

mod cache;
mod distill;
mod layout;
mod rollout;

use thiserror::Error;

use crate::model::ModelError;
use crate::substrate::SubstrateError;
use crate::training::TrainError;

pub use cache::KVCache;
pub use distill::{
    causal_dsm_loss, frame_scores, hinge_d, hinge_g, init_student, self_forcing_distill, stream_loss,
    teacher_forcing_distill, vsd_target, DistillConfig, DistillSample, Discriminator, SelfForcingOutcome,
    StreamBatch, StreamLoss,
};
pub use layout::{build_block_causal_mask, build_superchunk_layout, causal_rows, causal_visible, Span, SuperChunkLayout};
pub use rollout::{
    causal_velocity, predict_x0, reference_tokens, rollout, source_chunks, student_times, ChunkContext,
    RolloutConfig, RolloutOutput,
};

#[derive(Debug, Error)]
pub enum StreamError {
    #[error("invalid span length: {0}")]
    InvalidLength(String),
    #[error("cache ledger mismatch: {0}")]
    LedgerMismatch(String),
    #[error("teacher weights changed during distillation")]
    FrozenTeacherViolation,
    #[error("invalid distillation config: {0}")]
    InvalidConfig(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Substrate(#[from] SubstrateError),
}

#[cfg(test)]
mod tests;
