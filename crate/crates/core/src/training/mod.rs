//! Backbone pretraining, embodiment LoRA training, shared-motion training
//! with rolling adapters, and paired-free adaptation.

mod loss;
mod optim;
mod stages;

use thiserror::Error;

use crate::model::ModelError;
use crate::substrate::SubstrateError;

pub use loss::{dsm_loss, interpolate, teacher_batch, teacher_velocity, velocity_target};
pub use optim::{clip_global_norm, AdamW};
pub use stages::{
    adapt_unseen, base_partition, micro_step, pretrain_backbone, shared_partition, smoothed_endpoints, stage1_train_lora,
    stage2_train_shared, state_hashes, FreezeAudit, LossLog, LossRecord, SharedScope, Stage2Outcome, Stage2Sampler,
    StageOutcome, TrainConfig,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("empty dataset")]
    EmptyDataset,
    #[error("unpaired set for {expected} contains a clip of {found}")]
    MixedEmbodimentData { expected: String, found: String },
    #[error("no adapter registered for target embodiment {0}")]
    MissingAdapter(String),
    #[error("embodiment {0} already has an adapter")]
    EmbodimentAlreadyKnown(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Substrate(#[from] SubstrateError),
}
