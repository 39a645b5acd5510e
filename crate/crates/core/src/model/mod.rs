//! Branch-decoupled diffusion transformer, LoRA bank and checkpoints.

mod checkpoint;
mod config;
mod dit;
mod layout;
mod lora;
mod params;
mod patch;
mod sampler;

use thiserror::Error;

use crate::substrate::SubstrateError;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
pub use config::{ModelConfig, TextRule};
pub use dit::{forward, timestep_features, Bound, BoundAdapter, ForwardOut, ModelInputs};
pub use layout::{branch_visible, build_branch_mask, Branch, Role, TokenLayout};
pub use lora::{apply_lora, LoRAAdapter, LoraBank, LORA_PROJ};
pub use params::{
    init_params, is_backbone_base, is_shared_motion, proj_dims, tensor_hash, ParamStore, MOTION_PROJ,
};
pub use patch::{patchify, unpatchify};
pub use sampler::{teacher_layout, teacher_mask, Dit};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("empty token layout")]
    EmptyLayout,
    #[error("layout mismatch: {0}")]
    LayoutMismatch(String),
    #[error("adapter does not fit the model: {0}")]
    AdapterShapeMismatch(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("unknown embodiment {0}")]
    UnknownEmbodiment(String),
    #[error("embodiment {0} already registered")]
    DuplicateEmbodiment(String),
    #[error("missing tensor {0}")]
    MissingTensor(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Substrate(#[from] SubstrateError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[cfg(test)]
mod tests;
