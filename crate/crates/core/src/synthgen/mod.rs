//! Procedural motion-aligned video data: one skeleton, several bodies,
//! shared motions and static scenes rendered with hard rasterization.

mod dataset;
mod io;
mod motion;
mod render;
mod scene;
mod skeleton;

use thiserror::Error;

pub use dataset::{
    build_paired_dataset, build_unpaired_set, generate_embodiment, plan_pairs, plan_unpaired, render_one,
    split_holdout, Canvas, DataConfig, HoldoutSplit, PairPlan, PairedSample, Triple, World,
};
pub use io::{read_dataset, write_dataset, DatasetDir, ManifestRecord, SplitRecord};
pub use motion::{generate_motion, MotionClip, MotionFamily};
pub use render::{on_segment, render, RenderedSequence};
pub use scene::{PatternKind, SceneSpec};
pub use skeleton::{joints, retarget, EmbodimentSpec, JointTrack, Skeleton};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("skeleton has {expected} joints, data has {found}")]
    TopologyMismatch { expected: usize, found: usize },
    #[error("invalid skeleton: {0}")]
    InvalidSkeleton(String),
    #[error("invalid embodiment: {0}")]
    InvalidEmbodiment(String),
    #[error("invalid motion: {0}")]
    InvalidMotion(String),
    #[error("joint {joint} leaves the canvas at frame {frame} ({x:.2}, {y:.2})")]
    OutOfFrame { frame: usize, joint: usize, x: f32, y: f32 },
    #[error("need at least 2 embodiments to form pairs, got {0}")]
    InsufficientEmbodiments(usize),
    #[error("budget {budget} outside [{min}, {available}]")]
    InvalidBudget { budget: usize, available: usize, min: usize },
    #[error("unknown embodiment {0}")]
    UnknownEmbodiment(String),
    #[error("unknown id {0}")]
    UnknownId(String),
    #[error("holdout fraction {0} must lie in (0, 1)")]
    InvalidFraction(f64),
    #[error("pair violates motion alignment: {0}")]
    InvalidPair(String),
    #[error("dataset format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
