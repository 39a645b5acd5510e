//! Reference metrics, held-out benchmarking with baselines, and invariant probes.

mod bench;
mod grid;
mod metrics;
mod probe;
mod report;

use thiserror::Error;

use crate::model::ModelError;
use crate::streaming::StreamError;

pub use bench::{pixel_mean, run_benchmark, score, BenchCase, BenchConfig, BenchResult, Generator};
pub use grid::{frame_grid_ppm, write_frame_grid};
pub use metrics::{mse, psnr, psnr_from_mse, ssim, ssim_window, PSNR_CAP, SSIM_C1, SSIM_C2, SSIM_STRIDE, SSIM_WINDOW};
pub use probe::{
    leak_one_den_entry, probe_cache, probe_causality, probe_flow_isolation, probe_freeze, probe_invariants,
    probe_mask_structure, ProbeResult, ProbeTable, StudentProbe,
};
pub use report::{MetricReport, SampleScore};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("no adapter registered for {0}")]
    MissingAdapter(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Stream(#[from] StreamError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
