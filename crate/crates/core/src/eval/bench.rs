use std::time::{Duration, Instant};

use crate::model::{patchify, unpatchify, Dit, LoRAAdapter, LoraBank};
use crate::rng::child_rng;
use crate::streaming::{rollout, RolloutConfig};
use crate::substrate::Tensor;
use crate::synthgen::RenderedSequence;

use super::metrics::{mse, psnr_from_mse, ssim};
use super::report::{MetricReport, SampleScore};
use super::EvalError;

/// What produces the target-body clip from a source clip.
pub enum Generator<'a> {
    /// Bidirectional model sampled with `steps` Euler steps over the whole clip.
    Teacher { dit: &'a Dit, steps: usize },
    /// Causal student rolled out chunk by chunk.
    Student {
        dit: &'a Dit,
        reference: &'a Tensor,
        rollout: RolloutConfig,
    },
}

impl Generator<'_> {
    pub fn dit(&self) -> &Dit {
        match self {
            Generator::Teacher { dit, .. } | Generator::Student { dit, .. } => dit,
        }
    }

    /// Generated clip and the number of model evaluations spent.
    pub fn generate(
        &self,
        source: &RenderedSequence,
        adapter: Option<&LoRAAdapter>,
        seed: u64,
    ) -> Result<(RenderedSequence, usize), EvalError> {
        match self {
            Generator::Teacher { dit, steps } => {
                let cfg = &dit.cfg;
                let cond = patchify(cfg, source, 0, cfg.frames);
                let mut rng = child_rng(seed, 0x7465_6163);
                let (tokens, n) = dit.sample(Some(&cond), cfg.frames, adapter, *steps, &mut rng)?;
                Ok((unpatchify(cfg, &tokens, cfg.frames), n))
            }
            Generator::Student { dit, reference, rollout: rc } => {
                let rc = RolloutConfig { seed, ..rc.clone() };
                let out = rollout(dit, adapter, source, reference, &rc)?;
                let n = out.evals_per_chunk.iter().sum();
                Ok((out.sequence, n))
            }
        }
    }
}

/// One held-out source/target pair.
#[derive(Clone, Debug)]
pub struct BenchCase {
    pub sample_id: String,
    pub source: RenderedSequence,
    pub target: RenderedSequence,
}

#[derive(Clone, Debug)]
pub struct BenchConfig {
    pub label: String,
    pub config_digest: String,
    pub seed: u64,
    /// Per-channel pixel mean of the training data, for the mean-frame baseline.
    pub pixel_mean: Vec<f32>,
}

#[derive(Clone, Debug)]
pub struct BenchResult {
    pub model: MetricReport,
    pub copy_source: MetricReport,
    pub mean_frame: MetricReport,
    pub generated: Vec<RenderedSequence>,
    pub evaluations: usize,
    pub elapsed: Duration,
}

pub fn score(sample_id: &str, generated: &RenderedSequence, target: &RenderedSequence) -> Result<SampleScore, EvalError> {
    let m = mse(generated, target)?;
    Ok(SampleScore {
        sample_id: sample_id.to_string(),
        psnr: psnr_from_mse(m, 1.0),
        ssim: ssim(generated, target)?,
        mse: m,
    })
}

/// Per-channel mean pixel over `seqs`.
pub fn pixel_mean(seqs: &[RenderedSequence]) -> Vec<f32> {
    let c = seqs.first().map_or(3, |s| s.channels);
    let mut sum = vec![0.0f64; c];
    let mut n = 0usize;
    for s in seqs {
        for px in s.data.chunks_exact(c) {
            for (acc, &v) in sum.iter_mut().zip(px) {
                *acc += v as f64;
            }
            n += 1;
        }
    }
    sum.iter().map(|s| (s / n.max(1) as f64) as f32).collect()
}

fn constant_like(s: &RenderedSequence, px: &[f32]) -> RenderedSequence {
    let data = (0..s.data.len()).map(|i| px[i % s.channels]).collect();
    RenderedSequence::from_data(s.shape(), data)
}

/// Generates every case with `embodiment`'s adapter active and scores it
/// alongside the copy-source and mean-frame baselines.
pub fn run_benchmark(
    generator: &Generator,
    cases: &[BenchCase],
    bank: &LoraBank,
    embodiment: &str,
    bc: &BenchConfig,
) -> Result<BenchResult, EvalError> {
    let adapter = bank
        .get(embodiment)
        .ok_or_else(|| EvalError::MissingAdapter(embodiment.to_string()))?;
    if bc.pixel_mean.is_empty() {
        return Err(EvalError::ShapeMismatch("empty pixel mean".into()));
    }
    let mut model = Vec::new();
    let mut copy = Vec::new();
    let mut mean = Vec::new();
    let mut generated = Vec::new();
    let mut evaluations = 0;
    let started = Instant::now();
    for (k, case) in cases.iter().enumerate() {
        let (g, n) = generator.generate(&case.source, Some(adapter), bc.seed ^ (k as u64).wrapping_mul(0x9e37_79b9))?;
        evaluations += n;
        model.push(score(&case.sample_id, &g, &case.target)?);
        copy.push(score(&case.sample_id, &case.source, &case.target)?);
        mean.push(score(&case.sample_id, &constant_like(&case.target, &bc.pixel_mean), &case.target)?);
        generated.push(g);
    }
    let elapsed = started.elapsed();
    let mut hashed = generator.dit().params.clone();
    hashed.merge(&adapter.factors.prefixed("adapter."));
    let ckpt = hashed.digest();
    Ok(BenchResult {
        model: MetricReport::new(&bc.label, &bc.config_digest, &ckpt, model),
        copy_source: MetricReport::new("copy_source", &bc.config_digest, &ckpt, copy),
        mean_frame: MetricReport::new("mean_frame", &bc.config_digest, &ckpt, mean),
        generated,
        evaluations,
        elapsed,
    })
}
