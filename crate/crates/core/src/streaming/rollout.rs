use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::Rng;

use crate::model::{
    forward, patchify, unpatchify, Bound, BoundAdapter, Dit, LoRAAdapter, ModelConfig, ModelInputs, Role,
};
use crate::rng::child_rng;
use crate::substrate::{Scalar, Tape, Tensor, Var};
use crate::synthgen::RenderedSequence;

use super::cache::KVCache;
use super::layout::{build_block_causal_mask, causal_rows, Span, SuperChunkLayout};
use super::StreamError;

/// Evaluation times of an `steps`-step student: midpoints of `steps` equal bins, descending.
pub fn student_times(steps: usize) -> Vec<f64> {
    (0..steps).map(|k| 1.0 - (k as f64 + 0.5) / steps as f64).collect()
}

/// Clean-data estimate `x − t·v` from a velocity prediction.
pub fn predict_x0<S: Scalar>(x: &Tensor<S>, v: &Tensor<S>, t: f64) -> Tensor<S> {
    let t = S::from_f64(t).unwrap();
    Tensor::new(
        x.shape().to_vec(),
        x.data().iter().zip(v.data()).map(|(&a, &b)| a - t * b).collect(),
    )
    .unwrap()
}

/// Token inputs of the first `current.chunk + 1` chunks of a super-chunk layout.
pub struct ChunkContext<'a, S: Scalar> {
    pub reference: &'a Tensor<S>,
    /// Source tokens of chunks `0..=i`.
    pub conds: &'a [Tensor<S>],
    /// Clean committed targets of chunks `0..i`.
    pub committed: &'a [Tensor<S>],
}

/// Velocity of the newest chunk's target tokens `current` at time `t`,
/// from one uncached forward over the whole prefix under block-causal attention.
#[allow(clippy::too_many_arguments)]
pub fn causal_velocity<S: Scalar>(
    tape: &mut Tape<S>,
    cfg: &ModelConfig,
    layout: &SuperChunkLayout,
    params: &Bound,
    adapter: Option<&BoundAdapter>,
    ctx: &ChunkContext<S>,
    current: &Tensor<S>,
    t: f64,
) -> Result<Var, StreamError> {
    let i = ctx.committed.len();
    if ctx.conds.len() != i + 1 || i >= layout.chunks {
        return Err(StreamError::InvalidLength(format!(
            "{} cond chunks and {} committed chunks for a {}-chunk layout",
            ctx.conds.len(),
            i,
            layout.chunks
        )));
    }
    let prefix = layout.prefix(i + 1);
    let mut parts = vec![ctx.reference];
    for j in 0..=i {
        parts.push(&ctx.conds[j]);
        parts.push(if j < i { &ctx.committed[j] } else { current });
    }
    let patches = Tensor::concat_rows(&parts)?;
    let cur = prefix.span(Span::Tgt(i));
    let times = (0..prefix.len()).map(|k| if cur.contains(&k) { t } else { 0.0 }).collect();
    let mask = Arc::new(build_block_causal_mask(&prefix));
    let out = forward(tape, cfg, params, adapter, &prefix.tokens, &mask, &ModelInputs { patches, times }, None)?;
    // Den rows come in layout order, so the newest chunk is last.
    let rows = tape.value(out.velocity).dims2().0;
    Ok(tape.slice_rows(out.velocity, rows - layout.tgt_len, layout.tgt_len)?)
}

#[derive(Clone, Debug)]
pub struct RolloutConfig {
    pub student_steps: usize,
    pub use_cache: bool,
    pub seed: u64,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            student_steps: 4,
            use_cache: true,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct RolloutOutput {
    /// Clean target tokens, chunk after chunk.
    pub tokens: Tensor,
    pub sequence: RenderedSequence,
    /// Committed chunks.
    pub chunks: Vec<Tensor>,
    /// Noisy state fed to each chunk's final evaluation.
    pub last_inputs: Vec<Tensor>,
    pub evals_per_chunk: Vec<usize>,
    pub chunk_time: Vec<Duration>,
    /// Cached tokens after the rollout (zero without the cache).
    pub cache_len: usize,
}

fn roles_of(layout: &SuperChunkLayout, span: std::ops::Range<usize>) -> Vec<(Role, usize)> {
    span.map(|k| (layout.role(k), layout.chunk(k))).collect()
}

/// One forward of tokens `span` against the cache, returning velocity and per-block keys/values.
fn cached_call(
    dit: &Dit,
    adapter: Option<&LoRAAdapter>,
    layout: &SuperChunkLayout,
    cache: &KVCache,
    span: std::ops::Range<usize>,
    patches: &Tensor,
    t: f64,
) -> Result<(Tensor, Vec<(Tensor, Tensor)>), StreamError> {
    if cache.len() != span.start {
        return Err(StreamError::LedgerMismatch(format!(
            "cache holds {} tokens, call starts at {}",
            cache.len(),
            span.start
        )));
    }
    let mut tape = Tape::new();
    let p = Bound::new(&mut tape, &dit.params, |_| false);
    let a = adapter.map(|a| BoundAdapter::new(&mut tape, a, false));
    let tokens = layout.tokens.slice(span.clone());
    let mask = Arc::new(causal_rows(layout, span.clone()));
    let times = tokens.roles.iter().map(|r| if *r == Role::Den { t } else { 0.0 }).collect();
    let inputs = ModelInputs {
        patches: patches.clone(),
        times,
    };
    let out = forward(&mut tape, &dit.cfg, &p, a.as_ref(), &tokens, &mask, &inputs, Some(cache.past()))?;
    let kv = out
        .kv
        .iter()
        .map(|&(k, v)| (tape.value(k).clone(), tape.value(v).clone()))
        .collect();
    Ok((tape.value(out.velocity).clone(), kv))
}

/// Source chunk tokens and the reference patch tokens of a rollout.
pub fn source_chunks(cfg: &ModelConfig, source: &RenderedSequence) -> Vec<Tensor> {
    (0..cfg.chunks())
        .map(|i| patchify(cfg, source, i * cfg.chunk_frames, cfg.chunk_frames))
        .collect()
}

/// Tokens of frame `frame` of `exemplar`, used as the reference span.
pub fn reference_tokens(cfg: &ModelConfig, exemplar: &RenderedSequence, frame: usize) -> Tensor {
    patchify(cfg, exemplar, frame, 1)
}

/// Chunk-by-chunk generation conditioned on `source`. Each chunk is denoised
/// with `student_steps` evaluations from noise, then committed clean.
pub fn rollout(
    student: &Dit,
    adapter: Option<&LoRAAdapter>,
    source: &RenderedSequence,
    reference: &Tensor,
    rc: &RolloutConfig,
) -> Result<RolloutOutput, StreamError> {
    let cfg = &student.cfg;
    if rc.student_steps == 0 {
        return Err(StreamError::InvalidConfig("student_steps must be at least 1".into()));
    }
    if source.frames != cfg.frames {
        return Err(StreamError::InvalidLength(format!(
            "source has {} frames, model expects {}",
            source.frames, cfg.frames
        )));
    }
    let layout = SuperChunkLayout::for_model(cfg, cfg.chunks())?;
    if reference.dims2() != (layout.ref_len, cfg.patch_dim()) {
        return Err(StreamError::InvalidLength(format!("reference tokens {:?}", reference.shape())));
    }
    let conds = source_chunks(cfg, source);
    let times = student_times(rc.student_steps);
    let mut cache = KVCache::new(layout.clone(), cfg.depth, cfg.embed_dim);
    if rc.use_cache {
        let span = layout.span(Span::Ref);
        let (_, kv) = cached_call(student, adapter, &layout, &cache, span.clone(), reference, 0.0)?;
        cache.append_all(&kv, &roles_of(&layout, span))?;
    }
    let shape = [layout.tgt_len, cfg.patch_dim()];
    let mut chunks: Vec<Tensor> = Vec::new();
    let mut last_inputs = Vec::new();
    let mut evals = Vec::new();
    let mut chunk_time = Vec::new();
    for i in 0..layout.chunks {
        let started = Instant::now();
        // Per-chunk noise, so a chunk never depends on how later chunks draw.
        let mut rng = child_rng(rc.seed, 0x7374_7265 + i as u64);
        if rc.use_cache {
            let span = layout.span(Span::Cond(i));
            let (_, kv) = cached_call(student, adapter, &layout, &cache, span.clone(), &conds[i], 0.0)?;
            cache.append_all(&kv, &roles_of(&layout, span))?;
        }
        let noise: Tensor = Tensor::randn(&shape, 1.0, &mut rng);
        let mut x = noise.map(|e| e * times[0] as f32);
        let mut x0 = x.clone();
        let mut n_evals = 0;
        for (k, &t) in times.iter().enumerate() {
            let v = if rc.use_cache {
                cached_call(student, adapter, &layout, &cache, layout.span(Span::Tgt(i)), &x, t)?.0
            } else {
                let mut tape = Tape::new();
                let p = Bound::new(&mut tape, &student.params, |_| false);
                let a = adapter.map(|a| BoundAdapter::new(&mut tape, a, false));
                let ctx = ChunkContext {
                    reference,
                    conds: &conds[..=i],
                    committed: &chunks,
                };
                let v = causal_velocity(&mut tape, cfg, &layout, &p, a.as_ref(), &ctx, &x, t)?;
                tape.value(v).clone()
            };
            n_evals += 1;
            x0 = predict_x0(&x, &v, t);
            if k + 1 == times.len() {
                last_inputs.push(x.clone());
            } else {
                let tn = times[k + 1] as f32;
                let fresh: Tensor = Tensor::randn(&shape, 1.0, &mut rng);
                x = Tensor::new(
                    shape.to_vec(),
                    x0.data().iter().zip(fresh.data()).map(|(&a, &e)| (1.0 - tn) * a + tn * e).collect(),
                )?;
            }
        }
        if rc.use_cache {
            let span = layout.span(Span::Tgt(i));
            let (_, kv) = cached_call(student, adapter, &layout, &cache, span.clone(), &x0, 0.0)?;
            cache.append_all(&kv, &roles_of(&layout, span))?;
        }
        chunks.push(x0);
        evals.push(n_evals);
        chunk_time.push(started.elapsed());
    }
    let tokens = Tensor::concat_rows(&chunks.iter().collect::<Vec<_>>())?;
    let mut sequence = unpatchify(cfg, &tokens, cfg.frames);
    sequence.embodiment_id = adapter.map_or(String::new(), |a| a.embodiment_id.clone());
    sequence.motion_id = source.motion_id.clone();
    sequence.scene_id = source.scene_id.clone();
    sequence.motion_digest = source.motion_digest.clone();
    Ok(RolloutOutput {
        tokens,
        sequence,
        chunks,
        last_inputs,
        evals_per_chunk: evals,
        chunk_time,
        cache_len: cache.len(),
    })
}

/// Draws uniformly from `0..n` (helper shared by the distillation loops).
pub(crate) fn pick<R: Rng>(rng: &mut R, n: usize) -> usize {
    rng.random_range(0..n)
}
