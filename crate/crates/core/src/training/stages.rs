use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::model::{
    is_backbone_base, is_shared_motion, patchify, Bound, BoundAdapter, Dit, LoRAAdapter, LoraBank, ModelConfig,
    ParamStore,
};
use crate::rng::child_rng;
use crate::substrate::{Tape, Tensor};
use crate::synthgen::{PairedSample, RenderedSequence};

use super::loss::dsm_loss;
use super::optim::{clip_global_norm, AdamW};
use super::TrainError;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f32,
    pub steps: usize,
    /// Micro-batches (of one sequence each) per optimizer step.
    pub accum: usize,
    pub clip: f32,
    pub weight_decay: f32,
    pub t_min: f64,
    pub t_max: f64,
    /// Probability of dropping the cond stream during backbone pretraining.
    pub cond_dropout: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            steps: 200,
            accum: 4,
            clip: 1.0,
            weight_decay: 0.0,
            t_min: 0.001,
            t_max: 0.999,
            cond_dropout: 0.5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.lr >= 0.0) || self.accum == 0 || !(0.0 < self.t_min && self.t_min < self.t_max && self.t_max < 1.0) {
            return Err(TrainError::InvalidArgument(format!("train config {:?}", self)));
        }
        Ok(())
    }
}

/// Which tensors stage II may change.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SharedScope {
    /// Cond-branch motion deltas and the cond embedding.
    MotionDeltas,
    /// Every backbone tensor (adapters stay frozen).
    AllShared,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub stage: String,
    pub embodiment: String,
    pub loss: f32,
}

/// Append-only per-step loss log.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossLog {
    pub records: Vec<LossRecord>,
}

impl LossLog {
    pub fn push(&mut self, step: usize, stage: &str, embodiment: &str, loss: f32) {
        self.records.push(LossRecord {
            step,
            stage: stage.to_string(),
            embodiment: embodiment.to_string(),
            loss,
        });
    }

    pub fn losses(&self) -> Vec<f32> {
        self.records.iter().map(|r| r.loss).collect()
    }

    pub fn extend(&mut self, other: &LossLog) {
        self.records.extend(other.records.iter().cloned());
    }

    /// `step\tstage\tembodiment\tloss` lines.
    pub fn to_text(&self) -> String {
        let mut s = String::from("# step\tstage\tactive_embodiment\tloss\n");
        for r in &self.records {
            s.push_str(&format!("{}\t{}\t{}\t{:.6}\n", r.step, r.stage, r.embodiment, r.loss));
        }
        s
    }
}

/// Mean of the first and last `window` values.
pub fn smoothed_endpoints(values: &[f32], window: usize) -> (f32, f32) {
    let w = window.clamp(1, values.len().max(1));
    let mean = |s: &[f32]| s.iter().sum::<f32>() / s.len().max(1) as f32;
    (mean(&values[..w.min(values.len())]), mean(&values[values.len().saturating_sub(w)..]))
}

/// Byte-hash comparison of the full model state around one stage.
#[derive(Clone, Debug, PartialEq)]
pub struct FreezeAudit {
    pub stage: String,
    pub before: BTreeMap<String, String>,
    pub after: BTreeMap<String, String>,
    /// Tensors the stage is allowed to change.
    pub designated: BTreeSet<String>,
    /// Tensors the optimizer actually updated.
    pub updated: BTreeSet<String>,
}

impl FreezeAudit {
    pub fn changed(&self) -> BTreeSet<String> {
        let keys: BTreeSet<&String> = self.before.keys().chain(self.after.keys()).collect();
        keys.into_iter()
            .filter(|k| self.before.get(*k) != self.after.get(*k))
            .cloned()
            .collect()
    }

    /// Out-of-partition tensors whose bytes changed.
    pub fn violations(&self) -> Vec<String> {
        self.changed().difference(&self.designated).cloned().collect()
    }

    pub fn passes(&self) -> bool {
        self.violations().is_empty() && self.updated == self.designated
    }
}

/// Everything a stage could touch: backbone tensors plus every adapter as `adapter.{id}.…`.
pub fn state_hashes(dit: &Dit, bank: &LoraBank) -> BTreeMap<String, String> {
    let mut h = dit.params.hashes();
    h.extend(bank.to_store().hashes());
    h
}

/// Token rows of every sequence.
fn tokens_of(cfg: &ModelConfig, seqs: &[&RenderedSequence]) -> Result<Vec<Tensor>, TrainError> {
    seqs.iter()
        .map(|s| {
            if s.frames != cfg.frames || s.height != cfg.height || s.width != cfg.width || s.channels != cfg.channels {
                return Err(TrainError::InvalidArgument(format!(
                    "sequence {} has shape {:?}, model expects {}x{}x{}x{}",
                    s.sequence_id(),
                    s.shape(),
                    cfg.frames,
                    cfg.height,
                    cfg.width,
                    cfg.channels
                )));
            }
            Ok(patchify(cfg, s, 0, s.frames))
        })
        .collect()
}

fn draw_t(rng: &mut ChaCha8Rng, tc: &TrainConfig) -> f64 {
    rng.random_range(tc.t_min..tc.t_max)
}

/// Loss and gradients for one micro-batch. Gradients are taken for backbone
/// tensors satisfying `train_backbone`, and for the adapter when `train_adapter`.
#[allow(clippy::too_many_arguments)]
pub fn micro_step(
    dit: &Dit,
    adapter: Option<&LoRAAdapter>,
    train_backbone: &dyn Fn(&str) -> bool,
    train_adapter: bool,
    x0: &Tensor,
    cond: Option<&Tensor>,
    t: f64,
    noise: &Tensor,
) -> Result<(f32, BTreeMap<String, Tensor>), TrainError> {
    let mut tape = Tape::new();
    let p = Bound::new(&mut tape, &dit.params, train_backbone);
    let a = adapter.map(|a| BoundAdapter::new(&mut tape, a, train_adapter));
    let loss = dsm_loss(&mut tape, &dit.cfg, &p, a.as_ref(), x0, cond, t, noise)?;
    let value = tape.scalar_value(loss);
    let mut grads = BTreeMap::new();
    if tape.requires_grad(loss) {
        tape.backward(loss)?;
        for (name, v) in p.iter() {
            if train_backbone(name) {
                grads.insert(name.to_string(), tape.grad(v).unwrap_or_else(|| Tensor::zeros(tape.value(v).shape())));
            }
        }
        if let Some(a) = &a {
            if train_adapter {
                for (name, v) in a.factors.iter() {
                    grads.insert(
                        format!("adapter:{}", name),
                        tape.grad(v).unwrap_or_else(|| Tensor::zeros(tape.value(v).shape())),
                    );
                }
            }
        }
    }
    Ok((value, grads))
}

fn accumulate(sum: &mut BTreeMap<String, Tensor>, g: BTreeMap<String, Tensor>, w: f32) {
    for (k, v) in g {
        match sum.get_mut(&k) {
            Some(s) => {
                for (a, b) in s.data_mut().iter_mut().zip(v.data()) {
                    *a += w * b;
                }
            }
            None => {
                sum.insert(k, v.map(|x| w * x));
            }
        }
    }
}

fn split_adapter_grads(grads: BTreeMap<String, Tensor>) -> (BTreeMap<String, Tensor>, BTreeMap<String, Tensor>) {
    let mut backbone = BTreeMap::new();
    let mut adapter = BTreeMap::new();
    for (k, v) in grads {
        match k.strip_prefix("adapter:") {
            Some(n) => {
                adapter.insert(n.to_string(), v);
            }
            None => {
                backbone.insert(k, v);
            }
        }
    }
    (backbone, adapter)
}

/// Backbone pretraining on sequences of the training embodiments.
///
/// Trains every backbone tensor except the motion deltas, without adapters.
/// The cond stream carries the sequence's own first chunk, dropped with
/// probability `cond_dropout` so the model also learns to generate unconditioned.
pub fn pretrain_backbone(
    data: &[RenderedSequence],
    cfg: &ModelConfig,
    tc: &TrainConfig,
) -> Result<(Dit, LossLog), TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    tc.validate()?;
    let mut dit = Dit::new(cfg.clone(), tc.seed)?;
    let tokens = tokens_of(cfg, &data.iter().collect::<Vec<_>>())?;
    let first_chunk = cfg.chunk_frames * cfg.tokens_per_frame();
    let trainable = |n: &str| !n.starts_with("motion.");
    let mut opt = AdamW::new(tc.lr, tc.weight_decay);
    let mut rng = child_rng(tc.seed, 0x7072_6574);
    let mut log = LossLog::default();
    for step in 0..tc.steps {
        let mut sum = BTreeMap::new();
        let mut loss = 0.0;
        for _ in 0..tc.accum {
            let i = rng.random_range(0..tokens.len());
            let t = draw_t(&mut rng, tc);
            let noise = Tensor::randn(tokens[i].shape(), 1.0, &mut rng);
            let cond = if rng.random_bool(tc.cond_dropout) {
                None
            } else {
                Some(tokens[i].rows(0, first_chunk))
            };
            let (l, g) = micro_step(&dit, None, &trainable, false, &tokens[i], cond.as_ref(), t, &noise)?;
            loss += l / tc.accum as f32;
            accumulate(&mut sum, g, 1.0 / tc.accum as f32);
        }
        clip_global_norm(&mut sum, tc.clip);
        opt.step(&mut dit.params, &sum);
        log.push(step, "pretrain", "-", loss);
    }
    Ok((dit, log))
}

#[derive(Clone, Debug)]
pub struct StageOutcome {
    pub log: LossLog,
    pub audit: FreezeAudit,
}

/// Shared body of stage I and adaptation: train a fresh adapter on unpaired
/// clips of one embodiment against a frozen model, then register it.
fn train_adapter(
    stage: &str,
    embodiment: &str,
    unpaired: &[RenderedSequence],
    dit: &Dit,
    bank: &mut LoraBank,
    tc: &TrainConfig,
) -> Result<StageOutcome, TrainError> {
    if unpaired.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if let Some(s) = unpaired.iter().find(|s| s.embodiment_id != embodiment) {
        return Err(TrainError::MixedEmbodimentData {
            expected: embodiment.to_string(),
            found: s.embodiment_id.clone(),
        });
    }
    tc.validate()?;
    let tokens = tokens_of(&dit.cfg, &unpaired.iter().collect::<Vec<_>>())?;
    let mut adapter = LoRAAdapter::new(embodiment, &dit.cfg, tc.seed);
    bank.register(adapter.clone())?;
    let before = state_hashes(dit, bank);
    let mut opt = AdamW::new(tc.lr, tc.weight_decay);
    let mut rng = child_rng(tc.seed, 0x6c6f_7261_0000 ^ unpaired.len() as u64);
    let mut log = LossLog::default();
    let frozen = |_: &str| false;
    for step in 0..tc.steps {
        let mut sum = BTreeMap::new();
        let mut loss = 0.0;
        for _ in 0..tc.accum {
            let i = rng.random_range(0..tokens.len());
            let t = draw_t(&mut rng, tc);
            let noise = Tensor::randn(tokens[i].shape(), 1.0, &mut rng);
            let (l, g) = micro_step(dit, Some(&adapter), &frozen, true, &tokens[i], None, t, &noise)?;
            loss += l / tc.accum as f32;
            accumulate(&mut sum, g, 1.0 / tc.accum as f32);
        }
        let (_, mut grads) = split_adapter_grads(sum);
        clip_global_norm(&mut grads, tc.clip);
        opt.step(&mut adapter.factors, &grads);
        log.push(step, stage, embodiment, loss);
    }
    bank.update(adapter.clone())?;
    let prefix = format!("adapter.{}.", embodiment);
    let audit = FreezeAudit {
        stage: stage.to_string(),
        before,
        after: state_hashes(dit, bank),
        designated: adapter.factors.names().map(|n| format!("{}{}", prefix, n)).collect(),
        updated: if tc.steps == 0 {
            adapter.factors.names().map(|n| format!("{}{}", prefix, n)).collect()
        } else {
            opt.update_set().into_iter().map(|n| format!("{}{}", prefix, n)).collect()
        },
    };
    Ok(StageOutcome { log, audit })
}

/// Stage I: embodiment LoRA on unpaired clips with the backbone frozen.
pub fn stage1_train_lora(
    embodiment: &str,
    unpaired: &[RenderedSequence],
    dit: &Dit,
    bank: &mut LoraBank,
    tc: &TrainConfig,
) -> Result<StageOutcome, TrainError> {
    train_adapter("stage1", embodiment, unpaired, dit, bank, tc)
}

/// Adaptation of an unseen embodiment against the frozen post-stage-II model.
pub fn adapt_unseen(
    embodiment: &str,
    unpaired: &[RenderedSequence],
    dit: &Dit,
    bank: &mut LoraBank,
    tc: &TrainConfig,
) -> Result<StageOutcome, TrainError> {
    if bank.contains(embodiment) {
        return Err(TrainError::EmbodimentAlreadyKnown(embodiment.to_string()));
    }
    train_adapter("adapt", embodiment, unpaired, dit, bank, tc)
}

#[derive(Clone, Debug)]
pub struct Stage2Outcome {
    pub log: LossLog,
    pub audit: FreezeAudit,
    /// Active adapter per optimizer step.
    pub activations: Vec<String>,
}

/// Draws of stage II: a target embodiment uniformly over the distinct
/// targets, then a pair of that target uniformly.
pub struct Stage2Sampler {
    targets: Vec<String>,
    by_target: BTreeMap<String, Vec<usize>>,
    rng: ChaCha8Rng,
}

impl Stage2Sampler {
    pub fn new(pairs: &[PairedSample], seed: u64) -> Self {
        let mut by_target: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, p) in pairs.iter().enumerate() {
            by_target.entry(p.target_embodiment.clone()).or_default().push(i);
        }
        Self {
            targets: by_target.keys().cloned().collect(),
            by_target,
            rng: child_rng(seed, 0x7368_6172),
        }
    }

    pub fn targets(&self) -> &[String] {
        &self.targets
    }

    pub fn next_target(&mut self) -> String {
        self.targets[self.rng.random_range(0..self.targets.len())].clone()
    }

    /// `(pair index, t, noise)` for one micro-batch of `target`.
    pub fn next_sample(&mut self, target: &str, tc: &TrainConfig, shape: &[usize]) -> (usize, f64, Tensor) {
        let idx = &self.by_target[target];
        let i = idx[self.rng.random_range(0..idx.len())];
        let t = draw_t(&mut self.rng, tc);
        let noise = Tensor::randn(shape, 1.0, &mut self.rng);
        (i, t, noise)
    }
}

/// Stage II: shared-motion training on paired clips with rolling adapter
/// activation. Adapters and the base backbone stay frozen.
pub fn stage2_train_shared(
    pairs: &[PairedSample],
    bank: &LoraBank,
    dit: &mut Dit,
    tc: &TrainConfig,
    scope: SharedScope,
) -> Result<Stage2Outcome, TrainError> {
    if pairs.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    tc.validate()?;
    for p in pairs {
        if !bank.contains(&p.target_embodiment) {
            return Err(TrainError::MissingAdapter(p.target_embodiment.clone()));
        }
    }
    let mut sampler = Stage2Sampler::new(pairs, tc.seed);
    if sampler.targets().len() < 2 {
        return Err(TrainError::InvalidArgument(format!(
            "stage II needs at least two target embodiments, got {:?}",
            sampler.targets()
        )));
    }
    let cfg = dit.cfg.clone();
    let src: Vec<&RenderedSequence> = pairs.iter().map(|p| &p.source).collect();
    let tgt: Vec<&RenderedSequence> = pairs.iter().map(|p| &p.target).collect();
    let src = tokens_of(&cfg, &src)?;
    let tgt = tokens_of(&cfg, &tgt)?;
    let trainable: Box<dyn Fn(&str) -> bool> = match scope {
        SharedScope::MotionDeltas => Box::new(is_shared_motion),
        SharedScope::AllShared => Box::new(|_: &str| true),
    };
    let before = state_hashes(dit, bank);
    let mut session = bank.clone();
    let mut opt = AdamW::new(tc.lr, tc.weight_decay);
    let mut log = LossLog::default();
    let mut activations = Vec::with_capacity(tc.steps);
    for step in 0..tc.steps {
        let target = sampler.next_target();
        session.activate(&target)?;
        activations.push(target.clone());
        let mut sum = BTreeMap::new();
        let mut loss = 0.0;
        for _ in 0..tc.accum {
            let (i, t, noise) = sampler.next_sample(&target, tc, tgt[0].shape());
            let (l, g) = micro_step(dit, session.active(), &*trainable, false, &tgt[i], Some(&src[i]), t, &noise)?;
            loss += l / tc.accum as f32;
            accumulate(&mut sum, g, 1.0 / tc.accum as f32);
        }
        clip_global_norm(&mut sum, tc.clip);
        opt.step(&mut dit.params, &sum);
        log.push(step, "stage2", &target, loss);
    }
    let all: BTreeSet<String> = dit.params.names().filter(|n| trainable(n)).map(String::from).collect();
    let audit = FreezeAudit {
        stage: "stage2".into(),
        before,
        after: state_hashes(dit, bank),
        updated: if tc.steps == 0 { all.clone() } else { opt.update_set() },
        designated: all,
    };
    Ok(Stage2Outcome {
        log,
        audit,
        activations,
    })
}

/// Names of the stage-II partition under `scope`.
pub fn shared_partition(params: &ParamStore, scope: SharedScope) -> BTreeSet<String> {
    params
        .names()
        .filter(|n| match scope {
            SharedScope::MotionDeltas => is_shared_motion(n),
            SharedScope::AllShared => true,
        })
        .map(String::from)
        .collect()
}

/// Names outside the shared-motion partition.
pub fn base_partition(params: &ParamStore) -> BTreeSet<String> {
    params.names().filter(|n| is_backbone_base(n)).map(String::from).collect()
}
