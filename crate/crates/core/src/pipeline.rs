//! End-to-end toy run: data, pretraining, stage I, stage II, adaptation to
//! the held-out body, teacher evaluation, distillation, student evaluation.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use rand::Rng;
use thiserror::Error;

use crate::eval::{pixel_mean, run_benchmark, BenchCase, BenchConfig, BenchResult, EvalError, Generator};
use crate::model::{Dit, LoRAAdapter, LoraBank, ModelConfig, ModelError};
use crate::rng::child_rng;
use crate::streaming::{
    init_student, reference_tokens, self_forcing_distill, teacher_forcing_distill, DistillConfig, DistillSample,
    Discriminator, SelfForcingOutcome, StreamError,
};
use crate::substrate::Tensor;
use crate::synthgen::{
    build_paired_dataset, build_unpaired_set, split_holdout, Canvas, DataConfig, HoldoutSplit, PairedSample,
    RenderedSequence, SynthError, World,
};
use crate::training::{
    adapt_unseen, pretrain_backbone, stage1_train_lora, stage2_train_shared, FreezeAudit, LossLog, SharedScope,
    Stage2Outcome, StageOutcome, TrainConfig, TrainError,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Stream(#[from] StreamError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("invalid pipeline config: {0}")]
    InvalidConfig(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub holdout: String,
    pub motion_fraction: f64,
    pub scene_fraction: f64,
    /// Clips of the training bodies used for backbone pretraining.
    pub pretrain_clips: usize,
    /// Unpaired clips per body for stage I and adaptation.
    pub unpaired_clips: usize,
    pub pair_budget: usize,
    pub pretrain: TrainConfig,
    pub stage1: TrainConfig,
    pub stage2: TrainConfig,
    pub adapt: TrainConfig,
    pub scope: SharedScope,
    pub teacher_steps: usize,
    /// Held-out pairs scored per benchmark (0 = all).
    pub eval_cases: usize,
    /// Teacher pseudo-targets used as distillation data.
    pub distill_clips: usize,
    pub distill: DistillConfig,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            model: ModelConfig::default(),
            holdout: "E4".into(),
            motion_fraction: 0.2,
            scene_fraction: 0.2,
            pretrain_clips: 50,
            unpaired_clips: 30,
            pair_budget: 120,
            pretrain: TrainConfig::default(),
            stage1: TrainConfig::default(),
            stage2: TrainConfig::default(),
            adapt: TrainConfig::default(),
            scope: SharedScope::MotionDeltas,
            teacher_steps: 32,
            eval_cases: 0,
            distill_clips: 8,
            distill: DistillConfig::default(),
            seed: 0,
        }
    }
}

impl PipelineConfig {
    /// Reduced canvas and model that run the whole recipe in about two
    /// minutes on one core: 8 frames of 16x16, d=64, depth 2, two 4-frame chunks.
    pub fn fast() -> Self {
        let mut pc = Self::default();
        pc.data.canvas = Canvas {
            frames: 8,
            height: 16,
            width: 16,
        };
        pc.model = ModelConfig {
            embed_dim: 64,
            depth: 2,
            frames: 8,
            height: 16,
            width: 16,
            ..ModelConfig::default()
        };
        for tc in [&mut pc.pretrain, &mut pc.stage1, &mut pc.stage2, &mut pc.adapt] {
            tc.lr = 3e-3;
        }
        // Copying the source background is the bulk of the task; the backbone
        // needs most of its pretraining steps with the cond stream present.
        pc.pretrain.steps = 800;
        pc.pretrain.cond_dropout = 0.1;
        pc
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_decoupled(mut self, decoupled: bool) -> Self {
        self.model.decoupled = decoupled;
        self
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        self.model.validate()?;
        let c = self.data.canvas;
        if (c.frames, c.height, c.width) != (self.model.frames, self.model.height, self.model.width) {
            return Err(PipelineError::InvalidConfig(format!(
                "canvas {}x{}x{} differs from model {}x{}x{}",
                c.frames, c.height, c.width, self.model.frames, self.model.height, self.model.width
            )));
        }
        if self.pretrain_clips == 0 || self.unpaired_clips == 0 || self.pair_budget == 0 || self.distill_clips == 0 {
            return Err(PipelineError::InvalidConfig("clip counts and pair budget must be positive".into()));
        }
        if self.teacher_steps == 0 {
            return Err(PipelineError::InvalidConfig("teacher_steps must be positive".into()));
        }
        self.distill.validate()?;
        Ok(())
    }

    /// Seed of one stage, derived from the run seed.
    pub fn stage_seed(&self, stage: u64) -> u64 {
        child_rng(self.seed, 0x7069_7065_0000 + stage).random()
    }

    fn train_config(&self, base: &TrainConfig, stage: u64) -> TrainConfig {
        TrainConfig {
            seed: self.stage_seed(stage),
            ..base.clone()
        }
    }

    /// Short stable digest of the whole config.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        hex::encode(Sha256::digest(format!("{:?}", self).as_bytes()))
    }
}

/// Every clip a run touches, partitioned by the holdout split.
#[derive(Clone, Debug)]
pub struct PipelineData {
    pub split: HoldoutSplit,
    pub pretrain: Vec<RenderedSequence>,
    pub unpaired: BTreeMap<String, Vec<RenderedSequence>>,
    pub pairs: Vec<PairedSample>,
    /// Unpaired clips of the held-out body, on training motions and scenes.
    pub adapt: Vec<RenderedSequence>,
    pub cases: Vec<BenchCase>,
}

pub fn prepare_data(pc: &PipelineConfig) -> Result<PipelineData, PipelineError> {
    pc.validate()?;
    let data_cfg = DataConfig {
        seed: pc.seed,
        ..pc.data.clone()
    };
    let world = World::generate(&data_cfg)?;
    let ids = |v: Vec<&String>| v.into_iter().cloned().collect::<Vec<_>>();
    let split = split_holdout(
        &ids(world.embodiments.iter().map(|e| &e.id).collect()),
        &ids(world.motions.iter().map(|m| &m.id).collect()),
        &ids(world.scenes.iter().map(|s| &s.id).collect()),
        &pc.holdout,
        pc.motion_fraction,
        pc.scene_fraction,
        pc.stage_seed(0),
    )?;
    let motions: Vec<_> = world
        .motions
        .iter()
        .filter(|m| split.train_motions.contains(&m.id))
        .cloned()
        .collect();
    let scenes: Vec<_> = world
        .scenes
        .iter()
        .filter(|s| split.train_scenes.contains(&s.id))
        .cloned()
        .collect();
    let train_bodies: Vec<_> = world
        .embodiments
        .iter()
        .filter(|e| split.train_embodiments.contains(&e.id))
        .cloned()
        .collect();
    let held = world.embodiment(&pc.holdout)?.clone();
    let canvas = world.canvas;

    let per_body = pc.pretrain_clips.div_ceil(train_bodies.len());
    let mut pretrain = Vec::new();
    let mut unpaired = BTreeMap::new();
    for (k, e) in train_bodies.iter().enumerate() {
        let clips = build_unpaired_set(e, &world.skeleton, &motions, &scenes, canvas, per_body, pc.stage_seed(10 + k as u64))?;
        pretrain.extend(clips);
        let set = build_unpaired_set(
            e,
            &world.skeleton,
            &motions,
            &scenes,
            canvas,
            pc.unpaired_clips,
            pc.stage_seed(20 + k as u64),
        )?;
        unpaired.insert(e.id.clone(), set);
    }
    pretrain.truncate(pc.pretrain_clips);
    let pairs = build_paired_dataset(
        &train_bodies,
        &motions,
        &scenes,
        &world.skeleton,
        canvas,
        pc.pair_budget,
        pc.stage_seed(1),
    )?;
    let adapt = build_unpaired_set(&held, &world.skeleton, &motions, &scenes, canvas, pc.unpaired_clips, pc.stage_seed(2))?;

    let mut test = split.test_pairs();
    if pc.eval_cases > 0 && pc.eval_cases < test.len() {
        // Evenly strided subset of the held-out pairs.
        let stride = test.len() as f64 / pc.eval_cases as f64;
        test = (0..pc.eval_cases).map(|k| test[(k as f64 * stride) as usize].clone()).collect();
    }
    let cases = test
        .iter()
        .map(|(src, tgt, m, s)| {
            Ok(BenchCase {
                sample_id: format!("{}-{}_{}_{}", src, tgt, m, s),
                source: world.render_triple(src, m, s)?,
                target: world.render_triple(tgt, m, s)?,
            })
        })
        .collect::<Result<Vec<_>, SynthError>>()?;
    Ok(PipelineData {
        split,
        pretrain,
        unpaired,
        pairs,
        adapt,
        cases,
    })
}

/// The adapted bidirectional model and what it took to get there.
#[derive(Clone, Debug)]
pub struct TeacherRun {
    pub dit: Dit,
    pub bank: LoraBank,
    pub log: LossLog,
    pub audits: Vec<FreezeAudit>,
    pub timings: Vec<(String, Duration)>,
}

/// Backbone pretraining on the training bodies' clips.
pub fn run_pretrain(pc: &PipelineConfig, data: &PipelineData) -> Result<(Dit, LossLog), PipelineError> {
    Ok(pretrain_backbone(&data.pretrain, &pc.model, &pc.train_config(&pc.pretrain, 3))?)
}

/// Stage I for every training body, in id order.
pub fn run_stage1(pc: &PipelineConfig, data: &PipelineData, dit: &Dit) -> Result<(LoraBank, LossLog, Vec<FreezeAudit>), PipelineError> {
    let mut bank = LoraBank::new();
    let mut log = LossLog::default();
    let mut audits = Vec::new();
    for (k, (id, clips)) in data.unpaired.iter().enumerate() {
        let out = stage1_train_lora(id, clips, dit, &mut bank, &pc.train_config(&pc.stage1, 30 + k as u64))?;
        log.extend(&out.log);
        audits.push(out.audit);
    }
    Ok((bank, log, audits))
}

pub fn run_stage2(pc: &PipelineConfig, data: &PipelineData, dit: &mut Dit, bank: &LoraBank) -> Result<Stage2Outcome, PipelineError> {
    Ok(stage2_train_shared(&data.pairs, bank, dit, &pc.train_config(&pc.stage2, 4), pc.scope)?)
}

pub fn run_adapt(pc: &PipelineConfig, data: &PipelineData, dit: &Dit, bank: &mut LoraBank) -> Result<StageOutcome, PipelineError> {
    Ok(adapt_unseen(&pc.holdout, &data.adapt, dit, bank, &pc.train_config(&pc.adapt, 5))?)
}

pub fn train_teacher(pc: &PipelineConfig, data: &PipelineData) -> Result<TeacherRun, PipelineError> {
    let mut timings = Vec::new();
    let mut clock = Instant::now();
    let mut lap = |name: &str, timings: &mut Vec<(String, Duration)>| {
        timings.push((name.to_string(), clock.elapsed()));
        clock = Instant::now();
    };

    let (mut dit, mut log) = run_pretrain(pc, data)?;
    lap("pretrain", &mut timings);

    let (mut bank, l, mut audits) = run_stage1(pc, data, &dit)?;
    log.extend(&l);
    lap("stage1", &mut timings);

    let out = run_stage2(pc, data, &mut dit, &bank)?;
    log.extend(&out.log);
    audits.push(out.audit);
    lap("stage2", &mut timings);

    let out = run_adapt(pc, data, &dit, &mut bank)?;
    log.extend(&out.log);
    audits.push(out.audit);
    lap("adapt", &mut timings);

    Ok(TeacherRun {
        dit,
        bank,
        log,
        audits,
        timings,
    })
}

pub fn bench_config(pc: &PipelineConfig, data: &PipelineData, label: &str) -> BenchConfig {
    BenchConfig {
        label: label.to_string(),
        config_digest: pc.digest(),
        seed: pc.stage_seed(6),
        pixel_mean: pixel_mean(&data.pretrain),
    }
}

pub fn evaluate_teacher(pc: &PipelineConfig, data: &PipelineData, teacher: &TeacherRun) -> Result<BenchResult, PipelineError> {
    let generator = Generator::Teacher {
        dit: &teacher.dit,
        steps: pc.teacher_steps,
    };
    Ok(run_benchmark(
        &generator,
        &data.cases,
        &teacher.bank,
        &pc.holdout,
        &bench_config(pc, data, "teacher"),
    )?)
}

/// The distilled causal student.
#[derive(Clone, Debug)]
pub struct StudentRun {
    pub dit: Dit,
    pub reference: Tensor,
    pub log: LossLog,
    pub teacher_digest: String,
    pub timings: Vec<(String, Duration)>,
}

fn held_adapter<'a>(pc: &PipelineConfig, teacher: &'a TeacherRun) -> Result<&'a LoRAAdapter, PipelineError> {
    Ok(teacher
        .bank
        .get(&pc.holdout)
        .ok_or_else(|| EvalError::MissingAdapter(pc.holdout.clone()))?)
}

fn distill_config(pc: &PipelineConfig) -> DistillConfig {
    DistillConfig {
        seed: pc.stage_seed(7),
        ..pc.distill.clone()
    }
}

/// The student's reference span: first frame of the first adaptation clip.
pub fn student_reference(pc: &PipelineConfig, data: &PipelineData) -> Tensor {
    reference_tokens(&pc.model, &data.adapt[0], 0)
}

/// Teacher outputs for training sources, with the held-out body's adapter.
pub fn pseudo_targets(pc: &PipelineConfig, data: &PipelineData, teacher: &TeacherRun) -> Result<Vec<DistillSample>, PipelineError> {
    let adapter = held_adapter(pc, teacher)?;
    let generator = Generator::Teacher {
        dit: &teacher.dit,
        steps: pc.teacher_steps,
    };
    (0..pc.distill_clips)
        .map(|k| {
            let source = &data.pairs[k * data.pairs.len() / pc.distill_clips].source;
            let (target, _) = generator.generate(source, Some(adapter), pc.stage_seed(100 + k as u64))?;
            Ok(DistillSample {
                source: source.clone(),
                target,
            })
        })
        .collect()
}

/// Teacher forcing from a copy of the teacher.
pub fn run_teacher_forcing(
    pc: &PipelineConfig,
    data: &PipelineData,
    teacher: &TeacherRun,
    samples: &[DistillSample],
) -> Result<(Dit, LossLog), PipelineError> {
    let adapter = held_adapter(pc, teacher)?;
    let mut student = init_student(&teacher.dit);
    let log = teacher_forcing_distill(
        &mut student,
        Some(adapter),
        samples,
        &student_reference(pc, data),
        &distill_config(pc),
    )?;
    Ok((student, log))
}

/// Self forcing against the frozen teacher; the critic starts from the
/// teacher and the discriminator sees real clips of the held-out body.
pub fn run_self_forcing(
    pc: &PipelineConfig,
    data: &PipelineData,
    teacher: &TeacherRun,
    student: &mut Dit,
    samples: &[DistillSample],
) -> Result<SelfForcingOutcome, PipelineError> {
    let adapter = held_adapter(pc, teacher)?;
    let dc = distill_config(pc);
    let mut critic = teacher.dit.clone();
    let mut disc = Discriminator::new(&pc.model, dc.disc_hidden, pc.stage_seed(8));
    Ok(self_forcing_distill(
        student,
        &teacher.dit,
        &mut critic,
        &mut disc,
        Some(adapter),
        samples,
        &data.adapt,
        &student_reference(pc, data),
        &dc,
    )?)
}

/// Pseudo-targets, teacher forcing, then self forcing.
pub fn distill_student(pc: &PipelineConfig, data: &PipelineData, teacher: &TeacherRun) -> Result<StudentRun, PipelineError> {
    let mut timings = Vec::new();
    let clock = Instant::now();
    let samples = pseudo_targets(pc, data, teacher)?;
    timings.push(("pseudo_targets".to_string(), clock.elapsed()));

    let clock = Instant::now();
    let (mut student, mut log) = run_teacher_forcing(pc, data, teacher, &samples)?;
    timings.push(("teacher_forcing".to_string(), clock.elapsed()));

    let clock = Instant::now();
    let out = run_self_forcing(pc, data, teacher, &mut student, &samples)?;
    log.extend(&out.log);
    timings.push(("self_forcing".to_string(), clock.elapsed()));
    Ok(StudentRun {
        dit: student,
        reference: student_reference(pc, data),
        log,
        teacher_digest: out.teacher_digest,
        timings,
    })
}

pub fn evaluate_student(
    pc: &PipelineConfig,
    data: &PipelineData,
    teacher: &TeacherRun,
    student: &StudentRun,
) -> Result<BenchResult, PipelineError> {
    let generator = Generator::Student {
        dit: &student.dit,
        reference: &student.reference,
        rollout: pc.distill.rollout(0),
    };
    Ok(run_benchmark(
        &generator,
        &data.cases,
        &teacher.bank,
        &pc.holdout,
        &bench_config(pc, data, "student"),
    )?)
}
