use std::collections::BTreeMap;

use rand::Rng;

use crate::model::{patchify, Bound, BoundAdapter, Dit, LoRAAdapter, ModelConfig, ParamStore};
use crate::rng::child_rng;
use crate::substrate::{Scalar, Tape, Tensor, Var};
use crate::synthgen::RenderedSequence;
use crate::training::{clip_global_norm, dsm_loss, interpolate, velocity_target, AdamW, LossLog};

use super::layout::SuperChunkLayout;
use super::rollout::{causal_velocity, pick, predict_x0, rollout, source_chunks, ChunkContext, RolloutConfig};
use super::StreamError;

#[derive(Clone, Debug, PartialEq)]
pub struct DistillConfig {
    pub lambda_vsd: f64,
    pub lambda_gan: f64,
    pub student_steps: usize,
    pub teacher_steps: usize,
    pub tf_steps: usize,
    pub sf_steps: usize,
    pub lr: f32,
    pub critic_lr: f32,
    pub disc_lr: f32,
    pub clip: f32,
    pub disc_hidden: usize,
    pub t_min: f64,
    pub t_max: f64,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            lambda_vsd: 1.0,
            lambda_gan: 0.1,
            student_steps: 4,
            teacher_steps: 32,
            tf_steps: 200,
            sf_steps: 100,
            lr: 1e-3,
            critic_lr: 1e-3,
            disc_lr: 1e-3,
            clip: 1.0,
            disc_hidden: 32,
            t_min: 0.001,
            t_max: 0.999,
            seed: 0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<(), StreamError> {
        let weights_ok = [self.lambda_vsd, self.lambda_gan].iter().all(|w| w.is_finite() && *w >= 0.0);
        if !weights_ok
            || self.student_steps == 0
            || self.student_steps >= self.teacher_steps
            || self.disc_hidden == 0
            || !(0.0 < self.t_min && self.t_min < self.t_max && self.t_max < 1.0)
        {
            return Err(StreamError::InvalidConfig(format!("{:?}", self)));
        }
        Ok(())
    }

    pub fn rollout(&self, seed: u64) -> RolloutConfig {
        RolloutConfig {
            student_steps: self.student_steps,
            use_cache: true,
            seed,
        }
    }
}

/// A source clip and the target clip the student should produce for it
/// (teacher output or rendered ground truth).
#[derive(Clone, Debug)]
pub struct DistillSample {
    pub source: RenderedSequence,
    pub target: RenderedSequence,
}

/// The student starts as an exact copy of the teacher.
pub fn init_student(teacher: &Dit) -> Dit {
    teacher.clone()
}

/// Denoising loss of the newest chunk under block-causal attention, with
/// the earlier chunks given clean.
#[allow(clippy::too_many_arguments)]
pub fn causal_dsm_loss<S: Scalar>(
    tape: &mut Tape<S>,
    cfg: &ModelConfig,
    layout: &SuperChunkLayout,
    params: &Bound,
    adapter: Option<&BoundAdapter>,
    ctx: &ChunkContext<S>,
    x0: &Tensor<S>,
    t: f64,
    noise: &Tensor<S>,
) -> Result<Var, StreamError> {
    if !(t > 0.0 && t < 1.0) || noise.shape() != x0.shape() {
        return Err(StreamError::InvalidConfig(format!("t {} with noise {:?}", t, noise.shape())));
    }
    let x_t = interpolate(x0, noise, t);
    let v = causal_velocity(tape, cfg, layout, params, adapter, ctx, &x_t, t)?;
    let target = tape.constant(velocity_target(x0, noise));
    Ok(tape.mse(v, target)?)
}

fn collect_grads<S: Scalar>(tape: &Tape<S>, bound: &Bound) -> BTreeMap<String, Tensor<S>> {
    bound
        .iter()
        .filter(|(_, v)| tape.requires_grad(*v))
        .map(|(n, v)| {
            let g = tape.grad(v).unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()));
            (n.to_string(), g)
        })
        .collect()
}

struct Prepared {
    conds: Vec<Tensor>,
    targets: Vec<Tensor>,
    source_full: Tensor,
}

fn prepare(cfg: &ModelConfig, samples: &[DistillSample]) -> Result<Vec<Prepared>, StreamError> {
    if samples.is_empty() {
        return Err(StreamError::EmptyDataset);
    }
    samples
        .iter()
        .map(|s| {
            if s.source.frames != cfg.frames || s.target.frames != cfg.frames {
                return Err(StreamError::InvalidLength(format!(
                    "sample of {} / {} frames for a {}-frame model",
                    s.source.frames, s.target.frames, cfg.frames
                )));
            }
            Ok(Prepared {
                conds: source_chunks(cfg, &s.source),
                targets: source_chunks(cfg, &s.target),
                source_full: patchify(cfg, &s.source, 0, cfg.frames),
            })
        })
        .collect()
}

/// Teacher-forcing stage: causal denoising on one random chunk per step,
/// with the ground-truth (or teacher-produced) earlier chunks as context.
pub fn teacher_forcing_distill(
    student: &mut Dit,
    adapter: Option<&LoRAAdapter>,
    samples: &[DistillSample],
    reference: &Tensor,
    dc: &DistillConfig,
) -> Result<LossLog, StreamError> {
    dc.validate()?;
    let cfg = student.cfg.clone();
    let data = prepare(&cfg, samples)?;
    let layout = SuperChunkLayout::for_model(&cfg, cfg.chunks())?;
    let mut opt = AdamW::new(dc.lr, 0.0);
    let mut rng = child_rng(dc.seed, 0x7466);
    let mut log = LossLog::default();
    for step in 0..dc.tf_steps {
        let d = &data[pick(&mut rng, data.len())];
        let i = pick(&mut rng, layout.chunks);
        let t = rng.random_range(dc.t_min..dc.t_max);
        let noise = Tensor::randn(d.targets[i].shape(), 1.0, &mut rng);
        let mut tape = Tape::new();
        let p = Bound::new(&mut tape, &student.params, |_| true);
        let a = adapter.map(|a| BoundAdapter::new(&mut tape, a, false));
        let ctx = ChunkContext {
            reference,
            conds: &d.conds[..=i],
            committed: &d.targets[..i],
        };
        let loss = causal_dsm_loss(&mut tape, &cfg, &layout, &p, a.as_ref(), &ctx, &d.targets[i], t, &noise)?;
        let value = tape.scalar_value(loss);
        tape.backward(loss)?;
        let mut grads = collect_grads(&tape, &p);
        clip_global_norm(&mut grads, dc.clip);
        opt.step(&mut student.params, &grads);
        log.push(step, "teacher_forcing", adapter.map_or("-", |a| a.embodiment_id.as_str()), value);
    }
    Ok(log)
}

/// Per-frame patch scorer: a two-layer network applied to every patch token,
/// averaged over the patches of each frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    pub params: ParamStore,
    pub per_frame: usize,
}

impl Discriminator {
    pub fn new(cfg: &ModelConfig, hidden: usize, seed: u64) -> Self {
        let mut rng = child_rng(seed, 0x6469_7363);
        let p = cfg.patch_dim();
        let mut params = ParamStore::new();
        params.insert("disc.w1", Tensor::randn(&[p, hidden], 1.0 / (p as f64).sqrt(), &mut rng));
        params.insert("disc.b1", Tensor::zeros(&[hidden]));
        params.insert("disc.w2", Tensor::randn(&[hidden, 1], 1.0 / (hidden as f64).sqrt(), &mut rng));
        params.insert("disc.b2", Tensor::zeros(&[1]));
        Self {
            params,
            per_frame: cfg.tokens_per_frame(),
        }
    }
}

/// `[frames, 1]` scores of patch tokens `tokens` (`frames · per_frame` rows).
pub fn frame_scores<S: Scalar>(tape: &mut Tape<S>, disc: &Bound, tokens: Var, per_frame: usize) -> Result<Var, StreamError> {
    let n = tape.value(tokens).dims2().0;
    if per_frame == 0 || n % per_frame != 0 {
        return Err(StreamError::InvalidLength(format!("{} tokens in frames of {}", n, per_frame)));
    }
    let h = tape.matmul(tokens, disc.get("disc.w1")?)?;
    let h = tape.add_row(h, disc.get("disc.b1")?)?;
    let h = tape.gelu(h);
    let s = tape.matmul(h, disc.get("disc.w2")?)?;
    let s = tape.add_row(s, disc.get("disc.b2")?)?;
    let s = tape.reshape(s, &[n / per_frame, per_frame])?;
    let avg = tape.constant(Tensor::full(&[per_frame, 1], S::from_f64(1.0 / per_frame as f64).unwrap()));
    Ok(tape.matmul(s, avg)?)
}

/// Discriminator hinge loss `mean(relu(1 − D(real))) + mean(relu(1 + D(fake)))`.
pub fn hinge_d<S: Scalar>(tape: &mut Tape<S>, real: Var, fake: Var) -> Result<Var, StreamError> {
    let r = tape.scale(real, -1.0);
    let r = tape.add_scalar(r, 1.0);
    let r = tape.relu(r);
    let r = tape.mean(r);
    let f = tape.add_scalar(fake, 1.0);
    let f = tape.relu(f);
    let f = tape.mean(f);
    Ok(tape.add(r, f)?)
}

/// Generator hinge loss `−mean(D(fake))`.
pub fn hinge_g<S: Scalar>(tape: &mut Tape<S>, fake: Var) -> Var {
    let m = tape.mean(fake);
    tape.scale(m, -1.0)
}

/// Everything a self-forcing student step holds fixed: the rollout context,
/// the noisy state of the last evaluation, the denoising draw, the
/// distribution-matching target and the discriminator weights.
#[derive(Clone, Debug)]
pub struct StreamBatch<S: Scalar = f32> {
    pub reference: Tensor<S>,
    pub conds: Vec<Tensor<S>>,
    /// The student's own earlier chunks.
    pub committed: Vec<Tensor<S>>,
    pub state: Tensor<S>,
    pub state_t: f64,
    pub dsm_x0: Tensor<S>,
    pub dsm_t: f64,
    pub dsm_noise: Tensor<S>,
    pub vsd_target: Tensor<S>,
    pub disc: ParamStore<S>,
}

pub struct StreamLoss {
    pub total: Var,
    pub dsm: Var,
    pub vsd: Var,
    pub gan: Var,
}

/// `L_DSM + λ_vsd·L_VSD + λ_gan·L_GAN` for one chunk as a function of the student weights.
///
/// `L_VSD` is `½·mean((x̂ − target)²)` with the target fixed, so its gradient
/// with respect to the student output `x̂` is the distribution-matching direction.
#[allow(clippy::too_many_arguments)]
pub fn stream_loss<S: Scalar>(
    tape: &mut Tape<S>,
    cfg: &ModelConfig,
    layout: &SuperChunkLayout,
    params: &Bound,
    adapter: Option<&BoundAdapter>,
    batch: &StreamBatch<S>,
    lambda_vsd: f64,
    lambda_gan: f64,
) -> Result<StreamLoss, StreamError> {
    let ctx = ChunkContext {
        reference: &batch.reference,
        conds: &batch.conds,
        committed: &batch.committed,
    };
    let dsm = causal_dsm_loss(tape, cfg, layout, params, adapter, &ctx, &batch.dsm_x0, batch.dsm_t, &batch.dsm_noise)?;
    let v = causal_velocity(tape, cfg, layout, params, adapter, &ctx, &batch.state, batch.state_t)?;
    let state = tape.constant(batch.state.clone());
    let tv = tape.scale(v, batch.state_t);
    let x_hat = tape.sub(state, tv)?;
    let target = tape.constant(batch.vsd_target.clone());
    let vsd = tape.mse(x_hat, target)?;
    let vsd = tape.scale(vsd, 0.5);
    let disc = Bound::new(tape, &batch.disc, |_| false);
    let scores = frame_scores(tape, &disc, x_hat, cfg.tokens_per_frame())?;
    let gan = hinge_g(tape, scores);
    let wv = tape.scale(vsd, lambda_vsd);
    let wg = tape.scale(gan, lambda_gan);
    let total = tape.add(dsm, wv)?;
    let total = tape.add(total, wg)?;
    Ok(StreamLoss { total, dsm, vsd, gan })
}

/// Distribution-matching target for the student output `x_hat` (all chunks):
/// noise it, ask the frozen teacher and the critic for clean estimates, and
/// step `x_hat` against the critic-minus-teacher direction.
#[allow(clippy::too_many_arguments)]
pub fn vsd_target<R: Rng>(
    teacher: &Dit,
    critic: &Dit,
    adapter: Option<&LoRAAdapter>,
    source: &Tensor,
    x_hat: &Tensor,
    rng: &mut R,
) -> Result<Tensor, StreamError> {
    let t: f64 = rng.random_range(0.02..0.98);
    let noise = Tensor::randn(x_hat.shape(), 1.0, rng);
    let x_t = interpolate(x_hat, &noise, t);
    let real = predict_x0(&x_t, &teacher.velocity(Some(source), &x_t, t, adapter)?, t);
    let fake = predict_x0(&x_t, &critic.velocity(Some(source), &x_t, t, adapter)?, t);
    let norm = x_hat
        .data()
        .iter()
        .zip(real.data())
        .map(|(a, b)| (a - b).abs() as f64)
        .sum::<f64>()
        / x_hat.len() as f64;
    let norm = norm.max(1e-3) as f32;
    Ok(Tensor::new(
        x_hat.shape().to_vec(),
        x_hat
            .data()
            .iter()
            .zip(fake.data().iter().zip(real.data()))
            .map(|(&x, (&f, &r))| x - (f - r) / norm)
            .collect(),
    )?)
}

#[derive(Clone, Debug)]
pub struct SelfForcingOutcome {
    pub log: LossLog,
    pub teacher_digest: String,
}

/// Self-forcing stage. Each step rolls the student out on its own outputs,
/// takes gradients through one chunk's final evaluation, then updates the
/// critic (denoising on student outputs) and the discriminator (hinge on
/// real clips of the target body against student chunks).
#[allow(clippy::too_many_arguments)]
pub fn self_forcing_distill(
    student: &mut Dit,
    teacher: &Dit,
    critic: &mut Dit,
    disc: &mut Discriminator,
    adapter: Option<&LoRAAdapter>,
    samples: &[DistillSample],
    real: &[RenderedSequence],
    reference: &Tensor,
    dc: &DistillConfig,
) -> Result<SelfForcingOutcome, StreamError> {
    dc.validate()?;
    if real.is_empty() {
        return Err(StreamError::EmptyDataset);
    }
    let cfg = student.cfg.clone();
    let data = prepare(&cfg, samples)?;
    let layout = SuperChunkLayout::for_model(&cfg, cfg.chunks())?;
    let digest = teacher.params.digest();
    let mut opt = AdamW::new(dc.lr, 0.0);
    let mut critic_opt = AdamW::new(dc.critic_lr, 0.0);
    let mut disc_opt = AdamW::new(dc.disc_lr, 0.0);
    let mut rng = child_rng(dc.seed, 0x7366);
    let mut log = LossLog::default();
    let tag = adapter.map_or("-", |a| a.embodiment_id.as_str()).to_string();
    for step in 0..dc.sf_steps {
        let si = pick(&mut rng, data.len());
        let d = &data[si];
        let roll = rollout(student, adapter, &samples[si].source, reference, &dc.rollout(rng.random()))?;
        let i = pick(&mut rng, layout.chunks);
        let target_full = vsd_target(teacher, critic, adapter, &d.source_full, &roll.tokens, &mut rng)?;
        let rows = layout.tgt_len;
        let dsm_t = rng.random_range(dc.t_min..dc.t_max);
        let batch = StreamBatch {
            reference: reference.clone(),
            conds: d.conds[..=i].to_vec(),
            committed: roll.chunks[..i].to_vec(),
            state: roll.last_inputs[i].clone(),
            state_t: *super::rollout::student_times(dc.student_steps).last().unwrap(),
            dsm_x0: d.targets[i].clone(),
            dsm_t,
            dsm_noise: Tensor::randn(d.targets[i].shape(), 1.0, &mut rng),
            vsd_target: target_full.rows(i * rows, rows),
            disc: disc.params.clone(),
        };
        let mut tape = Tape::new();
        let p = Bound::new(&mut tape, &student.params, |_| true);
        let a = adapter.map(|a| BoundAdapter::new(&mut tape, a, false));
        let loss = stream_loss(&mut tape, &cfg, &layout, &p, a.as_ref(), &batch, dc.lambda_vsd, dc.lambda_gan)?;
        let value = tape.scalar_value(loss.total);
        tape.backward(loss.total)?;
        let mut grads = collect_grads(&tape, &p);
        clip_global_norm(&mut grads, dc.clip);
        opt.step(&mut student.params, &grads);

        // Critic: denoising on the student's (detached) outputs.
        let t = rng.random_range(dc.t_min..dc.t_max);
        let noise = Tensor::randn(roll.tokens.shape(), 1.0, &mut rng);
        let mut tape = Tape::new();
        let cp = Bound::new(&mut tape, &critic.params, |_| true);
        let ca = adapter.map(|a| BoundAdapter::new(&mut tape, a, false));
        let closs = dsm_loss(&mut tape, &cfg, &cp, ca.as_ref(), &roll.tokens, Some(&d.source_full), t, &noise)?;
        tape.backward(closs)?;
        let mut grads = collect_grads(&tape, &cp);
        clip_global_norm(&mut grads, dc.clip);
        critic_opt.step(&mut critic.params, &grads);

        // Discriminator: real chunk of the target body against the student chunk.
        let r = &real[pick(&mut rng, real.len())];
        let real_tokens = patchify(&cfg, r, i * cfg.chunk_frames, cfg.chunk_frames);
        let mut tape = Tape::new();
        let dp = Bound::new(&mut tape, &disc.params, |_| true);
        let rv = tape.constant(real_tokens);
        let fv = tape.constant(roll.chunks[i].clone());
        let rs = frame_scores(&mut tape, &dp, rv, disc.per_frame)?;
        let fs = frame_scores(&mut tape, &dp, fv, disc.per_frame)?;
        let dloss = hinge_d(&mut tape, rs, fs)?;
        tape.backward(dloss)?;
        let mut grads = collect_grads(&tape, &dp);
        clip_global_norm(&mut grads, dc.clip);
        disc_opt.step(&mut disc.params, &grads);

        log.push(step, "self_forcing", &tag, value);
    }
    if teacher.params.digest() != digest {
        return Err(StreamError::FrozenTeacherViolation);
    }
    Ok(SelfForcingOutcome {
        log,
        teacher_digest: digest,
    })
}
