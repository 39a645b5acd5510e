use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;

use super::*;
use crate::model::{
    build_branch_mask, forward, init_params, Bound, BoundAdapter, Dit, LoRAAdapter, ModelConfig, ModelInputs,
    ParamStore, Role, TextRule,
};
use crate::rng::child_rng;
use crate::substrate::{grad_check, Scalar, SubstrateError, Tape, Tensor};
use crate::synthgen::RenderedSequence;
use crate::training::{interpolate, velocity_target};

fn cfg_with(frames: usize, chunk_frames: usize) -> ModelConfig {
    ModelConfig {
        embed_dim: 16,
        heads: 2,
        depth: 2,
        patch: 2,
        lora_rank: 2,
        lora_alpha: 2.0,
        motion_rank: 2,
        text_tokens: 1,
        ffn_mult: 2,
        frames,
        chunk_frames,
        height: 4,
        width: 4,
        channels: 3,
        text_rule: TextRule::Isolated,
        decoupled: true,
    }
}

fn randomize<S: Scalar>(store: &mut ParamStore<S>, seed: u64, range: f64) {
    let mut rng = child_rng(seed, 9);
    let names: Vec<String> = store.names().map(String::from).collect();
    for n in names {
        for v in store.get_mut(&n).unwrap().data_mut() {
            *v = S::from_f64(rng.random_range(-range..range)).unwrap();
        }
    }
}

fn random_model(cfg: &ModelConfig, seed: u64) -> (Dit, LoRAAdapter) {
    let mut dit = Dit::new(cfg.clone(), seed).unwrap();
    randomize(&mut dit.params, seed, 0.4);
    let mut a = LoRAAdapter::new("E4", cfg, seed);
    randomize(&mut a.factors, seed + 1, 0.3);
    (dit, a)
}

fn seq(cfg: &ModelConfig, emb: &str, seed: u64) -> RenderedSequence {
    let mut rng = child_rng(seed, 1);
    let n = cfg.frames * cfg.height * cfg.width * cfg.channels;
    let mut s = RenderedSequence::from_data(
        [cfg.frames, cfg.height, cfg.width, cfg.channels],
        (0..n).map(|_| rng.random_range(0.0..1.0)).collect(),
    );
    s.embodiment_id = emb.into();
    s.motion_id = format!("M{:02}", seed % 100);
    s.scene_id = "S00".into();
    s
}

#[test]
fn superchunk_layout_examples() {
    let l = build_superchunk_layout(0, 2, 2, 2).unwrap();
    assert_eq!(l.chunks, 1);
    assert_eq!((l.span(Span::Ref), l.span(Span::Cond(0)), l.span(Span::Tgt(0))), (0..2, 2..4, 4..6));

    let l = build_superchunk_layout(1, 2, 3, 3).unwrap();
    assert_eq!(l.len(), 14);
    use Role::*;
    let want = [Ref, Ref, Cond, Cond, Cond, Den, Den, Den, Cond, Cond, Cond, Den, Den, Den];
    let chunks = [0, 0, 0, 0, 0, 0, 0, 0, 1, 1, 1, 1, 1, 1];
    assert_eq!(l.tokens.roles, want);
    assert_eq!(l.tokens.chunk, chunks);
    assert_eq!(l.span(Span::Tgt(0)).start, 5);

    assert_eq!(build_superchunk_layout(0, 1, 1, 1).unwrap().len(), 3);
    for (r, c, t) in [(0, 1, 1), (1, 0, 1), (1, 1, 0)] {
        assert!(matches!(build_superchunk_layout(1, r, c, t), Err(StreamError::InvalidLength(_))));
    }
    for m in 0..4 {
        let l = build_superchunk_layout(m, 2, 3, 4).unwrap();
        assert_eq!(l.len(), 2 + (m + 1) * 7);
    }
}

#[test]
fn causal_mask_matches_hand_enumeration() {
    let l = build_superchunk_layout(2, 1, 1, 1).unwrap();
    // Order: ref, cond_0, tgt_0, cond_1, tgt_1, cond_2, tgt_2.
    let oracle = [
        [1, 0, 0, 0, 0, 0, 0],
        [0, 1, 0, 0, 0, 0, 0],
        [1, 1, 1, 0, 0, 0, 0],
        [0, 1, 0, 1, 0, 0, 0],
        [1, 1, 1, 1, 1, 0, 0],
        [0, 1, 0, 1, 0, 1, 0],
        [1, 1, 1, 1, 1, 1, 1],
    ];
    let m = build_block_causal_mask(&l);
    for (i, row) in oracle.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            assert_eq!(m.visible(i, j), v == 1, "({}, {})", i, j);
        }
    }
}

#[test]
fn causal_mask_containment_is_exact() {
    for m in 0..3 {
        let l = build_superchunk_layout(m, 2, 2, 3).unwrap();
        let mask = build_block_causal_mask(&l);
        for i in 0..=m {
            let mut allowed = vec![false; l.len()];
            for k in l.span(Span::Ref) {
                allowed[k] = true;
            }
            for j in 0..=i {
                for k in l.span(Span::Cond(j)).chain(l.span(Span::Tgt(j))) {
                    allowed[k] = true;
                }
            }
            for q in l.span(Span::Tgt(i)) {
                for (k, &a) in allowed.iter().enumerate() {
                    assert_eq!(mask.visible(q, k), a, "m {} q {} k {}", m, q, k);
                }
            }
            // cond rows never read a target or the reference.
            for q in l.span(Span::Cond(i)) {
                for k in 0..l.len() {
                    let want = l.role(k) == Role::Cond && l.chunk(k) <= i;
                    assert_eq!(mask.visible(q, k), want);
                }
            }
        }
        if m == 1 {
            for q in l.span(Span::Tgt(0)) {
                for k in l.span(Span::Cond(1)).chain(l.span(Span::Tgt(1))) {
                    assert!(!mask.visible(q, k));
                }
            }
        }
    }
}

#[test]
fn single_chunk_causal_mask_is_the_branch_mask() {
    let l = build_superchunk_layout(0, 2, 3, 3).unwrap();
    let causal = build_block_causal_mask(&l);
    let branch = build_branch_mask(&l.tokens, TextRule::Isolated).unwrap();
    assert_eq!(causal, branch);
}

#[test]
fn cache_append_view_and_order() {
    let l = build_superchunk_layout(1, 1, 2, 2).unwrap();
    let mut c = KVCache::new(l.clone(), 2, 3);
    let mut rng = child_rng(0, 0);
    let k: Tensor = Tensor::randn(&[3, 3], 1.0, &mut rng);
    let v: Tensor = Tensor::randn(&[3, 3], 1.0, &mut rng);
    let roles: Vec<_> = (0..3).map(|i| (l.role(i), l.chunk(i))).collect();
    c.append_all(&[(k.clone(), v.clone()), (k.clone(), v.clone())], &roles).unwrap();
    let (vk, vv) = c.view(1);
    assert!(vk.bits_eq(&k) && vv.bits_eq(&v));
    assert_eq!(c.len(), 3);
    // tgt_0 next; offering tgt_1 rows instead is rejected.
    let two_k = k.rows(0, 2);
    let bad = [(Role::Den, 1), (Role::Den, 1)];
    assert!(matches!(c.append(0, &two_k, &two_k, &bad), Err(StreamError::LedgerMismatch(_))));
    let ok = [(Role::Den, 0), (Role::Den, 0)];
    c.append(0, &two_k, &two_k, &ok).unwrap();
    // tgt_1 before cond_1.
    let tgt1 = [(Role::Den, 1), (Role::Den, 1)];
    assert!(matches!(c.append(0, &two_k, &two_k, &tgt1), Err(StreamError::LedgerMismatch(_))));
    assert_eq!(c.view(0).0.dims2().0, 5);
    assert!(c.view(0).0.rows(0, 3).bits_eq(&k));
}

#[test]
fn student_times_are_bin_midpoints() {
    assert_eq!(student_times(4), vec![0.875, 0.625, 0.375, 0.125]);
    assert_eq!(student_times(1), vec![0.5]);
}

#[test]
fn cached_rollout_matches_uncached_forward() {
    for m in 0..3 {
        let cfg = cfg_with(m + 1, 1);
        let (dit, a) = random_model(&cfg, 10 + m as u64);
        let src = seq(&cfg, "E0", 1);
        let reference = reference_tokens(&cfg, &seq(&cfg, "E4", 2), 0);
        let cached = rollout(&dit, Some(&a), &src, &reference, &RolloutConfig::default()).unwrap();
        let plain = rollout(
            &dit,
            Some(&a),
            &src,
            &reference,
            &RolloutConfig {
                use_cache: false,
                ..RolloutConfig::default()
            },
        )
        .unwrap();
        assert_eq!(cached.chunks.len(), m + 1);
        for (x, y) in cached.chunks.iter().zip(&plain.chunks) {
            let rel = x.rel_error(y);
            assert!(rel <= 1e-5, "M={} rel {}", m, rel);
        }
        assert_eq!(cached.evals_per_chunk, vec![4; m + 1]);
        let layout = SuperChunkLayout::for_model(&cfg, cfg.chunks()).unwrap();
        assert_eq!(cached.cache_len, layout.len());
    }
}

#[test]
fn chunks_ignore_future_source_content() {
    let cfg = cfg_with(3, 1);
    let (dit, a) = random_model(&cfg, 4);
    let src = seq(&cfg, "E0", 1);
    let reference = reference_tokens(&cfg, &seq(&cfg, "E4", 2), 0);
    let base = rollout(&dit, Some(&a), &src, &reference, &RolloutConfig::default()).unwrap();
    let mut changed = src.clone();
    let n = changed.frame_len();
    for v in &mut changed.data[n..] {
        *v = 1.0 - *v;
    }
    let alt = rollout(&dit, Some(&a), &changed, &reference, &RolloutConfig::default()).unwrap();
    assert!(base.chunks[0].bits_eq(&alt.chunks[0]));
    assert!(!base.chunks[1].bits_eq(&alt.chunks[1]));
}

#[test]
fn one_step_rollout_stays_in_range() {
    let cfg = cfg_with(2, 1);
    let (dit, a) = random_model(&cfg, 5);
    let reference = reference_tokens(&cfg, &seq(&cfg, "E4", 2), 0);
    let rc = RolloutConfig {
        student_steps: 1,
        ..RolloutConfig::default()
    };
    let out = rollout(&dit, Some(&a), &seq(&cfg, "E0", 3), &reference, &rc).unwrap();
    assert_eq!(out.evals_per_chunk, vec![1, 1]);
    assert!(out.sequence.data.iter().all(|v| (0.0..=1.0).contains(v)));
    assert_eq!(out.sequence.frames, cfg.frames);
    let zero = RolloutConfig {
        student_steps: 0,
        ..RolloutConfig::default()
    };
    assert!(rollout(&dit, Some(&a), &seq(&cfg, "E0", 3), &reference, &zero).is_err());
}

#[test]
fn distill_config_contract() {
    DistillConfig::default().validate().unwrap();
    let bad = [
        DistillConfig { student_steps: 32, ..DistillConfig::default() },
        DistillConfig { lambda_vsd: -1.0, ..DistillConfig::default() },
        DistillConfig { lambda_gan: f64::NAN, ..DistillConfig::default() },
        DistillConfig { student_steps: 0, ..DistillConfig::default() },
    ];
    for b in bad {
        assert!(matches!(b.validate(), Err(StreamError::InvalidConfig(_))));
    }
}

fn samples(cfg: &ModelConfig, n: usize) -> Vec<DistillSample> {
    (0..n)
        .map(|i| DistillSample {
            source: seq(cfg, "E0", 20 + i as u64),
            target: seq(cfg, "E4", 40 + i as u64),
        })
        .collect()
}

#[test]
fn zero_step_teacher_forcing_keeps_the_teacher_copy() {
    let cfg = cfg_with(2, 1);
    let (teacher, a) = random_model(&cfg, 6);
    let mut student = init_student(&teacher);
    let reference = reference_tokens(&cfg, &seq(&cfg, "E4", 2), 0);
    let dc = DistillConfig { tf_steps: 0, ..DistillConfig::default() };
    let log = teacher_forcing_distill(&mut student, Some(&a), &samples(&cfg, 2), &reference, &dc).unwrap();
    assert!(log.records.is_empty());
    assert!(student.params.bits_eq(&teacher.params));
}

#[test]
fn single_chunk_causal_loss_equals_bidirectional_loss() {
    let cfg = cfg_with(2, 2);
    let (teacher, a) = random_model(&cfg, 7);
    let layout = SuperChunkLayout::for_model(&cfg, 1).unwrap();
    let s = &samples(&cfg, 1)[0];
    let conds = source_chunks(&cfg, &s.source);
    let x0 = source_chunks(&cfg, &s.target).remove(0);
    let reference = reference_tokens(&cfg, &seq(&cfg, "E4", 2), 0);
    let noise: Tensor = Tensor::randn(x0.shape(), 1.0, &mut child_rng(1, 1));
    let t = 0.37;

    let mut tape = Tape::new();
    let p = Bound::new(&mut tape, &teacher.params, |_| false);
    let ba = BoundAdapter::new(&mut tape, &a, false);
    let ctx = ChunkContext { reference: &reference, conds: &conds, committed: &[] };
    let l = causal_dsm_loss(&mut tape, &cfg, &layout, &p, Some(&ba), &ctx, &x0, t, &noise).unwrap();
    let causal = tape.scalar_value(l) as f64;

    // The same tokens under the teacher's own bidirectional branch mask.
    let mut tape = Tape::new();
    let p = Bound::new(&mut tape, &teacher.params, |_| false);
    let ba = BoundAdapter::new(&mut tape, &a, false);
    let x_t = interpolate(&x0, &noise, t);
    let patches = Tensor::concat_rows(&[&reference, &conds[0], &x_t]).unwrap();
    let times = layout.tokens.roles.iter().map(|r| if *r == Role::Den { t } else { 0.0 }).collect();
    let mask = Arc::new(build_branch_mask(&layout.tokens, TextRule::Isolated).unwrap());
    let out = forward(&mut tape, &cfg, &p, Some(&ba), &layout.tokens, &mask, &ModelInputs { patches, times }, None)
        .unwrap();
    let target = tape.constant(velocity_target(&x0, &noise));
    let l = tape.mse(out.velocity, target).unwrap();
    let full = tape.scalar_value(l) as f64;
    assert!((causal - full).abs() <= 1e-6 * full.max(1.0), "{} vs {}", causal, full);
}

#[test]
fn teacher_forcing_reduces_loss() {
    let cfg = cfg_with(2, 1);
    let mut teacher = Dit::new(cfg.clone(), 8).unwrap();
    let mut rng = child_rng(8, 2);
    for v in teacher.params.get_mut("out.w").unwrap().data_mut() {
        *v = rng.random_range(-0.2..0.2);
    }
    let mut student = init_student(&teacher);
    let reference = reference_tokens(&cfg, &seq(&cfg, "E4", 2), 0);
    let dc = DistillConfig {
        tf_steps: 200,
        lr: 3e-3,
        ..DistillConfig::default()
    };
    let log = teacher_forcing_distill(&mut student, None, &samples(&cfg, 3), &reference, &dc).unwrap();
    let (first, last) = crate::training::smoothed_endpoints(&log.losses(), 40);
    assert!(last < first, "{} -> {}", first, last);
}

fn random_batch<S: Scalar>(cfg: &ModelConfig, chunk: usize, seed: u64) -> StreamBatch<S> {
    let mut rng = child_rng(seed, 21);
    let layout = SuperChunkLayout::for_model(cfg, cfg.chunks()).unwrap();
    let p = cfg.patch_dim();
    let mut u = |rows: usize| Tensor::<S>::uniform(&[rows, p], -1.0, 1.0, &mut rng);
    let reference = u(layout.ref_len);
    let conds = (0..=chunk).map(|_| u(layout.cond_len)).collect();
    let committed = (0..chunk).map(|_| u(layout.tgt_len)).collect();
    let state = u(layout.tgt_len);
    let dsm_x0 = u(layout.tgt_len);
    let dsm_noise = u(layout.tgt_len);
    let vsd_target = u(layout.tgt_len);
    let mut disc = Discriminator::new(cfg, 4, seed).params.cast::<S>();
    randomize(&mut disc, seed + 3, 0.7);
    StreamBatch {
        reference,
        conds,
        committed,
        state,
        state_t: 0.125,
        dsm_x0,
        dsm_t: 0.6,
        dsm_noise,
        vsd_target,
        disc,
    }
}

#[test]
fn zero_weights_leave_the_denoising_loss() {
    let cfg = cfg_with(2, 1);
    let (dit, a) = random_model(&cfg, 9);
    let layout = SuperChunkLayout::for_model(&cfg, 2).unwrap();
    let batch = random_batch::<f32>(&cfg, 1, 3);
    let mut tape = Tape::new();
    let p = Bound::new(&mut tape, &dit.params, |_| false);
    let ba = BoundAdapter::new(&mut tape, &a, false);
    let l = stream_loss(&mut tape, &cfg, &layout, &p, Some(&ba), &batch, 0.0, 0.0).unwrap();
    let (total, dsm) = (tape.scalar_value(l.total), tape.scalar_value(l.dsm));
    assert!((total - dsm).abs() <= 1e-7, "{} vs {}", total, dsm);
    assert!(tape.scalar_value(l.vsd) > 0.0);
}

#[test]
fn hinge_losses_on_identical_batches() {
    let cfg = cfg_with(2, 1);
    let mut disc = Discriminator::new(&cfg, 8, 1);
    randomize(&mut disc.params, 2, 1.0);
    let tokens: Tensor = Tensor::uniform(&[2 * cfg.tokens_per_frame(), cfg.patch_dim()], -1.0, 1.0, &mut child_rng(3, 3));
    let mut tape = Tape::new();
    let dp = Bound::new(&mut tape, &disc.params, |_| false);
    let x = tape.constant(tokens.clone());
    let real = frame_scores(&mut tape, &dp, x, disc.per_frame).unwrap();
    let fake = frame_scores(&mut tape, &dp, x, disc.per_frame).unwrap();
    let d = hinge_d(&mut tape, real, fake).unwrap();
    let g = hinge_g(&mut tape, fake);

    // Direct evaluation of the scorer.
    let w1 = disc.params.get("disc.w1").unwrap();
    let b1 = disc.params.get("disc.b1").unwrap().data();
    let w2 = disc.params.get("disc.w2").unwrap().data();
    let b2 = disc.params.get("disc.b2").unwrap().data()[0] as f64;
    let h = w1.shape()[1];
    let gelu = |x: f64| 0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh());
    let patch = |r: usize| -> f64 {
        let row = tokens.row(r);
        (0..h)
            .map(|j| {
                let z = b1[j] as f64 + row.iter().enumerate().map(|(i, &v)| v as f64 * w1.data()[i * h + j] as f64).sum::<f64>();
                gelu(z) * w2[j] as f64
            })
            .sum::<f64>()
            + b2
    };
    let tpf = disc.per_frame;
    let s: Vec<f64> = (0..2).map(|f| (0..tpf).map(|k| patch(f * tpf + k)).sum::<f64>() / tpf as f64).collect();
    let want_d = s.iter().map(|v| (1.0 - v).max(0.0)).sum::<f64>() / 2.0 + s.iter().map(|v| (1.0 + v).max(0.0)).sum::<f64>() / 2.0;
    let want_g = -s.iter().sum::<f64>() / 2.0;
    assert!((tape.scalar_value(d) as f64 - want_d).abs() < 1e-5, "{} vs {}", tape.scalar_value(d), want_d);
    assert!((tape.scalar_value(g) as f64 - want_g).abs() < 1e-5);
}

#[test]
fn self_forcing_leaves_the_teacher_untouched() {
    let cfg = cfg_with(2, 1);
    let (teacher, a) = random_model(&cfg, 12);
    let before = teacher.params.digest();
    let mut student = init_student(&teacher);
    let mut critic = teacher.clone();
    let mut disc = Discriminator::new(&cfg, 8, 0);
    let reference = reference_tokens(&cfg, &seq(&cfg, "E4", 2), 0);
    let real: Vec<_> = (0..2).map(|i| seq(&cfg, "E4", 60 + i)).collect();
    let dc = DistillConfig { sf_steps: 100, ..DistillConfig::default() };
    let out = self_forcing_distill(
        &mut student,
        &teacher,
        &mut critic,
        &mut disc,
        Some(&a),
        &samples(&cfg, 2),
        &real,
        &reference,
        &dc,
    )
    .unwrap();
    assert_eq!(out.log.records.len(), 100);
    assert!(out.log.losses().iter().all(|l| l.is_finite()));
    assert_eq!(teacher.params.digest(), before);
    assert_eq!(out.teacher_digest, before);
    assert!(!student.params.bits_eq(&teacher.params));
    assert!(!critic.params.bits_eq(&teacher.params));
}

fn sub(e: impl std::fmt::Display) -> SubstrateError {
    SubstrateError::InvalidArgument(e.to_string())
}

/// Backbone and adapter tensors as one flat point, plus a closure-friendly splitter.
fn flat_point(cfg: &ModelConfig, seed: u64) -> (ParamStore<f64>, Tensor<f64>) {
    let mut params = init_params(cfg, seed).cast::<f64>();
    randomize(&mut params, seed, 0.5);
    let mut adapter = LoRAAdapter::new("E4", cfg, seed).factors.cast::<f64>();
    randomize(&mut adapter, seed + 50, 0.5);
    params.merge(&adapter.prefixed("lora:"));
    let point = Tensor::new(vec![params.numel(), 1], params.flatten()).unwrap();
    (params, point)
}

fn split(all: Bound, scale: f64) -> (Bound, BoundAdapter) {
    let mut backbone = BTreeMap::new();
    let mut factors = BTreeMap::new();
    for (n, v) in all.iter() {
        match n.strip_prefix("lora:") {
            Some(f) => factors.insert(f.to_string(), v),
            None => backbone.insert(n.to_string(), v),
        };
    }
    (Bound::from_vars(backbone), BoundAdapter { factors: Bound::from_vars(factors), scale })
}

#[test]
fn teacher_forcing_gradients_match_finite_differences() {
    let cfg = ModelConfig::tiny();
    let layout = SuperChunkLayout::for_model(&cfg, cfg.chunks()).unwrap();
    for seed in 0..3 {
        let (joint, point) = flat_point(&cfg, seed);
        let b = random_batch::<f64>(&cfg, 1, seed);
        let err = grad_check(
            |tape: &mut Tape<f64>, x| {
                let all = Bound::from_flat(tape, &ParamStore::new(), &joint, x).map_err(sub)?;
                let (p, a) = split(all, cfg.lora_scale() as f64);
                let ctx = ChunkContext { reference: &b.reference, conds: &b.conds, committed: &b.committed };
                causal_dsm_loss(tape, &cfg, &layout, &p, Some(&a), &ctx, &b.dsm_x0, b.dsm_t, &b.dsm_noise).map_err(sub)
            },
            &point,
            1e-4,
        )
        .unwrap();
        assert!(err <= 1e-4, "seed {}: {}", seed, err);
    }
}

#[test]
fn self_forcing_composite_gradients_match_finite_differences() {
    let cfg = ModelConfig::tiny();
    let layout = SuperChunkLayout::for_model(&cfg, cfg.chunks()).unwrap();
    for seed in 0..3 {
        let (joint, point) = flat_point(&cfg, seed + 10);
        let b = random_batch::<f64>(&cfg, 1, seed + 10);
        let err = grad_check(
            |tape: &mut Tape<f64>, x| {
                let all = Bound::from_flat(tape, &ParamStore::new(), &joint, x).map_err(sub)?;
                let (p, a) = split(all, cfg.lora_scale() as f64);
                Ok(stream_loss(tape, &cfg, &layout, &p, Some(&a), &b, 1.0, 0.1).map_err(sub)?.total)
            },
            &point,
            1e-4,
        )
        .unwrap();
        assert!(err <= 1e-4, "seed {}: {}", seed, err);
    }
}

