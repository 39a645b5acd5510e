use std::sync::Arc;

use rand::Rng;

use super::*;
use crate::rng::child_rng;
use crate::substrate::{AttentionMask, Tape, Tensor};

fn mini_cfg() -> ModelConfig {
    ModelConfig {
        embed_dim: 16,
        heads: 2,
        depth: 2,
        patch: 2,
        lora_rank: 2,
        lora_alpha: 2.0,
        motion_rank: 2,
        text_tokens: 2,
        ffn_mult: 2,
        frames: 2,
        chunk_frames: 1,
        height: 4,
        width: 4,
        channels: 3,
        text_rule: TextRule::Isolated,
        decoupled: true,
    }
}

/// Every tensor redrawn at random so no gradient path is trivially zero.
fn randomized(cfg: &ModelConfig, seed: u64) -> ParamStore {
    let mut rng = child_rng(seed, 99);
    let mut s = init_params(cfg, seed);
    let names: Vec<String> = s.names().map(String::from).collect();
    for n in names {
        let t = s.get_mut(&n).unwrap();
        for v in t.data_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
    }
    s
}

fn random_adapter(cfg: &ModelConfig, id: &str, seed: u64) -> LoRAAdapter {
    let mut a = LoRAAdapter::new(id, cfg, seed);
    let mut rng = child_rng(seed, 7);
    let names: Vec<String> = a.factors.names().map(String::from).collect();
    for n in names {
        for v in a.factors.get_mut(&n).unwrap().data_mut() {
            *v = rng.random_range(-0.3..0.3);
        }
    }
    a
}

struct Run {
    velocity: Tensor,
    hidden: Vec<Tensor>,
}

fn run(
    cfg: &ModelConfig,
    params: &ParamStore,
    adapter: Option<&LoRAAdapter>,
    layout: &TokenLayout,
    mask: &AttentionMask,
    inputs: &ModelInputs,
) -> Run {
    let mut tape = Tape::new();
    let p = Bound::new(&mut tape, params, |_| false);
    let a = adapter.map(|a| BoundAdapter::new(&mut tape, a, false));
    let out = forward(&mut tape, cfg, &p, a.as_ref(), layout, &Arc::new(mask.clone()), inputs, None).unwrap();
    Run {
        velocity: tape.value(out.velocity).clone(),
        hidden: out.hidden.iter().map(|h| tape.value(*h).clone()).collect(),
    }
}

fn random_inputs(cfg: &ModelConfig, layout: &TokenLayout, seed: u64) -> ModelInputs {
    let mut rng = child_rng(seed, 3);
    let patches = Tensor::uniform(&[layout.len(), cfg.patch_dim()], -1.0, 1.0, &mut rng);
    let t: f64 = rng.random_range(0.05..0.95);
    let times = layout
        .roles
        .iter()
        .map(|r| if *r == Role::Den { t } else { 0.0 })
        .collect();
    ModelInputs { patches, times }
}

#[test]
fn config_invariants() {
    ModelConfig::default().validate().unwrap();
    ModelConfig::tiny().validate().unwrap();
    let bad = [
        ModelConfig { heads: 3, ..ModelConfig::default() },
        ModelConfig { lora_rank: 17, ..ModelConfig::default() },
        ModelConfig { lora_rank: 0, ..ModelConfig::default() },
        ModelConfig { patch: 5, ..ModelConfig::default() },
        ModelConfig { chunk_frames: 5, ..ModelConfig::default() },
    ];
    for c in bad {
        assert!(matches!(c.validate(), Err(ModelError::InvalidConfig(_))), "{:?}", c);
    }
}

#[test]
fn branch_mask_three_tokens() {
    let mut l = TokenLayout::default();
    l.push(Role::Text(0), 0, 0, 0);
    l.push(Role::Den, 0, 0, 0);
    l.push(Role::Cond, 0, 0, 0);
    let m = build_branch_mask(&l, TextRule::ReadsDen).unwrap();
    for i in 0..3 {
        for j in 0..3 {
            assert_eq!(m.visible(i, j), !(i == 2 && j == 1), "({}, {})", i, j);
        }
    }
    // The default rule additionally hides den from text.
    let m = build_branch_mask(&l, TextRule::Isolated).unwrap();
    assert!(!m.visible(0, 1) && !m.visible(2, 1));
    assert_eq!(m.masked_count(), 2);
}

#[test]
fn branch_mask_counts_and_trivial_cases() {
    let l = TokenLayout::teacher(0, 1, 0, 4);
    let mut l6 = TokenLayout::teacher(0, 0, 0, 1);
    l6.push_frames(Role::Den, 0, 6, 1, 0);
    l6.push_frames(Role::Cond, 0, 4, 1, 0);
    let m = build_branch_mask(&l6, TextRule::Isolated).unwrap();
    let brute = (0..10)
        .flat_map(|i| (0..10).map(move |j| (i, j)))
        .filter(|&(i, j)| !m.visible(i, j))
        .count();
    assert_eq!(brute, 24);
    assert_eq!(build_branch_mask(&l, TextRule::Isolated).unwrap().masked_count(), 0);
    let den_only = TokenLayout::teacher(0, 0, 2, 3);
    assert_eq!(build_branch_mask(&den_only, TextRule::Isolated).unwrap().masked_count(), 0);
    assert!(matches!(
        build_branch_mask(&TokenLayout::default(), TextRule::Isolated),
        Err(ModelError::EmptyLayout)
    ));
}

#[test]
fn branch_mask_exhaustive_scan() {
    let cfg = mini_cfg();
    let l = teacher_layout(&cfg, 2, 2);
    let m = build_branch_mask(&l, cfg.text_rule).unwrap();
    for i in 0..l.len() {
        for j in 0..l.len() {
            let (q, k) = (l.branch(i), l.branch(j));
            let want = match (q, k) {
                (Branch::Cond, Branch::Den) | (Branch::Text, Branch::Den) => false,
                _ => true,
            };
            assert_eq!(m.visible(i, j), want);
        }
    }
}

#[test]
fn apply_lora_examples() {
    let mut rng = child_rng(1, 0);
    let w = Tensor::randn(&[8, 8], 1.0, &mut rng);
    let b = Tensor::randn(&[8, 2], 1.0, &mut rng);
    let zero_a = Tensor::zeros(&[2, 8]);
    assert!(apply_lora(&w, &zero_a, &b, 1.0).unwrap().bits_eq(&w));

    let mut e1 = Tensor::zeros(&[8, 1]);
    e1.data_mut()[1] = 1.0;
    let mut e2 = Tensor::zeros(&[1, 8]);
    e2.data_mut()[2] = 1.0;
    let out = apply_lora(&w, &e2, &e1, 1.0).unwrap();
    for i in 0..64 {
        if i == 8 + 2 {
            assert_eq!(out.data()[i], w.data()[i] + 1.0);
        } else {
            assert_eq!(out.data()[i].to_bits(), w.data()[i].to_bits());
        }
    }

    let a = Tensor::randn(&[2, 8], 1.0, &mut rng);
    let got = apply_lora(&w, &a, &b, 0.5).unwrap();
    let mut want = vec![0.0f64; 64];
    for i in 0..8 {
        for j in 0..8 {
            let mut acc = 0.0f64;
            for k in 0..2 {
                acc += b.data()[i * 2 + k] as f64 * a.data()[k * 8 + j] as f64;
            }
            want[i * 8 + j] = w.data()[i * 8 + j] as f64 + 0.5 * acc;
        }
    }
    let want = Tensor::new(vec![8, 8], want).unwrap();
    assert!(got.cast::<f64>().rel_error(&want) <= 1e-6);

    assert!(matches!(
        apply_lora(&w, &Tensor::zeros(&[2, 7]), &b, 1.0),
        Err(ModelError::ShapeMismatch(_))
    ));
}

#[test]
fn apply_lora_never_touches_backbone() {
    let cfg = mini_cfg();
    let params = randomized(&cfg, 4);
    let before = params.digest();
    let adapter = random_adapter(&cfg, "E0", 4);
    for i in 0..cfg.depth {
        for p in LORA_PROJ {
            let w = params.get(&format!("blocks.{}.attn.w{}", i, p)).unwrap();
            for _ in 0..3 {
                adapter.effective(w, i, p).unwrap();
            }
        }
    }
    let l = teacher_layout(&cfg, 1, 1);
    let inputs = random_inputs(&cfg, &l, 0);
    run(&cfg, &params, Some(&adapter), &l, &teacher_mask(&cfg, &l).unwrap(), &inputs);
    assert_eq!(params.digest(), before);
}

#[test]
fn zero_or_fresh_adapter_is_bit_identical() {
    let cfg = mini_cfg();
    let params = randomized(&cfg, 5);
    let l = teacher_layout(&cfg, 2, 2);
    let mask = teacher_mask(&cfg, &l).unwrap();
    let inputs = random_inputs(&cfg, &l, 1);
    let base = run(&cfg, &params, None, &l, &mask, &inputs);

    let fresh = LoRAAdapter::new("E0", &cfg, 0);
    assert!(run(&cfg, &params, Some(&fresh), &l, &mask, &inputs).velocity.bits_eq(&base.velocity));

    let mut zero_a = random_adapter(&cfg, "E1", 2);
    let names: Vec<String> = zero_a.factors.names().filter(|n| n.ends_with(".a")).map(String::from).collect();
    for n in names {
        zero_a.factors.get_mut(&n).unwrap().data_mut().fill(0.0);
    }
    assert!(run(&cfg, &params, Some(&zero_a), &l, &mask, &inputs).velocity.bits_eq(&base.velocity));

    let live = random_adapter(&cfg, "E2", 3);
    assert!(!run(&cfg, &params, Some(&live), &l, &mask, &inputs).velocity.bits_eq(&base.velocity));
}

fn cond_rows(l: &TokenLayout, t: &Tensor) -> Tensor {
    t.gather_rows(&l.indices(|r| r == Role::Cond))
}

#[test]
fn cond_stream_ignores_den_tokens_and_adapters() {
    {
        let cfg = mini_cfg();
        for seed in 0..5 {
            let params = randomized(&cfg, seed);
            let l = teacher_layout(&cfg, 2, 2);
            let mask = teacher_mask(&cfg, &l).unwrap();
            let inputs = random_inputs(&cfg, &l, seed);
            let a = random_adapter(&cfg, "A", seed);
            let b = random_adapter(&cfg, "B", seed + 100);
            let reference = run(&cfg, &params, None, &l, &mask, &inputs);
            let mut perturbed = inputs.clone();
            let mut rng = child_rng(seed, 11);
            for i in l.indices(|r| r == Role::Den) {
                for c in 0..cfg.patch_dim() {
                    perturbed.patches.data_mut()[i * cfg.patch_dim() + c] = rng.random_range(-3.0..3.0);
                }
                perturbed.times[i] = rng.random_range(0.0..1.0);
            }
            for (inp, ad) in [(&perturbed, None), (&inputs, Some(&a)), (&perturbed, Some(&b))] {
                let r = run(&cfg, &params, ad, &l, &mask, inp);
                for (h0, h1) in reference.hidden.iter().zip(&r.hidden) {
                    assert!(cond_rows(&l, h0).bits_eq(&cond_rows(&l, h1)));
                }
            }
        }
    }
}

#[test]
fn text_reading_den_leaks_into_cond_at_depth_two() {
    let cfg = ModelConfig {
        text_rule: TextRule::ReadsDen,
        ..mini_cfg()
    };
    let params = randomized(&cfg, 1);
    let l = teacher_layout(&cfg, 1, 1);
    let mask = teacher_mask(&cfg, &l).unwrap();
    let inputs = random_inputs(&cfg, &l, 1);
    let mut perturbed = inputs.clone();
    let first_den = l.indices(|r| r == Role::Den)[0];
    perturbed.patches.data_mut()[first_den * cfg.patch_dim()] += 1.0;
    let a = run(&cfg, &params, None, &l, &mask, &inputs);
    let b = run(&cfg, &params, None, &l, &mask, &perturbed);
    assert!(cond_rows(&l, &a.hidden[0]).bits_eq(&cond_rows(&l, &b.hidden[0])));
    assert!(!cond_rows(&l, &a.hidden[1]).bits_eq(&cond_rows(&l, &b.hidden[1])));
}

// ---- Naive f64 oracle of the whole forward pass. ----

type Mat = Vec<Vec<f64>>;

fn mat(t: &Tensor) -> Mat {
    let (r, c) = t.dims2();
    (0..r).map(|i| (0..c).map(|j| t.data()[i * c + j] as f64).collect()).collect()
}

fn vec1(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

fn mm(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .map(|row| {
            (0..b[0].len())
                .map(|j| row.iter().enumerate().map(|(k, x)| x * b[k][j]).sum())
                .collect()
        })
        .collect()
}

fn madd(a: &Mat, b: &Mat, s: f64) -> Mat {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + s * q).collect())
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x * x * x)).tanh())
}

fn ln(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mu = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
    let r = 1.0 / (var + 1e-5).sqrt();
    x.iter().zip(g).zip(b).map(|((v, g), b)| (v - mu) * r * g + b).collect()
}

fn row_times(x: &[f64], w: &Mat) -> Vec<f64> {
    (0..w[0].len()).map(|j| x.iter().enumerate().map(|(k, v)| v * w[k][j]).sum()).collect()
}

fn oracle(
    cfg: &ModelConfig,
    params: &ParamStore,
    adapter: Option<&LoRAAdapter>,
    l: &TokenLayout,
    mask: &AttentionMask,
    inputs: &ModelInputs,
) -> Mat {
    let g = |n: &str| params.get(n).unwrap();
    let d = cfg.embed_dim;
    let n = l.len();
    let mut h: Mat = Vec::new();
    for i in 0..n {
        let row = match l.roles[i] {
            Role::Text(k) => mat(g("embed.text"))[k].clone(),
            role => {
                let x: Vec<f64> = inputs.patches.row(i).iter().map(|&v| v as f64).collect();
                let mut e = row_times(&x, &mat(g("embed.patch.w")));
                let bp = vec1(g("embed.patch.b"));
                let sp = &mat(g("embed.pos.spatial"))[l.spatial[i]];
                let tp = &mat(g("embed.pos.temporal"))[l.frame[i]];
                let rv = vec1(g(match role {
                    Role::Cond => "embed.branch.cond",
                    Role::Den => "embed.branch.den",
                    _ => "embed.branch.ref",
                }));
                for c in 0..d {
                    e[c] += bp[c] + sp[c] + tp[c] + rv[c];
                }
                if matches!(role, Role::Den | Role::Ref) {
                    let half = d / 2;
                    let t = inputs.times[i] * 1000.0;
                    let feat: Vec<f64> = (0..d)
                        .map(|c| {
                            let k = c % half;
                            let f = (-(10000f64.ln()) * k as f64 / half as f64).exp();
                            if c < half { (t * f).sin() } else { (t * f).cos() }
                        })
                        .collect();
                    let mut z = row_times(&feat, &mat(g("time.w1")));
                    let b1 = vec1(g("time.b1"));
                    for c in 0..d {
                        z[c] = gelu(z[c] + b1[c]);
                    }
                    let z = row_times(&z, &mat(g("time.w2")));
                    let b2 = vec1(g("time.b2"));
                    for c in 0..d {
                        e[c] += z[c] + b2[c];
                    }
                }
                e
            }
        };
        h.push(row);
    }
    let weight = |i: usize, proj: &str, branch: Branch| -> Mat {
        let base = match proj {
            "q" | "k" | "v" | "o" => format!("blocks.{}.attn.w{}", i, proj),
            "ffn1" => format!("blocks.{}.ffn.w1", i),
            _ => format!("blocks.{}.ffn.w2", i),
        };
        let mut w = mat(g(&base));
        if branch == Branch::Cond {
            let m = format!("motion.blocks.{}.{}", i, proj);
            w = madd(&w, &mm(&mat(g(&format!("{}.b", m))), &mat(g(&format!("{}.a", m)))), 1.0);
        }
        if let Some(a) = adapter {
            let reach = branch == Branch::Den || !cfg.decoupled;
            if reach && LORA_PROJ.contains(&proj) {
                let ba = mm(&mat(a.b(i, proj).unwrap()), &mat(a.a(i, proj).unwrap()));
                w = madd(&w, &ba, a.scale as f64);
            }
        }
        w
    };
    let heads = cfg.heads;
    let dh = d / heads;
    for i in 0..cfg.depth {
        let b = format!("blocks.{}", i);
        let (g1, b1) = (vec1(g(&format!("{}.ln1.g", b))), vec1(g(&format!("{}.ln1.b", b))));
        let a: Mat = h.iter().map(|x| ln(x, &g1, &b1)).collect();
        let proj = |x: &Mat, p: &str| -> Mat {
            (0..n).map(|r| row_times(&x[r], &weight(i, p, l.branch(r)))).collect()
        };
        let (q, k, v) = (proj(&a, "q"), proj(&a, "k"), proj(&a, "v"));
        let mut att = vec![vec![0.0; d]; n];
        for r in 0..n {
            for hd in 0..heads {
                let cols: Vec<usize> = (0..n).filter(|&j| mask.visible(r, j)).collect();
                let logits: Vec<f64> = cols
                    .iter()
                    .map(|&j| (0..dh).map(|c| q[r][hd * dh + c] * k[j][hd * dh + c]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let mx = logits.iter().cloned().fold(f64::MIN, f64::max);
                let z: f64 = logits.iter().map(|x| (x - mx).exp()).sum();
                for (w, &j) in logits.iter().zip(&cols) {
                    let p = (w - mx).exp() / z;
                    for c in 0..dh {
                        att[r][hd * dh + c] += p * v[j][hd * dh + c];
                    }
                }
            }
        }
        let o = proj(&att, "o");
        h = madd(&h, &o, 1.0);
        let (g2, b2) = (vec1(g(&format!("{}.ln2.g", b))), vec1(g(&format!("{}.ln2.b", b))));
        let a2: Mat = h.iter().map(|x| ln(x, &g2, &b2)).collect();
        let fb1 = vec1(g(&format!("{}.ffn.b1", b)));
        let f1: Mat = proj(&a2, "ffn1")
            .into_iter()
            .map(|r| r.iter().zip(&fb1).map(|(x, y)| gelu(x + y)).collect())
            .collect();
        let fb2 = vec1(g(&format!("{}.ffn.b2", b)));
        let f2: Mat = proj(&f1, "ffn2")
            .into_iter()
            .map(|r| r.iter().zip(&fb2).map(|(x, y)| x + y).collect())
            .collect();
        h = madd(&h, &f2, 1.0);
    }
    let (og, ob) = (vec1(g("out.ln.g")), vec1(g("out.ln.b")));
    let ow = mat(g("out.w"));
    let obias = vec1(g("out.b"));
    l.indices(|r| r == Role::Den)
        .into_iter()
        .map(|r| {
            let z = row_times(&ln(&h[r], &og, &ob), &ow);
            z.iter().zip(&obias).map(|(x, y)| x + y).collect()
        })
        .collect()
}

fn flat(m: &Mat) -> Tensor<f64> {
    let r = m.len();
    let c = m.first().map_or(0, Vec::len);
    Tensor::new(vec![r, c], m.iter().flatten().copied().collect()).unwrap()
}

#[test]
fn hand_sized_single_block_matches_direct_computation() {
    let cfg = ModelConfig {
        embed_dim: 4,
        heads: 1,
        depth: 1,
        lora_rank: 1,
        lora_alpha: 1.0,
        motion_rank: 1,
        text_tokens: 1,
        patch: 1,
        height: 1,
        width: 1,
        frames: 1,
        chunk_frames: 1,
        ..mini_cfg()
    };
    let params = randomized(&cfg, 8);
    let mut l = TokenLayout::default();
    l.push(Role::Den, 0, 0, 0);
    l.push(Role::Cond, 0, 0, 0);
    let mask = build_branch_mask(&l, cfg.text_rule).unwrap();
    let inputs = random_inputs(&cfg, &l, 8);
    let adapter = random_adapter(&cfg, "E0", 8);
    let got = run(&cfg, &params, Some(&adapter), &l, &mask, &inputs).velocity;
    let want = flat(&oracle(&cfg, &params, Some(&adapter), &l, &mask, &inputs));
    assert!(got.cast::<f64>().rel_error(&want) <= 1e-5, "{:?} vs {:?}", got, want);
}

#[test]
fn forward_matches_oracle_on_both_variants() {
    for decoupled in [true, false] {
        let cfg = ModelConfig { decoupled, ..mini_cfg() };
        let params = randomized(&cfg, 21);
        let l = teacher_layout(&cfg, 2, 2);
        let mask = teacher_mask(&cfg, &l).unwrap();
        let inputs = random_inputs(&cfg, &l, 21);
        let adapter = random_adapter(&cfg, "E0", 21);
        let got = run(&cfg, &params, Some(&adapter), &l, &mask, &inputs).velocity;
        let want = flat(&oracle(&cfg, &params, Some(&adapter), &l, &mask, &inputs));
        assert!(got.cast::<f64>().rel_error(&want) <= 1e-5);
    }
}

#[test]
fn forward_rejects_mismatched_inputs() {
    let cfg = mini_cfg();
    let params = init_params(&cfg, 0);
    let l = teacher_layout(&cfg, 1, 1);
    let mask = teacher_mask(&cfg, &l).unwrap();
    let mut inputs = random_inputs(&cfg, &l, 0);
    inputs.times.pop();
    let mut tape = Tape::new();
    let p = Bound::new(&mut tape, &params, |_| false);
    assert!(matches!(
        forward(&mut tape, &cfg, &p, None, &l, &Arc::new(mask.clone()), &inputs, None),
        Err(ModelError::LayoutMismatch(_))
    ));
    let other = ModelConfig { depth: 3, ..cfg.clone() };
    let bad = LoRAAdapter::new("E0", &other, 0);
    assert!(matches!(bad.check(&cfg), Err(ModelError::AdapterShapeMismatch(_))));
}

#[test]
fn bank_activation_semantics() {
    let cfg = mini_cfg();
    let params = randomized(&cfg, 2);
    let l = teacher_layout(&cfg, 1, 1);
    let mask = teacher_mask(&cfg, &l).unwrap();
    let inputs = random_inputs(&cfg, &l, 2);
    let mut bank = LoraBank::new();
    bank.register(random_adapter(&cfg, "E0", 1)).unwrap();
    bank.register(random_adapter(&cfg, "E1", 2)).unwrap();
    assert!(matches!(bank.register(random_adapter(&cfg, "E0", 3)), Err(ModelError::DuplicateEmbodiment(_))));
    assert!(matches!(bank.activate("E9"), Err(ModelError::UnknownEmbodiment(_))));

    bank.activate("E0").unwrap();
    let first = run(&cfg, &params, bank.active(), &l, &mask, &inputs).velocity;
    bank.activate("E1").unwrap();
    let other = run(&cfg, &params, bank.active(), &l, &mask, &inputs).velocity;
    bank.activate("E0").unwrap();
    let again = run(&cfg, &params, bank.active(), &l, &mask, &inputs).velocity;
    assert!(first.bits_eq(&again));
    assert!(!first.bits_eq(&other));
    let w = params.get("blocks.0.attn.wq").unwrap();
    assert!(bank.active().unwrap().effective(w, 0, "q").unwrap().bits_eq(
        &bank.get("E0").unwrap().effective(w, 0, "q").unwrap()
    ));

    bank.deactivate();
    assert!(bank.active().is_none());
    let base = run(&cfg, &params, None, &l, &mask, &inputs).velocity;
    assert!(run(&cfg, &params, bank.active(), &l, &mask, &inputs).velocity.bits_eq(&base));
}

#[test]
fn bank_and_checkpoint_round_trip() {
    let cfg = mini_cfg();
    let mut bank = LoraBank::new();
    for (i, id) in ["E0", "E1", "E2", "E3"].iter().enumerate() {
        bank.register(random_adapter(&cfg, id, i as u64)).unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bank.omnh");
    bank.save(&path).unwrap();
    let back = LoraBank::load(&path).unwrap();
    assert_eq!(back.ids(), bank.ids());
    for id in bank.ids() {
        let (a, b) = (bank.get(&id).unwrap(), back.get(&id).unwrap());
        assert!(a.factors.bits_eq(&b.factors));
        assert_eq!(a.scale.to_bits(), b.scale.to_bits());
    }

    let params = randomized(&cfg, 3);
    let bytes = encode_checkpoint(&params);
    assert_eq!(&bytes[..4], b"OMNH");
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
    assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize, params.len());
    let back = decode_checkpoint(&bytes).unwrap();
    assert!(back.bits_eq(&params));
    assert_eq!(back.digest(), params.digest());
    let mut broken = bytes.clone();
    broken[0] = b'X';
    assert!(matches!(decode_checkpoint(&broken), Err(ModelError::Checkpoint(_))));
    assert!(matches!(decode_checkpoint(&bytes[..bytes.len() - 1]), Err(ModelError::Checkpoint(_))));
}

#[test]
fn patchify_round_trip() {
    let cfg = mini_cfg();
    let mut rng = child_rng(0, 0);
    let data: Vec<f32> = (0..2 * 4 * 4 * 3).map(|_| rng.random_range(0.0..1.0)).collect();
    let seq = crate::synthgen::RenderedSequence::from_data([2, 4, 4, 3], data);
    let tokens = patchify(&cfg, &seq, 0, 2);
    assert_eq!(tokens.shape(), &[8, 12]);
    // Token 1 of frame 0 is the patch at grid (0, 1): pixel (0, 2) opens it.
    assert_eq!(tokens.data()[12], 2.0 * seq.data[2 * 3] - 1.0);
    let back = unpatchify(&cfg, &tokens, 2);
    for (a, b) in back.data.iter().zip(&seq.data) {
        assert!((a - b).abs() < 1e-6);
    }
    assert_eq!(patchify(&cfg, &seq, 1, 1).data(), &tokens.data()[4 * 12..]);
}

#[test]
fn sampler_counts_steps_and_is_seeded() {
    let cfg = mini_cfg();
    let dit = Dit {
        cfg: cfg.clone(),
        params: randomized(&cfg, 0),
    };
    let cond = Tensor::zeros(&[cfg.tokens_per_frame(), cfg.patch_dim()]);
    let (a, n) = dit.sample(Some(&cond), 1, None, 7, &mut child_rng(1, 1)).unwrap();
    let (b, _) = dit.sample(Some(&cond), 1, None, 7, &mut child_rng(1, 1)).unwrap();
    assert_eq!(n, 7);
    assert!(a.bits_eq(&b));
    assert!(a.all_finite());
}
