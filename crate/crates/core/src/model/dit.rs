//! Branch-decoupled diffusion transformer.
//!
//! Every block projects all tokens with the same backbone weights. Cond
//! tokens add the shared-motion deltas, den tokens add the active adapter's
//! LoRA update on Q/K/V. In the non-decoupled ablation the adapter reaches
//! every stream.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::substrate::{AttentionMask, Scalar, Tape, Tensor, Var};

use super::config::ModelConfig;
use super::layout::{Branch, Role, TokenLayout};
use super::lora::{LoRAAdapter, LORA_PROJ};
use super::params::ParamStore;
use super::ModelError;

/// Store tensors placed on a tape.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Binds every tensor; those with `trainable(name)` become differentiable leaves.
    pub fn new<S: Scalar>(tape: &mut Tape<S>, store: &ParamStore<S>, trainable: impl Fn(&str) -> bool) -> Self {
        let vars = store
            .iter()
            .map(|(k, t)| {
                let v = if trainable(k) {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                };
                (k.to_string(), v)
            })
            .collect();
        Self { vars }
    }

    /// Binds `fixed` as constants plus the tensors of `layout`, read in name order
    /// out of the flat `[N, 1]` variable `flat`.
    pub fn from_flat<S: Scalar>(
        tape: &mut Tape<S>,
        fixed: &ParamStore<S>,
        layout: &ParamStore<S>,
        flat: Var,
    ) -> Result<Self, ModelError> {
        let mut out = Self::new(tape, &fixed.subset(|n| !layout.contains(n)), |_| false);
        let mut at = 0;
        for (name, t) in layout.iter() {
            let rows = tape.slice_rows(flat, at, t.len())?;
            let v = tape.reshape(rows, t.shape())?;
            out.vars.insert(name.to_string(), v);
            at += t.len();
        }
        Ok(out)
    }

    pub fn from_vars(vars: BTreeMap<String, Var>) -> Self {
        Self { vars }
    }

    pub fn get(&self, name: &str) -> Result<Var, ModelError> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| ModelError::MissingTensor(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// An adapter's factors on a tape.
#[derive(Clone, Debug)]
pub struct BoundAdapter {
    pub factors: Bound,
    pub scale: f64,
}

impl BoundAdapter {
    pub fn new<S: Scalar>(tape: &mut Tape<S>, adapter: &LoRAAdapter, trainable: bool) -> Self {
        let store = adapter.factors.cast::<S>();
        Self {
            factors: Bound::new(tape, &store, |_| trainable),
            scale: adapter.scale as f64,
        }
    }

    pub fn from_store<S: Scalar>(tape: &mut Tape<S>, factors: &ParamStore<S>, scale: f64, trainable: bool) -> Self {
        Self {
            factors: Bound::new(tape, factors, |_| trainable),
            scale,
        }
    }
}

/// Per-token inputs in layout order.
#[derive(Clone, Debug)]
pub struct ModelInputs<S: Scalar = f32> {
    /// `[tokens, patch_dim]`; text rows are ignored.
    pub patches: Tensor<S>,
    /// Diffusion time per token, read for den and ref tokens.
    pub times: Vec<f64>,
}

pub struct ForwardOut {
    /// Velocity for `Role::Den` tokens, in layout order.
    pub velocity: Var,
    /// Residual stream after each block, all tokens.
    pub hidden: Vec<Var>,
    /// Keys and values of this call's tokens per block.
    pub kv: Vec<(Var, Var)>,
}

/// Sinusoidal features of `t` scaled to `[0, 1000]`.
pub fn timestep_features<S: Scalar>(times: &[f64], dim: usize) -> Tensor<S> {
    let half = dim / 2;
    Tensor::from_fn(&[times.len(), dim], |i| {
        let (r, c) = (i / dim, i % dim);
        let t = times[r] * 1000.0;
        let k = c % half.max(1);
        let freq = (-(10000f64.ln()) * k as f64 / half.max(1) as f64).exp();
        let v = if c < half { (t * freq).sin() } else { (t * freq).cos() };
        S::from_f64(v).unwrap()
    })
}

fn arc(idx: Vec<usize>) -> Arc<[usize]> {
    idx.into()
}

struct Ctx<'a> {
    cfg: &'a ModelConfig,
    p: &'a Bound,
    adapter: Option<&'a BoundAdapter>,
    groups: Arc<[usize]>,
    present: [bool; 3],
}

impl Ctx<'_> {
    /// `x · W` with per-stream effective weights.
    fn proj<S: Scalar>(&self, tape: &mut Tape<S>, x: Var, block: usize, proj: &str) -> Result<Var, ModelError> {
        let base = match proj {
            "q" | "k" | "v" | "o" => format!("blocks.{}.attn.w{}", block, proj),
            "ffn1" => format!("blocks.{}.ffn.w1", block),
            _ => format!("blocks.{}.ffn.w2", block),
        };
        let w = self.p.get(&base)?;
        let lora = match self.adapter {
            Some(a) if LORA_PROJ.contains(&proj) => {
                let fa = a.factors.get(&format!("blocks.{}.{}.a", block, proj))?;
                let fb = a.factors.get(&format!("blocks.{}.{}.b", block, proj))?;
                let ba = tape.matmul(fb, fa)?;
                Some(tape.scale(ba, a.scale))
            }
            _ => None,
        };
        let mut weights = [w; 3];
        if self.present[Branch::Cond.group()] {
            let m = format!("motion.blocks.{}.{}", block, proj);
            let ma = self.p.get(&format!("{}.a", m))?;
            let mb = self.p.get(&format!("{}.b", m))?;
            let delta = tape.matmul(mb, ma)?;
            weights[Branch::Cond.group()] = tape.add(w, delta)?;
        }
        if let Some(l) = lora {
            let reach: &[Branch] = if self.cfg.decoupled {
                &[Branch::Den]
            } else {
                &[Branch::Text, Branch::Cond, Branch::Den]
            };
            for b in reach {
                let g = b.group();
                if self.present[g] {
                    weights[g] = tape.add(weights[g], l)?;
                }
            }
        }
        Ok(tape.grouped_linear(x, self.groups.clone(), &weights)?)
    }
}

/// One forward pass over `layout`.
///
/// `mask` is `[tokens, past + tokens]`. With `past`, each block's attention
/// reads the given cached keys/values ahead of this call's own.
#[allow(clippy::too_many_arguments)]
pub fn forward<S: Scalar>(
    tape: &mut Tape<S>,
    cfg: &ModelConfig,
    params: &Bound,
    adapter: Option<&BoundAdapter>,
    layout: &TokenLayout,
    mask: &Arc<AttentionMask>,
    inputs: &ModelInputs<S>,
    past: Option<&[(Tensor<S>, Tensor<S>)]>,
) -> Result<ForwardOut, ModelError> {
    let n = layout.len();
    let d = cfg.embed_dim;
    if n == 0 {
        return Err(ModelError::EmptyLayout);
    }
    if inputs.patches.shape() != [n, cfg.patch_dim()] || inputs.times.len() != n {
        return Err(ModelError::LayoutMismatch(format!(
            "{} tokens, patches {:?}, {} times",
            n,
            inputs.patches.shape(),
            inputs.times.len()
        )));
    }
    let past_len = past.map_or(0, |p| p.first().map_or(0, |kv| kv.0.dims2().0));
    if let Some(p) = past {
        if p.len() != cfg.depth || p.iter().any(|(k, v)| k.dims2() != (past_len, d) || v.dims2() != (past_len, d)) {
            return Err(ModelError::LayoutMismatch("cached keys/values do not match the model".into()));
        }
    }
    if mask.rows() != n || mask.cols() != past_len + n {
        return Err(ModelError::LayoutMismatch(format!(
            "mask {}x{} for {} tokens after {} cached",
            mask.rows(),
            mask.cols(),
            n,
            past_len
        )));
    }
    for i in 0..n {
        let f = layout.frame[i];
        let s = layout.spatial[i];
        let ok = match layout.roles[i] {
            Role::Text(k) => k < cfg.text_tokens,
            _ => f < cfg.frames && s < cfg.tokens_per_frame(),
        };
        let t = inputs.times[i];
        if !ok || !(0.0..=1.0).contains(&t) {
            return Err(ModelError::LayoutMismatch(format!("token {} ({:?}, frame {}, patch {}, t {})", i, layout.roles[i], f, s, t)));
        }
    }

    let p = params;
    let text_idx = layout.indices(|r| matches!(r, Role::Text(_)));
    let patch_idx = layout.indices(|r| !matches!(r, Role::Text(_)));

    // Input embedding.
    let mut parts = Vec::new();
    if !patch_idx.is_empty() {
        let x = tape.constant(inputs.patches.gather_rows(&patch_idx));
        let w = p.get("embed.patch.w")?;
        let e = tape.matmul(x, w)?;
        let mut e = tape.add_row(e, p.get("embed.patch.b")?)?;
        let spatial = p.get("embed.pos.spatial")?;
        let temporal = p.get("embed.pos.temporal")?;
        let ps = tape.gather_rows(spatial, arc(patch_idx.iter().map(|&i| layout.spatial[i]).collect()))?;
        let pt = tape.gather_rows(temporal, arc(patch_idx.iter().map(|&i| layout.frame[i]).collect()))?;
        e = tape.add(e, ps)?;
        e = tape.add(e, pt)?;
        let mut table = Vec::new();
        for name in ["embed.branch.cond", "embed.branch.den", "embed.branch.ref"] {
            let v = p.get(name)?;
            table.push(tape.reshape(v, &[1, d])?);
        }
        let table = tape.concat_rows(&table)?;
        let role_idx = patch_idx
            .iter()
            .map(|&i| match layout.roles[i] {
                Role::Cond => 0,
                Role::Den => 1,
                _ => 2,
            })
            .collect();
        let re = tape.gather_rows(table, arc(role_idx))?;
        e = tape.add(e, re)?;
        // Time conditioning for den and ref tokens.
        let timed: Vec<usize> = (0..patch_idx.len())
            .filter(|&j| matches!(layout.roles[patch_idx[j]], Role::Den | Role::Ref))
            .collect();
        if !timed.is_empty() {
            let times: Vec<f64> = timed.iter().map(|&j| inputs.times[patch_idx[j]]).collect();
            let feats = tape.constant(timestep_features(&times, d));
            let h = tape.matmul(feats, p.get("time.w1")?)?;
            let h = tape.add_row(h, p.get("time.b1")?)?;
            let h = tape.gelu(h);
            let h = tape.matmul(h, p.get("time.w2")?)?;
            let h = tape.add_row(h, p.get("time.b2")?)?;
            let h = tape.scatter_rows(h, arc(timed), patch_idx.len())?;
            e = tape.add(e, h)?;
        }
        parts.push(tape.scatter_rows(e, arc(patch_idx.clone()), n)?);
    }
    if !text_idx.is_empty() {
        let k_idx = text_idx
            .iter()
            .map(|&i| match layout.roles[i] {
                Role::Text(k) => k,
                _ => unreachable!(),
            })
            .collect();
        let te = tape.gather_rows(p.get("embed.text")?, arc(k_idx))?;
        parts.push(tape.scatter_rows(te, arc(text_idx.clone()), n)?);
    }
    let mut h = parts[0];
    for &q in &parts[1..] {
        h = tape.add(h, q)?;
    }

    let groups: Vec<usize> = layout.groups();
    let mut present = [false; 3];
    for &g in &groups {
        present[g] = true;
    }
    let ctx = Ctx {
        cfg,
        p,
        adapter,
        groups: arc(groups),
        present,
    };

    let mut hidden = Vec::with_capacity(cfg.depth);
    let mut kv = Vec::with_capacity(cfg.depth);
    for i in 0..cfg.depth {
        let b = format!("blocks.{}", i);
        let a = tape.layer_norm(h, p.get(&format!("{}.ln1.g", b))?, p.get(&format!("{}.ln1.b", b))?)?;
        let q = ctx.proj(tape, a, i, "q")?;
        let k = ctx.proj(tape, a, i, "k")?;
        let v = ctx.proj(tape, a, i, "v")?;
        kv.push((k, v));
        let (k_all, v_all) = match past {
            Some(pkv) if past_len > 0 => {
                let pk = tape.constant(pkv[i].0.clone());
                let pv = tape.constant(pkv[i].1.clone());
                (tape.concat_rows(&[pk, k])?, tape.concat_rows(&[pv, v])?)
            }
            _ => (k, v),
        };
        let att = tape.attention(q, k_all, v_all, cfg.heads, mask.clone())?;
        let o = ctx.proj(tape, att, i, "o")?;
        h = tape.add(h, o)?;
        let a2 = tape.layer_norm(h, p.get(&format!("{}.ln2.g", b))?, p.get(&format!("{}.ln2.b", b))?)?;
        let f = ctx.proj(tape, a2, i, "ffn1")?;
        let f = tape.add_row(f, p.get(&format!("{}.ffn.b1", b))?)?;
        let f = tape.gelu(f);
        let f = ctx.proj(tape, f, i, "ffn2")?;
        let f = tape.add_row(f, p.get(&format!("{}.ffn.b2", b))?)?;
        h = tape.add(h, f)?;
        hidden.push(h);
    }

    let den_idx = layout.indices(|r| r == Role::Den);
    let velocity = if den_idx.is_empty() {
        tape.constant(Tensor::zeros(&[0, cfg.patch_dim()]))
    } else {
        let hd = tape.gather_rows(h, arc(den_idx))?;
        let o = tape.layer_norm(hd, p.get("out.ln.g")?, p.get("out.ln.b")?)?;
        let o = tape.matmul(o, p.get("out.w")?)?;
        tape.add_row(o, p.get("out.b")?)?
    };
    Ok(ForwardOut { velocity, hidden, kv })
}
