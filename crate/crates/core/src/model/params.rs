use std::collections::BTreeMap;

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::rng::child_rng;
use crate::substrate::{Scalar, Tensor};

use super::config::ModelConfig;

/// Named tensors, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<S: Scalar = f32> {
    tensors: BTreeMap<String, Tensor<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<S>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<S>> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<S>> {
        self.tensors.remove(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalars.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Tensors whose names satisfy `pred`.
    pub fn subset(&self, pred: impl Fn(&str) -> bool) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| pred(k))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Inserts every tensor of `other`, replacing same-named entries.
    pub fn merge(&mut self, other: &ParamStore<S>) {
        for (k, v) in &other.tensors {
            self.tensors.insert(k.clone(), v.clone());
        }
    }

    /// Prefixes every name with `prefix`.
    pub fn prefixed(&self, prefix: &str) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (format!("{}{}", prefix, k), v.clone()))
                .collect(),
        }
    }

    /// Entries under `prefix`, with the prefix stripped.
    pub fn strip_prefix(&self, prefix: &str) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
                .collect(),
        }
    }

    /// All values in name order as one flat vector.
    pub fn flatten(&self) -> Vec<S> {
        self.tensors.values().flat_map(|t| t.data().iter().copied()).collect()
    }

    /// Inverse of [`flatten`](Self::flatten) for a store with this store's shapes.
    pub fn unflatten(&self, flat: &[S]) -> Self {
        let mut out = self.clone();
        let mut at = 0;
        for t in out.tensors.values_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[at..at + n]);
            at += n;
        }
        out
    }
}

impl ParamStore<f32> {
    /// SHA-256 of each tensor's shape and little-endian payload.
    pub fn hashes(&self) -> BTreeMap<String, String> {
        self.tensors
            .iter()
            .map(|(k, v)| (k.clone(), tensor_hash(v)))
            .collect()
    }

    /// One hash over every name, shape and payload.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in &self.tensors {
            h.update((k.len() as u64).to_le_bytes());
            h.update(k.as_bytes());
            h.update(tensor_hash(v).as_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn bits_eq(&self, other: &ParamStore<f32>) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .all(|(k, v)| other.tensors.get(k).is_some_and(|o| v.bits_eq(o)))
    }
}

pub fn tensor_hash(t: &Tensor<f32>) -> String {
    let mut h = Sha256::new();
    for d in t.shape() {
        h.update((*d as u64).to_le_bytes());
    }
    h.update(t.to_le_bytes());
    hex::encode(h.finalize())
}

/// Names of the trainable motion deltas of block `i`.
pub const MOTION_PROJ: [&str; 6] = ["q", "k", "v", "o", "ffn1", "ffn2"];

/// Tensors that act only on cond-branch tokens: the motion deltas and the cond embedding.
pub fn is_shared_motion(name: &str) -> bool {
    name.starts_with("motion.") || name == "embed.branch.cond"
}

pub fn is_backbone_base(name: &str) -> bool {
    !is_shared_motion(name)
}

fn dense<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor {
    Tensor::randn(&[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt(), rng)
}

/// Seeded initial backbone, including zero-effect motion deltas.
/// Position tables start comparable to patch embeddings so attention can
/// match positions across streams from the first step.
const POS_STD: f64 = 0.5;

pub fn init_params(cfg: &ModelConfig, seed: u64) -> ParamStore {
    let mut rng = child_rng(seed, 0x6d6f_6465_6c);
    let d = cfg.embed_dim;
    let p = cfg.patch_dim();
    let hidden = cfg.ffn_mult * d;
    let mut s = ParamStore::new();
    s.insert("embed.patch.w", dense(&mut rng, p, d));
    s.insert("embed.patch.b", Tensor::zeros(&[d]));
    s.insert("embed.text", Tensor::randn(&[cfg.text_tokens.max(1), d], 0.02, &mut rng));
    for b in ["cond", "den", "ref"] {
        s.insert(format!("embed.branch.{}", b), Tensor::randn(&[d], 0.02, &mut rng));
    }
    s.insert("embed.pos.spatial", Tensor::randn(&[cfg.tokens_per_frame(), d], POS_STD, &mut rng));
    s.insert("embed.pos.temporal", Tensor::randn(&[cfg.frames, d], POS_STD, &mut rng));
    s.insert("time.w1", dense(&mut rng, d, d));
    s.insert("time.b1", Tensor::zeros(&[d]));
    s.insert("time.w2", dense(&mut rng, d, d));
    s.insert("time.b2", Tensor::zeros(&[d]));
    for i in 0..cfg.depth {
        let b = format!("blocks.{}", i);
        for ln in ["ln1", "ln2"] {
            s.insert(format!("{}.{}.g", b, ln), Tensor::full(&[d], 1.0));
            s.insert(format!("{}.{}.b", b, ln), Tensor::zeros(&[d]));
        }
        for w in ["wq", "wk", "wv", "wo"] {
            s.insert(format!("{}.attn.{}", b, w), dense(&mut rng, d, d));
        }
        s.insert(format!("{}.ffn.w1", b), dense(&mut rng, d, hidden));
        s.insert(format!("{}.ffn.b1", b), Tensor::zeros(&[hidden]));
        s.insert(format!("{}.ffn.w2", b), dense(&mut rng, hidden, d));
        s.insert(format!("{}.ffn.b2", b), Tensor::zeros(&[d]));
        for proj in MOTION_PROJ {
            let (fan_in, fan_out) = proj_dims(cfg, proj);
            let m = format!("motion.blocks.{}.{}", i, proj);
            s.insert(format!("{}.a", m), Tensor::randn(&[cfg.motion_rank, fan_out], 0.02, &mut rng));
            s.insert(format!("{}.b", m), Tensor::zeros(&[fan_in, cfg.motion_rank]));
        }
    }
    s.insert("out.ln.g", Tensor::full(&[d], 1.0));
    s.insert("out.ln.b", Tensor::zeros(&[d]));
    s.insert("out.w", Tensor::zeros(&[d, p]));
    s.insert("out.b", Tensor::zeros(&[p]));
    s
}

/// `(fan_in, fan_out)` of a block projection.
pub fn proj_dims(cfg: &ModelConfig, proj: &str) -> (usize, usize) {
    let d = cfg.embed_dim;
    match proj {
        "ffn1" => (d, cfg.ffn_mult * d),
        "ffn2" => (cfg.ffn_mult * d, d),
        _ => (d, d),
    }
}
