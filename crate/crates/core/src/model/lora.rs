use std::collections::BTreeMap;
use std::path::Path;

use crate::rng::child_rng;
use crate::substrate::{Scalar, Tensor};

use super::checkpoint::{load_checkpoint, save_checkpoint};
use super::config::ModelConfig;
use super::params::ParamStore;
use super::ModelError;

pub const LORA_PROJ: [&str; 3] = ["q", "k", "v"];

/// `W + scale · (B · A)` with `A: r×d_out`, `B: d_in×r`. `W` is left untouched.
pub fn apply_lora<S: Scalar>(
    w: &Tensor<S>,
    a: &Tensor<S>,
    b: &Tensor<S>,
    scale: S,
) -> Result<Tensor<S>, ModelError> {
    let (d_in, d_out) = w.dims2();
    let (r, a_out) = a.dims2();
    let (b_in, rb) = b.dims2();
    if a_out != d_out || b_in != d_in || rb != r {
        return Err(ModelError::ShapeMismatch(format!(
            "apply_lora: W {:?}, A {:?}, B {:?}",
            w.shape(),
            a.shape(),
            b.shape()
        )));
    }
    let delta = b.matmul(a)?;
    let data = w
        .data()
        .iter()
        .zip(delta.data())
        .map(|(&x, &u)| x + scale * u)
        .collect();
    Ok(Tensor::new(w.shape().to_vec(), data)?)
}

/// Per-embodiment low-rank factors for the Q/K/V projections of every block.
///
/// Factors are named `blocks.{i}.{q|k|v}.{a|b}`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoRAAdapter {
    pub embodiment_id: String,
    pub scale: f32,
    pub factors: ParamStore,
}

impl LoRAAdapter {
    /// Fresh adapter: Gaussian `A` (std 0.02), zero `B`, so it starts as a no-op.
    pub fn new(embodiment_id: &str, cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = child_rng(seed, 0x6c6f_7261 ^ hash_id(embodiment_id));
        let d = cfg.embed_dim;
        let r = cfg.lora_rank;
        let mut factors = ParamStore::new();
        for i in 0..cfg.depth {
            for p in LORA_PROJ {
                factors.insert(format!("blocks.{}.{}.a", i, p), Tensor::randn(&[r, d], 0.02, &mut rng));
                factors.insert(format!("blocks.{}.{}.b", i, p), Tensor::zeros(&[d, r]));
            }
        }
        Self {
            embodiment_id: embodiment_id.to_string(),
            scale: cfg.lora_scale(),
            factors,
        }
    }

    pub fn a(&self, block: usize, proj: &str) -> Option<&Tensor> {
        self.factors.get(&format!("blocks.{}.{}.a", block, proj))
    }

    pub fn b(&self, block: usize, proj: &str) -> Option<&Tensor> {
        self.factors.get(&format!("blocks.{}.{}.b", block, proj))
    }

    /// Effective projection `W + scale · B·A` for one block projection.
    pub fn effective(&self, w: &Tensor, block: usize, proj: &str) -> Result<Tensor, ModelError> {
        let missing = || ModelError::AdapterShapeMismatch(format!("no factors for block {} {}", block, proj));
        let a = self.a(block, proj).ok_or_else(missing)?;
        let b = self.b(block, proj).ok_or_else(missing)?;
        apply_lora(w, a, b, self.scale)
    }

    pub fn check(&self, cfg: &ModelConfig) -> Result<(), ModelError> {
        let d = cfg.embed_dim;
        for i in 0..cfg.depth {
            for p in LORA_PROJ {
                let a = self.a(i, p).map(|t| t.shape().to_vec());
                let b = self.b(i, p).map(|t| t.shape().to_vec());
                let ok = match (&a, &b) {
                    (Some(a), Some(b)) => a.len() == 2 && a[1] == d && b.len() == 2 && b[0] == d && a[0] == b[1],
                    _ => false,
                };
                if !ok {
                    return Err(ModelError::AdapterShapeMismatch(format!(
                        "{}: block {} {} has A {:?}, B {:?} for d={}",
                        self.embodiment_id, i, p, a, b, d
                    )));
                }
            }
        }
        if self.factors.len() != cfg.depth * LORA_PROJ.len() * 2 {
            return Err(ModelError::AdapterShapeMismatch(format!(
                "{}: {} factor tensors for depth {}",
                self.embodiment_id,
                self.factors.len(),
                cfg.depth
            )));
        }
        Ok(())
    }
}

fn hash_id(id: &str) -> u64 {
    // FNV-1a; only used to decorrelate per-embodiment init streams.
    id.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

/// Registered adapters plus the (at most one) active selection of a session.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LoraBank {
    adapters: BTreeMap<String, LoRAAdapter>,
    active: Option<String>,
}

impl LoraBank {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, adapter: LoRAAdapter) -> Result<(), ModelError> {
        if self.adapters.contains_key(&adapter.embodiment_id) {
            return Err(ModelError::DuplicateEmbodiment(adapter.embodiment_id));
        }
        self.adapters.insert(adapter.embodiment_id.clone(), adapter);
        Ok(())
    }

    /// Replaces an already registered adapter (used when a stage finishes training it).
    pub fn update(&mut self, adapter: LoRAAdapter) -> Result<(), ModelError> {
        match self.adapters.get_mut(&adapter.embodiment_id) {
            Some(slot) => {
                *slot = adapter;
                Ok(())
            }
            None => Err(ModelError::UnknownEmbodiment(adapter.embodiment_id)),
        }
    }

    pub fn activate(&mut self, embodiment_id: &str) -> Result<(), ModelError> {
        if !self.adapters.contains_key(embodiment_id) {
            return Err(ModelError::UnknownEmbodiment(embodiment_id.to_string()));
        }
        self.active = Some(embodiment_id.to_string());
        Ok(())
    }

    pub fn deactivate(&mut self) {
        self.active = None;
    }

    pub fn active(&self) -> Option<&LoRAAdapter> {
        self.active.as_ref().and_then(|id| self.adapters.get(id))
    }

    pub fn active_id(&self) -> Option<&str> {
        self.active.as_deref()
    }

    pub fn get(&self, embodiment_id: &str) -> Option<&LoRAAdapter> {
        self.adapters.get(embodiment_id)
    }

    pub fn contains(&self, embodiment_id: &str) -> bool {
        self.adapters.contains_key(embodiment_id)
    }

    pub fn ids(&self) -> Vec<String> {
        self.adapters.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.adapters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adapters.is_empty()
    }

    /// All adapters as one named-tensor store: `adapter.{id}.…` plus `adapter.{id}.scale`.
    pub fn to_store(&self) -> ParamStore {
        let mut s = ParamStore::new();
        for (id, a) in &self.adapters {
            s.merge(&a.factors.prefixed(&format!("adapter.{}.", id)));
            s.insert(format!("adapter.{}.scale", id), Tensor::scalar(a.scale));
        }
        s
    }

    pub fn from_store(store: &ParamStore) -> Result<Self, ModelError> {
        let mut bank = Self::new();
        for name in store.names() {
            let Some(rest) = name.strip_prefix("adapter.") else {
                return Err(ModelError::Checkpoint(format!("unexpected tensor {} in adapter bank", name)));
            };
            if let Some(id) = rest.strip_suffix(".scale") {
                let factors = store.strip_prefix(&format!("adapter.{}.", id)).subset(|n| n != "scale");
                let scale = store.get(name).unwrap().data()[0];
                bank.register(LoRAAdapter {
                    embodiment_id: id.to_string(),
                    scale,
                    factors,
                })?;
            }
        }
        Ok(bank)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        save_checkpoint(path, &self.to_store())
    }

    /// Loads adapters; nothing is active afterwards.
    pub fn load(path: &Path) -> Result<Self, ModelError> {
        Self::from_store(&load_checkpoint(path)?)
    }
}
