use std::sync::Arc;

use rand::Rng;

use crate::substrate::{AttentionMask, Tape, Tensor};

use super::config::ModelConfig;
use super::dit::{forward, Bound, BoundAdapter, ModelInputs};
use super::layout::{build_branch_mask, TokenLayout};
use super::lora::LoRAAdapter;
use super::params::ParamStore;
use super::ModelError;

/// `[text | cond | den]` over `cond_frames` source frames and `den_frames` target frames.
pub fn teacher_layout(cfg: &ModelConfig, cond_frames: usize, den_frames: usize) -> TokenLayout {
    TokenLayout::teacher(cfg.text_tokens, cond_frames, den_frames, cfg.tokens_per_frame())
}

/// Branch mask of the decoupled model, all-visible for the ablation.
pub fn teacher_mask(cfg: &ModelConfig, layout: &TokenLayout) -> Result<AttentionMask, ModelError> {
    if cfg.decoupled {
        build_branch_mask(layout, cfg.text_rule)
    } else {
        if layout.is_empty() {
            return Err(ModelError::EmptyLayout);
        }
        Ok(AttentionMask::all_visible(layout.len(), layout.len()))
    }
}

/// Weights plus config: the bidirectional teacher.
#[derive(Clone, Debug, PartialEq)]
pub struct Dit {
    pub cfg: ModelConfig,
    pub params: ParamStore,
}

impl Dit {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let params = super::params::init_params(&cfg, seed);
        Ok(Self { cfg, params })
    }

    /// Teacher layout and inputs for `cond` source tokens (or none) and noisy den tokens `x_t` at time `t`.
    pub fn teacher_inputs(
        &self,
        cond: Option<&Tensor>,
        x_t: &Tensor,
        t: f64,
    ) -> Result<(TokenLayout, ModelInputs), ModelError> {
        let tpf = self.cfg.tokens_per_frame();
        let pd = self.cfg.patch_dim();
        let den_rows = x_t.dims2().0;
        let cond_rows = cond.map_or(0, |c| c.dims2().0);
        if den_rows % tpf != 0 || cond_rows % tpf != 0 || x_t.dims2().1 != pd || cond.is_some_and(|c| c.dims2().1 != pd) {
            return Err(ModelError::LayoutMismatch(format!(
                "den {:?}, cond {:?} for {} tokens/frame of width {}",
                x_t.shape(),
                cond.map(|c| c.shape().to_vec()),
                tpf,
                pd
            )));
        }
        let layout = teacher_layout(&self.cfg, cond_rows / tpf, den_rows / tpf);
        let text = Tensor::zeros(&[self.cfg.text_tokens, pd]);
        let mut parts = vec![&text];
        if let Some(c) = cond {
            parts.push(c);
        }
        parts.push(x_t);
        let patches = Tensor::concat_rows(&parts)?;
        let mut times = vec![0.0; layout.len()];
        for (i, r) in layout.roles.iter().enumerate() {
            if *r == super::layout::Role::Den {
                times[i] = t;
            }
        }
        Ok((layout, ModelInputs { patches, times }))
    }

    /// Predicted velocity for den tokens `x_t` at time `t`.
    pub fn velocity(
        &self,
        cond: Option<&Tensor>,
        x_t: &Tensor,
        t: f64,
        adapter: Option<&LoRAAdapter>,
    ) -> Result<Tensor, ModelError> {
        let (layout, inputs) = self.teacher_inputs(cond, x_t, t)?;
        let mask = Arc::new(teacher_mask(&self.cfg, &layout)?);
        let mut tape = Tape::new();
        let p = Bound::new(&mut tape, &self.params, |_| false);
        let a = adapter.map(|a| BoundAdapter::new(&mut tape, a, false));
        let out = forward(&mut tape, &self.cfg, &p, a.as_ref(), &layout, &mask, &inputs, None)?;
        Ok(tape.value(out.velocity).clone())
    }

    /// Euler integration of the learned flow from noise (`t = 1`) to data (`t = 0`)
    /// in `steps` equal steps. Returns clean den tokens and the number of model evaluations.
    pub fn sample<R: Rng>(
        &self,
        cond: Option<&Tensor>,
        den_frames: usize,
        adapter: Option<&LoRAAdapter>,
        steps: usize,
        rng: &mut R,
    ) -> Result<(Tensor, usize), ModelError> {
        let rows = den_frames * self.cfg.tokens_per_frame();
        let mut x = Tensor::randn(&[rows, self.cfg.patch_dim()], 1.0, rng);
        let steps = steps.max(1);
        let dt = 1.0 / steps as f64;
        for s in 0..steps {
            let t = 1.0 - s as f64 * dt;
            let v = self.velocity(cond, &x, t, adapter)?;
            let dtf = dt as f32;
            for (xi, vi) in x.data_mut().iter_mut().zip(v.data()) {
                *xi -= dtf * vi;
            }
        }
        Ok((x, steps))
    }
}
