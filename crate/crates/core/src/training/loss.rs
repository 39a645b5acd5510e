use std::sync::Arc;

use crate::model::{forward, teacher_mask, Bound, BoundAdapter, ModelConfig, ModelInputs, Role, TokenLayout};
use crate::substrate::{Scalar, Tape, Tensor, Var};

use super::TrainError;

/// `[text | cond | den]` layout and inputs for den tokens `x_t` at time `t`.
pub fn teacher_batch<S: Scalar>(
    cfg: &ModelConfig,
    cond: Option<&Tensor<S>>,
    x_t: &Tensor<S>,
    t: f64,
) -> Result<(TokenLayout, ModelInputs<S>), TrainError> {
    let tpf = cfg.tokens_per_frame();
    let cond_frames = cond.map_or(0, |c| c.dims2().0 / tpf);
    let layout = TokenLayout::teacher(cfg.text_tokens, cond_frames, x_t.dims2().0 / tpf, tpf);
    let text = Tensor::zeros(&[cfg.text_tokens, cfg.patch_dim()]);
    let mut parts = vec![&text];
    if let Some(c) = cond {
        parts.push(c);
    }
    parts.push(x_t);
    let patches = Tensor::concat_rows(&parts)?;
    let times = layout
        .roles
        .iter()
        .map(|r| if *r == Role::Den { t } else { 0.0 })
        .collect();
    Ok((layout, ModelInputs { patches, times }))
}

/// `x_t = (1 − t)·x₀ + t·ε`.
pub fn interpolate<S: Scalar>(x0: &Tensor<S>, noise: &Tensor<S>, t: f64) -> Tensor<S> {
    let (a, b) = (S::from_f64(1.0 - t).unwrap(), S::from_f64(t).unwrap());
    Tensor::new(
        x0.shape().to_vec(),
        x0.data().iter().zip(noise.data()).map(|(&x, &e)| a * x + b * e).collect(),
    )
    .unwrap()
}

/// Velocity target `ε − x₀`.
pub fn velocity_target<S: Scalar>(x0: &Tensor<S>, noise: &Tensor<S>) -> Tensor<S> {
    Tensor::new(
        x0.shape().to_vec(),
        x0.data().iter().zip(noise.data()).map(|(&x, &e)| e - x).collect(),
    )
    .unwrap()
}

/// Teacher velocity prediction as a tape variable.
#[allow(clippy::too_many_arguments)]
pub fn teacher_velocity<S: Scalar>(
    tape: &mut Tape<S>,
    cfg: &ModelConfig,
    params: &Bound,
    adapter: Option<&BoundAdapter>,
    cond: Option<&Tensor<S>>,
    x_t: &Tensor<S>,
    t: f64,
) -> Result<Var, TrainError> {
    let (layout, inputs) = teacher_batch(cfg, cond, x_t, t)?;
    let mask = Arc::new(teacher_mask(cfg, &layout)?);
    Ok(forward(tape, cfg, params, adapter, &layout, &mask, &inputs, None)?.velocity)
}

/// Rectified-flow denoising loss: mean squared error between the predicted
/// velocity at `x_t` and `ε − x₀`.
#[allow(clippy::too_many_arguments)]
pub fn dsm_loss<S: Scalar>(
    tape: &mut Tape<S>,
    cfg: &ModelConfig,
    params: &Bound,
    adapter: Option<&BoundAdapter>,
    x0: &Tensor<S>,
    cond: Option<&Tensor<S>>,
    t: f64,
    noise: &Tensor<S>,
) -> Result<Var, TrainError> {
    if !(t > 0.0 && t < 1.0) {
        return Err(TrainError::InvalidArgument(format!("diffusion time {} outside (0, 1)", t)));
    }
    if noise.shape() != x0.shape() {
        return Err(TrainError::InvalidArgument(format!(
            "noise {:?} for targets {:?}",
            noise.shape(),
            x0.shape()
        )));
    }
    let x_t = interpolate(x0, noise, t);
    let v = teacher_velocity(tape, cfg, params, adapter, cond, &x_t, t)?;
    let target = tape.constant(velocity_target(x0, noise));
    Ok(tape.mse(v, target)?)
}
