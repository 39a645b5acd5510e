use super::tape::{Tape, Var};
use super::tensor::{Scalar, Tensor};
use super::SubstrateError;

/// Largest per-coordinate relative disagreement between the tape gradient of
/// `f` at `point` and central differences with step `eps`.
///
/// The error for one coordinate is `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<S, F>(f: F, point: &Tensor<S>, eps: f64) -> Result<f64, SubstrateError>
where
    S: Scalar,
    F: Fn(&mut Tape<S>, Var) -> Result<Var, SubstrateError>,
{
    if !(1e-5..=1e-3).contains(&eps) {
        return Err(SubstrateError::InvalidArgument(format!(
            "grad_check step {} outside [1e-5, 1e-3]",
            eps
        )));
    }
    let mut tape = Tape::new();
    let x = tape.param(point.clone());
    let y = f(&mut tape, x)?;
    if tape.value(y).len() != 1 {
        return Err(SubstrateError::ShapeMismatch(
            "grad_check needs a scalar-valued function".into(),
        ));
    }
    if !tape.value(y).all_finite() {
        return Err(SubstrateError::NonFiniteValue("function value".into()));
    }
    let analytic = if tape.requires_grad(y) {
        tape.backward(y)?;
        tape.grad(x).unwrap_or_else(|| Tensor::zeros(point.shape()))
    } else {
        Tensor::zeros(point.shape())
    };

    let eval = |p: Tensor<S>| -> Result<f64, SubstrateError> {
        let mut t = Tape::new();
        let xv = t.constant(p);
        let yv = f(&mut t, xv)?;
        let v = t.scalar_value(yv).to_f64().unwrap();
        if !v.is_finite() {
            return Err(SubstrateError::NonFiniteValue("perturbed function value".into()));
        }
        Ok(v)
    };

    let h = S::from_f64(eps).unwrap();
    let mut worst = 0.0f64;
    for i in 0..point.len() {
        let mut plus = point.clone();
        plus.data_mut()[i] = plus.data()[i] + h;
        let mut minus = point.clone();
        minus.data_mut()[i] = minus.data()[i] - h;
        // Use the realized step so representation error in x ± h does not leak in.
        let step = (plus.data()[i] - minus.data()[i]).to_f64().unwrap();
        let numeric = (eval(plus)? - eval(minus)?) / step;
        let a = analytic.data()[i].to_f64().unwrap();
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}
