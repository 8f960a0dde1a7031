//! Central finite-difference gradient checks.

use crate::error::{Result, TensorError};
use crate::params::{Graph, ParameterStore, Trainable};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// `|a - c| / max(|a|, |c|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn scalar_value(t: &Tape, v: Var) -> Result<f64> {
    let x = t.value(v).item()?;
    if !x.is_finite() {
        return Err(TensorError::NonFinite { op: "grad_check" });
    }
    Ok(x)
}

fn perturbed(point: &Tensor, i: usize, delta: f64) -> Tensor {
    let mut d = point.to_vec();
    d[i] += delta;
    Tensor::new(point.shape().to_vec(), d).expect("same shape")
}

/// Max relative error between the tape gradient of `f` at `point` and a
/// central difference with the given step.
pub fn grad_check<F, E>(f: F, point: &Tensor, step: f64) -> std::result::Result<f64, E>
where
    F: Fn(&mut Tape, Var) -> std::result::Result<Var, E>,
    E: From<TensorError>,
{
    let mut tape = Tape::new();
    let x = tape.leaf(point.clone(), true);
    let y = f(&mut tape, x)?;
    scalar_value(&tape, y)?;
    let analytic = match tape.backward(y)?.get(x) {
        Some(g) => g.clone(),
        None => point.map(|_| 0.0),
    };
    let eval = |p: Tensor| -> std::result::Result<f64, E> {
        let mut t = Tape::new();
        let x = t.leaf(p, false);
        let y = f(&mut t, x)?;
        Ok(scalar_value(&t, y)?)
    };
    let mut worst = 0.0f64;
    for i in 0..point.numel() {
        let hi = eval(perturbed(point, i, step))?;
        let lo = eval(perturbed(point, i, -step))?;
        let numeric = (hi - lo) / (2.0 * step);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

/// Like [`grad_check`], but over named parameters of a store. `f` builds the
/// scalar on a graph bound to the (possibly perturbed) store.
pub fn grad_check_params<F, E>(store: &ParameterStore, names: &[&str], f: F, step: f64) -> std::result::Result<f64, E>
where
    F: Fn(&mut Graph<'_>) -> std::result::Result<Var, E>,
    E: From<TensorError>,
{
    let analytic = {
        let mut g = Graph::new(store, Trainable::Everything);
        let y = f(&mut g)?;
        scalar_value(&g, y)?;
        g.param_gradients(y)?
    };
    let eval = |s: &ParameterStore| -> std::result::Result<f64, E> {
        let mut g = Graph::new(s, Trainable::Nothing);
        let y = f(&mut g)?;
        Ok(scalar_value(&g, y)?)
    };
    let mut worst = 0.0f64;
    for &name in names {
        let value = store.get(name).ok_or_else(|| TensorError::UnknownParameter(name.into()))?;
        let grad = analytic.get(name).cloned().unwrap_or_else(|| value.map(|_| 0.0));
        for i in 0..value.numel() {
            let mut s = store.clone();
            s.set(name, perturbed(value, i, step))?;
            let hi = eval(&s)?;
            s.set(name, perturbed(value, i, -step))?;
            let lo = eval(&s)?;
            let numeric = (hi - lo) / (2.0 * step);
            worst = worst.max(relative_error(grad.data()[i], numeric));
        }
    }
    Ok(worst)
}
