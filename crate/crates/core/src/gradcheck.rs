//! Central finite-difference gradient checks.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

/// Compare an analytic gradient against central differences of `value`.
///
/// Returns the maximum over coordinates of `|analytic - numeric| / max(1, |analytic|)`.
/// `value` is evaluated twice at `x` first; differing results are reported as a
/// contract error because the differences would be meaningless.
pub fn check_gradient<F>(value: F, analytic: &Tensor, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(Error::contract(format!("finite-difference step {eps} must be positive")));
    }
    if analytic.shape() != x.shape() {
        return Err(Error::shape(format!(
            "analytic gradient {:?} for input {:?}",
            analytic.shape(),
            x.shape()
        )));
    }
    let first = value(x)?;
    let second = value(x)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::contract(format!(
            "function is not deterministic: {first} then {second}"
        )));
    }
    let mut probe = x.clone();
    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = value(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = value(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

/// Finite-difference check of the graph-built scalar function `f` at `x`.
pub fn finite_difference_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let input = g.input(x.clone());
    let loss = f(&mut g, input)?;
    g.backward(loss, &mut ParamStore::new())?;
    let analytic = g.grad(input).unwrap_or_else(|| Tensor::zeros(x.shape()));
    let value = |t: &Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let input = g.constant(t.clone());
        let out = f(&mut g, input)?;
        Ok(g.value(out).item())
    };
    check_gradient(value, &analytic, x, eps)
}

/// Spot-check parameter gradients of a model loss.
///
/// Up to `per_param` evenly spaced coordinates of every unfrozen parameter are
/// perturbed in place and restored afterwards.
pub fn check_param_gradients<F>(
    store: &mut ParamStore,
    loss: F,
    eps: f64,
    per_param: usize,
) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    store.zero_grad();
    let mut g = Graph::new();
    let out = loss(&mut g, store)?;
    g.backward(out, store)?;
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let out = loss(&mut g, store)?;
        Ok(g.value(out).item())
    };
    let first = eval(store)?;
    if first.to_bits() != eval(store)?.to_bits() {
        return Err(Error::contract("loss is not deterministic"));
    }
    let ids: Vec<_> = store.ids().collect();
    let mut worst = 0.0f64;
    for id in ids {
        if store.is_frozen(id) {
            continue;
        }
        let n = store.value(id).numel();
        let stride = (n / per_param.max(1)).max(1);
        for i in (0..n).step_by(stride).take(per_param) {
            let analytic = store.grad(id).data()[i];
            let orig = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = orig + eps;
            let plus = eval(store)?;
            store.value_mut(id).data_mut()[i] = orig - eps;
            let minus = eval(store)?;
            store.value_mut(id).data_mut()[i] = orig;
            worst = worst.max(relative_error(analytic, (plus - minus) / (2.0 * eps)));
        }
    }
    store.zero_grad();
    Ok(worst)
}
