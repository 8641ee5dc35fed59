use super::graph::{Graph, Var};
use super::params::{ParamGrads, ParamStore};
use crate::error::{Error, Result};

/// Compares reverse-mode gradients of a scalar function of `params` with
/// central differences over every coordinate.
///
/// Returns `max |analytic - numeric| / max(1, |analytic|, |numeric|)`.
pub fn finite_difference_check<F>(params: &ParamStore, eps: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("finite difference step must be positive, got {eps}")));
    }
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let out = f(&mut g, store)?;
        g.value(out).item().ok_or_else(|| Error::NonScalarOutput(g.shape(out).to_vec()))
    };

    let first = eval(params)?;
    let second = eval(params)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }

    let mut g = Graph::new();
    let out = f(&mut g, params)?;
    let grads = g.backward(out)?;
    let mut analytic = ParamGrads::zeros_like(params);
    grads.accumulate_params(&g, &mut analytic, 1.0);

    let mut work = params.clone();
    let mut worst = 0.0f64;
    for id in params.ids() {
        for k in 0..params.value(id).numel() {
            let orig = params.value(id).data()[k];
            work.value_mut(id).data_mut()[k] = orig + eps;
            let plus = eval(&work)?;
            work.value_mut(id).data_mut()[k] = orig - eps;
            let minus = eval(&work)?;
            work.value_mut(id).data_mut()[k] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.get(id).data()[k];
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
