use super::tape::{Graph, NodeId};
use super::tensor::ParamStore;
use crate::error::{Error, Result};

/// Compares reverse-mode gradients of `f` against central differences over
/// every coordinate of every trainable parameter in `store`.
///
/// Returns the worst relative error, with denominator
/// `max(|analytic|, |numeric|, 1e-8)`. `f` must build a scalar loss node.
pub fn finite_diff_check<F>(store: &mut ParamStore, eps: f64, mut f: F) -> Result<f64>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<NodeId>,
{
    if !(eps > 0.0 && eps <= 1e-3) {
        return Err(Error::Contract(format!("finite-difference eps {eps} outside (0, 1e-3]")));
    }
    let eval = |store: &ParamStore, f: &mut F| -> Result<f64> {
        let mut g = Graph::new();
        let loss = f(&mut g, store)?;
        Ok(g.value(loss).data()[0])
    };

    let first = eval(store, &mut f)?;
    let second = eval(store, &mut f)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::OracleInvalid(format!("two evaluations at the same point differ: {first} vs {second}")));
    }

    store.zero_grad();
    {
        let mut g = Graph::new();
        let loss = f(&mut g, store)?;
        g.backward(loss, store)?;
    }

    let mut worst = 0.0_f64;
    for id in store.trainable_ids() {
        let analytic = store.get(id).grad.clone().unwrap_or_else(|| vec![0.0; store.tensor(id).numel()]);
        for (k, &a) in analytic.iter().enumerate() {
            let orig = store.tensor(id).data()[k];
            store.get_mut(id).tensor.data_mut()[k] = orig + eps;
            let plus = eval(store, &mut f);
            store.get_mut(id).tensor.data_mut()[k] = orig - eps;
            let minus = eval(store, &mut f);
            store.get_mut(id).tensor.data_mut()[k] = orig;
            let numeric = (plus? - minus?) / (2.0 * eps);
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}
