use rand::seq::index::sample;

use super::graph::{Graph, Var};
use super::params::ParamStore;
use super::rng::rng_for;
use crate::error::{CitiError, Result};

/// Compares analytic gradients against central differences.
///
/// `expr` builds a scalar on a fresh graph from the store. At most
/// `max_coords` coordinates of trainable parameters are checked (all of them
/// when there are fewer). Returns the maximum of
/// `|analytic − numeric| / (|analytic| + |numeric| + 1e-12)`.
pub fn finite_diff_check<F>(
    store: &mut ParamStore<f64>,
    expr: F,
    eps: f64,
    max_coords: usize,
    seed: u64,
) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(CitiError::contract("finite-difference step must be positive"));
    }
    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::inference();
        let out = expr(&mut g, store)?;
        Ok(g.value(out).item())
    };
    let f0 = eval(store)?;
    let f1 = eval(store)?;
    if f0.to_bits() != f1.to_bits() {
        return Err(CitiError::contract("expression is not deterministic"));
    }
    let mut g = Graph::new();
    let out = expr(&mut g, store)?;
    if !g.value(out).is_scalar() {
        return Err(CitiError::contract("finite-difference check needs a scalar expression"));
    }
    let grads = g.backward(out)?;

    let coords: Vec<(usize, usize)> = store
        .iter()
        .filter(|(_, p)| p.trainable)
        .flat_map(|(id, p)| (0..p.tensor.numel()).map(move |i| (id.index(), i)))
        .collect();
    let chosen: Vec<usize> = if coords.len() <= max_coords {
        (0..coords.len()).collect()
    } else {
        let mut rng = rng_for(seed, "finite-diff");
        let mut idx = sample(&mut rng, coords.len(), max_coords).into_vec();
        idx.sort_unstable();
        idx
    };

    let ids: Vec<_> = store.ids().collect();
    let mut worst = 0.0f64;
    for c in chosen {
        let (pi, ei) = coords[c];
        let id = ids[pi];
        let analytic = grads.get(id).map(|t| t.data()[ei]).unwrap_or(0.0);
        let orig = store.get(id).tensor.data()[ei];
        store.get_mut(id).tensor.data_mut()[ei] = orig + eps;
        let plus = eval(store);
        store.get_mut(id).tensor.data_mut()[ei] = orig - eps;
        let minus = eval(store);
        store.get_mut(id).tensor.data_mut()[ei] = orig;
        let numeric = (plus? - minus?) / (2.0 * eps);
        let rel = (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-12);
        worst = worst.max(rel);
    }
    Ok(worst)
}
