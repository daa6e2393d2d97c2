//! Central finite-difference gradient checking.

use super::graph::{Graph, Var};
use super::tensor::ParamStore;
use crate::Result;

/// Outcome of a gradient check.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub checked: usize,
}

/// Relative error with an absolute floor, so that entries whose true
/// gradient is numerically zero do not dominate.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-6);
    (analytic - numeric).abs() / denom
}

/// Compares backprop gradients of `loss_fn` against central differences
/// with step `h` for every trainable entry of `store`.
pub fn check_gradients<F>(store: &mut ParamStore, h: f64, mut loss_fn: F) -> Result<GradCheck>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<Var>,
{
    store.zero_grad();
    let mut g = Graph::new();
    let loss = loss_fn(&mut g, store)?;
    let grads = g.backward(loss)?;
    store.accumulate(&g, &grads);

    let ids: Vec<_> = store.ids().collect();
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for id in ids {
        if !store.get(id).requires_grad {
            continue;
        }
        let analytic = store
            .get(id)
            .grad
            .clone()
            .unwrap_or_else(|| vec![0.0; store.get(id).len()]);
        for (i, &a) in analytic.iter().enumerate() {
            let orig = store.get(id).data[i];
            store.get_mut(id).data[i] = orig + h;
            let mut gp = Graph::new();
            let lp = loss_fn(&mut gp, store)?;
            let fp = gp.scalar(lp);
            store.get_mut(id).data[i] = orig - h;
            let mut gm = Graph::new();
            let lm = loss_fn(&mut gm, store)?;
            let fm = gm.scalar(lm);
            store.get_mut(id).data[i] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            worst = worst.max(rel_error(a, numeric));
            checked += 1;
        }
    }
    store.zero_grad();
    Ok(GradCheck {
        max_rel_error: worst,
        checked,
    })
}
