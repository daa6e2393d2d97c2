use serde::{Deserialize, Serialize};

use super::tensor::ParamStore;
use crate::{Error, Result};

/// Moment estimates for one parameter tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(len: usize, lr: f64) -> Self {
        Self {
            first_moment: vec![0.0; len],
            second_moment: vec![0.0; len],
            step_count: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn apply(&mut self, params: &mut [f64], grads: &[f64]) {
        debug_assert_eq!(params.len(), self.first_moment.len());
        self.step_count += 1;
        let t = self.step_count as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            let g = grads[i];
            let m = self.beta1 * self.first_moment[i] + (1.0 - self.beta1) * g;
            let v = self.beta2 * self.second_moment[i] + (1.0 - self.beta2) * g * g;
            self.first_moment[i] = m;
            self.second_moment[i] = v;
            let m_hat = m / c1;
            let v_hat = v / c2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// Adam over every trainable tensor of one [`ParamStore`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Adam {
    pub states: Vec<AdamState>,
    lr: f64,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        Self::with_eps(store, lr, 1e-8)
    }

    pub fn with_eps(store: &ParamStore, lr: f64, eps: f64) -> Self {
        let states = store
            .iter()
            .map(|(_, t)| {
                let mut s = AdamState::new(t.len(), lr);
                s.eps = eps;
                s
            })
            .collect();
        Self { states, lr }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
        self.states.iter_mut().for_each(|s| s.lr = lr);
    }

    /// Applies the stored gradients, then clears them. Frozen tensors and
    /// tensors without a gradient are left untouched.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        for id in &ids {
            let t = store.get(*id);
            if let Some(g) = &t.grad {
                if g.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFinite(format!("gradient of parameter '{}'", store.name(*id))));
                }
            }
        }
        for id in ids {
            let t = store.get_mut(id);
            if !t.requires_grad {
                continue;
            }
            if let Some(g) = t.grad.take() {
                self.states[id.index()].apply(&mut t.data, &g);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;

    /// Textbook scalar Adam written independently of [`AdamState`].
    fn scalar_oracle(w0: f64, grads: &[f64], lr: f64) -> Vec<f64> {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let (mut m, mut v, mut w) = (0.0, 0.0, w0);
        let mut out = vec![];
        for (t, g) in grads.iter().enumerate() {
            let t = (t + 1) as i32;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            w -= lr * mh / (vh.sqrt() + eps);
            out.push(w);
        }
        out
    }

    #[test]
    fn first_step_matches_scalar_oracle() {
        let mut s = AdamState::new(1, 1e-4);
        let mut w = [0.5];
        s.apply(&mut w, &[1.0]);
        let want = scalar_oracle(0.5, &[1.0], 1e-4);
        assert_eq!(w[0], want[0]);
        // 1e-4 · 1/(1 + 1e-8)
        assert!((0.5 - w[0] - 1e-4 / (1.0 + 1e-8)).abs() < 1e-15);
        assert_eq!(s.step_count, 1);
    }

    #[test]
    fn two_steps_match_oracle_bitwise() {
        let mut s = AdamState::new(1, 1e-4);
        let mut w = [0.5];
        let mut traj = vec![];
        for _ in 0..2 {
            s.apply(&mut w, &[1.0]);
            traj.push(w[0]);
        }
        assert_eq!(traj, scalar_oracle(0.5, &[1.0, 1.0], 1e-4));
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut s = AdamState::new(2, 1e-4);
        let mut w = [0.5, -0.25];
        s.apply(&mut w, &[0.0, 0.0]);
        assert_eq!(w, [0.5, -0.25]);
        assert_eq!(s.step_count, 1);
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut store = ParamStore::new();
        let id = store.add("critic.0.weight", Tensor::new(vec![1], vec![1.0]).unwrap());
        store.get_mut(id).grad = Some(vec![f64::NAN]);
        let mut opt = Adam::new(&store, 1e-4);
        let err = opt.step(&mut store).unwrap_err().to_string();
        assert!(err.contains("critic.0.weight"), "{err}");
    }
}
