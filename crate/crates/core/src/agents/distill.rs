//! Distillation of a finetuned SR policy into a retrieval-free student.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::nets::{ActorNet, RefInput};
use crate::nn::{Adam, Graph, ParamStore};
use crate::{Error, Result, Rng};

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

/// σ of the Gaussian used by [`policy_kl`].
pub const KL_SIGMA: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub epochs: usize,
    pub lr: f64,
    pub sigma: f64,
    pub batch_size: usize,
    pub holdout_frac: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            lr: 1e-3,
            sigma: 0.1,
            batch_size: 256,
            holdout_frac: 0.1,
        }
    }
}

/// `base · ½(1 + cos(π·epoch/epochs))`.
pub fn cosine_lr(epoch: usize, epochs: usize, base: f64) -> f64 {
    if epochs == 0 {
        return 0.0;
    }
    let x = epoch.min(epochs) as f64 / epochs as f64;
    base * 0.5 * (1.0 + (std::f64::consts::PI * x).cos())
}

/// An actor with the plain (no reference input) architecture.
#[derive(Debug, Clone)]
pub struct StudentPolicy {
    pub actor: ActorNet,
    pub store: ParamStore,
}

impl StudentPolicy {
    pub fn new(state_dim: usize, action_dim: usize, hidden: usize, rng: &mut Rng) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut unused = rng.clone();
        let actor = ActorNet::new(&mut store, state_dim, action_dim, hidden, None, rng, &mut unused)?;
        Ok(Self { actor, store })
    }

    /// Student sharing the teacher's base weights; it computes the
    /// teacher's function whenever the teacher ignores its reference.
    pub fn from_teacher(actor: &ActorNet, store: &ParamStore) -> Result<Self> {
        let hidden = actor.net.l1.out_dim;
        let mut s = Self::new(actor.state_dim, actor.action_dim, hidden, &mut crate::rng_stream(0, 0))?;
        for id in s.store.ids().collect::<Vec<_>>() {
            let name = s.store.name(id).to_string();
            let src = store
                .find(&name)
                .ok_or_else(|| Error::Mismatch(format!("teacher lacks {name}")))?;
            s.store.get_mut(id).data = store.get(src).data.clone();
        }
        Ok(s)
    }

    pub fn act_batch(&self, states: &[f64], rows: usize) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let s = g.input(rows, self.actor.state_dim, states.to_vec())?;
        let a = self.actor.forward(&mut g, &self.store, s, RefInput::None)?;
        Ok(g.value(a).to_vec())
    }

    pub fn act(&self, state: &[f64]) -> Result<Vec<f64>> {
        self.act_batch(state, 1)
    }
}

/// Mean negative log-likelihood of `targets` under `N(μ(s), σ²I)`.
fn nll(
    g: &mut Graph,
    student: &StudentPolicy,
    states: &[f64],
    targets: &[f64],
    rows: usize,
    sigma: f64,
) -> Result<crate::nn::Var> {
    let sd = student.actor.state_dim;
    let ad = student.actor.action_dim;
    let s = g.input(rows, sd, states.to_vec())?;
    let mu = student.actor.forward(g, &student.store, s, RefInput::None)?;
    let t = g.input(rows, ad, targets.to_vec())?;
    let d = g.sub(mu, t)?;
    let d2 = g.square(d);
    let per_row = g.sum_cols(d2);
    let m = g.mean(per_row);
    let quad = g.scale(m, 1.0 / (2.0 * sigma * sigma));
    Ok(g.add_scalar(quad, ad as f64 * (sigma.ln() + HALF_LN_2PI)))
}

/// Fits `student` to the teacher's actions on `states` by maximum
/// likelihood. Returns the per-epoch mean loss (entry 0 is measured before
/// any update).
pub fn distill(
    student: &mut StudentPolicy,
    states: &[Vec<f64>],
    teacher_actions: &[Vec<f64>],
    cfg: &DistillConfig,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    if states.is_empty() || states.len() != teacher_actions.len() {
        return Err(Error::Contract(format!(
            "{} states vs {} teacher actions",
            states.len(),
            teacher_actions.len()
        )));
    }
    let n = states.len();
    let flat_s: Vec<f64> = states.iter().flatten().copied().collect();
    let flat_a: Vec<f64> = teacher_actions.iter().flatten().copied().collect();
    let mut trace = Vec::with_capacity(cfg.epochs + 1);
    let mut g = Graph::new();
    let l0 = nll(&mut g, student, &flat_s, &flat_a, n, cfg.sigma)?;
    trace.push(g.scalar(l0));

    let mut opt = Adam::new(&student.store, cfg.lr);
    let mut idx: Vec<usize> = (0..n).collect();
    let bs = cfg.batch_size.max(1);
    for epoch in 0..cfg.epochs {
        opt.set_lr(cosine_lr(epoch, cfg.epochs, cfg.lr));
        idx.shuffle(rng);
        let mut total = 0.0;
        for chunk in idx.chunks(bs) {
            let s: Vec<f64> = chunk.iter().flat_map(|&i| states[i].iter().copied()).collect();
            let a: Vec<f64> = chunk.iter().flat_map(|&i| teacher_actions[i].iter().copied()).collect();
            let mut g = Graph::new();
            let loss = nll(&mut g, student, &s, &a, chunk.len(), cfg.sigma)?;
            total += g.scalar(loss) * chunk.len() as f64;
            let grads = g.backward(loss)?;
            student.store.accumulate(&g, &grads);
            opt.step(&mut student.store)?;
        }
        trace.push(total / n as f64);
    }
    Ok(trace)
}

/// Mean over states of `KL(N(μ_a, σ²I) ‖ N(μ_b, σ²I)) = ‖μ_a − μ_b‖²/(2σ²)`.
pub fn policy_kl(means_a: &[Vec<f64>], means_b: &[Vec<f64>], sigma: f64) -> f64 {
    if means_a.is_empty() {
        return 0.0;
    }
    let total: f64 = means_a
        .iter()
        .zip(means_b)
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>())
        .sum();
    total / (2.0 * sigma * sigma) / means_a.len() as f64
}
