//! Intrinsic reward generators. Each reward is a pure function of the
//! queried state and of the history fed through `observe`.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::maze::cell_of;
use crate::nn::{Adam, Graph, Init, Mlp, OutputActivation, ParamStore};
use crate::{Result, Rng};

/// Which intrinsic reward to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntrinsicKind {
    CountGrid,
    AptKnn,
    Rnd,
}

/// `1/√(n+1)` over a `cells × cells` grid of the first two state
/// coordinates.
#[derive(Debug, Clone)]
pub struct CountGrid {
    pub cells: usize,
    counts: Vec<u64>,
}

impl CountGrid {
    pub fn new(cells: usize) -> Self {
        Self {
            cells,
            counts: vec![0; cells * cells],
        }
    }

    fn index(&self, s: &[f64]) -> usize {
        let (cx, cy) = cell_of([s[0], s[1]], self.cells);
        cy * self.cells + cx
    }

    pub fn visits(&self, s: &[f64]) -> u64 {
        self.counts[self.index(s)]
    }

    pub fn reward(&self, s: &[f64]) -> f64 {
        1.0 / ((self.visits(s) + 1) as f64).sqrt()
    }

    pub fn observe(&mut self, s: &[f64]) {
        let i = self.index(s);
        self.counts[i] += 1;
    }
}

/// Particle-based entropy estimate: `ln(1 + mean distance to the k
/// nearest particles)`.
#[derive(Debug, Clone)]
pub struct AptKnn {
    pub k: usize,
    pub capacity: usize,
    particles: VecDeque<Vec<f64>>,
}

impl AptKnn {
    pub fn new(k: usize, capacity: usize) -> Self {
        Self {
            k,
            capacity,
            particles: VecDeque::with_capacity(capacity),
        }
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn reward(&self, s: &[f64]) -> f64 {
        if self.particles.is_empty() {
            return 0.0;
        }
        let k = self.k.min(self.particles.len());
        let mut best: Vec<f64> = Vec::with_capacity(k + 1);
        for p in &self.particles {
            let d = p.iter().zip(s).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            if best.len() == k && d >= best[k - 1] {
                continue;
            }
            let pos = best.iter().position(|&b| d < b).unwrap_or(best.len());
            best.insert(pos, d);
            best.truncate(k);
        }
        let mean = best.iter().sum::<f64>() / k as f64;
        (1.0 + mean).ln()
    }

    /// Replaces the particles with the newest `capacity` of `states`.
    pub fn set_particles<'a>(&mut self, states: impl ExactSizeIterator<Item = &'a [f64]>) {
        let skip = states.len().saturating_sub(self.capacity);
        self.particles.clear();
        self.particles.extend(states.skip(skip).map(<[f64]>::to_vec));
    }

    pub fn observe(&mut self, s: &[f64]) {
        if self.particles.len() == self.capacity {
            self.particles.pop_front();
        }
        self.particles.push_back(s.to_vec());
    }
}

/// Prediction error against a frozen random network.
#[derive(Debug, Clone)]
pub struct Rnd {
    predictor: Mlp,
    predictor_params: ParamStore,
    target: Mlp,
    target_params: ParamStore,
    opt: Adam,
    pending: Vec<Vec<f64>>,
    train_every: usize,
}

impl Rnd {
    pub fn new(state_dim: usize, hidden: usize, feature_dim: usize, lr: f64, rng: &mut Rng) -> Self {
        let mut target_params = ParamStore::new();
        let target = Mlp::new(
            &mut target_params,
            "rnd_target",
            &[state_dim, hidden, feature_dim],
            Init::Orthogonal,
            OutputActivation::None,
            rng,
        );
        let mut predictor_params = ParamStore::new();
        let predictor = Mlp::new(
            &mut predictor_params,
            "rnd_predictor",
            &[state_dim, hidden, feature_dim],
            Init::Orthogonal,
            OutputActivation::None,
            rng,
        );
        let opt = Adam::new(&predictor_params, lr);
        Self {
            predictor,
            predictor_params,
            target,
            target_params,
            opt,
            pending: Vec::new(),
            train_every: 32,
        }
    }

    pub fn reward_batch(&self, states: &[Vec<f64>]) -> Result<Vec<f64>> {
        if states.is_empty() {
            return Ok(Vec::new());
        }
        let dim = states[0].len();
        let flat: Vec<f64> = states.iter().flatten().copied().collect();
        let mut g = Graph::new();
        g.detach_store(&self.predictor_params);
        let x = g.input(states.len(), dim, flat)?;
        let p = self.predictor.forward(&mut g, &self.predictor_params, x)?;
        let t = self.target.forward(&mut g, &self.target_params, x)?;
        let d = g.sub(p, t)?;
        let sq = g.square(d);
        let r = g.sum_cols(sq);
        Ok(g.value(r).to_vec())
    }

    pub fn reward(&self, s: &[f64]) -> f64 {
        self.reward_batch(&[s.to_vec()]).map(|v| v[0]).unwrap_or(0.0)
    }

    /// Queues `s`; every `train_every` observations the predictor takes one
    /// Adam step on the queued states.
    pub fn observe(&mut self, s: &[f64]) -> Result<()> {
        self.pending.push(s.to_vec());
        if self.pending.len() < self.train_every {
            return Ok(());
        }
        let batch = std::mem::take(&mut self.pending);
        let dim = batch[0].len();
        let flat: Vec<f64> = batch.iter().flatten().copied().collect();
        let mut g = Graph::new();
        g.detach_store(&self.target_params);
        let x = g.input(batch.len(), dim, flat)?;
        let p = self.predictor.forward(&mut g, &self.predictor_params, x)?;
        let t = self.target.forward(&mut g, &self.target_params, x)?;
        let d = g.sub(p, t)?;
        let sq = g.square(d);
        let loss = g.mean(sq);
        let grads = g.backward(loss)?;
        self.predictor_params.accumulate(&g, &grads);
        self.opt.step(&mut self.predictor_params)
    }
}

/// One of the intrinsic reward generators behind a common interface.
#[derive(Debug, Clone)]
pub enum IntrinsicReward {
    CountGrid(CountGrid),
    AptKnn(AptKnn),
    Rnd(Box<Rnd>),
}

impl IntrinsicReward {
    pub fn new(kind: IntrinsicKind, state_dim: usize, cfg: &IntrinsicConfig, rng: &mut Rng) -> Self {
        match kind {
            IntrinsicKind::CountGrid => Self::CountGrid(CountGrid::new(cfg.grid)),
            IntrinsicKind::AptKnn => Self::AptKnn(AptKnn::new(cfg.apt_k, cfg.apt_particles)),
            IntrinsicKind::Rnd => Self::Rnd(Box::new(Rnd::new(
                state_dim,
                cfg.rnd_hidden,
                cfg.rnd_feature_dim,
                cfg.rnd_lr,
                rng,
            ))),
        }
    }

    pub fn kind(&self) -> IntrinsicKind {
        match self {
            Self::CountGrid(_) => IntrinsicKind::CountGrid,
            Self::AptKnn(_) => IntrinsicKind::AptKnn,
            Self::Rnd(_) => IntrinsicKind::Rnd,
        }
    }

    pub fn reward(&self, s: &[f64]) -> f64 {
        match self {
            Self::CountGrid(c) => c.reward(s),
            Self::AptKnn(a) => a.reward(s),
            Self::Rnd(r) => r.reward(s),
        }
    }

    pub fn reward_batch(&self, states: &[Vec<f64>]) -> Result<Vec<f64>> {
        match self {
            Self::Rnd(r) => r.reward_batch(states),
            _ => Ok(states.iter().map(|s| self.reward(s)).collect()),
        }
    }

    pub fn observe(&mut self, s: &[f64]) -> Result<()> {
        match self {
            Self::CountGrid(c) => c.observe(s),
            Self::AptKnn(a) => a.observe(s),
            Self::Rnd(r) => r.observe(s)?,
        }
        Ok(())
    }
}

/// Tunables shared by the reward generators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntrinsicConfig {
    pub grid: usize,
    pub apt_k: usize,
    pub apt_particles: usize,
    pub rnd_hidden: usize,
    pub rnd_feature_dim: usize,
    pub rnd_lr: f64,
}

impl Default for IntrinsicConfig {
    fn default() -> Self {
        Self {
            grid: 20,
            apt_k: 12,
            apt_particles: 4096,
            rnd_hidden: 64,
            rnd_feature_dim: 8,
            rnd_lr: 1e-4,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn count_grid_decays() {
        let mut c = CountGrid::new(20);
        let s = [0.33, -0.41, 0.0, 0.0];
        assert_eq!(c.reward(&s), 1.0);
        for _ in 0..3 {
            c.observe(&s);
        }
        assert_eq!(c.reward(&s), 0.5);
        // other cells unaffected
        assert_eq!(c.reward(&[-0.9, 0.9, 0.0, 0.0]), 1.0);
    }

    #[test]
    fn apt_zero_when_particles_coincide() {
        let mut a = AptKnn::new(12, 4096);
        let s = [0.1, 0.2, 0.0, 0.0];
        for _ in 0..20 {
            a.observe(&s);
        }
        assert_eq!(a.reward(&s), 0.0);
        assert!(a.reward(&[0.5, 0.5, 0.0, 0.0]) > 0.0);
    }

    #[test]
    fn apt_fifo_capacity() {
        let mut a = AptKnn::new(2, 3);
        for i in 0..5 {
            a.observe(&[i as f64]);
        }
        assert_eq!(a.len(), 3);
        // particles 2,3,4: nearest two to 4 are 4 and 3
        assert!((a.reward(&[4.0]) - (1.5f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn rnd_error_shrinks_on_observed_state() {
        let mut rng = Rng::seed_from_u64(4);
        let mut r = Rnd::new(4, 32, 8, 1e-2, &mut rng);
        let s = [0.3, -0.2, 0.05, 0.0];
        let before = r.reward(&s);
        for _ in 0..32 * 50 {
            r.observe(&s).unwrap();
        }
        assert!(r.reward(&s) < before * 0.5);
    }
}
