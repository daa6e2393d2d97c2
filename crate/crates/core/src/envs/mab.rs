use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::Rng;

/// Default number of arms.
pub const DEFAULT_ARMS: usize = 10;
/// Default reward noise standard deviation.
pub const DEFAULT_NOISE: f64 = 10.0;

/// Bandit whose arm `k` pays `-n_k + N(0, σ²)`, where `n_k` counts the
/// pulls of `k` made before the current one.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CountMab {
    pub pull_counts: Vec<u64>,
    pub noise: f64,
    rng: Rng,
}

impl CountMab {
    pub fn new(arms: usize, noise: f64, rng: Rng) -> Self {
        assert!(arms > 0, "a bandit needs at least one arm");
        Self {
            pull_counts: vec![0; arms],
            noise,
            rng,
        }
    }

    pub fn arms(&self) -> usize {
        self.pull_counts.len()
    }

    pub fn total_pulls(&self) -> u64 {
        self.pull_counts.iter().sum()
    }

    /// Noise-free mean of the best arm right now.
    pub fn best_mean(&self) -> f64 {
        -(*self.pull_counts.iter().min().unwrap() as f64)
    }

    pub fn pull(&mut self, arm: usize) -> f64 {
        let n = self.pull_counts[arm];
        let eps: f64 = StandardNormal.sample(&mut self.rng);
        self.pull_counts[arm] += 1;
        -(n as f64) + self.noise * eps
    }
}

/// Cumulative regret after each round for a sequence of `(arm, reward)`
/// pulls on a `arms`-armed count bandit.
///
/// The best achievable mean at round `t` is `-min_k n_k(t)` with counts
/// taken before the pull.
pub fn cumulative_regret(arms: usize, pulls: &[(usize, f64)]) -> Vec<f64> {
    let mut counts = vec![0u64; arms];
    let mut total = 0.0;
    pulls
        .iter()
        .map(|&(arm, reward)| {
            let best = -(*counts.iter().min().unwrap() as f64);
            total += best - reward;
            counts[arm] += 1;
            total
        })
        .collect()
}
