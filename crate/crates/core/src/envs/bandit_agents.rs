use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::Rng;

/// Exploration rate of the model-based bandit agents.
pub const EPSILON: f64 = 0.1;

/// The agents compared on the count bandit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BanditAgentKind {
    Random,
    /// Exponential average with smoothing `alpha`.
    ExpAvg(f64),
    CountsRegression,
}

impl BanditAgentKind {
    pub fn label(&self) -> String {
        match self {
            Self::Random => "random".into(),
            Self::ExpAvg(a) => format!("exp_avg_{a}"),
            Self::CountsRegression => "counts_regression".into(),
        }
    }
}

fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Running ordinary least squares for `r ≈ w·n + b`.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CountRegression {
    n: f64,
    sum_x: f64,
    sum_y: f64,
    sum_xx: f64,
    sum_xy: f64,
}

impl CountRegression {
    pub fn push(&mut self, count: f64, reward: f64) {
        self.n += 1.0;
        self.sum_x += count;
        self.sum_y += reward;
        self.sum_xx += count * count;
        self.sum_xy += count * reward;
    }

    /// `(w, b)`; falls back to `w = 0, b = mean reward` when every count
    /// is identical.
    pub fn fit(&self) -> (f64, f64) {
        if self.n == 0.0 {
            return (0.0, 0.0);
        }
        let mx = self.sum_x / self.n;
        let my = self.sum_y / self.n;
        let sxx = self.sum_xx - self.n * mx * mx;
        if sxx.abs() < 1e-9 {
            return (0.0, my);
        }
        let sxy = self.sum_xy - self.n * mx * my;
        let w = sxy / sxx;
        (w, my - w * mx)
    }
}

/// One bandit agent and the statistics it keeps.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BanditAgent {
    pub kind: BanditAgentKind,
    pub estimates: Vec<f64>,
    pub counts: Vec<u64>,
    pub regression: CountRegression,
    pub epsilon: f64,
}

impl BanditAgent {
    pub fn new(kind: BanditAgentKind, arms: usize) -> Self {
        Self {
            kind,
            estimates: vec![0.0; arms],
            counts: vec![0; arms],
            regression: CountRegression::default(),
            epsilon: EPSILON,
        }
    }

    /// Predicted reward of each arm under the agent's model.
    pub fn predictions(&self) -> Vec<f64> {
        match self.kind {
            BanditAgentKind::Random => vec![0.0; self.counts.len()],
            BanditAgentKind::ExpAvg(_) => self.estimates.clone(),
            BanditAgentKind::CountsRegression => {
                let (w, b) = self.regression.fit();
                self.counts.iter().map(|&n| w * n as f64 + b).collect()
            }
        }
    }

    /// ε-greedy arm choice; ties go to the lowest arm index.
    pub fn choose(&self, rng: &mut Rng) -> usize {
        let k = self.counts.len();
        if self.kind == BanditAgentKind::Random || rng.random::<f64>() < self.epsilon {
            return rng.random_range(0..k);
        }
        argmax(self.predictions().into_iter())
    }

    pub fn observe(&mut self, arm: usize, reward: f64) {
        match self.kind {
            BanditAgentKind::Random => {}
            BanditAgentKind::ExpAvg(alpha) => {
                self.estimates[arm] = alpha * self.estimates[arm] + (1.0 - alpha) * reward;
            }
            BanditAgentKind::CountsRegression => {
                self.regression.push(self.counts[arm] as f64, reward);
            }
        }
        self.counts[arm] += 1;
    }
}
