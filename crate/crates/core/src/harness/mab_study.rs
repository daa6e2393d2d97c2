use std::fmt::Write as _;

use serde::Serialize;

use crate::envs::{cumulative_regret, BanditAgent, BanditAgentKind, CountMab};
use crate::rng_stream;

/// The five agents of the study.
pub fn study_agents() -> Vec<BanditAgentKind> {
    vec![
        BanditAgentKind::Random,
        BanditAgentKind::ExpAvg(0.0),
        BanditAgentKind::ExpAvg(0.1),
        BanditAgentKind::ExpAvg(0.9),
        BanditAgentKind::CountsRegression,
    ]
}

/// Mean and standard error of cumulative regret per round.
#[derive(Debug, Clone, Serialize)]
pub struct RegretCurve {
    pub agent: String,
    pub mean: Vec<f64>,
    pub stderr: Vec<f64>,
    /// Final regret of each seed.
    pub finals: Vec<f64>,
}

impl RegretCurve {
    pub fn final_mean(&self) -> f64 {
        *self.mean.last().unwrap_or(&0.0)
    }
}

/// One seed of one agent: cumulative regret after each of `horizon` pulls.
pub fn run_bandit(kind: BanditAgentKind, arms: usize, noise: f64, horizon: usize, seed: u64) -> Vec<f64> {
    let mut env = CountMab::new(arms, noise, rng_stream(seed, 0));
    let mut agent = BanditAgent::new(kind, arms);
    let mut rng = rng_stream(seed, 1);
    let mut pulls = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        let arm = agent.choose(&mut rng);
        let r = env.pull(arm);
        agent.observe(arm, r);
        pulls.push((arm, r));
    }
    cumulative_regret(arms, &pulls)
}

/// Regret curves of every study agent over `seeds` seeds.
pub fn run_mab_study(seeds: usize, horizon: usize, arms: usize, noise: f64) -> Vec<RegretCurve> {
    study_agents()
        .into_iter()
        .map(|kind| {
            let runs: Vec<Vec<f64>> = (0..seeds as u64)
                .map(|s| run_bandit(kind, arms, noise, horizon, s))
                .collect();
            let n = runs.len() as f64;
            let mut mean = vec![0.0; horizon];
            let mut stderr = vec![0.0; horizon];
            for t in 0..horizon {
                let m = runs.iter().map(|r| r[t]).sum::<f64>() / n;
                let var = if runs.len() > 1 {
                    runs.iter().map(|r| (r[t] - m).powi(2)).sum::<f64>() / (n - 1.0)
                } else {
                    0.0
                };
                mean[t] = m;
                stderr[t] = (var / n).sqrt();
            }
            RegretCurve {
                agent: kind.label(),
                mean,
                stderr,
                finals: runs.iter().map(|r| *r.last().unwrap_or(&0.0)).collect(),
            }
        })
        .collect()
}

/// `t,<agent>_mean,<agent>_stderr,...` with `t` starting at 1.
pub fn regret_csv(curves: &[RegretCurve]) -> String {
    let mut s = String::from("t");
    for c in curves {
        let _ = write!(s, ",{0}_mean,{0}_stderr", c.agent);
    }
    s.push('\n');
    let horizon = curves.first().map_or(0, |c| c.mean.len());
    for t in 0..horizon {
        let _ = write!(s, "{}", t + 1);
        for c in curves {
            let _ = write!(s, ",{},{}", c.mean[t], c.stderr[t]);
        }
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_regret_grows_on_every_seed() {
        for seed in 0..10 {
            let r = run_bandit(BanditAgentKind::Random, 10, 10.0, 1000, seed);
            assert!(r[999] > r[499] && r[499] > 0.0, "seed {seed}");
        }
    }

    #[test]
    fn csv_shape() {
        let curves = run_mab_study(2, 5, 3, 0.0);
        let text = regret_csv(&curves);
        assert_eq!(text.lines().count(), 6);
        assert!(text.starts_with("t,random_mean,random_stderr,exp_avg_0_mean"));
    }
}
