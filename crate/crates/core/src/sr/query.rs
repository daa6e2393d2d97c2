//! The query module: a Gaussian policy over state space that picks the
//! point the retriever searches around, trained on-policy with PPO plus an
//! identity penalty pulling its mean towards the current state.

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::nn::{Adam, Graph, Init, Mlp, OutputActivation, ParamId, ParamStore, Tensor, Var};
use crate::{Error, Result, Rng};

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

/// How the query point for retrieval is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryStrategy {
    #[default]
    Learned,
    CurrentState,
    RandomSample,
    NoiseReference,
}

/// Training phase of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    Finetune,
}

/// What the retriever should do for this step.
#[derive(Debug, Clone, PartialEq)]
pub enum QueryDecision {
    /// Search around `query`. `recorded` is set when the step entered the
    /// query module's rollout and therefore expects a reward.
    Point { query: Vec<f64>, recorded: bool },
    /// Draw `k` storage indices uniformly instead of searching.
    Uniform,
    /// Skip retrieval and aggregation; the reference vector is noise.
    Noise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QueryConfig {
    pub hidden: usize,
    pub lr: f64,
    pub clip: f64,
    pub gae_lambda: f64,
    pub gamma: f64,
    pub epochs: usize,
    pub minibatches: usize,
    pub identity_coef: f64,
    pub value_coef: f64,
    pub max_grad_norm: f64,
    pub init_log_std: f64,
}

impl Default for QueryConfig {
    fn default() -> Self {
        Self {
            hidden: 256,
            lr: 3e-4,
            clip: 0.2,
            gae_lambda: 0.95,
            gamma: 0.99,
            epochs: 4,
            minibatches: 4,
            identity_coef: 1.0,
            value_coef: 0.5,
            max_grad_norm: 0.5,
            init_log_std: 0.1f64.ln(),
        }
    }
}

/// On-policy data of the current episode.
#[derive(Debug, Clone, Default)]
pub struct Rollout {
    pub states: Vec<Vec<f64>>,
    pub queries: Vec<Vec<f64>>,
    pub log_probs: Vec<f64>,
    pub values: Vec<f64>,
    pub rewards: Vec<f64>,
}

impl Rollout {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    fn clear(&mut self) {
        *self = Self::default();
    }
}

/// Minibatch fed to [`query_actor_loss`].
#[derive(Debug, Clone)]
pub struct PpoBatch {
    pub states: Vec<f64>,
    pub queries: Vec<f64>,
    pub old_log_probs: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
    pub rows: usize,
}

/// Summary of one PPO update.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct QueryStats {
    pub loss: f64,
    pub identity: f64,
    pub value_loss: f64,
}

/// Networks of the query module. Parameters live in `store` under the
/// `query.` prefix.
#[derive(Debug, Clone)]
pub struct QueryNets {
    pub mean_net: Mlp,
    pub log_std: ParamId,
    pub value_net: Mlp,
    pub state_dim: usize,
}

impl QueryNets {
    fn new(store: &mut ParamStore, state_dim: usize, cfg: &QueryConfig, rng: &mut Rng) -> Self {
        let h = cfg.hidden;
        // last layer zero: the mean starts out as the identity map
        let mean_net = Mlp::new(
            store,
            "query.mean",
            &[state_dim, h, h, state_dim],
            Init::Zeros,
            OutputActivation::None,
            rng,
        );
        let log_std = store.add(
            "query.log_std",
            Tensor::new(vec![1, state_dim], vec![cfg.init_log_std; state_dim]).expect("positive dim"),
        );
        let value_net = Mlp::new(
            store,
            "query.value",
            &[state_dim, h, h, 1],
            Init::Uniform(1.0 / (h as f64).sqrt()),
            OutputActivation::None,
            rng,
        );
        Self {
            mean_net,
            log_std,
            value_net,
            state_dim,
        }
    }

    /// Policy mean `s + f(s)` for a `B × S` batch.
    pub fn mean(&self, g: &mut Graph, store: &ParamStore, states: Var) -> Result<Var> {
        let delta = self.mean_net.forward(g, store, states)?;
        g.add(states, delta)
    }

    /// Log-density of each row of `queries` (`B × 1`).
    pub fn log_prob(&self, g: &mut Graph, store: &ParamStore, states: Var, queries: Var) -> Result<Var> {
        let (b, s) = g.shape(states);
        let mu = self.mean(g, store, states)?;
        let log_std = g.param(store, self.log_std);
        let ones = g.constant(b, 1, 1.0);
        let neg2 = g.scale(log_std, -2.0);
        let inv_var = g.exp(neg2);
        let inv_var_b = g.matmul(ones, inv_var)?;
        let d = g.sub(queries, mu)?;
        let d2 = g.square(d);
        let z = g.mul(d2, inv_var_b)?;
        let quad = g.sum_cols(z);
        let quad = g.scale(quad, -0.5);
        let ls_sum = g.sum(log_std);
        let ls_b = g.matmul(ones, ls_sum)?;
        let lp = g.sub(quad, ls_b)?;
        Ok(g.add_scalar(lp, -(s as f64) * HALF_LN_2PI))
    }

    /// Mean over rows of `‖mean(s) − s‖₂`.
    pub fn identity(&self, g: &mut Graph, store: &ParamStore, states: Var) -> Result<Var> {
        let mu = self.mean(g, store, states)?;
        let d = g.sub(mu, states)?;
        let n = g.row_norm(d);
        Ok(g.mean(n))
    }
}

/// Clipped surrogate (with per-batch advantage normalisation) plus the
/// weighted identity penalty. `batch.returns` is ignored here.
pub fn query_actor_loss(
    g: &mut Graph,
    store: &ParamStore,
    nets: &QueryNets,
    batch: &PpoBatch,
    clip: f64,
    identity_coef: f64,
) -> Result<Var> {
    let s = nets.state_dim;
    let b = batch.rows;
    let states = g.input(b, s, batch.states.clone())?;
    let queries = g.input(b, s, batch.queries.clone())?;
    let lp = nets.log_prob(g, store, states, queries)?;
    let old = g.input(b, 1, batch.old_log_probs.clone())?;
    let diff = g.sub(lp, old)?;
    let ratio = g.exp(diff);
    let adv = g.input(b, 1, normalize(&batch.advantages))?;
    let s1 = g.mul(ratio, adv)?;
    let clipped = g.clamp(ratio, 1.0 - clip, 1.0 + clip);
    let s2 = g.mul(clipped, adv)?;
    let m = g.min(s1, s2)?;
    let surr = g.mean(m);
    let pg = g.neg(surr);
    let id = nets.identity(g, store, states)?;
    let id = g.scale(id, identity_coef);
    g.add(pg, id)
}

fn normalize(x: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    if x.len() < 2 {
        return x.iter().map(|v| v - mean).collect();
    }
    // sample standard deviation
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    let sd = var.sqrt() + 1e-8;
    x.iter().map(|v| (v - mean) / sd).collect()
}

/// Generalised advantage estimates for one truncated episode bootstrapped
/// with `last_value`. Returns `(advantages, returns)`.
pub fn gae(rewards: &[f64], values: &[f64], last_value: f64, gamma: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut acc = 0.0;
    for t in (0..n).rev() {
        let next = if t + 1 < n { values[t + 1] } else { last_value };
        let delta = rewards[t] + gamma * next - values[t];
        acc = delta + gamma * lambda * acc;
        adv[t] = acc;
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, ret)
}

/// The query agent's reward at each step is the main agent's reward at
/// that step.
pub fn query_reward_assignment(env_rewards: &[f64]) -> Vec<f64> {
    env_rewards.to_vec()
}

/// Query policy, value function, optimiser and the rollout of the
/// current episode.
#[derive(Debug, Clone)]
pub struct QueryModule {
    pub cfg: QueryConfig,
    pub store: ParamStore,
    pub nets: QueryNets,
    opt: Adam,
    pub rollout: Rollout,
    pub rng: Rng,
    /// Sample the mean instead of drawing from the Gaussian.
    pub deterministic: bool,
    pending_reward: bool,
}

impl QueryModule {
    pub fn new(state_dim: usize, cfg: QueryConfig, rng: &mut Rng, sample_rng: Rng) -> Self {
        let mut store = ParamStore::new();
        let nets = QueryNets::new(&mut store, state_dim, &cfg, rng);
        let opt = Adam::with_eps(&store, cfg.lr, 1e-5);
        Self {
            cfg,
            store,
            nets,
            opt,
            rollout: Rollout::default(),
            rng: sample_rng,
            deterministic: false,
            pending_reward: false,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.nets.state_dim
    }

    /// Replaces the parameters (e.g. from a checkpoint) and restarts the
    /// optimiser.
    pub fn load_store(&mut self, store: ParamStore) -> Result<()> {
        self.store.copy_values_from(&store)?;
        self.opt = Adam::with_eps(&self.store, self.cfg.lr, 1e-5);
        Ok(())
    }

    pub fn mean(&self, state: &[f64]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let s = g.input(1, state.len(), state.to_vec())?;
        let mu = self.nets.mean(&mut g, &self.store, s)?;
        Ok(g.value(mu).to_vec())
    }

    pub fn std(&self) -> Vec<f64> {
        self.store.get(self.nets.log_std).data.iter().map(|l| l.exp()).collect()
    }

    fn value(&self, state: &[f64]) -> Result<f64> {
        let mut g = Graph::new();
        let s = g.input(1, state.len(), state.to_vec())?;
        let v = self.nets.value_net.forward(&mut g, &self.store, s)?;
        Ok(g.scalar(v))
    }

    fn log_prob_of(&self, state: &[f64], query: &[f64]) -> Result<f64> {
        let mut g = Graph::new();
        let n = state.len();
        let s = g.input(1, n, state.to_vec())?;
        let q = g.input(1, n, query.to_vec())?;
        let lp = self.nets.log_prob(&mut g, &self.store, s, q)?;
        Ok(g.scalar(lp))
    }

    /// Draws `q ~ N(mean(s), σ²)`.
    pub fn sample(&mut self, state: &[f64]) -> Result<Vec<f64>> {
        let mu = self.mean(state)?;
        if self.deterministic {
            return Ok(mu);
        }
        let std = self.std();
        Ok(mu
            .iter()
            .zip(&std)
            .map(|(m, s)| {
                let e: f64 = StandardNormal.sample(&mut self.rng);
                m + s * e
            })
            .collect())
    }

    fn record(&mut self, state: &[f64], query: &[f64]) -> Result<()> {
        if self.pending_reward {
            return Err(Error::Contract("query step recorded before the previous reward".into()));
        }
        let lp = self.log_prob_of(state, query)?;
        let v = self.value(state)?;
        self.rollout.states.push(state.to_vec());
        self.rollout.queries.push(query.to_vec());
        self.rollout.log_probs.push(lp);
        self.rollout.values.push(v);
        self.pending_reward = true;
        Ok(())
    }

    /// Reward for the most recent recorded step.
    pub fn record_reward(&mut self, reward: f64) -> Result<()> {
        if !self.pending_reward {
            return Err(Error::Contract("reward without a recorded query step".into()));
        }
        self.rollout.rewards.push(reward);
        self.pending_reward = false;
        Ok(())
    }

    /// Closes the current episode. If it produced rollout data, runs the
    /// PPO update bootstrapped from `V(last_state)` and clears the rollout.
    pub fn finish_episode(&mut self, last_state: &[f64]) -> Result<Option<QueryStats>> {
        if self.pending_reward {
            return Err(Error::Contract("episode closed with a reward outstanding".into()));
        }
        if self.rollout.is_empty() {
            return Ok(None);
        }
        let last_value = self.value(last_state)?;
        let stats = self.update(last_value)?;
        self.rollout.clear();
        Ok(Some(stats))
    }

    fn update(&mut self, last_value: f64) -> Result<QueryStats> {
        let r = std::mem::take(&mut self.rollout);
        let n = r.len();
        let s = self.state_dim();
        let (adv, ret) = gae(&r.rewards, &r.values, last_value, self.cfg.gamma, self.cfg.gae_lambda);
        let mb = self.cfg.minibatches.clamp(1, n);
        let mut idx: Vec<usize> = (0..n).collect();
        let mut stats = QueryStats::default();
        let mut count = 0.0;
        for _ in 0..self.cfg.epochs {
            idx.shuffle(&mut self.rng);
            for chunk in split(&idx, mb) {
                let batch = PpoBatch {
                    states: chunk.iter().flat_map(|&i| r.states[i].iter().copied()).collect(),
                    queries: chunk.iter().flat_map(|&i| r.queries[i].iter().copied()).collect(),
                    old_log_probs: chunk.iter().map(|&i| r.log_probs[i]).collect(),
                    advantages: chunk.iter().map(|&i| adv[i]).collect(),
                    returns: chunk.iter().map(|&i| ret[i]).collect(),
                    rows: chunk.len(),
                };
                let mut g = Graph::new();
                let actor = query_actor_loss(
                    &mut g,
                    &self.store,
                    &self.nets,
                    &batch,
                    self.cfg.clip,
                    self.cfg.identity_coef,
                )?;
                let st = g.input(batch.rows, s, batch.states.clone())?;
                let v = self.nets.value_net.forward(&mut g, &self.store, st)?;
                let target = g.input(batch.rows, 1, batch.returns.clone())?;
                let d = g.sub(v, target)?;
                let d2 = g.square(d);
                let vl = g.mean(d2);
                let vl_scaled = g.scale(vl, self.cfg.value_coef);
                let loss = g.add(actor, vl_scaled)?;
                let id = self.nets.identity(&mut g, &self.store, st)?;
                let grads = g.backward(loss)?;
                self.store.accumulate(&g, &grads);
                self.store.clip_grad_norm(self.cfg.max_grad_norm);
                self.opt.step(&mut self.store)?;
                self.clamp_log_std();
                stats.loss += g.scalar(loss);
                stats.identity += g.scalar(id);
                stats.value_loss += g.scalar(vl);
                count += 1.0;
            }
        }
        stats.loss /= count;
        stats.identity /= count;
        stats.value_loss /= count;
        Ok(stats)
    }

    fn clamp_log_std(&mut self) {
        let t = self.store.get_mut(self.nets.log_std);
        t.data.iter_mut().for_each(|x| *x = x.clamp(LOG_STD_MIN, LOG_STD_MAX));
    }

    /// Drops any partial rollout, e.g. when a run is interrupted.
    pub fn discard_rollout(&mut self) {
        self.rollout.clear();
        self.pending_reward = false;
    }
}

fn split(idx: &[usize], parts: usize) -> Vec<&[usize]> {
    let n = idx.len();
    (0..parts)
        .map(|p| &idx[p * n / parts..(p + 1) * n / parts])
        .filter(|c| !c.is_empty())
        .collect()
}

/// Picks the query for one step.
///
/// With the learned strategy in pretraining, odd episodes bypass the
/// module (the query is the state itself and nothing is recorded).
pub fn make_query(
    module: &mut QueryModule,
    strategy: QueryStrategy,
    state: &[f64],
    episode_index: u64,
    phase: Phase,
) -> Result<QueryDecision> {
    if state.len() != module.state_dim() {
        return Err(Error::Config(format!(
            "query module expects {}-dim states, got {}",
            module.state_dim(),
            state.len()
        )));
    }
    Ok(match strategy {
        QueryStrategy::CurrentState => QueryDecision::Point {
            query: state.to_vec(),
            recorded: false,
        },
        QueryStrategy::RandomSample => QueryDecision::Uniform,
        QueryStrategy::NoiseReference => QueryDecision::Noise,
        QueryStrategy::Learned => {
            if phase == Phase::Pretrain && episode_index % 2 == 1 {
                QueryDecision::Point {
                    query: state.to_vec(),
                    recorded: false,
                }
            } else {
                let q = module.sample(state)?;
                module.record(state, &q)?;
                QueryDecision::Point {
                    query: q,
                    recorded: true,
                }
            }
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::check_gradients;
    use rand::{Rng as _, SeedableRng};

    fn small_cfg() -> QueryConfig {
        QueryConfig {
            hidden: 8,
            ..QueryConfig::default()
        }
    }

    fn module(seed: u64) -> QueryModule {
        let mut rng = Rng::seed_from_u64(seed);
        QueryModule::new(2, small_cfg(), &mut rng, Rng::seed_from_u64(seed + 1))
    }

    #[test]
    fn current_state_is_identity() {
        let mut m = module(0);
        let d = make_query(&mut m, QueryStrategy::CurrentState, &[0.3, -0.1], 0, Phase::Pretrain).unwrap();
        assert_eq!(
            d,
            QueryDecision::Point {
                query: vec![0.3, -0.1],
                recorded: false
            }
        );
    }

    #[test]
    fn odd_pretrain_episode_bypasses_module() {
        let mut m = module(1);
        let s = [0.2, 0.4];
        let d = make_query(&mut m, QueryStrategy::Learned, &s, 3, Phase::Pretrain).unwrap();
        assert_eq!(
            d,
            QueryDecision::Point {
                query: s.to_vec(),
                recorded: false
            }
        );
        assert!(m.rollout.is_empty());
        // finetuning always uses the module
        let d = make_query(&mut m, QueryStrategy::Learned, &s, 3, Phase::Finetune).unwrap();
        assert!(matches!(d, QueryDecision::Point { recorded: true, .. }));
        assert_eq!(m.rollout.len(), 1);
    }

    #[test]
    fn degenerate_gaussian_returns_state() {
        let mut m = module(2);
        m.deterministic = true;
        let s = [0.7, -0.25];
        let d = make_query(&mut m, QueryStrategy::Learned, &s, 0, Phase::Pretrain).unwrap();
        assert_eq!(
            d,
            QueryDecision::Point {
                query: s.to_vec(),
                recorded: true
            }
        );
    }

    #[test]
    fn other_strategies_signal_the_retriever() {
        let mut m = module(3);
        let s = [0.0, 0.0];
        assert_eq!(
            make_query(&mut m, QueryStrategy::RandomSample, &s, 0, Phase::Pretrain).unwrap(),
            QueryDecision::Uniform
        );
        assert_eq!(
            make_query(&mut m, QueryStrategy::NoiseReference, &s, 0, Phase::Pretrain).unwrap(),
            QueryDecision::Noise
        );
        assert!(make_query(&mut m, QueryStrategy::CurrentState, &[0.0], 0, Phase::Pretrain).is_err());
    }

    #[test]
    fn identity_loss_values() {
        let m = module(4);
        let mut g = Graph::new();
        let s = g.input(3, 2, vec![0.1, 0.2, -0.4, 0.9, 0.0, 0.0]).unwrap();
        let id = m.nets.identity(&mut g, &m.store, s).unwrap();
        assert_eq!(g.scalar(id), 0.0);

        // unit offset in one coordinate through the last bias
        let mut m = module(5);
        let last = m.nets.mean_net.layers.last().unwrap().bias;
        m.store.get_mut(last).data = vec![1.0, 0.0];
        let mut g = Graph::new();
        let s = g.input(3, 2, vec![0.1, 0.2, -0.4, 0.9, 0.0, 0.0]).unwrap();
        let id = m.nets.identity(&mut g, &m.store, s).unwrap();
        assert!((g.scalar(id) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn default_coefficients() {
        let c = QueryConfig::default();
        assert_eq!(c.identity_coef, 1.0);
        assert_eq!((c.clip, c.gae_lambda, c.gamma, c.epochs), (0.2, 0.95, 0.99, 4));
    }

    #[test]
    fn reward_pass_through() {
        assert_eq!(query_reward_assignment(&[1.0, 0.7, 0.5]), vec![1.0, 0.7, 0.5]);
    }

    #[test]
    fn gae_matches_hand_recursion() {
        let (adv, ret) = gae(&[1.0, 0.0], &[0.5, 0.2], 0.1, 0.9, 0.5);
        let d1 = 0.0 + 0.9 * 0.1 - 0.2;
        let d0 = 1.0 + 0.9 * 0.2 - 0.5;
        assert!((adv[1] - d1).abs() < 1e-15);
        assert!((adv[0] - (d0 + 0.45 * d1)).abs() < 1e-15);
        assert!((ret[0] - (adv[0] + 0.5)).abs() < 1e-15);
    }

    #[test]
    fn log_prob_matches_closed_form() {
        let m = module(6);
        let s = [0.3, -0.2];
        let q = [0.5, 0.1];
        let lp = m.log_prob_of(&s, &q).unwrap();
        let sd = QueryConfig::default().init_log_std.exp();
        let expect: f64 = s
            .iter()
            .zip(&q)
            .map(|(m, x)| -((x - m) / sd).powi(2) / 2.0 - sd.ln() - HALF_LN_2PI)
            .sum();
        assert!((lp - expect).abs() < 1e-12);
    }

    #[test]
    fn log_std_stays_clamped() {
        let mut m = module(7);
        m.store.get_mut(m.nets.log_std).data = vec![-9.0, 4.0];
        m.clamp_log_std();
        assert_eq!(m.store.get(m.nets.log_std).data, vec![LOG_STD_MIN, LOG_STD_MAX]);
    }

    #[test]
    fn ppo_update_runs_and_clears_rollout() {
        let mut m = module(8);
        let mut rng = Rng::seed_from_u64(9);
        for t in 0..12 {
            let s = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            make_query(&mut m, QueryStrategy::Learned, &s, 0, Phase::Finetune).unwrap();
            m.record_reward(t as f64 * 0.1).unwrap();
        }
        let stats = m.finish_episode(&[0.0, 0.0]).unwrap().unwrap();
        assert!(stats.loss.is_finite());
        assert!(m.rollout.is_empty());
        assert!(m.finish_episode(&[0.0, 0.0]).unwrap().is_none());
    }

    #[test]
    fn actor_loss_gradient_on_toy_rollout() {
        let mut m = module(10);
        let mut rng = Rng::seed_from_u64(11);
        // move off the identity so the norm is differentiable
        for id in m.store.ids().collect::<Vec<_>>() {
            for x in m.store.get_mut(id).data.iter_mut() {
                *x += rng.random_range(-0.3..0.3);
            }
        }
        let batch = PpoBatch {
            states: (0..6).map(|_| rng.random_range(-1.0..1.0)).collect(),
            queries: (0..6).map(|_| rng.random_range(-1.0..1.0)).collect(),
            old_log_probs: vec![-1.0, -0.5, -2.0],
            advantages: vec![0.3, -1.2, 0.8],
            returns: vec![0.0; 3],
            rows: 3,
        };
        let nets = m.nets.clone();
        let r = check_gradients(&mut m.store, 1e-5, |g, store| {
            query_actor_loss(g, store, &nets, &batch, 0.2, 1.0)
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }
}
