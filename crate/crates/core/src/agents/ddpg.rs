use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::nets::{ActorNet, CriticNet, RefInput, SR_PREFIX};
use super::replay::Batch;
use crate::nn::{Adam, Graph, ParamStore};
use crate::retrieval::RetrievalSet;
use crate::sr::AggregatorDims;
use crate::{Error, Result, Rng};

/// DDPG hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DdpgConfig {
    pub hidden: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub gamma: f64,
    pub tau: f64,
    pub n_step: usize,
    pub update_every: usize,
    pub seed_frames: usize,
    pub expl_std: f64,
    pub expl_clip: f64,
    pub replay_capacity: usize,
}

impl Default for DdpgConfig {
    fn default() -> Self {
        Self {
            hidden: 256,
            batch_size: 512,
            lr: 1e-4,
            gamma: 0.99,
            tau: 0.01,
            n_step: 3,
            update_every: 2,
            seed_frames: 4000,
            expl_std: 0.2,
            expl_clip: 0.3,
            replay_capacity: 1_000_000,
        }
    }
}

/// Reference inputs for the current and bootstrap states of a batch.
#[derive(Debug, Clone, Copy)]
pub struct BatchRefs<'a> {
    pub now: RefInput<'a>,
    pub next: RefInput<'a>,
}

impl BatchRefs<'_> {
    pub const NONE: BatchRefs<'static> = BatchRefs {
        now: RefInput::None,
        next: RefInput::None,
    };
}

/// Adds clipped noise (already scaled by σ) and clamps into `[-1, 1]`.
pub fn apply_exploration(mean: &[f64], noise: &[f64], clip: f64) -> Vec<f64> {
    mean.iter()
        .zip(noise)
        .map(|(m, e)| (m + e.clamp(-clip, clip)).clamp(-1.0, 1.0))
        .collect()
}

/// Actor, critic and target critic. The state encoder is the identity
/// for vector observations.
#[derive(Debug, Clone)]
pub struct Ddpg {
    pub cfg: DdpgConfig,
    pub actor: ActorNet,
    pub actor_store: ParamStore,
    pub critic: CriticNet,
    pub critic_store: ParamStore,
    pub critic_target: ParamStore,
    actor_opt: Adam,
    critic_opt: Adam,
}

impl Ddpg {
    pub fn new(
        state_dim: usize,
        action_dim: usize,
        cfg: DdpgConfig,
        sr: Option<AggregatorDims>,
        rng: &mut Rng,
        sr_rng: &mut Rng,
    ) -> Result<Self> {
        let mut actor_store = ParamStore::new();
        let actor = ActorNet::new(&mut actor_store, state_dim, action_dim, cfg.hidden, sr, rng, sr_rng)?;
        let mut critic_store = ParamStore::new();
        let critic = CriticNet::new(&mut critic_store, state_dim, action_dim, cfg.hidden, sr, rng, sr_rng)?;
        let critic_target = critic_store.clone();
        let actor_opt = Adam::new(&actor_store, cfg.lr);
        let critic_opt = Adam::new(&critic_store, cfg.lr);
        Ok(Self {
            cfg,
            actor,
            actor_store,
            critic,
            critic_store,
            critic_target,
            actor_opt,
            critic_opt,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.actor.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.actor.action_dim
    }

    pub fn is_sr(&self) -> bool {
        self.actor.net.is_sr()
    }

    pub fn ref_dim(&self) -> Option<usize> {
        self.actor.net.ref_dim()
    }

    pub fn sr_dims(&self) -> Option<AggregatorDims> {
        self.actor.net.agg.as_ref().map(|a| a.dims)
    }

    /// Fresh optimiser state, e.g. after loading weights.
    pub fn reset_optimizers(&mut self) {
        self.actor_opt = Adam::new(&self.actor_store, self.cfg.lr);
        self.critic_opt = Adam::new(&self.critic_store, self.cfg.lr);
    }

    /// Target critic ← critic.
    pub fn sync_target(&mut self) -> Result<()> {
        self.critic_target.copy_values_from(&self.critic_store)
    }

    /// Zeroes and freezes the reference-input weights of actor and
    /// critic, so the agent ignores its reference vector.
    pub fn zero_reference_weights(&mut self) {
        self.actor.net.zero_reference_weights(&mut self.actor_store);
        self.critic.net.zero_reference_weights(&mut self.critic_store);
        self.critic.net.zero_reference_weights(&mut self.critic_target);
    }

    /// Stops gradient flow into the critic's aggregation sub-module.
    pub fn freeze_critic_aggregator(&mut self) {
        self.critic_store.set_frozen(SR_PREFIX, true);
    }

    /// Actor-side reference vector for one state.
    pub fn reference(&self, set: &RetrievalSet, state: &[f64]) -> Result<Vec<f64>> {
        match &self.actor.net.agg {
            Some(agg) => agg.aggregate(&self.actor_store, set, state),
            None => Err(Error::Contract("agent has no SR module".into())),
        }
    }

    /// Deterministic actions for a batch.
    pub fn act_batch(&self, states: &[f64], rows: usize, refs: RefInput) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let s = g.input(rows, self.state_dim(), states.to_vec())?;
        let a = self.actor.forward(&mut g, &self.actor_store, s, refs)?;
        Ok(g.value(a).to_vec())
    }

    /// Policy action; with `explore`, adds `N(0, σ²)` noise clipped per
    /// dimension and clamps to `[-1, 1]`.
    pub fn act(&self, state: &[f64], reference: Option<&[f64]>, explore: bool, rng: &mut Rng) -> Result<Vec<f64>> {
        if state.len() != self.state_dim() {
            return Err(Error::Config(format!(
                "agent expects {}-dim states, got {}",
                self.state_dim(),
                state.len()
            )));
        }
        let refs = match reference {
            Some(u) => RefInput::Vectors(u),
            None => RefInput::None,
        };
        let mean = self.act_batch(state, 1, refs)?;
        if !explore {
            return Ok(mean);
        }
        let noise: Vec<f64> = (0..mean.len())
            .map(|_| {
                let e: f64 = StandardNormal.sample(rng);
                self.cfg.expl_std * e
            })
            .collect();
        Ok(apply_exploration(&mean, &noise, self.cfg.expl_clip))
    }

    /// Bootstrap targets `R + γ^n Q̄(s', π(s'))`.
    pub fn td_targets(&self, batch: &Batch, next: RefInput) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let b = batch.rows;
        let ns = g.input(b, batch.state_dim, batch.next_states.clone())?;
        let na = self.actor.forward(&mut g, &self.actor_store, ns, next)?;
        let q = self.critic.forward(&mut g, &self.critic_target, ns, na, next)?;
        Ok(g.value(q)
            .iter()
            .zip(&batch.rewards)
            .zip(&batch.discounts)
            .map(|((q, r), d)| r + d * q)
            .collect())
    }

    /// One Adam step on the critic; returns the mean squared TD error.
    pub fn critic_update(&mut self, batch: &Batch, refs: BatchRefs) -> Result<f64> {
        let target = self.td_targets(batch, refs.next)?;
        let mut g = Graph::new();
        let b = batch.rows;
        let s = g.input(b, batch.state_dim, batch.states.clone())?;
        let a = g.input(b, batch.action_dim, batch.actions.clone())?;
        let q = self.critic.forward(&mut g, &self.critic_store, s, a, refs.now)?;
        let y = g.input(b, 1, target)?;
        let d = g.sub(q, y)?;
        let d2 = g.square(d);
        let loss = g.mean(d2);
        let value = g.scalar(loss);
        if !value.is_finite() {
            return Err(Error::NonFinite(format!(
                "critic loss {value} (reward range {:?})",
                minmax(&batch.rewards)
            )));
        }
        let grads = g.backward(loss)?;
        self.critic_store.accumulate(&g, &grads);
        self.critic_opt.step(&mut self.critic_store)?;
        Ok(value)
    }

    /// One Adam step on the actor against the current critic; returns
    /// `−mean Q(s, π(s))`.
    pub fn actor_update(&mut self, batch: &Batch, refs: BatchRefs) -> Result<f64> {
        let mut g = Graph::new();
        g.detach_store(&self.critic_store);
        let b = batch.rows;
        let s = g.input(b, batch.state_dim, batch.states.clone())?;
        let a = self.actor.forward(&mut g, &self.actor_store, s, refs.now)?;
        let q = self.critic.forward(&mut g, &self.critic_store, s, a, refs.now)?;
        let m = g.mean(q);
        let loss = g.neg(m);
        let value = g.scalar(loss);
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("actor loss {value}")));
        }
        let grads = g.backward(loss)?;
        self.actor_store.accumulate(&g, &grads);
        self.actor_opt.step(&mut self.actor_store)?;
        Ok(value)
    }

    /// Critic step, actor step, then target EMA. Returns both losses.
    pub fn update(&mut self, batch: &Batch, refs: BatchRefs) -> Result<(f64, f64)> {
        let c = self.critic_update(batch, refs)?;
        let a = self.actor_update(batch, refs)?;
        self.critic_target.ema_from(&self.critic_store, self.cfg.tau);
        Ok((c, a))
    }
}

fn minmax(x: &[f64]) -> (f64, f64) {
    x.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    })
}
