//! The pretrain / finetune loop.

use std::sync::Arc;
use std::time::Instant;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::config::{EnvKind, RunConfig};
use super::metrics::{CoverageGrid, MetricRecord};
use crate::agents::{policy_kl, BatchRefs, Context, Ddpg, Entry, RefInput, ReplayBuffer, RewardSource, KL_SIGMA};
use crate::envs::{IntrinsicKind, IntrinsicReward, PointMassMaze};
use crate::retrieval::{ReferenceWindow, Transition};
use crate::sr::{make_query, noise_reference, Phase, QueryDecision, QueryModule, QueryStrategy};
use crate::{rng_stream, Error, Result, Rng};

/// RNG stream ids; finetuning shifts them by [`FT_STREAM_OFFSET`].
pub(crate) mod stream {
    pub const INIT: u64 = 0;
    pub const SR_INIT: u64 = 1;
    pub const QUERY_INIT: u64 = 2;
    pub const QUERY_SAMPLE: u64 = 3;
    pub const INTRINSIC_INIT: u64 = 4;
    pub const ENV: u64 = 10;
    pub const EXPLORE: u64 = 11;
    pub const REPLAY: u64 = 12;
    pub const RETRIEVAL: u64 = 13;
    pub const NOISE: u64 = 14;
    pub const EVAL: u64 = 15;
    pub const DISTILL: u64 = 16;
}
const FT_STREAM_OFFSET: u64 = 100;

/// The independent random streams of a run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Streams {
    pub explore: Rng,
    pub replay: Rng,
    pub retrieval: Rng,
    pub noise: Rng,
}

impl Streams {
    fn new(seed: u64, offset: u64) -> Self {
        Self {
            explore: rng_stream(seed, stream::EXPLORE + offset),
            replay: rng_stream(seed, stream::REPLAY + offset),
            retrieval: rng_stream(seed, stream::RETRIEVAL + offset),
            noise: rng_stream(seed, stream::NOISE + offset),
        }
    }
}

/// Stream used by evaluation rollouts; fresh for every evaluation so all
/// evaluations see the same start states.
pub fn eval_rng(seed: u64) -> Rng {
    rng_stream(seed, stream::EVAL)
}

pub fn distill_rng(seed: u64) -> Rng {
    rng_stream(seed, stream::DISTILL)
}

/// One stage of an environment step, for the ordering check.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Op {
    Query,
    Retrieve,
    Expand,
    Act,
    Append,
}

/// Instrumentation of the loop.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub env_steps: u64,
    pub queries: u64,
    pub retrievals: u64,
    pub expands: u64,
    pub acts: u64,
    pub appends: u64,
    /// Appends at a step count that is not a multiple of the horizon.
    pub off_boundary_appends: u64,
    /// Retrievals that returned a state of the running episode.
    pub current_episode_hits: u64,
    /// Steps whose stages ran out of order.
    pub order_violations: u64,
    /// Steps acting on a zero reference because the window held fewer
    /// than `k` states.
    pub warmup_steps: u64,
    pub padded_lists: u64,
    pub agent_updates: u64,
    pub query_updates: u64,
}

/// Per-step record kept when [`Runner::record_steps`] is set.
#[derive(Debug, Clone, PartialEq)]
pub struct StepLog {
    pub action: Vec<f64>,
    pub losses: Option<(f64, f64)>,
}

/// Agent parameters together with the means of producing its reference.
#[derive(Debug, Clone)]
pub struct Policy {
    pub agent: Ddpg,
    pub query: QueryModule,
    pub strategy: QueryStrategy,
    pub k: usize,
    pub traj_len: usize,
}

impl Policy {
    /// Deterministic action: query mean, retrieval, aggregation, actor.
    /// Randomness (noise references, uniform retrieval) comes from `rng`.
    pub fn action(&self, window: &ReferenceWindow, state: &[f64], rng: &mut Rng) -> Result<Vec<f64>> {
        let u = self.reference(window, state, rng)?;
        self.agent.act(state, u.as_deref(), false, rng)
    }

    fn reference(&self, window: &ReferenceWindow, state: &[f64], rng: &mut Rng) -> Result<Option<Vec<f64>>> {
        let Some(dim) = self.agent.ref_dim() else {
            return Ok(None);
        };
        let indices = match self.strategy {
            QueryStrategy::NoiseReference => return Ok(Some(noise_reference(dim, rng))),
            _ if window.len() < self.k => return Ok(Some(vec![0.0; dim])),
            QueryStrategy::RandomSample => window.sample_uniform(self.k, rng),
            QueryStrategy::CurrentState => window.knn_search(state, self.k).indices,
            QueryStrategy::Learned => window.knn_search(&self.query.mean(state)?, self.k).indices,
        };
        let set = window.expand_trajectories(&indices, self.traj_len)?;
        Ok(Some(self.agent.reference(&set, state)?))
    }
}

/// Result of an evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub mean_return: f64,
    pub returns: Vec<f64>,
    pub coverage: f64,
    #[serde(skip)]
    pub states: Vec<Vec<f64>>,
}

/// Rolls out `episodes` noise-free episodes on a fresh evaluation env.
pub fn evaluate(policy: &Policy, window: &ReferenceWindow, cfg: &RunConfig, episodes: usize) -> Result<EvalResult> {
    let mut env = PointMassMaze::new(cfg.task, cfg.horizon, eval_rng(cfg.seed));
    let mut rng = rng_stream(cfg.seed, stream::EVAL + 1);
    let mut cov = CoverageGrid::new(cfg.grid);
    let mut returns = Vec::with_capacity(episodes);
    let mut states = Vec::new();
    for ep in 0..episodes {
        let mut obs = if ep == 0 { env.observation() } else { env.reset() };
        let mut total = 0.0;
        loop {
            let a = policy.action(window, &obs, &mut rng)?;
            states.push(obs);
            let out = env.step(&a)?;
            cov.visit([out.observation[0], out.observation[1]]);
            total += out.reward;
            obs = out.observation;
            if out.done {
                break;
            }
        }
        returns.push(total);
    }
    let mean_return = if episodes == 0 {
        0.0
    } else {
        returns.iter().sum::<f64>() / episodes as f64
    };
    Ok(EvalResult {
        mean_return,
        returns,
        coverage: cov.fraction(),
        states,
    })
}

/// Pretraining or finetuning state: agent, query module, window, replay,
/// environment and logs.
pub struct Runner {
    pub cfg: RunConfig,
    pub phase: Phase,
    pub policy: Policy,
    pub window: ReferenceWindow,
    pub replay: ReplayBuffer,
    pub intrinsic: IntrinsicReward,
    pub env: PointMassMaze,
    pub streams: Streams,
    pub counters: Counters,
    pub records: Vec<MetricRecord>,
    /// `(step, mean evaluation return)`.
    pub evals: Vec<(u64, f64)>,
    pub coverage: CoverageGrid,
    /// Frozen pretrained policy for the KL metric (finetuning only).
    pub pt_policy: Option<Policy>,
    pub step: u64,
    pub episodes: u64,
    pub next_episode_id: u64,
    /// Keep the stage sequence of every step.
    pub trace: Option<Vec<Vec<Op>>>,
    /// Keep the action and losses of every step.
    pub record_steps: Option<Vec<StepLog>>,
    obs: Vec<f64>,
    episode_id: u64,
    episode: Vec<Transition>,
    episode_index: u64,
    ep_intrinsic: f64,
    ep_extrinsic: f64,
    last: MetricRecord,
    // only read when wall time is logged; the clock is unavailable in wasm
    started: Option<Instant>,
}

impl Runner {
    /// A fresh agent ready to pretrain.
    pub fn pretrain(cfg: RunConfig) -> Result<Self> {
        if cfg.env != EnvKind::Pointmass {
            return Err(Error::Config(
                "pretraining runs on the point-mass maze; use `mab` for the bandit".into(),
            ));
        }
        cfg.validate()?;
        let sd = PointMassMaze::OBS_DIM;
        let ad = PointMassMaze::ACTION_DIM;
        let mut agent = Ddpg::new(
            sd,
            ad,
            cfg.ddpg(),
            cfg.sr_dims(sd),
            &mut rng_stream(cfg.seed, stream::INIT),
            &mut rng_stream(cfg.seed, stream::SR_INIT),
        )?;
        if cfg.zero_reference_inputs && agent.is_sr() {
            agent.zero_reference_weights();
        }
        let query = QueryModule::new(
            sd,
            cfg.query(),
            &mut rng_stream(cfg.seed, stream::QUERY_INIT),
            rng_stream(cfg.seed, stream::QUERY_SAMPLE),
        );
        let window = ReferenceWindow::with_similarity(cfg.window, cfg.similarity);
        Ok(Self::assemble(cfg, Phase::Pretrain, agent, query, window, 0))
    }

    /// Finetuning from pretrained parts: fresh replay and optimisers,
    /// carried-over window, frozen critic aggregator.
    pub fn finetune(
        cfg: RunConfig,
        mut agent: Ddpg,
        mut query: QueryModule,
        window: ReferenceWindow,
        next_episode_id: u64,
    ) -> Result<Self> {
        if cfg.env != EnvKind::Pointmass {
            return Err(Error::Config("finetuning runs on the point-mass maze".into()));
        }
        cfg.validate()?;
        let pt = Policy {
            agent: agent.clone(),
            query: query.clone(),
            strategy: cfg.query_strategy,
            k: cfg.k,
            traj_len: cfg.traj_len,
        };
        agent.cfg = cfg.ddpg();
        agent.sync_target()?;
        agent.reset_optimizers();
        if agent.is_sr() {
            agent.freeze_critic_aggregator();
            if cfg.zero_reference_inputs {
                agent.zero_reference_weights();
            }
        }
        query.cfg = cfg.query();
        query.rng = rng_stream(cfg.seed, stream::QUERY_SAMPLE + FT_STREAM_OFFSET);
        query.load_store(query.store.clone())?;
        query.discard_rollout();
        let mut r = Self::assemble(cfg, Phase::Finetune, agent, query, window, next_episode_id);
        r.pt_policy = Some(pt);
        Ok(r)
    }

    fn assemble(
        cfg: RunConfig,
        phase: Phase,
        agent: Ddpg,
        query: QueryModule,
        window: ReferenceWindow,
        next_episode_id: u64,
    ) -> Self {
        let offset = if phase == Phase::Finetune { FT_STREAM_OFFSET } else { 0 };
        let sd = agent.state_dim();
        let intrinsic = IntrinsicReward::new(
            cfg.intrinsic,
            sd,
            &cfg.intrinsic_cfg(),
            &mut rng_stream(cfg.seed, stream::INTRINSIC_INIT + offset),
        );
        let env = PointMassMaze::new(cfg.task, cfg.horizon, rng_stream(cfg.seed, stream::ENV + offset));
        let obs = env.observation();
        let policy = Policy {
            agent,
            query,
            strategy: cfg.query_strategy,
            k: cfg.k,
            traj_len: cfg.traj_len,
        };
        let cfg_wall = cfg.log_wall_time;
        let mut r = Self {
            replay: ReplayBuffer::new(cfg.replay_capacity),
            coverage: CoverageGrid::new(cfg.grid),
            streams: Streams::new(cfg.seed, offset),
            cfg,
            phase,
            policy,
            window,
            intrinsic,
            env,
            counters: Counters::default(),
            records: Vec::new(),
            evals: Vec::new(),
            pt_policy: None,
            step: 0,
            episodes: 0,
            next_episode_id: next_episode_id + 1,
            trace: None,
            record_steps: None,
            obs,
            episode_id: next_episode_id,
            episode: Vec::new(),
            episode_index: 0,
            ep_intrinsic: 0.0,
            ep_extrinsic: 0.0,
            last: MetricRecord::default(),
            started: cfg_wall.then(Instant::now),
        };
        r.coverage.visit([r.obs[0], r.obs[1]]);
        r.refresh_particles();
        r
    }

    fn sr(&self) -> bool {
        self.policy.agent.is_sr()
    }

    /// APT draws its particles from the window when the agent has one.
    fn uses_window_particles(&self) -> bool {
        self.sr() && self.intrinsic.kind() == IntrinsicKind::AptKnn
    }

    fn refresh_particles(&mut self) {
        if !self.uses_window_particles() {
            return;
        }
        if let IntrinsicReward::AptKnn(apt) = &mut self.intrinsic {
            apt.set_particles(self.window.iter().map(|t| t.state.as_slice()));
        }
    }

    pub fn observation(&self) -> &[f64] {
        &self.obs
    }

    /// Query, retrieve, expand and aggregate for the current state.
    fn retrieve(&mut self, ops: &mut Vec<Op>) -> Result<(Vec<f64>, Option<Context>, bool)> {
        let dim = self.policy.agent.ref_dim().expect("SR agent");
        let query_phase = self.phase;
        let decision = make_query(
            &mut self.policy.query,
            self.cfg.query_strategy,
            &self.obs,
            self.episode_index,
            query_phase,
        )?;
        ops.push(Op::Query);
        self.counters.queries += 1;
        let k = self.cfg.k;
        let ready = self.window.len() >= k;
        let (indices, recorded) = match decision {
            QueryDecision::Noise => {
                return Ok((noise_reference(dim, &mut self.streams.noise), None, false));
            }
            QueryDecision::Point { query, recorded } => {
                let idx = if ready {
                    self.window.knn_search(&query, k).indices
                } else {
                    Vec::new()
                };
                (idx, recorded)
            }
            QueryDecision::Uniform => {
                let idx = if ready {
                    self.window.sample_uniform(k, &mut self.streams.retrieval)
                } else {
                    Vec::new()
                };
                (idx, false)
            }
        };
        ops.push(Op::Retrieve);
        self.counters.retrievals += 1;
        let set = self.window.expand_trajectories(&indices, self.cfg.traj_len)?;
        ops.push(Op::Expand);
        self.counters.expands += 1;
        self.counters.padded_lists += set.padded as u64;
        if set
            .neighbor_starts
            .iter()
            .any(|&i| self.window.get(i).episode_id == self.episode_id)
        {
            self.counters.current_episode_hits += 1;
        }
        if set.is_empty() {
            self.counters.warmup_steps += 1;
            return Ok((vec![0.0; dim], None, recorded));
        }
        let u = self.policy.agent.reference(&set, &self.obs)?;
        Ok((u, Some(Arc::from(set.flat_states())), recorded))
    }

    fn expected_ops(&self) -> &'static [Op] {
        if !self.sr() {
            &[Op::Act]
        } else if self.cfg.query_strategy == QueryStrategy::NoiseReference {
            &[Op::Query, Op::Act]
        } else {
            &[Op::Query, Op::Retrieve, Op::Expand, Op::Act]
        }
    }

    /// One environment step, plus any episode-end bookkeeping and agent
    /// update that falls on it.
    pub fn step(&mut self) -> Result<()> {
        let mut ops = Vec::with_capacity(5);
        let (reference, context, recorded) = if self.sr() {
            let (u, c, r) = self.retrieve(&mut ops)?;
            (Some(u), c, r)
        } else {
            (None, None, false)
        };
        let action = if (self.step as usize) < self.cfg.seed_frames {
            let ad = self.policy.agent.action_dim();
            (0..ad).map(|_| self.streams.explore.random_range(-1.0..=1.0)).collect()
        } else {
            self.policy
                .agent
                .act(&self.obs, reference.as_deref(), true, &mut self.streams.explore)?
        };
        ops.push(Op::Act);
        self.counters.acts += 1;

        let out = self.env.step(&action)?;
        let next = out.observation;
        let r_ext = out.reward;
        let r_int = if self.phase == Phase::Pretrain {
            let r = self.intrinsic.reward(&next);
            if !self.uses_window_particles() {
                self.intrinsic.observe(&next)?;
            }
            r
        } else {
            0.0
        };
        let r_agent = if self.phase == Phase::Pretrain { r_int } else { r_ext };
        if recorded {
            self.policy.query.record_reward(r_agent)?;
        }
        self.coverage.visit([next[0], next[1]]);
        self.ep_intrinsic += r_int;
        self.ep_extrinsic += r_ext;
        let step_in_episode = self.env.step - 1;
        if self.sr() {
            self.episode.push(Transition {
                state: self.obs.clone(),
                action: action.clone(),
                reward: r_agent,
                next_state: next.clone(),
                episode_id: self.episode_id,
                step_in_episode,
            });
        }
        self.replay.push(Entry {
            state: std::mem::take(&mut self.obs),
            action: action.clone(),
            reward: r_agent,
            next_state: next.clone(),
            episode_id: self.episode_id,
            step: step_in_episode,
            last: out.done,
            context,
        });
        self.obs = next;
        self.step += 1;
        self.counters.env_steps += 1;

        if out.done {
            self.end_episode(&mut ops)?;
        }
        if ops
            .iter()
            .filter(|&&o| o != Op::Append)
            .copied()
            .ne(self.expected_ops().iter().copied())
        {
            self.counters.order_violations += 1;
        }
        if let Some(t) = &mut self.trace {
            t.push(ops);
        }

        let mut losses = None;
        let ready = self.step as usize >= self.cfg.seed_frames && self.replay.len() >= self.cfg.n_step;
        if ready && self.step.is_multiple_of(self.cfg.update_every as u64) {
            losses = Some(self.update()?);
        }
        if let Some(log) = &mut self.record_steps {
            log.push(StepLog { action, losses });
        }

        if self.step.is_multiple_of(self.cfg.eval_every as u64) && self.cfg.eval_episodes > 0 {
            self.run_eval()?;
        }
        if self.step.is_multiple_of(self.cfg.log_every as u64) {
            self.log();
        }
        Ok(())
    }

    fn end_episode(&mut self, ops: &mut Vec<Op>) -> Result<()> {
        if self.sr() {
            let episode = std::mem::take(&mut self.episode);
            self.window.append_episode(&episode, self.cfg.horizon)?;
            ops.push(Op::Append);
            self.counters.appends += 1;
            if !self.step.is_multiple_of(self.cfg.horizon as u64) {
                self.counters.off_boundary_appends += 1;
            }
            self.refresh_particles();
        }
        if let Some(stats) = self.policy.query.finish_episode(&self.obs)? {
            self.last.query_loss = stats.loss;
            self.counters.query_updates += 1;
        }
        self.last.intrinsic_return = self.ep_intrinsic;
        self.last.extrinsic_return = self.ep_extrinsic;
        self.ep_intrinsic = 0.0;
        self.ep_extrinsic = 0.0;
        self.episodes += 1;
        self.episode_index += 1;
        self.episode_id = self.next_episode_id;
        self.next_episode_id += 1;
        self.obs = self.env.reset();
        self.coverage.visit([self.obs[0], self.obs[1]]);
        Ok(())
    }

    fn update(&mut self) -> Result<(f64, f64)> {
        let source = match self.phase {
            Phase::Pretrain => RewardSource::Intrinsic(&self.intrinsic),
            Phase::Finetune => RewardSource::Stored,
        };
        let batch = self.replay.sample(
            self.cfg.batch_size,
            self.cfg.n_step,
            self.cfg.gamma,
            source,
            &mut self.streams.replay,
        )?;
        let agent = &mut self.policy.agent;
        let (c, a) = match agent.ref_dim() {
            None => agent.update(&batch, BatchRefs::NONE)?,
            Some(dim) if self.cfg.query_strategy == QueryStrategy::NoiseReference => {
                let n = batch.rows * dim;
                let now: Vec<f64> = noise_reference(n, &mut self.streams.noise);
                let next: Vec<f64> = noise_reference(n, &mut self.streams.noise);
                agent.update(
                    &batch,
                    BatchRefs {
                        now: RefInput::Vectors(&now),
                        next: RefInput::Vectors(&next),
                    },
                )?
            }
            Some(_) => {
                let now = batch.context_refs();
                let next = batch.next_context_refs();
                agent.update(
                    &batch,
                    BatchRefs {
                        now: RefInput::Contexts(&now),
                        next: RefInput::Contexts(&next),
                    },
                )?
            }
        };
        self.last.critic_loss = c;
        self.last.actor_loss = a;
        self.counters.agent_updates += 1;
        Ok((c, a))
    }

    /// Evaluates the current policy; in finetuning also measures the KL to
    /// the pretrained policy on the visited evaluation states.
    pub fn run_eval(&mut self) -> Result<EvalResult> {
        let res = evaluate(&self.policy, &self.window, &self.cfg, self.cfg.eval_episodes)?;
        self.evals.push((self.step, res.mean_return));
        if let Some(pt) = &self.pt_policy {
            let states: Vec<&Vec<f64>> = res.states.iter().step_by(10).collect();
            let mut rng_a = rng_stream(self.cfg.seed, stream::EVAL + 2);
            let mut rng_b = rng_a.clone();
            let mut ft_means = Vec::with_capacity(states.len());
            let mut pt_means = Vec::with_capacity(states.len());
            for s in states {
                ft_means.push(self.policy.action(&self.window, s, &mut rng_a)?);
                pt_means.push(pt.action(&self.window, s, &mut rng_b)?);
            }
            self.last.kl_to_pt = policy_kl(&ft_means, &pt_means, KL_SIGMA);
        }
        Ok(res)
    }

    fn log(&mut self) {
        let wall_ms = self.started.map_or(0, |t| t.elapsed().as_millis() as u64);
        self.records.push(MetricRecord {
            step: self.step,
            episode: self.episodes,
            coverage: self.coverage.fraction(),
            wall_ms,
            ..self.last
        });
    }

    /// Runs `steps` environment steps.
    pub fn run(&mut self, steps: usize) -> Result<()> {
        for _ in 0..steps {
            self.step()?;
        }
        Ok(())
    }

    pub fn last_metrics(&self) -> MetricRecord {
        self.last
    }
}
