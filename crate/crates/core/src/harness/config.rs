use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::agents::{DdpgConfig, DistillConfig};
use crate::envs::{IntrinsicConfig, IntrinsicKind, Task, EPISODE_LEN};
use crate::retrieval::{Similarity, DEFAULT_K, DEFAULT_TRAJ_LEN, DEFAULT_WINDOW};
use crate::sr::{AggregatorDims, QueryConfig, QueryStrategy};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    Mab,
    #[default]
    Pointmass,
}

/// Everything that defines a run. Missing keys take their defaults;
/// unknown keys are an error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub env: EnvKind,
    pub intrinsic: IntrinsicKind,
    pub task: Task,
    pub query_strategy: QueryStrategy,
    pub sr_enabled: bool,
    pub k: usize,
    pub traj_len: usize,
    pub window: usize,
    pub ref_dim: usize,
    pub enc_hidden: usize,
    pub heads: usize,
    pub similarity: Similarity,
    pub pt_steps: usize,
    pub ft_steps: usize,
    pub horizon: usize,

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

    pub query_hidden: usize,
    pub query_lr: f64,
    pub ppo_clip: f64,
    pub gae_lambda: f64,
    pub ppo_epochs: usize,
    pub ppo_minibatches: usize,
    pub identity_coef: f64,
    pub query_init_log_std: f64,

    pub grid: usize,
    pub apt_k: usize,
    pub apt_particles: usize,
    pub rnd_hidden: usize,
    pub rnd_lr: f64,

    pub eval_every: usize,
    pub eval_episodes: usize,
    pub log_every: usize,

    pub distill_epochs: usize,
    pub distill_lr: f64,
    pub distill_sigma: f64,
    pub distill_batch: usize,
    pub distill_holdout: f64,

    /// Zero and freeze the reference-input weights of actor and critic.
    pub zero_reference_inputs: bool,
    /// Fill the `wall_ms` column; off by default so metric files are
    /// reproducible byte-for-byte.
    pub log_wall_time: bool,
    pub out_dir: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let d = DdpgConfig::default();
        let q = QueryConfig::default();
        let i = IntrinsicConfig::default();
        let dist = DistillConfig::default();
        Self {
            seed: 0,
            env: EnvKind::Pointmass,
            intrinsic: IntrinsicKind::CountGrid,
            task: Task::Explore,
            query_strategy: QueryStrategy::Learned,
            sr_enabled: true,
            k: DEFAULT_K,
            traj_len: DEFAULT_TRAJ_LEN,
            window: DEFAULT_WINDOW,
            ref_dim: 256,
            enc_hidden: 256,
            heads: 4,
            similarity: Similarity::Cosine,
            pt_steps: 100_000,
            ft_steps: 20_000,
            horizon: EPISODE_LEN,
            hidden: d.hidden,
            batch_size: d.batch_size,
            lr: d.lr,
            gamma: d.gamma,
            tau: d.tau,
            n_step: d.n_step,
            update_every: d.update_every,
            seed_frames: d.seed_frames,
            expl_std: d.expl_std,
            expl_clip: d.expl_clip,
            replay_capacity: d.replay_capacity,
            query_hidden: q.hidden,
            query_lr: q.lr,
            ppo_clip: q.clip,
            gae_lambda: q.gae_lambda,
            ppo_epochs: q.epochs,
            ppo_minibatches: q.minibatches,
            identity_coef: q.identity_coef,
            query_init_log_std: q.init_log_std,
            grid: i.grid,
            apt_k: i.apt_k,
            apt_particles: i.apt_particles,
            rnd_hidden: i.rnd_hidden,
            rnd_lr: i.rnd_lr,
            eval_every: 2000,
            eval_episodes: 10,
            log_every: 500,
            distill_epochs: dist.epochs,
            distill_lr: dist.lr,
            distill_sigma: dist.sigma,
            distill_batch: dist.batch_size,
            distill_holdout: dist.holdout_frac,
            zero_reference_inputs: false,
            log_wall_time: false,
            out_dir: None,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("k", self.k),
            ("traj_len", self.traj_len),
            ("window", self.window),
            ("ref_dim", self.ref_dim),
            ("enc_hidden", self.enc_hidden),
            ("heads", self.heads),
            ("horizon", self.horizon),
            ("hidden", self.hidden),
            ("batch_size", self.batch_size),
            ("n_step", self.n_step),
            ("update_every", self.update_every),
            ("replay_capacity", self.replay_capacity),
            ("query_hidden", self.query_hidden),
            ("ppo_epochs", self.ppo_epochs),
            ("ppo_minibatches", self.ppo_minibatches),
            ("grid", self.grid),
            ("eval_every", self.eval_every),
            ("log_every", self.log_every),
            ("distill_batch", self.distill_batch),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.ref_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "ref_dim {} is not divisible by heads {}",
                self.ref_dim, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.distill_holdout) {
            return Err(Error::Config("distill_holdout must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn ddpg(&self) -> DdpgConfig {
        DdpgConfig {
            hidden: self.hidden,
            batch_size: self.batch_size,
            lr: self.lr,
            gamma: self.gamma,
            tau: self.tau,
            n_step: self.n_step,
            update_every: self.update_every,
            seed_frames: self.seed_frames,
            expl_std: self.expl_std,
            expl_clip: self.expl_clip,
            replay_capacity: self.replay_capacity,
        }
    }

    pub fn query(&self) -> QueryConfig {
        QueryConfig {
            hidden: self.query_hidden,
            lr: self.query_lr,
            clip: self.ppo_clip,
            gae_lambda: self.gae_lambda,
            gamma: self.gamma,
            epochs: self.ppo_epochs,
            minibatches: self.ppo_minibatches,
            identity_coef: self.identity_coef,
            init_log_std: self.query_init_log_std,
            ..QueryConfig::default()
        }
    }

    pub fn intrinsic_cfg(&self) -> IntrinsicConfig {
        IntrinsicConfig {
            grid: self.grid,
            apt_k: self.apt_k,
            apt_particles: self.apt_particles,
            rnd_hidden: self.rnd_hidden,
            rnd_lr: self.rnd_lr,
            ..IntrinsicConfig::default()
        }
    }

    pub fn distill(&self) -> DistillConfig {
        DistillConfig {
            epochs: self.distill_epochs,
            lr: self.distill_lr,
            sigma: self.distill_sigma,
            batch_size: self.distill_batch,
            holdout_frac: self.distill_holdout,
        }
    }

    pub fn sr_dims(&self, state_dim: usize) -> Option<AggregatorDims> {
        self.sr_enabled.then_some(AggregatorDims {
            state_dim,
            ref_dim: self.ref_dim,
            enc_hidden: self.enc_hidden,
            heads: self.heads,
            k: self.k,
            traj_len: self.traj_len,
        })
    }

    /// Architecture-relevant differences to `other`, as `key: a vs b`.
    pub fn architecture_diff(&self, other: &RunConfig) -> Vec<String> {
        let mut out = Vec::new();
        macro_rules! cmp {
            ($($f:ident),*) => {$(
                if self.$f != other.$f {
                    out.push(format!("{}: {:?} vs {:?}", stringify!($f), self.$f, other.$f));
                }
            )*};
        }
        cmp!(env, sr_enabled, hidden, query_hidden);
        if self.sr_enabled && other.sr_enabled {
            cmp!(k, traj_len, ref_dim, enc_hidden, heads);
        }
        out
    }
}
