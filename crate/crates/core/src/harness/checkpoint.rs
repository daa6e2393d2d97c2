//! Run checkpoints: tensors in the binary format, plus a JSON sidecar with
//! the config, counters and RNG state.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::runner::{stream, Counters, Runner, Streams};
use crate::agents::{Ddpg, ReplayBuffer};
use crate::envs::PointMassMaze;
use crate::nn::checkpoint::{export_store, import_store, read_checkpoint, write_checkpoint, NamedTensors};
use crate::retrieval::ReferenceWindow;
use crate::sr::{Phase, QueryModule};
use crate::{rng_stream, Error, Result, Rng};

pub const SIDECAR_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Pretrain,
    Finetune,
    Student,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sidecar {
    pub version: u32,
    pub kind: CheckpointKind,
    pub config: RunConfig,
    pub state_dim: usize,
    pub action_dim: usize,
    /// Environment steps of the phase that wrote the checkpoint.
    pub steps: u64,
    pub episodes: u64,
    /// Pretraining steps behind these weights.
    pub pretrain_steps: u64,
    pub next_episode_id: u64,
    pub counters: Counters,
    pub streams: Option<Streams>,
    pub query_rng: Option<Rng>,
}

/// Everything restored from a checkpoint.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub sidecar: Sidecar,
    pub agent: Ddpg,
    pub query: QueryModule,
    pub window: ReferenceWindow,
    pub replay: Option<ReplayBuffer>,
}

pub fn sidecar_path(ckpt: &Path) -> PathBuf {
    ckpt.with_extension("json")
}

pub fn save(path: &Path, sidecar: &Sidecar, tensors: &NamedTensors) -> Result<()> {
    let f = File::create(path)?;
    let mut w = BufWriter::new(f);
    write_checkpoint(&mut w, tensors)?;
    std::io::Write::flush(&mut w)?;
    let text = serde_json::to_string_pretty(sidecar)?;
    std::fs::write(sidecar_path(path), text + "\n")?;
    Ok(())
}

fn agent_tensors(agent: &Ddpg, query: &QueryModule) -> NamedTensors {
    let mut t = export_store("actor", &agent.actor_store);
    t.extend(export_store("critic", &agent.critic_store));
    t.extend(export_store("target", &agent.critic_target));
    t.extend(export_store("query", &query.store));
    t
}

/// Saves a runner's agent, query module and window (and, when
/// finetuning, its replay buffer).
pub fn save_runner(path: &Path, runner: &Runner, pretrain_steps: u64) -> Result<()> {
    let mut tensors = agent_tensors(&runner.policy.agent, &runner.policy.query);
    tensors.extend(runner.window.to_tensors("window"));
    let kind = match runner.phase {
        Phase::Pretrain => CheckpointKind::Pretrain,
        Phase::Finetune => {
            tensors.extend(runner.replay.to_tensors("replay"));
            CheckpointKind::Finetune
        }
    };
    let sidecar = Sidecar {
        version: SIDECAR_VERSION,
        kind,
        config: runner.cfg.clone(),
        state_dim: runner.policy.agent.state_dim(),
        action_dim: runner.policy.agent.action_dim(),
        steps: runner.step,
        episodes: runner.episodes,
        pretrain_steps,
        next_episode_id: runner.next_episode_id,
        counters: runner.counters.clone(),
        streams: Some(runner.streams.clone()),
        query_rng: Some(runner.policy.query.rng.clone()),
    };
    save(path, &sidecar, &tensors)
}

/// Saves a retrieval-free student actor.
pub fn save_student(path: &Path, cfg: &RunConfig, agent: &Ddpg, pretrain_steps: u64) -> Result<()> {
    let sidecar = Sidecar {
        version: SIDECAR_VERSION,
        kind: CheckpointKind::Student,
        config: RunConfig {
            sr_enabled: false,
            ..cfg.clone()
        },
        state_dim: agent.state_dim(),
        action_dim: agent.action_dim(),
        steps: 0,
        episodes: 0,
        pretrain_steps,
        next_episode_id: 0,
        counters: Counters::default(),
        streams: None,
        query_rng: None,
    };
    save(path, &sidecar, &export_store("actor", &agent.actor_store))
}

/// Builds an untrained agent and query module with the shapes `cfg`
/// describes.
pub fn blank_agent(cfg: &RunConfig, state_dim: usize, action_dim: usize) -> Result<(Ddpg, QueryModule)> {
    let agent = Ddpg::new(
        state_dim,
        action_dim,
        cfg.ddpg(),
        cfg.sr_dims(state_dim),
        &mut rng_stream(cfg.seed, stream::INIT),
        &mut rng_stream(cfg.seed, stream::SR_INIT),
    )?;
    let query = QueryModule::new(
        state_dim,
        cfg.query(),
        &mut rng_stream(cfg.seed, stream::QUERY_INIT),
        rng_stream(cfg.seed, stream::QUERY_SAMPLE),
    );
    Ok((agent, query))
}

pub fn load(path: &Path) -> Result<Loaded> {
    let side = sidecar_path(path);
    let text = std::fs::read_to_string(&side)
        .map_err(|e| Error::Checkpoint(format!("cannot read sidecar {}: {e}", side.display())))?;
    let sidecar: Sidecar = serde_json::from_str(&text)?;
    if sidecar.version != SIDECAR_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported sidecar version {}",
            sidecar.version
        )));
    }
    let f = File::open(path).map_err(|e| Error::Checkpoint(format!("cannot open {}: {e}", path.display())))?;
    let tensors = read_checkpoint(BufReader::new(f))?;
    let cfg = &sidecar.config;
    if (sidecar.state_dim, sidecar.action_dim) != (PointMassMaze::OBS_DIM, PointMassMaze::ACTION_DIM) {
        return Err(Error::Mismatch(format!(
            "checkpoint has {}-dim states and {}-dim actions",
            sidecar.state_dim, sidecar.action_dim
        )));
    }
    let (mut agent, mut query) = blank_agent(cfg, sidecar.state_dim, sidecar.action_dim)?;
    import_store("actor", &mut agent.actor_store, &tensors)?;
    if sidecar.kind != CheckpointKind::Student {
        import_store("critic", &mut agent.critic_store, &tensors)?;
        import_store("target", &mut agent.critic_target, &tensors)?;
        import_store("query", &mut query.store, &tensors)?;
    }
    if let Some(rng) = &sidecar.query_rng {
        query.rng = rng.clone();
    }
    let window = if tensors.iter().any(|(n, _)| n.starts_with("window.")) {
        ReferenceWindow::from_tensors("window", &tensors, cfg.similarity)?
    } else {
        ReferenceWindow::with_similarity(cfg.window, cfg.similarity)
    };
    let replay = if tensors.iter().any(|(n, _)| n.starts_with("replay.")) {
        Some(ReplayBuffer::from_tensors("replay", &tensors)?)
    } else {
        None
    };
    Ok(Loaded {
        sidecar,
        agent,
        query,
        window,
        replay,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> RunConfig {
        RunConfig {
            horizon: 10,
            k: 2,
            traj_len: 2,
            ref_dim: 4,
            enc_hidden: 4,
            heads: 1,
            hidden: 8,
            query_hidden: 4,
            batch_size: 4,
            seed_frames: 10,
            eval_every: 1000,
            log_every: 10,
            ..RunConfig::default()
        }
    }

    #[test]
    fn roundtrip_restores_agent_and_window() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pt.ckpt");
        let mut r = Runner::pretrain(tiny()).unwrap();
        r.run(30).unwrap();
        save_runner(&path, &r, 30).unwrap();
        let l = load(&path).unwrap();
        assert_eq!(l.sidecar.kind, CheckpointKind::Pretrain);
        assert_eq!(
            l.agent.actor_store.snapshot(""),
            r.policy.agent.actor_store.snapshot("")
        );
        assert_eq!(
            l.agent.critic_target.snapshot(""),
            r.policy.agent.critic_target.snapshot("")
        );
        assert_eq!(l.query.store.snapshot(""), r.policy.query.store.snapshot(""));
        assert_eq!(l.window.len(), 30);
        assert!(l.window.iter().zip(r.window.iter()).all(|(a, b)| a == b));
        assert!(l.replay.is_none());
        assert_eq!(l.sidecar.next_episode_id, 4);
    }

    #[test]
    fn missing_sidecar_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        std::fs::write(&path, b"SRRL").unwrap();
        assert!(matches!(load(&path), Err(Error::Checkpoint(_))));
    }
}
