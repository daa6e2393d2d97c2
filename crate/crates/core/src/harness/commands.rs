//! The runs behind each CLI subcommand. Every function writes its
//! artifacts under `out` and returns the JSON summary it also saves.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::Serialize;
use serde_json::{json, Value};

use super::checkpoint::{self, save_runner, save_student, CheckpointKind};
use super::config::RunConfig;
use super::mab_study::{regret_csv, run_mab_study};
use super::metrics::{aggregate_metrics, metrics_csv, Aggregate};
use super::runner::{distill_rng, evaluate, Policy, Runner};
use crate::agents::{cosine_lr, distill, Ddpg, RefInput, StudentPolicy, SR_PREFIX};
use crate::envs::maze;
use crate::{Error, Result};

fn write(path: PathBuf, text: &str) -> Result<()> {
    fs::write(path, text)?;
    Ok(())
}

fn eval_csv(rows: &[(u64, f64)]) -> String {
    let mut s = String::from("step,mean_return\n");
    for (step, r) in rows {
        s.push_str(&format!("{step},{r}\n"));
    }
    s
}

/// Maze constants, declared in every run summary.
pub fn maze_constants() -> Value {
    json!({
        "episode_len": maze::EPISODE_LEN,
        "wall_half_len": maze::WALL_HALF_LEN,
        "wall_thickness": maze::WALL_THICKNESS,
        "velocity_decay": maze::VELOCITY_DECAY,
        "force_scale": maze::FORCE_SCALE,
        "goal_radius": maze::GOAL_RADIUS,
    })
}

fn finish_summary(out: &Path, summary: Value) -> Result<Value> {
    write(
        out.join("summary.json"),
        &(serde_json::to_string_pretty(&summary)? + "\n"),
    )?;
    Ok(summary)
}

/// Runs `steps` steps, saving a diagnostic checkpoint if the loop fails.
fn drive(runner: &mut Runner, steps: usize, out: &Path, pretrain_steps: u64) -> Result<()> {
    if let Err(e) = runner.run(steps) {
        let _ = save_runner(&out.join("failed.ckpt"), runner, pretrain_steps);
        return Err(e);
    }
    Ok(())
}

fn final_eval(runner: &mut Runner) -> Result<f64> {
    if runner.cfg.eval_episodes == 0 {
        return Ok(0.0);
    }
    match runner.evals.last() {
        Some(&(step, r)) if step == runner.step => Ok(r),
        _ => Ok(runner.run_eval()?.mean_return),
    }
}

fn write_logs(out: &Path, runner: &Runner) -> Result<()> {
    write(out.join("metrics.csv"), &metrics_csv(&runner.records))?;
    write(out.join("eval.csv"), &eval_csv(&runner.evals))
}

pub fn run_pretrain(cfg: RunConfig, out: &Path) -> Result<Value> {
    fs::create_dir_all(out)?;
    let steps = cfg.pt_steps;
    let mut runner = Runner::pretrain(cfg)?;
    drive(&mut runner, steps, out, 0)?;
    let final_return = final_eval(&mut runner)?;
    write_logs(out, &runner)?;
    let ckpt = out.join("pretrain.ckpt");
    save_runner(&ckpt, &runner, runner.step)?;
    finish_summary(
        out,
        json!({
            "command": "pretrain",
            "seed": runner.cfg.seed,
            "steps": runner.step,
            "episodes": runner.episodes,
            "coverage": runner.coverage.fraction(),
            "final_eval_return": final_return,
            "window_len": runner.window.len(),
            "counters": runner.counters,
            "checkpoint": ckpt,
            "config": runner.cfg,
            "maze": maze_constants(),
        }),
    )
}

pub fn run_finetune(cfg: RunConfig, from: &Path, out: &Path) -> Result<Value> {
    fs::create_dir_all(out)?;
    let loaded = checkpoint::load(from)?;
    if loaded.sidecar.kind == CheckpointKind::Student {
        return Err(Error::Mismatch("cannot finetune a distilled student".into()));
    }
    let diff = loaded.sidecar.config.architecture_diff(&cfg);
    if !diff.is_empty() {
        return Err(Error::Mismatch(format!("checkpoint vs config: {}", diff.join(", "))));
    }
    let pretrain_steps = loaded.sidecar.pretrain_steps;
    let window_at_start = loaded.window.len();
    let steps = cfg.ft_steps;
    let mut runner = Runner::finetune(
        cfg,
        loaded.agent,
        loaded.query,
        loaded.window,
        loaded.sidecar.next_episode_id,
    )?;
    let frozen_prefix = format!("{SR_PREFIX}critic");
    let frozen_before = runner.policy.agent.critic_store.snapshot(&frozen_prefix);
    drive(&mut runner, steps, out, pretrain_steps)?;
    let final_return = final_eval(&mut runner)?;
    let frozen_after = runner.policy.agent.critic_store.snapshot(&frozen_prefix);
    let frozen_drift: f64 = frozen_before
        .iter()
        .zip(&frozen_after)
        .map(|(a, b)| (a - b).abs())
        .sum();
    write_logs(out, &runner)?;
    let ckpt = out.join("finetune.ckpt");
    save_runner(&ckpt, &runner, pretrain_steps)?;
    finish_summary(
        out,
        json!({
            "command": "finetune",
            "seed": runner.cfg.seed,
            "task": runner.cfg.task.name(),
            "steps": runner.step,
            "episodes": runner.episodes,
            "pretrain_steps": pretrain_steps,
            "final_eval_return": final_return,
            "kl_to_pt": runner.last_metrics().kl_to_pt,
            "window_len_at_start": window_at_start,
            "frozen_critic_aggregator_drift": frozen_drift,
            "counters": runner.counters,
            "checkpoint": ckpt,
            "config": runner.cfg,
            "maze": maze_constants(),
        }),
    )
}

/// Action-matching report of a distillation run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DistillReport {
    pub mse_holdout: f64,
    pub mean_abs_diff: f64,
    pub return_ratio: f64,
    pub epochs: usize,
    pub final_lr: f64,
}

fn student_agent(cfg: &RunConfig, student: &StudentPolicy) -> Result<Ddpg> {
    let plain = RunConfig {
        sr_enabled: false,
        ..cfg.clone()
    };
    let (mut agent, _) = checkpoint::blank_agent(&plain, student.actor.state_dim, student.actor.action_dim)?;
    agent.actor_store.copy_values_from(&student.store)?;
    Ok(agent)
}

pub fn run_distill(cfg: RunConfig, from: &Path, out: &Path) -> Result<Value> {
    fs::create_dir_all(out)?;
    let loaded = checkpoint::load(from)?;
    let replay = loaded
        .replay
        .filter(|r| !r.is_empty())
        .ok_or_else(|| Error::Checkpoint("distillation needs a finetune checkpoint with its replay buffer".into()))?;
    let teacher = Policy {
        agent: loaded.agent,
        query: loaded.query,
        strategy: loaded.sidecar.config.query_strategy,
        k: loaded.sidecar.config.k,
        traj_len: loaded.sidecar.config.traj_len,
    };
    let (sd, ad) = (teacher.agent.state_dim(), teacher.agent.action_dim());

    // relabel every stored state with the teacher's deterministic action,
    // using the context it acted on
    let entries: Vec<_> = replay.iter().collect();
    let mut states = Vec::with_capacity(entries.len());
    let mut targets = Vec::with_capacity(entries.len());
    for chunk in entries.chunks(256) {
        let flat: Vec<f64> = chunk.iter().flat_map(|e| e.state.iter().copied()).collect();
        let ctx: Vec<Option<&[f64]>> = chunk.iter().map(|e| e.context.as_deref()).collect();
        let refs = if teacher.agent.is_sr() {
            RefInput::Contexts(&ctx)
        } else {
            RefInput::None
        };
        let acts = teacher.agent.act_batch(&flat, chunk.len(), refs)?;
        for (e, a) in chunk.iter().zip(acts.chunks(ad)) {
            states.push(e.state.clone());
            targets.push(a.to_vec());
        }
    }

    let dcfg = cfg.distill();
    let mut rng = distill_rng(cfg.seed);
    let mut idx: Vec<usize> = (0..states.len()).collect();
    idx.shuffle(&mut rng);
    let n_hold = ((states.len() as f64 * dcfg.holdout_frac).round() as usize).min(states.len() - 1);
    let (hold, train) = idx.split_at(n_hold);
    let pick = |ix: &[usize], v: &[Vec<f64>]| ix.iter().map(|&i| v[i].clone()).collect::<Vec<_>>();
    let mut student = StudentPolicy::new(sd, ad, cfg.hidden, &mut rng)?;
    let trace = distill(
        &mut student,
        &pick(train, &states),
        &pick(train, &targets),
        &dcfg,
        &mut rng,
    )?;

    let (mut se, mut ae, mut count) = (0.0, 0.0, 0usize);
    for &i in hold {
        let a = student.act(&states[i])?;
        for (x, y) in a.iter().zip(&targets[i]) {
            se += (x - y) * (x - y);
            ae += (x - y).abs();
            count += 1;
        }
    }
    let count = count.max(1) as f64;
    let student_agent = student_agent(&loaded.sidecar.config, &student)?;
    let student_policy = Policy {
        agent: student_agent,
        query: teacher.query.clone(),
        strategy: teacher.strategy,
        k: teacher.k,
        traj_len: teacher.traj_len,
    };
    let episodes = cfg.eval_episodes.max(1);
    let teacher_ret = evaluate(&teacher, &loaded.window, &loaded.sidecar.config, episodes)?.mean_return;
    let student_ret = evaluate(&student_policy, &loaded.window, &loaded.sidecar.config, episodes)?.mean_return;
    let report = DistillReport {
        mse_holdout: se / count,
        mean_abs_diff: ae / count,
        return_ratio: student_ret / teacher_ret,
        epochs: dcfg.epochs,
        final_lr: cosine_lr(dcfg.epochs, dcfg.epochs, dcfg.lr),
    };
    save_student(
        &out.join("student.ckpt"),
        &cfg,
        &student_policy.agent,
        loaded.sidecar.pretrain_steps,
    )?;
    let trace_csv: String = std::iter::once("epoch,loss\n".to_string())
        .chain(trace.iter().enumerate().map(|(i, l)| format!("{i},{l}\n")))
        .collect();
    write(out.join("distill_loss.csv"), &trace_csv)?;
    write(
        out.join("details.json"),
        &(serde_json::to_string_pretty(&json!({
            "teacher_return": teacher_ret,
            "student_return": student_ret,
            "train_states": train.len(),
            "holdout_states": hold.len(),
        }))? + "\n"),
    )?;
    let value = serde_json::to_value(&report)?;
    write(out.join("report.json"), &(serde_json::to_string_pretty(&value)? + "\n"))?;
    Ok(value)
}

pub fn run_eval(from: &Path, out: &Path) -> Result<Value> {
    fs::create_dir_all(out)?;
    let loaded = checkpoint::load(from)?;
    let cfg = loaded.sidecar.config.clone();
    let policy = Policy {
        agent: loaded.agent,
        query: loaded.query,
        strategy: cfg.query_strategy,
        k: cfg.k,
        traj_len: cfg.traj_len,
    };
    let res = evaluate(&policy, &loaded.window, &cfg, cfg.eval_episodes.max(1))?;
    let v = json!({
        "command": "eval",
        "kind": loaded.sidecar.kind,
        "task": cfg.task.name(),
        "episodes": res.returns.len(),
        "mean_return": res.mean_return,
        "returns": res.returns,
        "coverage": res.coverage,
    });
    write(out.join("eval.json"), &(serde_json::to_string_pretty(&v)? + "\n"))?;
    Ok(v)
}

pub fn run_mab(seeds: usize, horizon: usize, out: &Path) -> Result<Value> {
    fs::create_dir_all(out)?;
    let curves = run_mab_study(seeds, horizon, 10, 10.0);
    write(out.join("regret.csv"), &regret_csv(&curves))?;
    let lowest = curves
        .iter()
        .min_by(|a, b| a.final_mean().total_cmp(&b.final_mean()))
        .map(|c| c.agent.clone());
    let agents: Vec<Value> = curves
        .iter()
        .map(|c| {
            json!({
                "agent": c.agent,
                "final_mean": c.final_mean(),
                "final_stderr": c.stderr.last().copied().unwrap_or(0.0),
            })
        })
        .collect();
    finish_summary(
        out,
        json!({
            "command": "mab",
            "seeds": seeds,
            "horizon": horizon,
            "arms": 10,
            "noise": 10.0,
            "agents": agents,
            "lowest_regret": lowest,
        }),
    )
}

/// A finetune run summary as read back by `metrics`.
#[derive(Debug, Clone)]
struct RunSummary {
    task: String,
    group: String,
    sr_enabled: bool,
    pretrain_steps: u64,
    score: f64,
}

fn collect_summaries(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            collect_summaries(&p, out)?;
        } else if p.file_name().is_some_and(|n| n == "summary.json") {
            out.push(p);
        }
    }
    Ok(())
}

fn parse_summary(v: &Value) -> Option<RunSummary> {
    if v.get("command")?.as_str()? != "finetune" {
        return None;
    }
    let cfg = v.get("config")?;
    let sr_enabled = cfg.get("sr_enabled")?.as_bool()?;
    let strategy = cfg.get("query_strategy")?.as_str()?;
    Some(RunSummary {
        task: v.get("task")?.as_str()?.to_string(),
        group: if sr_enabled {
            format!("sr_{strategy}")
        } else {
            "plain".into()
        },
        sr_enabled,
        pretrain_steps: v.get("pretrain_steps")?.as_u64()?,
        score: v.get("final_eval_return")?.as_f64()?,
    })
}

/// Aggregates the finetune runs under `runs`. Expert scores come from
/// `experts` (a JSON map task → score) or, per task, from the best plain
/// agent trained from scratch.
pub fn run_metrics(runs: &Path, experts: Option<&Path>, out: &Path) -> Result<Value> {
    let mut paths = Vec::new();
    collect_summaries(runs, &mut paths)?;
    let mut summaries = Vec::new();
    for p in &paths {
        let v: Value = serde_json::from_str(&fs::read_to_string(p)?)?;
        if let Some(s) = parse_summary(&v) {
            summaries.push(s);
        }
    }
    let expert: BTreeMap<String, f64> = match experts {
        Some(f) => serde_json::from_str(&fs::read_to_string(f)?)?,
        None => {
            let mut m = BTreeMap::new();
            for s in summaries.iter().filter(|s| !s.sr_enabled && s.pretrain_steps == 0) {
                let e = m.entry(s.task.clone()).or_insert(f64::NEG_INFINITY);
                *e = f64::max(*e, s.score);
            }
            m
        }
    };
    let mut groups: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    let mut skipped = 0;
    for s in &summaries {
        match expert.get(&s.task) {
            Some(&e) if e > 0.0 => groups.entry(s.group.clone()).or_default().push((s.score, e)),
            _ => skipped += 1,
        }
    }
    let aggregates: BTreeMap<String, Aggregate> =
        groups.iter().map(|(k, v)| (k.clone(), aggregate_metrics(v))).collect();
    fs::create_dir_all(out)?;
    let v = json!({
        "command": "metrics",
        "runs": summaries.len(),
        "skipped_without_expert": skipped,
        "experts": expert,
        "groups": aggregates,
    });
    write(out.join("metrics.json"), &(serde_json::to_string_pretty(&v)? + "\n"))?;
    Ok(v)
}
