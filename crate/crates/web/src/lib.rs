//! Browser bindings for the demo page: bandit regret curves, a live
//! point-mass maze run with a visitation heatmap, and a retrieval
//! explorer showing which stored trajectories a query pulls in and how
//! the attention heads weight them.

use selfref::envs::cell_of;
use selfref::harness::{run_mab_study, RunConfig, Runner};
use selfref::sr::QueryStrategy;
use serde_json::json;
use wasm_bindgen::prelude::*;

const GRID: usize = 40;
/// Points per curve handed to the page.
const CURVE_POINTS: usize = 200;

fn js_err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

/// Mean cumulative regret of the five bandit agents as JSON:
/// `[{agent, t: [...], mean: [...], stderr: [...]}]`.
#[wasm_bindgen]
pub fn regret_curves(seeds: usize, horizon: usize, arms: usize, noise: f64) -> Result<String, JsError> {
    if seeds == 0 || horizon == 0 || arms == 0 {
        return Err(JsError::new("seeds, horizon and arms must be positive"));
    }
    let stride = horizon.div_ceil(CURVE_POINTS);
    let curves: Vec<_> = run_mab_study(seeds, horizon, arms, noise)
        .into_iter()
        .map(|c| {
            let idx: Vec<usize> = (stride - 1..horizon).step_by(stride).collect();
            json!({
                "agent": c.agent,
                "t": idx.iter().map(|i| i + 1).collect::<Vec<_>>(),
                "mean": idx.iter().map(|&i| c.mean[i]).collect::<Vec<_>>(),
                "stderr": idx.iter().map(|&i| c.stderr[i]).collect::<Vec<_>>(),
            })
        })
        .collect();
    serde_json::to_string(&curves).map_err(js_err)
}

fn strategy(name: &str) -> Result<QueryStrategy, JsError> {
    serde_json::from_value(json!(name)).map_err(|_| JsError::new(&format!("unknown query strategy {name}")))
}

/// A pretraining run small enough to step from the UI thread.
#[wasm_bindgen]
pub struct MazeSession {
    runner: Runner,
    visits: Vec<u32>,
    trail: Vec<[f64; 2]>,
}

#[wasm_bindgen]
impl MazeSession {
    /// `strategy` is one of `learned`, `current_state`, `random_sample`,
    /// `noise_reference`; `sr = false` gives the plain agent.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u64, sr: bool, strategy_name: &str) -> Result<MazeSession, JsError> {
        let cfg = RunConfig {
            seed,
            sr_enabled: sr,
            query_strategy: strategy(strategy_name)?,
            k: 4,
            traj_len: 3,
            ref_dim: 8,
            enc_hidden: 16,
            heads: 2,
            hidden: 32,
            query_hidden: 16,
            batch_size: 32,
            seed_frames: 1000,
            window: 20_000,
            eval_episodes: 0,
            log_every: 1000,
            ..RunConfig::default()
        };
        let runner = Runner::pretrain(cfg).map_err(js_err)?;
        let mut s = MazeSession {
            runner,
            visits: vec![0; GRID * GRID],
            trail: Vec::new(),
        };
        s.record();
        Ok(s)
    }

    fn record(&mut self) {
        let o = self.runner.observation();
        let p = [o[0], o[1]];
        let (cx, cy) = cell_of(p, GRID);
        self.visits[cy * GRID + cx] += 1;
        self.trail.push(p);
        if self.trail.len() > 400 {
            self.trail.remove(0);
        }
    }

    /// Advances `n` environment steps.
    pub fn step(&mut self, n: usize) -> Result<(), JsError> {
        for _ in 0..n {
            self.runner.step().map_err(js_err)?;
            self.record();
        }
        Ok(())
    }

    pub fn steps(&self) -> u64 {
        self.runner.step
    }

    pub fn grid(&self) -> usize {
        GRID
    }

    /// Visit counts, row-major with row 0 at y = -1.
    pub fn visits(&self) -> Vec<u32> {
        self.visits.clone()
    }

    /// Fraction of reachable cells visited (on the run's coverage grid).
    pub fn coverage(&self) -> f64 {
        self.runner.coverage.fraction()
    }

    /// Recent positions as a flat `[x0, y0, x1, y1, ...]` list.
    pub fn trail(&self) -> Vec<f64> {
        self.trail.iter().flatten().copied().collect()
    }

    pub fn window_len(&self) -> usize {
        self.runner.window.len()
    }

    /// Retrieval for a standing query at `(x, y)` as JSON: the query the
    /// module forms, the expanded neighbor trajectories and the actor's
    /// attention weights (`[head][slot]`).
    pub fn explain(&self, x: f64, y: f64) -> Result<String, JsError> {
        let policy = &self.runner.policy;
        let state = [x, y, 0.0, 0.0];
        let Some(agg) = policy.agent.actor.net.agg.as_ref() else {
            return Err(JsError::new("the plain agent does not retrieve"));
        };
        let query = match policy.strategy {
            QueryStrategy::Learned => policy.query.mean(&state).map_err(js_err)?,
            _ => state.to_vec(),
        };
        let window = &self.runner.window;
        if window.len() < policy.k {
            return Ok(json!({"query": query, "trajectories": [], "weights": [], "heads": agg.dims.heads}).to_string());
        }
        let hits = window.knn_search(&query, policy.k);
        let set = window
            .expand_trajectories(&hits.indices, policy.traj_len)
            .map_err(js_err)?;
        let (_, weights) = agg.explain(&policy.agent.actor_store, &set, &state).map_err(js_err)?;
        let trajectories: Vec<Vec<[f64; 2]>> = set
            .trajectories
            .iter()
            .map(|t| t.iter().map(|s| [s[0], s[1]]).collect())
            .collect();
        Ok(json!({
            "query": query,
            "trajectories": trajectories,
            "weights": weights,
            "heads": agg.dims.heads,
        })
        .to_string())
    }
}
