//! End-to-end acceptance checks. Runs as a plain binary so every check
//! prints its own PASS/FAIL line; the process fails if any check fails.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::{Rng as _, SeedableRng};
use selfref::agents::{ActorNet, CriticNet, RefInput, SR_PREFIX};
use selfref::envs::cumulative_regret;
use selfref::harness::{
    aggregate_metrics, iqm, optimality_gap, run_distill, run_finetune, run_mab_study, run_pretrain, RunConfig, Runner,
};
use selfref::nn::gradcheck::check_gradients;
use selfref::nn::{Init, Mlp, MultiHeadAttention, OutputActivation, ParamStore};
use selfref::retrieval::{ReferenceWindow, Transition};
use selfref::sr::{query_actor_loss, AggregatorDims, PpoBatch, QueryConfig, QueryModule};
use selfref::Rng;

type Outcome = Result<String, String>;
type Check = (&'static str, fn() -> Outcome);

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn bandit_ordering() -> Outcome {
    let curves = run_mab_study(10, 1000, 10, 10.0);
    let finals: Vec<(String, f64)> = curves.iter().map(|c| (c.agent.clone(), c.final_mean())).collect();
    let best = finals
        .iter()
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(n, _)| n.clone())
        .unwrap_or_default();
    let strict = {
        let cr = finals.iter().find(|(n, _)| n == "counts_regression").map(|f| f.1);
        cr.is_some_and(|c| {
            finals
                .iter()
                .filter(|(n, _)| n != "counts_regression")
                .all(|(_, v)| c < *v)
        })
    };
    let summary: Vec<String> = finals.iter().map(|(n, v)| format!("{n}={v:.1}")).collect();
    check(strict && best != "random", summary.join(" "))
}

fn random_window(rng: &mut Rng, episodes: usize, horizon: usize, dim: usize) -> ReferenceWindow {
    let mut w = ReferenceWindow::new(episodes * horizon);
    for e in 0..episodes {
        let ep: Vec<Transition> = (0..horizon)
            .map(|t| {
                // small integer grid so that exact ties and zero vectors occur
                let state: Vec<f64> = (0..dim).map(|_| rng.random_range(-2i32..=2) as f64 * 0.5).collect();
                Transition {
                    next_state: state.clone(),
                    state,
                    action: vec![0.0],
                    reward: 0.0,
                    episode_id: e as u64,
                    step_in_episode: t,
                }
            })
            .collect();
        w.append_episode(&ep, horizon).expect("complete episode");
    }
    w
}

fn brute_force_knn(states: &[Vec<f64>], query: &[f64], k: usize) -> Vec<usize> {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let qn = norm(query);
    let mut scored: Vec<(f64, usize)> = states
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let sn = norm(s);
            let score = if qn == 0.0 || sn == 0.0 {
                -1.0
            } else {
                query.iter().zip(s).map(|(a, b)| a * b).sum::<f64>() / (qn * sn)
            };
            (score, i)
        })
        .collect();
    // stable sort keeps lower indices first among equal scores
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    scored.into_iter().take(k).map(|(_, i)| i).collect()
}

fn knn_matches_brute_force() -> Outcome {
    let mut rng = Rng::seed_from_u64(2024);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let dim = rng.random_range(1..=5);
        let horizon = rng.random_range(1..=8);
        let episodes = rng.random_range(1..=12);
        let w = random_window(&mut rng, episodes, horizon, dim);
        let query: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let k = rng.random_range(1..=w.len() + 3);
        let states: Vec<Vec<f64>> = w.iter().map(|t| t.state.clone()).collect();
        if w.knn_search(&query, k).indices != brute_force_knn(&states, &query, k) {
            mismatches += 1;
        }
    }
    check(mismatches == 0, format!("{mismatches}/1000 instances differ"))
}

fn dims(rng: &mut Rng) -> AggregatorDims {
    let heads = rng.random_range(1..=2);
    AggregatorDims {
        state_dim: 3,
        ref_dim: 2 * heads,
        enc_hidden: 5,
        heads,
        k: rng.random_range(1..=3),
        traj_len: rng.random_range(1..=2),
    }
}

fn uniform(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Worst relative error over 20 random instances of one network family.
fn worst_over_instances<F>(mut instance: F) -> Result<f64, String>
where
    F: FnMut(&mut Rng) -> selfref::Result<f64>,
{
    let mut worst: f64 = 0.0;
    for seed in 0..20 {
        let mut rng = Rng::seed_from_u64(seed);
        worst = worst.max(instance(&mut rng).map_err(|e| e.to_string())?);
    }
    Ok(worst)
}

fn gradients() -> Outcome {
    let actor = worst_over_instances(|rng| {
        let d = dims(rng);
        let mut store = ParamStore::new();
        let net = ActorNet::new(&mut store, 3, 2, 6, Some(d), &mut rng.clone(), rng)?;
        let (s, ctx, w) = (uniform(rng, 6), uniform(rng, 2 * d.context_len()), uniform(rng, 4));
        let r = check_gradients(&mut store, 1e-5, |g, store| {
            let sv = g.input(2, 3, s.clone())?;
            let (c0, c1) = ctx.split_at(d.context_len());
            let a = net.forward(g, store, sv, RefInput::Contexts(&[Some(c0), Some(c1)]))?;
            let wv = g.input(2, 2, w.clone())?;
            let p = g.mul(a, wv)?;
            Ok(g.sum(p))
        })?;
        Ok(r.max_rel_error)
    });
    let critic = worst_over_instances(|rng| {
        let d = dims(rng);
        let mut store = ParamStore::new();
        let net = CriticNet::new(&mut store, 3, 2, 6, Some(d), &mut rng.clone(), rng)?;
        let (s, a, ctx) = (uniform(rng, 6), uniform(rng, 4), uniform(rng, 2 * d.context_len()));
        let r = check_gradients(&mut store, 1e-5, |g, store| {
            let sv = g.input(2, 3, s.clone())?;
            let av = g.input(2, 2, a.clone())?;
            let (c0, c1) = ctx.split_at(d.context_len());
            let q = net.forward(g, store, sv, av, RefInput::Contexts(&[Some(c0), Some(c1)]))?;
            let q2 = g.square(q);
            Ok(g.mean(q2))
        })?;
        Ok(r.max_rel_error)
    });
    let encoders = worst_over_instances(|rng| {
        let mut store = ParamStore::new();
        let mlp = Mlp::new(
            &mut store,
            "enc",
            &[3, 5, 4],
            Init::Orthogonal,
            OutputActivation::None,
            rng,
        );
        let (x, w) = (uniform(rng, 9), uniform(rng, 12));
        let r = check_gradients(&mut store, 1e-5, |g, store| {
            let xv = g.input(3, 3, x.clone())?;
            let y = mlp.forward(g, store, xv)?;
            let wv = g.input(3, 4, w.clone())?;
            let p = g.mul(y, wv)?;
            Ok(g.sum(p))
        })?;
        Ok(r.max_rel_error)
    });
    let attention = worst_over_instances(|rng| {
        let heads = rng.random_range(1..=3);
        let u = 2 * heads;
        let slots = rng.random_range(1..=4);
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut store, "mha", u, heads, rng)?;
        let (q, kv, w) = (uniform(rng, 2 * u), uniform(rng, 2 * slots * u), uniform(rng, 2 * u));
        let vals = uniform(rng, 2 * slots * u);
        let r = check_gradients(&mut store, 1e-5, |g, store| {
            let qv = g.input(2, u, q.clone())?;
            let kvv = g.input(2 * slots, u, kv.clone())?;
            let vv = g.input(2 * slots, u, vals.clone())?;
            let (out, _) = mha.forward(g, store, qv, kvv, vv, slots)?;
            let wv = g.input(2, u, w.clone())?;
            let p = g.mul(out, wv)?;
            Ok(g.sum(p))
        })?;
        Ok(r.max_rel_error)
    });
    let query = worst_over_instances(|rng| {
        let cfg = QueryConfig {
            hidden: 6,
            ..QueryConfig::default()
        };
        let mut m = QueryModule::new(2, cfg, rng, Rng::seed_from_u64(0));
        // move off the identity map so the penalty's norm is differentiable
        for id in m.store.ids().collect::<Vec<_>>() {
            for x in m.store.get_mut(id).data.iter_mut() {
                *x += rng.random_range(-0.3..0.3);
            }
        }
        let batch = PpoBatch {
            states: uniform(rng, 8),
            queries: uniform(rng, 8),
            old_log_probs: uniform(rng, 4).iter().map(|x| x - 1.5).collect(),
            advantages: uniform(rng, 4),
            returns: vec![0.0; 4],
            rows: 4,
        };
        let nets = m.nets.clone();
        let r = check_gradients(&mut m.store, 1e-5, |g, store| {
            query_actor_loss(g, store, &nets, &batch, 0.2, 1.0)
        })?;
        Ok(r.max_rel_error)
    });
    let parts = [
        ("actor", actor),
        ("critic", critic),
        ("encoders", encoders),
        ("mha", attention),
        ("query_actor", query),
    ];
    let mut ok = true;
    let mut detail = Vec::new();
    for (name, r) in parts {
        match r {
            Ok(e) => {
                ok &= e < 1e-4;
                detail.push(format!("{name}={e:.2e}"));
            }
            Err(e) => {
                ok = false;
                detail.push(format!("{name} error: {e}"));
            }
        }
    }
    check(ok, detail.join(" "))
}

fn small_maze(sr: bool) -> RunConfig {
    RunConfig {
        sr_enabled: sr,
        k: 4,
        traj_len: 2,
        ref_dim: 8,
        enc_hidden: 8,
        heads: 2,
        hidden: 32,
        query_hidden: 16,
        batch_size: 32,
        seed_frames: 200,
        eval_every: 1_000_000,
        eval_episodes: 0,
        log_every: 100,
        ..RunConfig::default()
    }
}

fn zeroed_reference_equivalence() -> Outcome {
    let run = |sr: bool| -> selfref::Result<Vec<selfref::harness::StepLog>> {
        let mut r = Runner::pretrain(RunConfig {
            zero_reference_inputs: true,
            ..small_maze(sr)
        })?;
        r.record_steps = Some(Vec::new());
        r.run(1000)?;
        Ok(r.record_steps.take().unwrap_or_default())
    };
    let (a, b) = match (run(true), run(false)) {
        (Ok(a), Ok(b)) => (a, b),
        (Err(e), _) | (_, Err(e)) => return Err(e.to_string()),
    };
    let bits = |v: &[selfref::harness::StepLog]| -> Vec<Vec<u64>> {
        v.iter()
            .map(|s| {
                let mut x: Vec<u64> = s.action.iter().map(|a| a.to_bits()).collect();
                if let Some((c, p)) = s.losses {
                    x.extend([c.to_bits(), p.to_bits()]);
                }
                x
            })
            .collect()
    };
    let updates = a.iter().filter(|s| s.losses.is_some()).count();
    let first_diff = bits(&a).iter().zip(bits(&b)).position(|(x, y)| *x != y);
    check(
        a.len() == 1000 && b.len() == 1000 && first_diff.is_none() && updates > 0,
        format!("{} steps, {updates} updates, first difference {first_diff:?}", a.len()),
    )
}

fn loop_invariants() -> Outcome {
    let inner = || -> selfref::Result<String> {
        let cfg = RunConfig {
            horizon: 50,
            ..small_maze(true)
        };
        let mut pt = Runner::pretrain(cfg.clone())?;
        pt.trace = Some(Vec::new());
        pt.run(1000)?;
        let ft_cfg = RunConfig {
            task: selfref::envs::Task::ReachTl,
            ..cfg
        };
        let mut ft = Runner::finetune(
            ft_cfg,
            pt.policy.agent.clone(),
            pt.policy.query.clone(),
            pt.window.clone(),
            pt.next_episode_id,
        )?;
        let prefix = format!("{SR_PREFIX}critic");
        let before = ft.policy.agent.critic_store.snapshot(&prefix);
        ft.trace = Some(Vec::new());
        ft.run(1000)?;
        let after = ft.policy.agent.critic_store.snapshot(&prefix);
        let drift: f64 = before.iter().zip(&after).map(|(a, b)| (a - b).abs()).sum();
        let mut problems = Vec::new();
        for (name, r) in [("pretrain", &pt), ("finetune", &ft)] {
            let c = &r.counters;
            if (c.queries, c.retrievals, c.expands, c.acts) != (1000, 1000, 1000, 1000) {
                problems.push(format!("{name}: stage counts {c:?}"));
            }
            if c.order_violations != 0 || c.off_boundary_appends != 0 || c.current_episode_hits != 0 {
                problems.push(format!("{name}: violations {c:?}"));
            }
            if c.appends != 20 {
                problems.push(format!("{name}: {} appends", c.appends));
            }
        }
        if before.is_empty() || drift != 0.0 || ft.counters.agent_updates == 0 {
            problems.push(format!("frozen aggregator drift {drift} over {} params", before.len()));
        }
        if problems.is_empty() {
            Ok(format!("2000 steps ordered, 40 boundary appends, frozen drift {drift}"))
        } else {
            Err(selfref::Error::Contract(problems.join("; ")))
        }
    };
    inner().map_err(|e| e.to_string())
}

fn exploration_efficiency() -> Outcome {
    // coverage of the SR agent at 25k steps vs the plain agent, and both
    // past 0.8 by 100k
    let coverage_at = |sr: bool, seed: u64| -> selfref::Result<(f64, f64)> {
        let mut r = Runner::pretrain(RunConfig {
            seed,
            hidden: 64,
            batch_size: 64,
            seed_frames: 4000,
            ..small_maze(sr)
        })?;
        r.run(25_000)?;
        let early = r.coverage.fraction();
        r.run(75_000)?;
        Ok((early, r.coverage.fraction()))
    };
    let judge = |seeds: u64| -> Result<(bool, String), String> {
        let mut wins = 0;
        let mut all_high = true;
        let mut lines = Vec::new();
        for seed in 0..seeds {
            let (sr25, sr100) = coverage_at(true, seed).map_err(|e| e.to_string())?;
            let (pl25, pl100) = coverage_at(false, seed).map_err(|e| e.to_string())?;
            wins += usize::from(sr25 >= pl25);
            all_high &= sr100 > 0.8 && pl100 > 0.8;
            lines.push(format!(
                "seed {seed}: sr {sr25:.3}/{sr100:.3} plain {pl25:.3}/{pl100:.3}"
            ));
        }
        let needed = (seeds as usize * 2).div_ceil(3);
        Ok((wins >= needed && all_high, lines.join(", ")))
    };
    let (ok, detail) = judge(3)?;
    if ok {
        return Ok(detail);
    }
    let (ok5, detail5) = judge(5)?;
    check(ok5, format!("3 seeds failed ({detail}); 5 seeds: {detail5}"))
}

fn distillation_fidelity() -> Outcome {
    let start = Instant::now();
    let mut passes = 0;
    let mut lines = Vec::new();
    for seed in 0..3u64 {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let report = distill_once(seed, dir.path()).map_err(|e| e.to_string())?;
        let details = std::fs::read_to_string(dir.path().join("distill/details.json")).map_err(|e| e.to_string())?;
        let details: serde_json::Value = serde_json::from_str(&details).map_err(|e| e.to_string())?;
        let num = |v: &serde_json::Value, k: &str| v[k].as_f64().unwrap_or(f64::NAN);
        let (mad, ratio) = (num(&report, "mean_abs_diff"), num(&report, "return_ratio"));
        passes += usize::from(mad <= 0.05 && ratio >= 0.9);
        lines.push(format!(
            "seed {seed}: |da| {mad:.4} ratio {ratio:.3} (teacher {:.1})",
            num(&details, "teacher_return")
        ));
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        passes >= 2 && secs < 300.0,
        format!("{} in {secs:.0}s", lines.join(", ")),
    )
}

fn distill_cfg(seed: u64) -> RunConfig {
    RunConfig {
        seed,
        task: selfref::envs::Task::ReachTl,
        pt_steps: 10_000,
        ft_steps: 12_000,
        lr: 1e-3,
        hidden: 64,
        batch_size: 64,
        seed_frames: 4000,
        eval_episodes: 5,
        distill_epochs: 60,
        ..small_maze(true)
    }
}

fn distill_once(seed: u64, dir: &Path) -> selfref::Result<serde_json::Value> {
    let cfg = distill_cfg(seed);
    run_pretrain(cfg.clone(), &dir.join("pt"))?;
    run_finetune(cfg.clone(), &dir.join("pt/pretrain.ckpt"), &dir.join("ft"))?;
    run_distill(cfg, &dir.join("ft/finetune.ckpt"), &dir.join("distill"))
}

fn oracle_iqm(scores: &[f64]) -> f64 {
    let mut s = scores.to_vec();
    // insertion sort keeps the oracle independent of the library sort
    for i in 1..s.len() {
        let mut j = i;
        while j > 0 && s[j - 1] > s[j] {
            s.swap(j - 1, j);
            j -= 1;
        }
    }
    let cut = s.len() / 4;
    let mut total = 0.0;
    let mut n = 0;
    for x in &s[cut..s.len() - cut] {
        total += x;
        n += 1;
    }
    total / n as f64
}

fn oracle_gap(scores: &[f64]) -> f64 {
    let mut total = 0.0;
    for &x in scores {
        total += if x < 1.0 { 1.0 - x } else { 0.0 };
    }
    total / scores.len() as f64
}

fn metric_oracle() -> Outcome {
    let worked = aggregate_metrics(&(1..=8).map(|i| (i as f64, 1.0)).collect::<Vec<_>>());
    let mut rng = Rng::seed_from_u64(7);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let n = rng.random_range(4..=40);
        let raw: Vec<(f64, f64)> = (0..n)
            .map(|_| (rng.random_range(-50.0..150.0), rng.random_range(1.0..100.0)))
            .collect();
        let norm: Vec<f64> = raw.iter().map(|(s, e)| s / e).collect();
        let a = aggregate_metrics(&raw);
        let expect = (oracle_iqm(&norm), oracle_gap(&norm));
        if a.iqm != Some(expect.0) || a.optimality_gap != Some(expect.1) {
            mismatches += 1;
        }
        if iqm(&norm) != expect.0 || optimality_gap(&norm) != expect.1 {
            mismatches += 1;
        }
    }
    check(
        mismatches == 0 && worked.iqm == Some(4.5),
        format!("worked example {:?}, {mismatches} fuzzed mismatches", worked.iqm),
    )
}

fn regret_schedules() -> Outcome {
    // always pulling a least-pulled arm is optimal
    let mut counts = [0u64; 3];
    let mut pulls = Vec::new();
    for _ in 0..12 {
        let arm = (0..3).min_by_key(|&a| counts[a]).unwrap_or(0);
        pulls.push((arm, -(counts[arm] as f64)));
        counts[arm] += 1;
    }
    let optimal = cumulative_regret(3, &pulls);
    let repeated = cumulative_regret(2, &[(0, 0.0), (0, -1.0), (0, -2.0)]);
    check(
        optimal.iter().all(|&r| r == 0.0) && repeated == vec![0.0, 1.0, 3.0],
        format!("optimal final {:?}, repeated {repeated:?}", optimal.last()),
    )
}

fn cli_determinism() -> Outcome {
    let bin = env!("CARGO_BIN_EXE_srrl");
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = RunConfig {
        pt_steps: 1500,
        ft_steps: 1000,
        task: selfref::envs::Task::ReachTl,
        eval_every: 500,
        eval_episodes: 2,
        ..small_maze(true)
    };
    let cfg_path = dir.path().join("cfg.json");
    std::fs::write(&cfg_path, serde_json::to_string(&cfg).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let run = |args: &[&str]| -> Result<(), String> {
        let out = Command::new(bin).args(args).output().map_err(|e| e.to_string())?;
        if out.status.success() {
            Ok(())
        } else {
            Err(String::from_utf8_lossy(&out.stderr).into_owned())
        }
    };
    let cfg_arg = cfg_path.to_string_lossy().into_owned();
    for rep in ["a", "b"] {
        let pt = dir.path().join(rep).join("pt");
        let ft = dir.path().join(rep).join("ft");
        let pt_s = pt.to_string_lossy().into_owned();
        run(&["--out", &pt_s, "pretrain", "--config", &cfg_arg])?;
        let ckpt = pt.join("pretrain.ckpt").to_string_lossy().into_owned();
        run(&[
            "--out",
            &ft.to_string_lossy(),
            "finetune",
            "--config",
            &cfg_arg,
            "--from",
            &ckpt,
        ])?;
    }
    let files = [
        "pt/metrics.csv",
        "pt/pretrain.ckpt",
        "pt/pretrain.json",
        "ft/metrics.csv",
        "ft/eval.csv",
        "ft/finetune.ckpt",
        "ft/finetune.json",
    ];
    let mut differing = Vec::new();
    for f in files {
        let a = std::fs::read(dir.path().join("a").join(f)).map_err(|e| format!("{f}: {e}"))?;
        let b = std::fs::read(dir.path().join("b").join(f)).map_err(|e| format!("{f}: {e}"))?;
        if a != b || a.is_empty() {
            differing.push(f);
        }
    }
    check(
        differing.is_empty(),
        format!("{} files compared, differing: {differing:?}", files.len()),
    )
}

fn main() {
    let checks: [Check; 10] = [
        ("bandit regret ordering", bandit_ordering),
        ("knn matches brute force", knn_matches_brute_force),
        ("finite-difference gradients", gradients),
        ("zeroed reference equivalence", zeroed_reference_equivalence),
        ("loop invariants", loop_invariants),
        ("exploration efficiency", exploration_efficiency),
        ("distillation fidelity", distillation_fidelity),
        ("iqm and optimality gap oracle", metric_oracle),
        ("regret schedules", regret_schedules),
        ("cli determinism", cli_determinism),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, f)) in checks.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|p| name.contains(p.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = f();
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("[{:>2}] PASS {name} ({secs:.1}s): {d}", i + 1),
            Err(d) => {
                failed += 1;
                println!("[{:>2}] FAIL {name} ({secs:.1}s): {d}", i + 1);
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
