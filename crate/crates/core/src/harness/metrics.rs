use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::envs::{cell_of, reachable_cells};

pub const CSV_HEADER: &str =
    "step,episode,intrinsic_return,extrinsic_return,coverage,query_loss,critic_loss,actor_loss,kl_to_pt,wall_ms";

/// One row of the metrics file.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub episode: u64,
    pub intrinsic_return: f64,
    pub extrinsic_return: f64,
    pub coverage: f64,
    pub query_loss: f64,
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub kl_to_pt: f64,
    pub wall_ms: u64,
}

impl MetricRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.episode,
            self.intrinsic_return,
            self.extrinsic_return,
            self.coverage,
            self.query_loss,
            self.critic_loss,
            self.actor_loss,
            self.kl_to_pt,
            self.wall_ms
        )
    }
}

pub fn metrics_csv(records: &[MetricRecord]) -> String {
    let mut s = String::with_capacity(64 * (records.len() + 1));
    s.push_str(CSV_HEADER);
    s.push('\n');
    for r in records {
        let _ = writeln!(s, "{}", r.csv_row());
    }
    s
}

/// Visited cells of a `G × G` grid over the maze.
#[derive(Debug, Clone)]
pub struct CoverageGrid {
    cells: usize,
    visited: Vec<bool>,
    reachable: Vec<bool>,
}

impl CoverageGrid {
    pub fn new(cells: usize) -> Self {
        Self {
            cells,
            visited: vec![false; cells * cells],
            reachable: reachable_cells(cells),
        }
    }

    pub fn visit(&mut self, position: [f64; 2]) {
        let (cx, cy) = cell_of(position, self.cells);
        self.visited[cy * self.cells + cx] = true;
    }

    /// Fraction of reachable cells visited at least once.
    pub fn fraction(&self) -> f64 {
        let total = self.reachable.iter().filter(|&&r| r).count();
        let hit = self
            .visited
            .iter()
            .zip(&self.reachable)
            .filter(|(&v, &r)| v && r)
            .count();
        hit as f64 / total as f64
    }

    pub fn visited(&self) -> &[bool] {
        &self.visited
    }
}

/// Coverage of a list of states (first two coordinates are the position).
pub fn coverage(states: &[Vec<f64>], cells: usize) -> f64 {
    let mut g = CoverageGrid::new(cells);
    for s in states {
        g.visit([s[0], s[1]]);
    }
    g.fraction()
}

/// Aggregate statistics of expert-normalised scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub n: usize,
    pub mean: f64,
    pub iqm: Option<f64>,
    pub optimality_gap: Option<f64>,
    pub median: Option<f64>,
    pub warning: Option<String>,
}

/// Mean of the middle half: drops `⌊n/4⌋` scores from each end.
pub fn iqm(scores: &[f64]) -> f64 {
    let mut s = scores.to_vec();
    s.sort_by(f64::total_cmp);
    let cut = s.len() / 4;
    let mid = &s[cut..s.len() - cut];
    mid.iter().sum::<f64>() / mid.len() as f64
}

/// Mean shortfall below 1.
pub fn optimality_gap(scores: &[f64]) -> f64 {
    scores.iter().map(|x| (1.0 - x).max(0.0)).sum::<f64>() / scores.len() as f64
}

pub fn median(scores: &[f64]) -> f64 {
    let mut s = scores.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / 2.0
    }
}

/// Normalises each raw score by its expert score and aggregates. With
/// fewer than four scores only the mean is reported.
pub fn aggregate_metrics(raw: &[(f64, f64)]) -> Aggregate {
    let scores: Vec<f64> = raw.iter().map(|(s, e)| s / e).collect();
    let n = scores.len();
    let mean = if n == 0 {
        f64::NAN
    } else {
        scores.iter().sum::<f64>() / n as f64
    };
    if n < 4 {
        return Aggregate {
            n,
            mean,
            iqm: None,
            optimality_gap: None,
            median: None,
            warning: Some(format!("only {n} scores; IQM and optimality gap need at least 4")),
        };
    }
    Aggregate {
        n,
        mean,
        iqm: Some(iqm(&scores)),
        optimality_gap: Some(optimality_gap(&scores)),
        median: Some(median(&scores)),
        warning: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng as _, SeedableRng};

    #[test]
    fn worked_iqm_example() {
        let raw: Vec<(f64, f64)> = (1..=8).map(|i| (i as f64, 1.0)).collect();
        let a = aggregate_metrics(&raw);
        assert_eq!(a.iqm, Some(4.5));
    }

    #[test]
    fn expert_level_scores() {
        let a = aggregate_metrics(&[(2.0, 2.0); 6]);
        assert_eq!((a.iqm, a.optimality_gap), (Some(1.0), Some(0.0)));
        let b = aggregate_metrics(&[(3.0, 1.0), (10.0, 1.0), (1.0, 1.0), (7.0, 1.0)]);
        assert_eq!(b.optimality_gap, Some(0.0));
    }

    #[test]
    fn few_scores_warn() {
        let a = aggregate_metrics(&[(1.0, 2.0), (2.0, 2.0)]);
        assert_eq!(a.mean, 0.75);
        assert!(a.iqm.is_none() && a.warning.is_some());
    }

    #[test]
    fn coverage_cases() {
        assert_eq!(coverage(&[], 20), 0.0);
        let all: Vec<Vec<f64>> = (0..400)
            .map(|i| {
                let (cx, cy) = (i % 20, i / 20);
                vec![-1.0 + 0.1 * cx as f64 + 0.01, -1.0 + 0.1 * cy as f64 + 0.01]
            })
            .collect();
        assert_eq!(coverage(&all, 20), 1.0);
    }

    #[test]
    fn coverage_matches_cell_set() {
        let mut rng = crate::Rng::seed_from_u64(0);
        let states: Vec<Vec<f64>> = (0..10_000)
            .map(|_| vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
            .collect();
        let mut set = std::collections::BTreeSet::new();
        for s in &states {
            let cx = (((s[0] + 1.0) / 2.0 * 20.0).floor() as i64).clamp(0, 19);
            let cy = (((s[1] + 1.0) / 2.0 * 20.0).floor() as i64).clamp(0, 19);
            set.insert((cx, cy));
        }
        assert_eq!(coverage(&states, 20), set.len() as f64 / 400.0);
    }

    #[test]
    fn csv_header_and_rows() {
        let r = MetricRecord {
            step: 500,
            episode: 1,
            coverage: 0.25,
            ..MetricRecord::default()
        };
        let text = metrics_csv(&[r]);
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some(CSV_HEADER));
        assert_eq!(lines.next(), Some("500,1,0,0,0.25,0,0,0,0,0"));
    }
}
