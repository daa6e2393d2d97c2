use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::{Error, Result, Rng};

/// Steps per episode.
pub const EPISODE_LEN: usize = 400;
/// Half-length of each wall arm.
pub const WALL_HALF_LEN: f64 = 0.6;
/// Full wall thickness.
pub const WALL_THICKNESS: f64 = 0.05;
pub const VELOCITY_DECAY: f64 = 0.95;
pub const FORCE_SCALE: f64 = 0.1;
/// Distance at which the reach reward falls to zero.
pub const GOAL_RADIUS: f64 = 0.15;
const START: [f64; 2] = [-0.5, 0.5];
const START_JITTER: f64 = 0.05;

/// Downstream task for the maze.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Explore,
    ReachTl,
    ReachTr,
    ReachBl,
    ReachBr,
}

impl Task {
    pub fn goal(self) -> Option<[f64; 2]> {
        match self {
            Task::Explore => None,
            Task::ReachTl => Some([-0.7, 0.7]),
            Task::ReachTr => Some([0.7, 0.7]),
            Task::ReachBl => Some([-0.7, -0.7]),
            Task::ReachBr => Some([0.7, -0.7]),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Explore => "explore",
            Task::ReachTl => "reach_tl",
            Task::ReachTr => "reach_tr",
            Task::ReachBl => "reach_bl",
            Task::ReachBr => "reach_br",
        }
    }
}

/// Axis-aligned rectangle with open interior.
#[derive(Debug, Clone, Copy)]
struct Rect {
    x: (f64, f64),
    y: (f64, f64),
}

impl Rect {
    fn contains(&self, p: [f64; 2]) -> bool {
        p[0] > self.x.0 && p[0] < self.x.1 && p[1] > self.y.0 && p[1] < self.y.1
    }
}

const T2: f64 = WALL_THICKNESS / 2.0;
const WALLS: [Rect; 2] = [
    Rect {
        x: (-T2, T2),
        y: (-WALL_HALF_LEN, WALL_HALF_LEN),
    },
    Rect {
        x: (-WALL_HALF_LEN, WALL_HALF_LEN),
        y: (-T2, T2),
    },
];

/// True if `p` lies strictly inside the cross-shaped wall.
pub fn inside_wall(p: [f64; 2]) -> bool {
    WALLS.iter().any(|w| w.contains(p))
}

/// Moves one coordinate from `from` by `delta`, stopping at any wall face
/// crossed while the other coordinate is `other`. Returns the new value
/// and whether motion was blocked.
fn sweep(axis: usize, from: f64, delta: f64, other: f64) -> (f64, bool) {
    let mut to = from + delta;
    let mut blocked = false;
    for w in &WALLS {
        let (lo, hi) = if axis == 0 { w.x } else { w.y };
        let (olo, ohi) = if axis == 0 { w.y } else { w.x };
        if !(other > olo && other < ohi) {
            continue;
        }
        if delta > 0.0 && from <= lo && to > lo {
            to = lo;
            blocked = true;
        } else if delta < 0.0 && from >= hi && to < hi {
            to = hi;
            blocked = true;
        }
    }
    if to > 1.0 {
        to = 1.0;
        blocked = true;
    } else if to < -1.0 {
        to = -1.0;
        blocked = true;
    }
    (to, blocked)
}

/// A ball pushed around the unit box, with a cross-shaped wall through
/// the origin.
///
/// Observations are `[x, y, vx, vy]`; actions are forces in `[-1, 1]²`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PointMassMaze {
    pub position: [f64; 2],
    pub velocity: [f64; 2],
    pub step: usize,
    pub horizon: usize,
    pub task: Task,
    rng: Rng,
}

/// Result of [`PointMassMaze::step`].
#[derive(Debug, Clone, PartialEq)]
pub struct MazeStep {
    pub observation: Vec<f64>,
    pub reward: f64,
    pub done: bool,
}

impl PointMassMaze {
    pub const OBS_DIM: usize = 4;
    pub const ACTION_DIM: usize = 2;

    pub fn new(task: Task, horizon: usize, rng: Rng) -> Self {
        let mut env = Self {
            position: START,
            velocity: [0.0; 2],
            step: 0,
            horizon,
            task,
            rng,
        };
        env.reset();
        env
    }

    pub fn observation(&self) -> Vec<f64> {
        vec![self.position[0], self.position[1], self.velocity[0], self.velocity[1]]
    }

    pub fn reset(&mut self) -> Vec<f64> {
        let jx = self.rng.random_range(-START_JITTER..=START_JITTER);
        let jy = self.rng.random_range(-START_JITTER..=START_JITTER);
        self.position = [START[0] + jx, START[1] + jy];
        self.velocity = [0.0; 2];
        self.step = 0;
        self.observation()
    }

    /// Task reward at a position.
    pub fn task_reward(task: Task, position: [f64; 2]) -> f64 {
        match task.goal() {
            None => 0.0,
            Some(g) => {
                let d = ((position[0] - g[0]).powi(2) + (position[1] - g[1]).powi(2)).sqrt();
                (1.0 - d / GOAL_RADIUS).max(0.0)
            }
        }
    }

    /// Deterministic dynamics: `v ← 0.95 v + 0.1 a`, then `p ← p + v` with
    /// collisions zeroing the blocked velocity component.
    pub fn dynamics(position: [f64; 2], velocity: [f64; 2], action: &[f64]) -> ([f64; 2], [f64; 2]) {
        let a = [action[0].clamp(-1.0, 1.0), action[1].clamp(-1.0, 1.0)];
        let mut v = [
            VELOCITY_DECAY * velocity[0] + FORCE_SCALE * a[0],
            VELOCITY_DECAY * velocity[1] + FORCE_SCALE * a[1],
        ];
        let (x, bx) = sweep(0, position[0], v[0], position[1]);
        if bx {
            v[0] = 0.0;
        }
        let (y, by) = sweep(1, position[1], v[1], x);
        if by {
            v[1] = 0.0;
        }
        ([x, y], v)
    }

    pub fn step(&mut self, action: &[f64]) -> Result<MazeStep> {
        if action.len() != Self::ACTION_DIM {
            return Err(Error::Config(format!(
                "maze actions are {}-dimensional, got {}",
                Self::ACTION_DIM,
                action.len()
            )));
        }
        if self.step >= self.horizon {
            return Err(Error::Contract("step after episode end; call reset".into()));
        }
        let (p, v) = Self::dynamics(self.position, self.velocity, action);
        self.position = p;
        self.velocity = v;
        self.step += 1;
        Ok(MazeStep {
            observation: self.observation(),
            reward: Self::task_reward(self.task, p),
            done: self.step >= self.horizon,
        })
    }
}

/// Grid of `cells × cells` over `[-1, 1]²`.
pub fn cell_of(position: [f64; 2], cells: usize) -> (usize, usize) {
    let f = |x: f64| (((x + 1.0) / 2.0 * cells as f64).floor() as isize).clamp(0, cells as isize - 1) as usize;
    (f(position[0]), f(position[1]))
}

/// Cells that contain at least some free (non-wall) area.
pub fn reachable_cells(cells: usize) -> Vec<bool> {
    let size = 2.0 / cells as f64;
    let mut out = vec![false; cells * cells];
    for cy in 0..cells {
        for cx in 0..cells {
            let x0 = -1.0 + cx as f64 * size;
            let y0 = -1.0 + cy as f64 * size;
            // a cell is blocked only if one wall rectangle covers it entirely
            let covered = WALLS
                .iter()
                .any(|w| w.x.0 <= x0 && w.x.1 >= x0 + size && w.y.0 <= y0 && w.y.1 >= y0 + size);
            out[cy * cells + cx] = !covered;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Rng;
    use proptest::prelude::{any, prop_assert, proptest};
    use rand::SeedableRng;

    #[test]
    fn wall_blocks_crossing() {
        // heading right at y = 0.3, straight into the vertical arm
        let (p, v) = PointMassMaze::dynamics([-0.1, 0.3], [0.5, 0.0], &[1.0, 0.0]);
        assert_eq!(p[0], -T2);
        assert_eq!(v[0], 0.0);
        assert!(!inside_wall(p));
    }

    #[test]
    fn box_clamps() {
        let (p, v) = PointMassMaze::dynamics([0.95, -0.9], [0.3, -0.3], &[1.0, -1.0]);
        assert_eq!(p, [1.0, -1.0]);
        assert_eq!(v, [0.0, 0.0]);
    }

    #[test]
    fn free_motion_follows_dynamics() {
        let (p, v) = PointMassMaze::dynamics([0.5, 0.5], [0.1, 0.0], &[0.5, -1.0]);
        let vx = 0.95 * 0.1 + 0.1 * 0.5;
        let vy = -0.1;
        assert!((v[0] - vx).abs() < 1e-15 && (v[1] - vy).abs() < 1e-15);
        assert!((p[0] - (0.5 + vx)).abs() < 1e-15 && (p[1] - (0.5 + vy)).abs() < 1e-15);
    }

    #[test]
    fn reach_reward_shape() {
        assert_eq!(PointMassMaze::task_reward(Task::ReachTl, [-0.7, 0.7]), 1.0);
        assert_eq!(PointMassMaze::task_reward(Task::ReachTl, [0.0, 0.0]), 0.0);
        assert_eq!(PointMassMaze::task_reward(Task::Explore, [-0.7, 0.7]), 0.0);
    }

    #[test]
    fn all_cells_have_free_space() {
        assert!(reachable_cells(20).iter().all(|&r| r));
    }

    #[test]
    fn episodes_end_at_horizon() {
        let mut env = PointMassMaze::new(Task::Explore, 3, Rng::seed_from_u64(0));
        for i in 0..3 {
            let s = env.step(&[0.0, 0.0]).unwrap();
            assert_eq!(s.done, i == 2);
        }
        assert!(env.step(&[0.0, 0.0]).is_err());
    }

    proptest! {
        #[test]
        fn never_enters_wall_or_leaves_box(seed in any::<u64>()) {
            let mut rng = Rng::seed_from_u64(seed);
            let mut env = PointMassMaze::new(Task::Explore, 500, Rng::seed_from_u64(seed ^ 1));
            for _ in 0..500 {
                let a = [rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)];
                env.step(&a).unwrap();
                let p = env.position;
                prop_assert!(!inside_wall(p), "{p:?}");
                prop_assert!(p[0].abs() <= 1.0 && p[1].abs() <= 1.0);
            }
        }
    }
}
