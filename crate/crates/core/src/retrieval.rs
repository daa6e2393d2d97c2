//! The reference window over completed episodes, exact k-NN search over
//! its states and expansion of neighbors into short trajectories.

use std::collections::{BTreeMap, VecDeque};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::nn::Tensor;
use crate::{Error, Result, Rng};

/// Default number of transitions the window retains.
pub const DEFAULT_WINDOW: usize = 100_000;
/// Default number of neighbors per query.
pub const DEFAULT_K: usize = 10;
/// Default length of each retrieved trajectory.
pub const DEFAULT_TRAJ_LEN: usize = 5;

/// One environment step.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub episode_id: u64,
    pub step_in_episode: usize,
}

/// Similarity used to rank stored states against a query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Similarity {
    #[default]
    Cosine,
    /// Negative squared Euclidean distance.
    L2,
}

/// Cosine similarity; `-1` when either vector has zero norm.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return -1.0;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

/// Result of a neighbor search.
#[derive(Debug, Clone, PartialEq)]
pub struct Neighbors {
    /// Storage indices, best first.
    pub indices: Vec<usize>,
    /// Set when fewer than the requested `k` states were available.
    pub clamped: bool,
}

/// `k` ordered lists of `D` consecutive states each.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalSet {
    pub neighbor_starts: Vec<usize>,
    pub trajectories: Vec<Vec<Vec<f64>>>,
    pub offsets: Vec<Vec<usize>>,
    /// Number of lists that had to be padded because their episode was
    /// shorter than `D`.
    pub padded: usize,
}

impl RetrievalSet {
    pub fn empty() -> Self {
        Self {
            neighbor_starts: Vec::new(),
            trajectories: Vec::new(),
            offsets: Vec::new(),
            padded: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn traj_len(&self) -> usize {
        self.trajectories.first().map_or(0, Vec::len)
    }

    /// All states as one row-major `(k·D) × dim` block, list by list.
    pub fn flat_states(&self) -> Vec<f64> {
        self.trajectories
            .iter()
            .flat_map(|t| t.iter().flat_map(|s| s.iter().copied()))
            .collect()
    }

    /// Offsets aligned with [`Self::flat_states`].
    pub fn flat_offsets(&self) -> Vec<usize> {
        self.offsets.iter().flatten().copied().collect()
    }
}

/// Retrievable history: the newest completed episodes, capped at
/// `capacity` transitions and evicted oldest-first.
#[derive(Debug, Clone)]
pub struct ReferenceWindow {
    capacity: usize,
    storage: VecDeque<Transition>,
    norms: VecDeque<f64>,
    /// episode id → (global start, length); global positions count every
    /// transition ever appended.
    episodes: BTreeMap<u64, (usize, usize)>,
    evicted: usize,
    similarity: Similarity,
}

impl ReferenceWindow {
    pub fn new(capacity: usize) -> Self {
        Self::with_similarity(capacity, Similarity::Cosine)
    }

    pub fn with_similarity(capacity: usize, similarity: Similarity) -> Self {
        assert!(capacity > 0, "window capacity must be positive");
        Self {
            capacity,
            storage: VecDeque::new(),
            norms: VecDeque::new(),
            episodes: BTreeMap::new(),
            evicted: 0,
            similarity,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.storage.len()
    }

    pub fn is_empty(&self) -> bool {
        self.storage.is_empty()
    }

    pub fn similarity(&self) -> Similarity {
        self.similarity
    }

    pub fn get(&self, index: usize) -> &Transition {
        &self.storage[index]
    }

    pub fn iter(&self) -> impl ExactSizeIterator<Item = &Transition> {
        self.storage.iter()
    }

    pub fn contains_episode(&self, episode_id: u64) -> bool {
        self.episodes.contains_key(&episode_id)
    }

    /// Storage range `[start, end)` of an episode's surviving transitions.
    pub fn episode_range(&self, episode_id: u64) -> Option<(usize, usize)> {
        self.episodes.get(&episode_id).map(|&(g, len)| {
            let start = g.max(self.evicted) - self.evicted;
            let end = g + len - self.evicted;
            (start, end)
        })
    }

    /// Appends one complete episode of exactly `horizon` steps, then
    /// evicts the oldest transitions beyond capacity.
    pub fn append_episode(&mut self, episode: &[Transition], horizon: usize) -> Result<()> {
        if episode.len() != horizon || horizon == 0 {
            return Err(Error::Contract(format!(
                "only complete episodes can enter the window: got {} of {horizon} steps",
                episode.len()
            )));
        }
        let id = episode[0].episode_id;
        for (i, t) in episode.iter().enumerate() {
            if t.episode_id != id || t.step_in_episode != i {
                return Err(Error::Contract(format!(
                    "episode {id} is not a contiguous run of steps (entry {i})"
                )));
            }
        }
        if self.episodes.contains_key(&id) {
            return Err(Error::Contract(format!("episode {id} already appended")));
        }
        let global = self.evicted + self.storage.len();
        self.episodes.insert(id, (global, episode.len()));
        for t in episode {
            self.norms.push_back(t.state.iter().map(|x| x * x).sum::<f64>().sqrt());
            self.storage.push_back(t.clone());
        }
        while self.storage.len() > self.capacity {
            self.storage.pop_front();
            self.norms.pop_front();
            self.evicted += 1;
        }
        let evicted = self.evicted;
        self.episodes.retain(|_, &mut (g, len)| g + len > evicted);
        Ok(())
    }

    fn score(&self, query: &[f64], qnorm: f64, index: usize) -> f64 {
        let s = &self.storage[index].state;
        match self.similarity {
            Similarity::Cosine => {
                let n = self.norms[index];
                if qnorm == 0.0 || n == 0.0 {
                    -1.0
                } else {
                    query.iter().zip(s).map(|(a, b)| a * b).sum::<f64>() / (qnorm * n)
                }
            }
            Similarity::L2 => -query.iter().zip(s).map(|(a, b)| (a - b) * (a - b)).sum::<f64>(),
        }
    }

    /// Exact top-`k` search. Results are sorted by descending similarity,
    /// ties going to the lower storage index.
    pub fn knn_search(&self, query: &[f64], k: usize) -> Neighbors {
        let n = self.storage.len();
        let clamped = k > n;
        let k = k.min(n);
        if k == 0 {
            return Neighbors {
                indices: Vec::new(),
                clamped,
            };
        }
        let qnorm = query.iter().map(|x| x * x).sum::<f64>().sqrt();
        // best-first list of (score, index)
        let mut top: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
        for i in 0..n {
            let s = self.score(query, qnorm, i);
            if top.len() == k && s <= top[k - 1].0 {
                continue;
            }
            let pos = top.iter().position(|&(t, _)| s > t).unwrap_or(top.len());
            top.insert(pos, (s, i));
            top.truncate(k);
        }
        Neighbors {
            indices: top.into_iter().map(|(_, i)| i).collect(),
            clamped,
        }
    }

    /// `k` storage indices drawn uniformly with replacement.
    pub fn sample_uniform(&self, k: usize, rng: &mut Rng) -> Vec<usize> {
        if self.storage.is_empty() {
            return Vec::new();
        }
        (0..k).map(|_| rng.random_range(0..self.storage.len())).collect()
    }

    /// Expands each neighbor into `traj_len` consecutive states of its
    /// episode, shifting the window back when the episode ends too soon.
    pub fn expand_trajectories(&self, indices: &[usize], traj_len: usize) -> Result<RetrievalSet> {
        if traj_len == 0 {
            return Err(Error::Config("trajectory length must be positive".into()));
        }
        let mut set = RetrievalSet::empty();
        for &i in indices {
            let t = self
                .storage
                .get(i)
                .ok_or_else(|| Error::Contract(format!("neighbor index {i} outside window of {}", self.len())))?;
            let (start, end) = self
                .episode_range(t.episode_id)
                .expect("stored transition belongs to an indexed episode");
            let len = end - start;
            let states: Vec<Vec<f64>> = if len >= traj_len {
                let local = (i - start).min(len - traj_len);
                (0..traj_len)
                    .map(|j| self.storage[start + local + j].state.clone())
                    .collect()
            } else {
                set.padded += 1;
                let pad = traj_len - len;
                let first = self.storage[start].state.clone();
                std::iter::repeat_n(first, pad)
                    .chain((start..end).map(|j| self.storage[j].state.clone()))
                    .collect()
            };
            set.neighbor_starts.push(i);
            set.trajectories.push(states);
            set.offsets.push((0..traj_len).collect());
        }
        Ok(set)
    }

    /// Serialises the window contents as named tensors under `prefix.`.
    pub fn to_tensors(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let n = self.storage.len();
        if n == 0 {
            let meta = Tensor::new(vec![2], vec![self.capacity as f64, 0.0]).unwrap();
            return vec![(format!("{prefix}.meta"), meta)];
        }
        let sd = self.storage[0].state.len();
        let ad = self.storage[0].action.len();
        let flat = |f: &dyn Fn(&Transition) -> Vec<f64>| -> Vec<f64> { self.storage.iter().flat_map(f).collect() };
        let meta = Tensor::new(vec![2], vec![self.capacity as f64, n as f64]).unwrap();
        vec![
            (format!("{prefix}.meta"), meta),
            (
                format!("{prefix}.states"),
                Tensor::new(vec![n, sd], flat(&|t| t.state.clone())).unwrap(),
            ),
            (
                format!("{prefix}.actions"),
                Tensor::new(vec![n, ad], flat(&|t| t.action.clone())).unwrap(),
            ),
            (
                format!("{prefix}.next_states"),
                Tensor::new(vec![n, sd], flat(&|t| t.next_state.clone())).unwrap(),
            ),
            (
                format!("{prefix}.rewards"),
                Tensor::new(vec![n], flat(&|t| vec![t.reward])).unwrap(),
            ),
            (
                format!("{prefix}.episode_ids"),
                Tensor::new(vec![n], flat(&|t| vec![t.episode_id as f64])).unwrap(),
            ),
            (
                format!("{prefix}.steps"),
                Tensor::new(vec![n], flat(&|t| vec![t.step_in_episode as f64])).unwrap(),
            ),
        ]
    }

    /// Rebuilds a window written by [`Self::to_tensors`].
    pub fn from_tensors(prefix: &str, tensors: &[(String, Tensor)], similarity: Similarity) -> Result<Self> {
        let get = |name: &str| {
            let full = format!("{prefix}.{name}");
            tensors
                .iter()
                .find(|(n, _)| *n == full)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::Checkpoint(format!("missing {full}")))
        };
        let meta = get("meta")?;
        let capacity = meta.data[0] as usize;
        let n = meta.data[1] as usize;
        let mut w = Self::with_similarity(capacity.max(1), similarity);
        if n == 0 {
            return Ok(w);
        }
        let states = get("states")?;
        let actions = get("actions")?;
        let next = get("next_states")?;
        let rewards = get("rewards")?;
        let ids = get("episode_ids")?;
        let steps = get("steps")?;
        let sd = states.dims2().1;
        let ad = actions.dims2().1;
        for i in 0..n {
            let t = Transition {
                state: states.data[i * sd..(i + 1) * sd].to_vec(),
                action: actions.data[i * ad..(i + 1) * ad].to_vec(),
                reward: rewards.data[i],
                next_state: next.data[i * sd..(i + 1) * sd].to_vec(),
                episode_id: ids.data[i] as u64,
                step_in_episode: steps.data[i] as usize,
            };
            let g = w.storage.len();
            let entry = w.episodes.entry(t.episode_id).or_insert((g, 0));
            entry.1 += 1;
            w.norms.push_back(t.state.iter().map(|x| x * x).sum::<f64>().sqrt());
            w.storage.push_back(t);
        }
        Ok(w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Rng;
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn episode(id: u64, len: usize, dim: usize, base: f64) -> Vec<Transition> {
        (0..len)
            .map(|i| Transition {
                state: (0..dim).map(|d| base + i as f64 + d as f64 * 0.1).collect(),
                action: vec![0.0],
                reward: 0.0,
                next_state: vec![0.0; dim],
                episode_id: id,
                step_in_episode: i,
            })
            .collect()
    }

    #[test]
    fn default_capacity() {
        assert_eq!(DEFAULT_WINDOW, 100_000);
        assert_eq!(DEFAULT_K, 10);
        assert_eq!(DEFAULT_TRAJ_LEN, 5);
    }

    #[test]
    fn append_one_episode() {
        let mut w = ReferenceWindow::new(DEFAULT_WINDOW);
        w.append_episode(&episode(0, 10, 2, 1.0), 10).unwrap();
        assert_eq!(w.len(), 10);
    }

    #[test]
    fn partial_episode_rejected() {
        let mut w = ReferenceWindow::new(100);
        let ep = episode(0, 7, 2, 1.0);
        assert!(matches!(w.append_episode(&ep, 10), Err(Error::Contract(_))));
        assert!(w.is_empty());
    }

    #[test]
    fn eviction_keeps_newest() {
        let mut w = ReferenceWindow::new(15);
        let a = episode(0, 10, 1, 0.0);
        let b = episode(1, 10, 1, 100.0);
        w.append_episode(&a, 10).unwrap();
        w.append_episode(&b, 10).unwrap();
        assert_eq!(w.len(), 15);
        // 5 newest of episode 0 (steps 5..9), then all of episode 1
        let got: Vec<(u64, usize)> = w.iter().map(|t| (t.episode_id, t.step_in_episode)).collect();
        let want: Vec<(u64, usize)> = (5..10).map(|s| (0, s)).chain((0..10).map(|s| (1, s))).collect();
        assert_eq!(got, want);
        assert_eq!(w.episode_range(0), Some((0, 5)));
        assert_eq!(w.episode_range(1), Some((5, 15)));
    }

    #[test]
    fn exact_match_ranked_first() {
        let mut w = ReferenceWindow::new(100);
        let mut ep = episode(0, 3, 2, 0.0);
        ep[0].state = vec![0.0, 1.0];
        ep[1].state = vec![1.0, 0.0];
        ep[2].state = vec![-1.0, 0.0];
        w.append_episode(&ep, 3).unwrap();
        let nn = w.knn_search(&[1.0, 0.0], 1);
        assert_eq!(nn.indices, vec![1]);
    }

    #[test]
    fn zero_norm_ranks_last() {
        let mut w = ReferenceWindow::new(100);
        let mut ep = episode(0, 3, 2, 0.0);
        ep[0].state = vec![0.0, 0.0];
        ep[1].state = vec![-1.0, -0.1];
        ep[2].state = vec![1.0, 0.0];
        w.append_episode(&ep, 3).unwrap();
        // the opposite vector scores just above -1, the zero vector exactly -1
        assert_eq!(w.knn_search(&[1.0, 0.0], 3).indices, vec![2, 1, 0]);
        // zero query: every score is -1, ties to lower index
        assert_eq!(w.knn_search(&[0.0, 0.0], 3).indices, vec![0, 1, 2]);
    }

    #[test]
    fn oversized_k_is_clamped() {
        let mut w = ReferenceWindow::new(100);
        w.append_episode(&episode(0, 4, 2, 1.0), 4).unwrap();
        let nn = w.knn_search(&[1.0, 1.0], 10);
        assert!(nn.clamped);
        assert_eq!(nn.indices.len(), 4);
    }

    #[test]
    fn expansion_rules() {
        let mut w = ReferenceWindow::new(100);
        w.append_episode(&episode(7, 10, 1, 0.0), 10).unwrap();
        let steps = |set: &RetrievalSet| -> Vec<f64> { set.trajectories[0].iter().map(|s| s[0]).collect() };
        let mid = w.expand_trajectories(&[3], 5).unwrap();
        assert_eq!(steps(&mid), vec![3.0, 4.0, 5.0, 6.0, 7.0]);
        assert_eq!(mid.offsets[0], vec![0, 1, 2, 3, 4]);
        let tail = w.expand_trajectories(&[8], 5).unwrap();
        assert_eq!(steps(&tail), vec![5.0, 6.0, 7.0, 8.0, 9.0]);
        let single = w.expand_trajectories(&[4, 2], 1).unwrap();
        assert_eq!(single.flat_states(), vec![4.0, 2.0]);
    }

    #[test]
    fn short_episode_is_left_padded() {
        let mut w = ReferenceWindow::new(100);
        w.append_episode(&episode(0, 3, 1, 10.0), 3).unwrap();
        let set = w.expand_trajectories(&[1], 5).unwrap();
        assert_eq!(set.padded, 1);
        let s: Vec<f64> = set.trajectories[0].iter().map(|s| s[0]).collect();
        assert_eq!(s, vec![10.0, 10.0, 10.0, 11.0, 12.0]);
    }

    #[test]
    fn tensors_roundtrip() {
        let mut w = ReferenceWindow::new(12);
        w.append_episode(&episode(0, 10, 2, 0.0), 10).unwrap();
        w.append_episode(&episode(1, 10, 2, 50.0), 10).unwrap();
        let t = w.to_tensors("win");
        let back = ReferenceWindow::from_tensors("win", &t, Similarity::Cosine).unwrap();
        assert_eq!(back.len(), w.len());
        assert_eq!(back.episode_range(0), w.episode_range(0));
        assert_eq!(back.episode_range(1), w.episode_range(1));
        assert_eq!(back.knn_search(&[1.0, 2.0], 5), w.knn_search(&[1.0, 2.0], 5));
    }

    fn full_sort(w: &ReferenceWindow, q: &[f64], k: usize) -> Vec<usize> {
        let mut all: Vec<(f64, usize)> = w
            .iter()
            .enumerate()
            .map(|(i, t)| (cosine_similarity(q, &t.state), i))
            .collect();
        all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        all.into_iter().take(k).map(|(_, i)| i).collect()
    }

    #[test]
    fn twenty_random_states_match_full_sort() {
        let mut rng = Rng::seed_from_u64(11);
        let mut w = ReferenceWindow::new(100);
        let ep: Vec<Transition> = (0..20)
            .map(|i| Transition {
                state: (0..3).map(|_| rng.random_range(-1.0..1.0)).collect(),
                action: vec![0.0],
                reward: 0.0,
                next_state: vec![0.0; 3],
                episode_id: 0,
                step_in_episode: i,
            })
            .collect();
        w.append_episode(&ep, 20).unwrap();
        let q: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        assert_eq!(w.knn_search(&q, 5).indices, full_sort(&w, &q, 5));
    }

    proptest! {
        #[test]
        fn eviction_preserves_order_and_never_crosses_episodes(
            lens in prop::collection::vec(1usize..8, 1..6),
            cap in 1usize..20,
            d in 1usize..4,
        ) {
            let mut w = ReferenceWindow::new(cap);
            let mut appended = Vec::new();
            for (id, &len) in lens.iter().enumerate() {
                let ep = episode(id as u64, len, 1, 100.0 * id as f64);
                w.append_episode(&ep, len).unwrap();
                appended.extend(ep);
            }
            let keep = appended.len().min(cap);
            let tail: Vec<_> = appended[appended.len() - keep..].to_vec();
            prop_assert_eq!(w.iter().cloned().collect::<Vec<_>>(), tail);
            let idx: Vec<usize> = (0..w.len()).collect();
            let set = w.expand_trajectories(&idx, d).unwrap();
            for (n, traj) in idx.iter().zip(&set.trajectories) {
                let ep = w.get(*n).episode_id as f64;
                for s in traj {
                    prop_assert!((s[0] / 100.0).floor() == ep);
                }
            }
        }
    }
}
