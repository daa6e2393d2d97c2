//! FIFO replay of transitions with n-step sampling along stored episodes.

use std::collections::VecDeque;
use std::sync::Arc;

use rand::Rng as _;

use crate::envs::IntrinsicReward;
use crate::nn::Tensor;
use crate::{Error, Result, Rng};

/// A retrieval context: `k·D` states flattened row-major.
pub type Context = Arc<[f64]>;

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub episode_id: u64,
    pub step: usize,
    /// Final transition of its episode.
    pub last: bool,
    /// Context the agent acted on; `None` during warm-up or without SR.
    pub context: Option<Context>,
}

/// Where n-step rewards come from.
#[derive(Debug, Clone, Copy)]
pub enum RewardSource<'a> {
    /// The reward stored with each transition.
    Stored,
    /// Recomputed now from the intrinsic generator at each next state.
    Intrinsic(&'a IntrinsicReward),
}

/// Sampled n-step minibatch, row-major.
#[derive(Debug, Clone, Default)]
pub struct Batch {
    pub rows: usize,
    pub state_dim: usize,
    pub action_dim: usize,
    pub states: Vec<f64>,
    pub actions: Vec<f64>,
    /// `Σ_j γ^j r_{t+j}` over the (possibly truncated) horizon.
    pub rewards: Vec<f64>,
    /// `γ^n'` for the bootstrap term.
    pub discounts: Vec<f64>,
    pub next_states: Vec<f64>,
    pub contexts: Vec<Option<Context>>,
    pub next_contexts: Vec<Option<Context>>,
}

impl Batch {
    pub fn context_refs(&self) -> Vec<Option<&[f64]>> {
        self.contexts.iter().map(|c| c.as_deref()).collect()
    }

    pub fn next_context_refs(&self) -> Vec<Option<&[f64]>> {
        self.next_contexts.iter().map(|c| c.as_deref()).collect()
    }
}

#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    entries: VecDeque<Entry>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            entries: VecDeque::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, i: usize) -> &Entry {
        &self.entries[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Entry> {
        self.entries.iter()
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }

    pub fn push(&mut self, entry: Entry) {
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(entry);
    }

    /// Number of steps usable from index `i` with horizon `n`, or `None`
    /// if the episode is still running and the bootstrap transition (with
    /// its context) is not stored yet.
    fn horizon_from(&self, i: usize, n: usize) -> Option<usize> {
        for j in 0..n {
            let e = self.entries.get(i + j)?;
            if e.last {
                return Some(j + 1);
            }
        }
        self.entries.get(i + n).map(|_| n)
    }

    /// Draws `rows` start indices whose n-step future is available.
    pub fn sample_indices(&self, rows: usize, n: usize, rng: &mut Rng) -> Result<Vec<(usize, usize)>> {
        if self.entries.is_empty() {
            return Err(Error::Contract("sampling from an empty replay buffer".into()));
        }
        if !(0..self.entries.len()).any(|i| self.horizon_from(i, n).is_some()) {
            return Err(Error::Contract("no transition has a complete n-step future yet".into()));
        }
        let mut out = Vec::with_capacity(rows);
        while out.len() < rows {
            let i = rng.random_range(0..self.entries.len());
            if let Some(len) = self.horizon_from(i, n) {
                out.push((i, len));
            }
        }
        Ok(out)
    }

    /// Builds the n-step minibatch for the given start indices.
    pub fn assemble(&self, picks: &[(usize, usize)], gamma: f64, source: RewardSource) -> Result<Batch> {
        let first = &self.entries[picks[0].0];
        let (sd, ad) = (first.state.len(), first.action.len());
        let mut b = Batch {
            rows: picks.len(),
            state_dim: sd,
            action_dim: ad,
            ..Batch::default()
        };
        let rewards: Vec<Vec<f64>> = match source {
            RewardSource::Stored => picks
                .iter()
                .map(|&(i, len)| (i..i + len).map(|j| self.entries[j].reward).collect())
                .collect(),
            RewardSource::Intrinsic(gen) => {
                let next: Vec<Vec<f64>> = picks
                    .iter()
                    .flat_map(|&(i, len)| (i..i + len).map(|j| self.entries[j].next_state.clone()))
                    .collect();
                let flat = gen.reward_batch(&next)?;
                let mut it = flat.into_iter();
                picks.iter().map(|&(_, len)| it.by_ref().take(len).collect()).collect()
            }
        };
        for (&(i, len), rs) in picks.iter().zip(&rewards) {
            let e = &self.entries[i];
            let end = &self.entries[i + len - 1];
            b.states.extend_from_slice(&e.state);
            b.actions.extend_from_slice(&e.action);
            let mut acc = 0.0;
            let mut disc = 1.0;
            for r in rs {
                acc += disc * r;
                disc *= gamma;
            }
            b.rewards.push(acc);
            b.discounts.push(disc);
            b.next_states.extend_from_slice(&end.next_state);
            b.contexts.push(e.context.clone());
            // at an episode end the final context stands in for the
            // (never acted on) terminal state
            let next_ctx = if end.last {
                end.context.clone()
            } else {
                self.entries[i + len].context.clone()
            };
            b.next_contexts.push(next_ctx);
        }
        Ok(b)
    }

    pub fn sample(&self, rows: usize, n: usize, gamma: f64, source: RewardSource, rng: &mut Rng) -> Result<Batch> {
        let picks = self.sample_indices(rows, n, rng)?;
        self.assemble(&picks, gamma, source)
    }

    /// Serialises the buffer as named tensors under `prefix.`.
    pub fn to_tensors(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let n = self.entries.len();
        let mut out = vec![(
            format!("{prefix}.meta"),
            Tensor::new(vec![2], vec![self.capacity as f64, n as f64]).expect("two values"),
        )];
        if n == 0 {
            return out;
        }
        let first = &self.entries[0];
        let (sd, ad) = (first.state.len(), first.action.len());
        let ctx_len = self.entries.iter().find_map(|e| e.context.as_ref().map(|c| c.len()));
        let col = |f: &dyn Fn(&Entry) -> Vec<f64>, w: usize| {
            Tensor::new(vec![n, w], self.entries.iter().flat_map(f).collect()).expect("consistent widths")
        };
        out.push((format!("{prefix}.states"), col(&|e| e.state.clone(), sd)));
        out.push((format!("{prefix}.actions"), col(&|e| e.action.clone(), ad)));
        out.push((format!("{prefix}.next_states"), col(&|e| e.next_state.clone(), sd)));
        out.push((
            format!("{prefix}.scalars"),
            col(
                &|e| {
                    vec![
                        e.reward,
                        e.episode_id as f64,
                        e.step as f64,
                        if e.last { 1.0 } else { 0.0 },
                        if e.context.is_some() { 1.0 } else { 0.0 },
                    ]
                },
                5,
            ),
        ));
        if let Some(cl) = ctx_len {
            out.push((
                format!("{prefix}.contexts"),
                col(
                    &|e| match &e.context {
                        Some(c) => c.to_vec(),
                        None => vec![0.0; cl],
                    },
                    cl,
                ),
            ));
        }
        out
    }

    pub fn from_tensors(prefix: &str, tensors: &[(String, Tensor)]) -> Result<Self> {
        let find = |name: &str| {
            tensors
                .iter()
                .find(|(n, _)| n == &format!("{prefix}.{name}"))
                .map(|(_, t)| t)
        };
        let meta = find("meta").ok_or_else(|| Error::Checkpoint(format!("missing {prefix}.meta")))?;
        let mut buf = Self::new(meta.data[0] as usize);
        let n = meta.data[1] as usize;
        if n == 0 {
            return Ok(buf);
        }
        let get = |name: &str| find(name).ok_or_else(|| Error::Checkpoint(format!("missing {prefix}.{name}")));
        let (states, actions, next, scalars) = (get("states")?, get("actions")?, get("next_states")?, get("scalars")?);
        let contexts = find("contexts");
        let (sd, ad) = (states.dims2().1, actions.dims2().1);
        for i in 0..n {
            let s = &scalars.data[i * 5..i * 5 + 5];
            let context = match contexts {
                Some(c) if s[4] == 1.0 => {
                    let w = c.dims2().1;
                    Some(Context::from(&c.data[i * w..(i + 1) * w]))
                }
                _ => None,
            };
            buf.push(Entry {
                state: states.data[i * sd..(i + 1) * sd].to_vec(),
                action: actions.data[i * ad..(i + 1) * ad].to_vec(),
                reward: s[0],
                next_state: next.data[i * sd..(i + 1) * sd].to_vec(),
                episode_id: s[1] as u64,
                step: s[2] as usize,
                last: s[3] == 1.0,
                context,
            });
        }
        Ok(buf)
    }
}
