//! Attention over retrieved trajectories: the current state queries the
//! encoded retrieved states, with learnable per-offset time embeddings
//! added to keys and values.

use rand_distr::{Distribution, StandardNormal};

use crate::nn::{Graph, Init, Mlp, MultiHeadAttention, OutputActivation, ParamId, ParamStore, Tensor, Var};
use crate::retrieval::RetrievalSet;
use crate::{Error, Result, Rng};

/// Sizes of an [`Aggregator`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AggregatorDims {
    pub state_dim: usize,
    /// Reference vector dimension `U`.
    pub ref_dim: usize,
    pub enc_hidden: usize,
    pub heads: usize,
    pub k: usize,
    /// Trajectory length `D` (rows of the time table).
    pub traj_len: usize,
}

impl AggregatorDims {
    pub fn slots(&self) -> usize {
        self.k * self.traj_len
    }

    /// Length of a flattened retrieval context.
    pub fn context_len(&self) -> usize {
        self.slots() * self.state_dim
    }
}

/// Q/K/V encoders, time table and multi-head attention.
#[derive(Debug, Clone)]
pub struct Aggregator {
    pub dims: AggregatorDims,
    pub q_enc: Mlp,
    pub k_enc: Mlp,
    pub v_enc: Mlp,
    pub time: ParamId,
    pub mha: MultiHeadAttention,
}

impl Aggregator {
    /// Registers parameters under `{prefix}.` in `store`.
    pub fn new(store: &mut ParamStore, prefix: &str, dims: AggregatorDims, rng: &mut Rng) -> Result<Self> {
        if dims.k == 0 || dims.traj_len == 0 {
            return Err(Error::Config("k and trajectory length must be positive".into()));
        }
        let enc = |store: &mut ParamStore, name: &str, rng: &mut Rng| {
            Mlp::new(
                store,
                &format!("{prefix}.{name}"),
                &[dims.state_dim, dims.enc_hidden, dims.ref_dim],
                Init::Orthogonal,
                OutputActivation::None,
                rng,
            )
        };
        let q_enc = enc(store, "q_enc", rng);
        let k_enc = enc(store, "k_enc", rng);
        let v_enc = enc(store, "v_enc", rng);
        let table: Vec<f64> = (0..dims.traj_len * dims.ref_dim)
            .map(|_| {
                0.02 * {
                    let e: f64 = StandardNormal.sample(rng);
                    e
                }
            })
            .collect();
        let time = store.add(
            format!("{prefix}.time"),
            Tensor::new(vec![dims.traj_len, dims.ref_dim], table)?,
        );
        let mha = MultiHeadAttention::new(store, &format!("{prefix}.mha"), dims.ref_dim, dims.heads, rng)?;
        Ok(Self {
            dims,
            q_enc,
            k_enc,
            v_enc,
            time,
            mha,
        })
    }

    /// Attention for a batch. `states` is `B × S`; `context` holds
    /// `B·slots` retrieved states row-major, `offsets` their positions
    /// within their trajectory, and `mask` (length `B`) zeroes the output
    /// of rows without retrieval.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        states: Var,
        context: Vec<f64>,
        offsets: Vec<usize>,
        slots: usize,
        mask: Vec<f64>,
    ) -> Result<Var> {
        Ok(self.forward_parts(g, store, states, context, offsets, slots, mask)?.0)
    }

    /// [`Self::forward`] that also returns the raw attention node.
    #[allow(clippy::too_many_arguments)]
    fn forward_parts(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        states: Var,
        context: Vec<f64>,
        offsets: Vec<usize>,
        slots: usize,
        mask: Vec<f64>,
    ) -> Result<(Var, Var)> {
        let (b, s) = g.shape(states);
        if s != self.dims.state_dim || context.len() != b * slots * s || offsets.len() != b * slots {
            return Err(Error::Shape {
                op: "aggregate",
                detail: format!(
                    "{b} states of dim {s}, context {} values, {} offsets, {slots} slots",
                    context.len(),
                    offsets.len()
                ),
            });
        }
        if let Some(&o) = offsets.iter().find(|&&o| o >= self.dims.traj_len) {
            return Err(Error::Contract(format!(
                "time offset {o} outside table of {}",
                self.dims.traj_len
            )));
        }
        let q = self.q_enc.forward(g, store, states)?;
        let ctx = g.input(b * slots, s, context)?;
        let keys = self.k_enc.forward(g, store, ctx)?;
        let values = self.v_enc.forward(g, store, ctx)?;
        let table = g.param(store, self.time);
        let t = g.gather_rows(table, offsets)?;
        let keys = g.add(keys, t)?;
        let values = g.add(values, t)?;
        let (out, att) = self.mha.forward(g, store, q, keys, values, slots)?;
        if mask.iter().all(|&m| m == 1.0) {
            return Ok((out, att));
        }
        let m = g.input(b, 1, mask)?;
        Ok((g.mul_col(out, m)?, att))
    }

    /// Batch forward over stored contexts of `k·D` states each; `None`
    /// entries (warm-up) give a zero reference vector.
    pub fn forward_contexts(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        states: Var,
        contexts: &[Option<&[f64]>],
    ) -> Result<Var> {
        let slots = self.dims.slots();
        let len = self.dims.context_len();
        let mut flat = Vec::with_capacity(contexts.len() * len);
        let mut mask = Vec::with_capacity(contexts.len());
        for c in contexts {
            match c {
                Some(c) if c.len() == len => {
                    flat.extend_from_slice(c);
                    mask.push(1.0);
                }
                Some(c) => {
                    return Err(Error::Shape {
                        op: "aggregate",
                        detail: format!("context of {} values, expected {len}", c.len()),
                    })
                }
                None => {
                    flat.extend(std::iter::repeat_n(0.0, len));
                    mask.push(0.0);
                }
            }
        }
        let offsets = (0..contexts.len() * slots).map(|i| i % self.dims.traj_len).collect();
        self.forward(g, store, states, flat, offsets, slots, mask)
    }

    /// Reference vector for one state. An empty retrieval gives zeros.
    pub fn aggregate(&self, store: &ParamStore, set: &RetrievalSet, state: &[f64]) -> Result<Vec<f64>> {
        if set.is_empty() {
            return Ok(vec![0.0; self.dims.ref_dim]);
        }
        let mut g = Graph::new();
        let s = g.input(1, state.len(), state.to_vec())?;
        let offsets = set.flat_offsets();
        let slots = offsets.len();
        let u = self.forward(&mut g, store, s, set.flat_states(), offsets, slots, vec![1.0])?;
        Ok(g.value(u).to_vec())
    }

    /// Reference vector plus the attention weights behind it, laid out
    /// `[head][slot]` with slots in retrieval order.
    pub fn explain(&self, store: &ParamStore, set: &RetrievalSet, state: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        if set.is_empty() {
            return Ok((vec![0.0; self.dims.ref_dim], Vec::new()));
        }
        let mut g = Graph::new();
        let s = g.input(1, state.len(), state.to_vec())?;
        let offsets = set.flat_offsets();
        let slots = offsets.len();
        let (u, att) = self.forward_parts(&mut g, store, s, set.flat_states(), offsets, slots, vec![1.0])?;
        let w = g.attention_weights(att).unwrap_or_default().to_vec();
        Ok((g.value(u).to_vec(), w))
    }
}

/// A reference vector of i.i.d. standard normal entries.
pub fn noise_reference(dim: usize, rng: &mut Rng) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}
