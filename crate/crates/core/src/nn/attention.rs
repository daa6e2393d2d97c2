use super::graph::{Graph, Var};
use super::init::Init;
use super::layers::Linear;
use super::tensor::ParamStore;
use crate::{Error, Result, Rng};

/// Multi-head cross-attention with learned input and output projections.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub num_heads: usize,
    pub model_dim: usize,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, model_dim: usize, num_heads: usize, rng: &mut Rng) -> Result<Self> {
        if num_heads == 0 || !model_dim.is_multiple_of(num_heads) {
            return Err(Error::Config(format!(
                "model_dim {model_dim} is not divisible by {num_heads} heads"
            )));
        }
        let mk = |store: &mut ParamStore, p: &str, rng: &mut Rng| {
            Linear::new(
                store,
                &format!("{name}.{p}"),
                model_dim,
                model_dim,
                Init::Orthogonal,
                rng,
            )
        };
        Ok(Self {
            num_heads,
            model_dim,
            query: mk(store, "q_proj", rng),
            key: mk(store, "k_proj", rng),
            value: mk(store, "v_proj", rng),
            output: mk(store, "out_proj", rng),
        })
    }

    /// `q` is `B × U`; `keys`/`values` are `(B·slots) × U`. Returns the
    /// output-projected `B × U` result and the raw attention node (whose
    /// weights can be read with [`Graph::attention_weights`]).
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        q: Var,
        keys: Var,
        values: Var,
        slots: usize,
    ) -> Result<(Var, Var)> {
        if slots == 0 {
            return Err(Error::EmptySlots);
        }
        let qp = self.query.forward(g, store, q)?;
        let kp = self.key.forward(g, store, keys)?;
        let vp = self.value.forward(g, store, values)?;
        let att = g.attention(qp, kp, vp, self.num_heads, slots)?;
        let out = self.output.forward(g, store, att)?;
        Ok((out, att))
    }
}

/// Single-query attention over `M` slots given as row-major slices.
/// Returns the `U`-dim output and per-head weights (`heads × M`).
pub fn multi_head_attention(
    mha: &MultiHeadAttention,
    store: &ParamStore,
    q: &[f64],
    keys: &[f64],
    values: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let u = mha.model_dim;
    if q.len() != u || !keys.len().is_multiple_of(u) || keys.len() != values.len() {
        return Err(Error::Shape {
            op: "multi_head_attention",
            detail: format!("q {} keys {} values {} with U={u}", q.len(), keys.len(), values.len()),
        });
    }
    let m = keys.len() / u;
    if m == 0 {
        return Err(Error::EmptySlots);
    }
    let mut g = Graph::new();
    let qv = g.input(1, u, q.to_vec())?;
    let kv = g.input(m, u, keys.to_vec())?;
    let vv = g.input(m, u, values.to_vec())?;
    let (out, att) = mha.forward(&mut g, store, qv, kv, vv, m)?;
    let w = g.attention_weights(att).unwrap_or_default().to_vec();
    Ok((g.value(out).to_vec(), w))
}
