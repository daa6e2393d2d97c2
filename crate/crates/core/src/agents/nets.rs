use crate::nn::{Graph, Init, Linear, ParamId, ParamStore, Tensor, Var};
use crate::sr::{Aggregator, AggregatorDims};
use crate::{Error, Result, Rng};

/// Prefix of the aggregation sub-module inside actor and critic stores.
pub const SR_PREFIX: &str = "sr.";

/// Reference inputs for a batch.
#[derive(Debug, Clone, Copy)]
pub enum RefInput<'a> {
    /// No reference (plain agent).
    None,
    /// Retrieved contexts, aggregated by the network's own aggregator.
    Contexts(&'a [Option<&'a [f64]>]),
    /// Ready-made reference vectors, `B × U` row-major.
    Vectors(&'a [f64]),
}

/// `Linear(in, H) → ReLU → [·W_h + u·W_u + b] → ReLU → Linear(H, out)`.
///
/// The reference vector `u` enters after the first hidden layer through
/// its own weight `W_u`; without SR the block is an ordinary layer.
#[derive(Debug, Clone)]
pub struct RefMlp {
    pub l1: Linear,
    pub l2: Linear,
    pub ref_weight: Option<ParamId>,
    pub l3: Linear,
    pub agg: Option<Aggregator>,
    pub tanh_out: bool,
}

impl RefMlp {
    /// Base layers draw from `rng`; SR extras from `sr_rng`, so a plain and
    /// an SR network built from equal seeds share their base weights.
    #[allow(clippy::too_many_arguments)]
    fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        sr: Option<AggregatorDims>,
        tanh_out: bool,
        rng: &mut Rng,
        sr_rng: &mut Rng,
    ) -> Result<Self> {
        let l1 = Linear::new(store, &format!("{name}.l1"), in_dim, hidden, Init::Orthogonal, rng);
        let l2 = Linear::new(store, &format!("{name}.l2"), hidden, hidden, Init::Orthogonal, rng);
        let l3 = Linear::new(store, &format!("{name}.l3"), hidden, out_dim, Init::Orthogonal, rng);
        let (ref_weight, agg) = match sr {
            None => (None, None),
            Some(dims) => {
                let w = Init::Orthogonal.fill(dims.ref_dim, hidden, sr_rng);
                let id = store.add(format!("{name}.l2.ref"), Tensor::new(vec![dims.ref_dim, hidden], w)?);
                let agg = Aggregator::new(store, &format!("{SR_PREFIX}{name}"), dims, sr_rng)?;
                (Some(id), Some(agg))
            }
        };
        Ok(Self {
            l1,
            l2,
            ref_weight,
            l3,
            agg,
            tanh_out,
        })
    }

    pub fn is_sr(&self) -> bool {
        self.agg.is_some()
    }

    pub fn ref_dim(&self) -> Option<usize> {
        self.agg.as_ref().map(|a| a.dims.ref_dim)
    }

    /// Reference vectors for a batch of `states` as a `B × U` node.
    pub fn reference(&self, g: &mut Graph, store: &ParamStore, states: Var, refs: RefInput) -> Result<Option<Var>> {
        let (b, _) = g.shape(states);
        match (&self.agg, refs) {
            (None, RefInput::None) => Ok(None),
            (None, _) => Err(Error::Contract("reference given to a network without SR".into())),
            (Some(_), RefInput::None) => Err(Error::Contract("SR network needs a reference input".into())),
            (Some(agg), RefInput::Contexts(c)) => {
                if c.len() != b {
                    return Err(Error::Shape {
                        op: "reference",
                        detail: format!("{} contexts for {b} states", c.len()),
                    });
                }
                Ok(Some(agg.forward_contexts(g, store, states, c)?))
            }
            (Some(agg), RefInput::Vectors(v)) => Ok(Some(g.input(b, agg.dims.ref_dim, v.to_vec())?)),
        }
    }

    /// `x` is the layer input (`states` or `[states, actions]`).
    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, u: Option<Var>) -> Result<Var> {
        let h = self.l1.forward(g, store, x)?;
        let h = g.relu(h);
        let mut z = self.l2.forward(g, store, h)?;
        if let (Some(u), Some(w)) = (u, self.ref_weight) {
            let wu = g.param(store, w);
            let zu = g.matmul(u, wu)?;
            z = g.add(z, zu)?;
        }
        let h = g.relu(z);
        let y = self.l3.forward(g, store, h)?;
        Ok(if self.tanh_out { g.tanh(y) } else { y })
    }

    /// Zeroes and freezes `W_u`, making the network ignore the reference.
    pub fn zero_reference_weights(&self, store: &mut ParamStore) {
        if let Some(w) = self.ref_weight {
            let t = store.get_mut(w);
            t.data.iter_mut().for_each(|x| *x = 0.0);
            t.requires_grad = false;
            t.grad = None;
        }
    }
}

/// Deterministic policy `π(s[, u]) ∈ [-1, 1]^A`.
#[derive(Debug, Clone)]
pub struct ActorNet {
    pub net: RefMlp,
    pub state_dim: usize,
    pub action_dim: usize,
}

impl ActorNet {
    pub fn new(
        store: &mut ParamStore,
        state_dim: usize,
        action_dim: usize,
        hidden: usize,
        sr: Option<AggregatorDims>,
        rng: &mut Rng,
        sr_rng: &mut Rng,
    ) -> Result<Self> {
        let net = RefMlp::new(store, "actor", state_dim, hidden, action_dim, sr, true, rng, sr_rng)?;
        Ok(Self {
            net,
            state_dim,
            action_dim,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, states: Var, refs: RefInput) -> Result<Var> {
        let u = self.net.reference(g, store, states, refs)?;
        self.net.forward(g, store, states, u)
    }

    /// Same, with a precomputed reference node.
    pub fn forward_with(&self, g: &mut Graph, store: &ParamStore, states: Var, u: Option<Var>) -> Result<Var> {
        self.net.forward(g, store, states, u)
    }
}

/// `Q(s, a[, u])`.
#[derive(Debug, Clone)]
pub struct CriticNet {
    pub net: RefMlp,
    pub state_dim: usize,
    pub action_dim: usize,
}

impl CriticNet {
    pub fn new(
        store: &mut ParamStore,
        state_dim: usize,
        action_dim: usize,
        hidden: usize,
        sr: Option<AggregatorDims>,
        rng: &mut Rng,
        sr_rng: &mut Rng,
    ) -> Result<Self> {
        let net = RefMlp::new(
            store,
            "critic",
            state_dim + action_dim,
            hidden,
            1,
            sr,
            false,
            rng,
            sr_rng,
        )?;
        Ok(Self {
            net,
            state_dim,
            action_dim,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, states: Var, actions: Var, refs: RefInput) -> Result<Var> {
        let u = self.net.reference(g, store, states, refs)?;
        self.forward_with(g, store, states, actions, u)
    }

    pub fn forward_with(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        states: Var,
        actions: Var,
        u: Option<Var>,
    ) -> Result<Var> {
        let x = g.concat_cols(states, actions)?;
        self.net.forward(g, store, x, u)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::check_gradients;
    use rand::{Rng as _, SeedableRng};

    fn dims() -> AggregatorDims {
        AggregatorDims {
            state_dim: 3,
            ref_dim: 4,
            enc_hidden: 5,
            heads: 2,
            k: 2,
            traj_len: 2,
        }
    }

    fn rand_vec(rng: &mut Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn zero_weights_give_zero_action() {
        let mut store = ParamStore::new();
        let mut rng = Rng::seed_from_u64(0);
        let actor = ActorNet::new(&mut store, 3, 2, 8, None, &mut rng.clone(), &mut rng).unwrap();
        for id in store.ids().collect::<Vec<_>>() {
            store.get_mut(id).data.iter_mut().for_each(|x| *x = 0.0);
        }
        let mut g = Graph::new();
        let s = g.input(1, 3, vec![0.3, 0.2, -0.5]).unwrap();
        let a = actor.forward(&mut g, &store, s, RefInput::None).unwrap();
        assert_eq!(g.value(a), &[0.0, 0.0]);
    }

    #[test]
    fn reference_presence_is_checked() {
        let mut rng = Rng::seed_from_u64(1);
        let mut plain = ParamStore::new();
        let a = ActorNet::new(&mut plain, 3, 2, 8, None, &mut rng.clone(), &mut rng).unwrap();
        let mut sr = ParamStore::new();
        let b = ActorNet::new(&mut sr, 3, 2, 8, Some(dims()), &mut rng.clone(), &mut rng).unwrap();
        let mut g = Graph::new();
        let s = g.input(1, 3, vec![0.0; 3]).unwrap();
        assert!(a.forward(&mut g, &plain, s, RefInput::Vectors(&[0.0; 4])).is_err());
        assert!(matches!(
            b.forward(&mut g, &sr, s, RefInput::None),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn zeroed_reference_matches_plain_actor() {
        let mut plain = ParamStore::new();
        let a = ActorNet::new(
            &mut plain,
            3,
            2,
            8,
            None,
            &mut Rng::seed_from_u64(5),
            &mut Rng::seed_from_u64(6),
        )
        .unwrap();
        let mut sr = ParamStore::new();
        let b = ActorNet::new(
            &mut sr,
            3,
            2,
            8,
            Some(dims()),
            &mut Rng::seed_from_u64(5),
            &mut Rng::seed_from_u64(6),
        )
        .unwrap();
        b.net.zero_reference_weights(&mut sr);
        let mut rng = Rng::seed_from_u64(7);
        for _ in 0..20 {
            let s = rand_vec(&mut rng, 3);
            let ctx = rand_vec(&mut rng, 12);
            let mut g = Graph::new();
            let sv = g.input(1, 3, s.clone()).unwrap();
            let x = a.forward(&mut g, &plain, sv, RefInput::None).unwrap();
            let y = b.forward(&mut g, &sr, sv, RefInput::Contexts(&[Some(&ctx)])).unwrap();
            let xb: Vec<u64> = g.value(x).iter().map(|v| v.to_bits()).collect();
            let yb: Vec<u64> = g.value(y).iter().map(|v| v.to_bits()).collect();
            assert_eq!(xb, yb);
        }
    }

    #[test]
    fn actor_and_critic_gradients() {
        for seed in 0..3 {
            let mut rng = Rng::seed_from_u64(seed);
            let mut store = ParamStore::new();
            let mut sr_rng = Rng::seed_from_u64(seed + 100);
            let actor = ActorNet::new(&mut store, 3, 2, 6, Some(dims()), &mut rng, &mut sr_rng).unwrap();
            let critic = CriticNet::new(&mut store, 3, 2, 6, Some(dims()), &mut rng, &mut sr_rng).unwrap();
            let s = rand_vec(&mut rng, 6);
            let ctx = rand_vec(&mut rng, 24);
            let r = check_gradients(&mut store, 1e-5, |g, store| {
                let sv = g.input(2, 3, s.clone())?;
                let contexts = [Some(&ctx[..12]), Some(&ctx[12..])];
                let a = actor.forward(g, store, sv, RefInput::Contexts(&contexts))?;
                let q = critic.forward(g, store, sv, a, RefInput::Contexts(&contexts))?;
                Ok(g.mean(q))
            })
            .unwrap();
            assert!(r.max_rel_error < 1e-4, "{r:?}");
        }
    }
}
