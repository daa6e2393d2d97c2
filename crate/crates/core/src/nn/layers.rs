use super::graph::{Graph, Var};
use super::init::Init;
use super::tensor::{ParamId, ParamStore, Tensor};
use crate::{Error, Result, Rng};

/// Affine layer `y = x·W + b` with `W` stored as `in × out`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, init: Init, rng: &mut Rng) -> Self {
        let w = Tensor {
            shape: vec![in_dim, out_dim],
            data: init.fill(in_dim, out_dim, rng),
            grad: None,
            requires_grad: true,
        };
        let weight = store.add(format!("{name}.weight"), w);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[1, out_dim]));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let (_, c) = g.shape(x);
        if c != self.in_dim {
            return Err(Error::Config(format!(
                "layer expects {} inputs, got {:?}",
                self.in_dim,
                g.shape(x)
            )));
        }
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }
}

/// Activation applied after the final layer of an [`Mlp`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputActivation {
    None,
    Tanh,
    Relu,
}

/// Stack of [`Linear`] layers with ReLU between them.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub output: OutputActivation,
}

impl Mlp {
    /// `dims = [in, hidden.., out]`. Hidden layers use orthogonal init; the
    /// last layer uses `last_init`.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dims: &[usize],
        last_init: Init,
        output: OutputActivation,
        rng: &mut Rng,
    ) -> Self {
        assert!(dims.len() >= 2, "an MLP needs input and output sizes");
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let init = if i + 1 == n { last_init } else { Init::Orthogonal };
                Linear::new(store, &format!("{name}.{i}"), dims[i], dims[i + 1], init, rng)
            })
            .collect();
        Self { layers, output }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map(|l| l.out_dim).unwrap_or(0)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let mut h = x;
        let n = self.layers.len();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, store, h)?;
            if i + 1 < n {
                h = g.relu(h);
            }
        }
        Ok(match self.output {
            OutputActivation::None => h,
            OutputActivation::Tanh => g.tanh(h),
            OutputActivation::Relu => g.relu(h),
        })
    }
}

/// Evaluates `mlp` on a batch without keeping the tape around.
pub fn forward_mlp(mlp: &Mlp, store: &ParamStore, input: &[f64], rows: usize) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let cols = input.len().checked_div(rows).unwrap_or(0);
    if rows * cols != input.len() || cols != mlp.in_dim() {
        return Err(Error::Config(format!(
            "MLP expects {} inputs per row, got {} values for {rows} rows",
            mlp.in_dim(),
            input.len()
        )));
    }
    let x = g.input(rows, cols, input.to_vec())?;
    let y = mlp.forward(&mut g, store, x)?;
    Ok(g.value(y).to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn set(store: &mut ParamStore, id: ParamId, v: &[f64]) {
        store.get_mut(id).data.copy_from_slice(v);
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let mut rng = Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "m", &[3, 2], Init::Zeros, OutputActivation::None, &mut rng);
        let y = forward_mlp(&mlp, &store, &[1.0, -2.0, 7.0], 1).unwrap();
        assert_eq!(y, vec![0.0, 0.0]);
    }

    #[test]
    fn identity_layer_passes_input() {
        let mut rng = Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "m", &[2, 2], Init::Zeros, OutputActivation::None, &mut rng);
        set(&mut store, mlp.layers[0].weight, &[1.0, 0.0, 0.0, 1.0]);
        let y = forward_mlp(&mlp, &store, &[1.0, 2.0], 1).unwrap();
        assert_eq!(y, vec![1.0, 2.0]);
    }

    #[test]
    fn two_layer_net_matches_hand_matmul() {
        let mut rng = Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let mlp = Mlp::new(
            &mut store,
            "m",
            &[2, 3, 1],
            Init::Zeros,
            OutputActivation::None,
            &mut rng,
        );
        let w1 = [0.2, -0.4, 1.0, 0.5, 0.3, -0.7];
        let b1 = [0.1, 0.0, -0.2];
        let w2 = [1.5, -2.0, 0.25];
        let b2 = [0.05];
        set(&mut store, mlp.layers[0].weight, &w1);
        set(&mut store, mlp.layers[0].bias, &b1);
        set(&mut store, mlp.layers[1].weight, &w2);
        set(&mut store, mlp.layers[1].bias, &b2);

        // independent scalar oracle
        let x = [0.5, -0.5];
        let mut h = [0.0; 3];
        for j in 0..3 {
            let mut s = b1[j];
            for i in 0..2 {
                s += x[i] * w1[i * 3 + j];
            }
            h[j] = if s > 0.0 { s } else { 0.0 };
        }
        let mut want = b2[0];
        for j in 0..3 {
            want += h[j] * w2[j];
        }
        let y = forward_mlp(&mlp, &store, &x, 1).unwrap();
        assert!((y[0] - want).abs() < 1e-15, "{} vs {want}", y[0]);
    }

    #[test]
    fn dimension_mismatch_is_a_config_error() {
        let mut rng = Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "m", &[3, 2], Init::Zeros, OutputActivation::None, &mut rng);
        let err = forward_mlp(&mlp, &store, &[1.0, 2.0], 1).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }
}
