//! Reverse-mode automatic differentiation over row-major matrices.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its
//! value, and [`Graph::backward`] walks the nodes in reverse to produce
//! gradients. Parameters enter the tape through [`Graph::param`], which
//! remembers which [`ParamStore`] they came from so the store can later
//! collect its gradients with [`ParamStore::accumulate`].

use super::tensor::{ParamId, ParamStore};
use crate::{Error, Result};

/// Index of a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param {
        store: u64,
        id: ParamId,
    },
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulCol(Var, Var),
    Min(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    Square(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    Mean(Var),
    SumCols(Var),
    RowNorm(Var),
    ConcatCols(Var, Var),
    GatherRows(Var, Vec<usize>),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        slots: usize,
        weights: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Gradients of one backward pass, indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, or `None` if `v` does not
    /// influence the loss through any differentiable path.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    detached: Vec<u64>,
}

fn shape_err(op: &'static str, detail: String) -> Error {
    Error::Shape { op, detail }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    /// Value of a `1 × 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    /// Constant input; receives no gradient.
    pub fn input(&mut self, rows: usize, cols: usize, value: Vec<f64>) -> Result<Var> {
        if rows * cols != value.len() {
            return Err(shape_err(
                "input",
                format!("{rows}x{cols} needs {} values, got {}", rows * cols, value.len()),
            ));
        }
        Ok(self.push(rows, cols, value, Op::Input, false))
    }

    pub fn constant(&mut self, rows: usize, cols: usize, fill: f64) -> Var {
        self.push(rows, cols, vec![fill; rows * cols], Op::Input, false)
    }

    /// Treats every parameter of `store` as a constant on this tape.
    pub fn detach_store(&mut self, store: &ParamStore) {
        self.detached.push(store.uid());
    }

    /// Brings a stored parameter onto the tape.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let t = store.get(id);
        let (r, c) = t.dims2();
        if self.detached.contains(&store.uid()) {
            return self.push(r, c, t.data.clone(), Op::Input, false);
        }
        self.push(
            r,
            c,
            t.data.clone(),
            Op::Param { store: store.uid(), id },
            t.requires_grad,
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.shape(a);
        let (k2, m) = self.shape(b);
        if k != k2 {
            return Err(shape_err("matmul", format!("{n}x{k} · {k2}x{m}")));
        }
        let mut out = vec![0.0; n * m];
        gemm(
            (n, k, m),
            (&self.nodes[a.0].value, k, 1),
            (&self.nodes[b.0].value, m, 1),
            &mut out,
        );
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(n, m, out, Op::MatMul(a, b), ng))
    }

    /// Adds a `1 × c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        let (r2, c2) = self.shape(row);
        if r2 != 1 || c2 != c {
            return Err(shape_err("add_row", format!("{r}x{c} + {r2}x{c2}")));
        }
        let rv = &self.nodes[row.0].value;
        let mut out = self.nodes[a.0].value.clone();
        for chunk in out.chunks_mut(c) {
            chunk.iter_mut().zip(rv).for_each(|(o, b)| *o += b);
        }
        let ng = self.ng(a) || self.ng(row);
        Ok(self.push(r, c, out, Op::AddRow(a, row), ng))
    }

    fn zip_same(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa != sb {
            return Err(shape_err(name, format!("{sa:?} vs {sb:?}")));
        }
        let out = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(sa.0, sa.1, out, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Elementwise minimum; ties send the gradient to `a`.
    pub fn min(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("min", a, b, f64::min, Op::Min(a, b))
    }

    /// Multiplies each row of `a` by the matching entry of the `r × 1`
    /// column `col`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        if self.shape(col) != (r, 1) {
            return Err(shape_err("mul_col", format!("{r}x{c} * {:?}", self.shape(col))));
        }
        let cv = &self.nodes[col.0].value;
        let mut out = self.nodes[a.0].value.clone();
        for (i, chunk) in out.chunks_mut(c).enumerate() {
            chunk.iter_mut().for_each(|o| *o *= cv[i]);
        }
        let ng = self.ng(a) || self.ng(col);
        Ok(self.push(r, c, out, Op::MulCol(a, col), ng))
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let (r, c) = self.shape(a);
        let out = self.nodes[a.0].value.iter().map(|&x| f(x)).collect();
        let ng = self.ng(a);
        self.push(r, c, out, op, ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.map(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.map(a, |x| x + s, Op::AddScalar(a))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, f64::tanh, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, f64::exp, Op::Exp(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.map(a, |x| x * x, Op::Square(a))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping is
    /// active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.map(a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.iter().sum();
        let ng = self.ng(a);
        self.push(1, 1, vec![s], Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = &self.nodes[a.0].value;
        let s = v.iter().sum::<f64>() / v.len() as f64;
        let ng = self.ng(a);
        self.push(1, 1, vec![s], Op::Mean(a), ng)
    }

    /// Row sums: `r × c → r × 1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let out = self.nodes[a.0].value.chunks(c).map(|row| row.iter().sum()).collect();
        let ng = self.ng(a);
        self.push(r, 1, out, Op::SumCols(a), ng)
    }

    /// Euclidean norm of each row: `r × c → r × 1`. The gradient at a zero
    /// row is taken to be zero.
    pub fn row_norm(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let out = self.nodes[a.0]
            .value
            .chunks(c)
            .map(|row| row.iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        let ng = self.ng(a);
        self.push(r, 1, out, Op::RowNorm(a), ng)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        if ra != rb {
            return Err(shape_err("concat_cols", format!("{ra}x{ca} | {rb}x{cb}")));
        }
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let mut out = Vec::with_capacity(ra * (ca + cb));
        for i in 0..ra {
            out.extend_from_slice(&av[i * ca..(i + 1) * ca]);
            out.extend_from_slice(&bv[i * cb..(i + 1) * cb]);
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(ra, ca + cb, out, Op::ConcatCols(a, b), ng))
    }

    /// Output row `i` is row `index[i]` of `a`.
    pub fn gather_rows(&mut self, a: Var, index: Vec<usize>) -> Result<Var> {
        let (r, c) = self.shape(a);
        if let Some(&bad) = index.iter().find(|&&i| i >= r) {
            return Err(shape_err("gather_rows", format!("row {bad} of {r}")));
        }
        let av = &self.nodes[a.0].value;
        let mut out = Vec::with_capacity(index.len() * c);
        for &i in &index {
            out.extend_from_slice(&av[i * c..(i + 1) * c]);
        }
        let ng = self.ng(a);
        let rows = index.len();
        Ok(self.push(rows, c, out, Op::GatherRows(a, index), ng))
    }

    /// Scaled dot-product attention, split into `heads` heads, for a batch
    /// of `B` queries. `q` is `B × U`; `k` and `v` are `(B·slots) × U`
    /// with query `b` attending over rows `b·slots .. (b+1)·slots`.
    /// Returns the concatenated head outputs (`B × U`), before any output
    /// projection.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, slots: usize) -> Result<Var> {
        let (b, u) = self.shape(q);
        if slots == 0 {
            return Err(Error::EmptySlots);
        }
        if heads == 0 || u % heads != 0 {
            return Err(shape_err("attention", format!("{u} dims over {heads} heads")));
        }
        if self.shape(k) != (b * slots, u) || self.shape(v) != (b * slots, u) {
            return Err(shape_err(
                "attention",
                format!("q {b}x{u}, k {:?}, v {:?}, slots {slots}", self.shape(k), self.shape(v)),
            ));
        }
        let dh = u / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let qv = &self.nodes[q.0].value;
        let kv = &self.nodes[k.0].value;
        let vv = &self.nodes[v.0].value;
        let mut out = vec![0.0; b * u];
        let mut weights = vec![0.0; b * heads * slots];
        for bi in 0..b {
            for h in 0..heads {
                let off = h * dh;
                let qrow = &qv[bi * u + off..bi * u + off + dh];
                let w = &mut weights[(bi * heads + h) * slots..(bi * heads + h + 1) * slots];
                for (j, wj) in w.iter_mut().enumerate() {
                    let r = (bi * slots + j) * u + off;
                    let krow = &kv[r..r + dh];
                    *wj = qrow.iter().zip(krow).map(|(a, b)| a * b).sum::<f64>() * scale;
                }
                let mx = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for wj in w.iter_mut() {
                    *wj = (*wj - mx).exp();
                    z += *wj;
                }
                for wj in w.iter_mut() {
                    *wj /= z;
                }
                let orow = &mut out[bi * u + off..bi * u + off + dh];
                for (j, &wj) in w.iter().enumerate() {
                    let r = (bi * slots + j) * u + off;
                    for (o, x) in orow.iter_mut().zip(&vv[r..r + dh]) {
                        *o += wj * x;
                    }
                }
            }
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        Ok(self.push(
            b,
            u,
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                slots,
                weights,
            },
            ng,
        ))
    }

    /// Softmax weights recorded by an attention node, laid out as
    /// `[batch][head][slot]`.
    pub fn attention_weights(&self, att: Var) -> Option<&[f64]> {
        match &self.nodes[att.0].op {
            Op::Attention { weights, .. } => Some(weights),
            _ => None,
        }
    }

    /// Reverse pass from a `1 × 1` loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let n = &self.nodes[loss.0];
        if n.rows * n.cols != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got {}x{}",
                n.rows, n.cols
            )));
        }
        if !n.value[0].is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.needs_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.ng(v) {
            return;
        }
        let len = self.nodes[v.0].value.len();
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
        f(slot);
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| -> &[f64] { &self.nodes[v.0].value };
        match &node.op {
            Op::Input | Op::Param { .. } => {}
            Op::MatMul(a, b) => {
                let (n, k) = self.shape(*a);
                let m = node.cols;
                let (av, bv) = (val(*a), val(*b));
                // dA += G·Bᵀ and dB += Aᵀ·G, transposes expressed as strides
                self.acc(grads, *a, |ga| gemm((n, m, k), (g, m, 1), (bv, 1, m), ga));
                self.acc(grads, *b, |gb| gemm((k, n, m), (av, 1, k), (g, m, 1), gb));
            }
            Op::AddRow(a, row) => {
                let c = node.cols;
                self.acc(grads, *a, |ga| ga.iter_mut().zip(g).for_each(|(o, x)| *o += x));
                self.acc(grads, *row, |gr| {
                    for chunk in g.chunks(c) {
                        gr.iter_mut().zip(chunk).for_each(|(o, x)| *o += x);
                    }
                });
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, |ga| ga.iter_mut().zip(g).for_each(|(o, x)| *o += x));
                self.acc(grads, *b, |gb| gb.iter_mut().zip(g).for_each(|(o, x)| *o += x));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |ga| ga.iter_mut().zip(g).for_each(|(o, x)| *o += x));
                self.acc(grads, *b, |gb| gb.iter_mut().zip(g).for_each(|(o, x)| *o -= x));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                self.acc(grads, *a, |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * bv[i];
                    }
                });
                self.acc(grads, *b, |gb| {
                    for i in 0..g.len() {
                        gb[i] += g[i] * av[i];
                    }
                });
            }
            Op::Min(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                self.acc(grads, *a, |ga| {
                    for i in 0..g.len() {
                        if av[i] <= bv[i] {
                            ga[i] += g[i];
                        }
                    }
                });
                self.acc(grads, *b, |gb| {
                    for i in 0..g.len() {
                        if av[i] > bv[i] {
                            gb[i] += g[i];
                        }
                    }
                });
            }
            Op::MulCol(a, col) => {
                let c = node.cols;
                let (av, cv) = (val(*a), val(*col));
                self.acc(grads, *a, |ga| {
                    for (i, (o, x)) in ga.iter_mut().zip(g).enumerate() {
                        *o += x * cv[i / c];
                    }
                });
                self.acc(grads, *col, |gc| {
                    for (i, x) in g.iter().enumerate() {
                        gc[i / c] += x * av[i];
                    }
                });
            }
            Op::Scale(a, s) => {
                self.acc(grads, *a, |ga| ga.iter_mut().zip(g).for_each(|(o, x)| *o += x * s));
            }
            Op::AddScalar(a) => {
                self.acc(grads, *a, |ga| ga.iter_mut().zip(g).for_each(|(o, x)| *o += x));
            }
            Op::Relu(a) => {
                let av = val(*a);
                self.acc(grads, *a, |ga| {
                    for i in 0..g.len() {
                        if av[i] > 0.0 {
                            ga[i] += g[i];
                        }
                    }
                });
            }
            Op::Tanh(a) => {
                let y = &node.value;
                self.acc(grads, *a, |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * (1.0 - y[i] * y[i]);
                    }
                });
            }
            Op::Exp(a) => {
                let y = &node.value;
                self.acc(grads, *a, |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * y[i];
                    }
                });
            }
            Op::Square(a) => {
                let av = val(*a);
                self.acc(grads, *a, |ga| {
                    for i in 0..g.len() {
                        ga[i] += 2.0 * av[i] * g[i];
                    }
                });
            }
            Op::Clamp(a, lo, hi) => {
                let av = val(*a);
                self.acc(grads, *a, |ga| {
                    for i in 0..g.len() {
                        if av[i] >= *lo && av[i] <= *hi {
                            ga[i] += g[i];
                        }
                    }
                });
            }
            Op::Sum(a) => {
                self.acc(grads, *a, |ga| ga.iter_mut().for_each(|o| *o += g[0]));
            }
            Op::Mean(a) => {
                let n = val(*a).len() as f64;
                self.acc(grads, *a, |ga| ga.iter_mut().for_each(|o| *o += g[0] / n));
            }
            Op::SumCols(a) => {
                let c = self.shape(*a).1;
                self.acc(grads, *a, |ga| {
                    for (i, o) in ga.iter_mut().enumerate() {
                        *o += g[i / c];
                    }
                });
            }
            Op::RowNorm(a) => {
                let c = self.shape(*a).1;
                let av = val(*a);
                let norms = &node.value;
                self.acc(grads, *a, |ga| {
                    for (i, o) in ga.iter_mut().enumerate() {
                        let n = norms[i / c];
                        if n > 0.0 {
                            *o += g[i / c] * av[i] / n;
                        }
                    }
                });
            }
            Op::ConcatCols(a, b) => {
                let ca = self.shape(*a).1;
                let cb = self.shape(*b).1;
                let c = ca + cb;
                self.acc(grads, *a, |ga| {
                    for (i, chunk) in g.chunks(c).enumerate() {
                        ga[i * ca..(i + 1) * ca]
                            .iter_mut()
                            .zip(&chunk[..ca])
                            .for_each(|(o, x)| *o += x);
                    }
                });
                self.acc(grads, *b, |gb| {
                    for (i, chunk) in g.chunks(c).enumerate() {
                        gb[i * cb..(i + 1) * cb]
                            .iter_mut()
                            .zip(&chunk[ca..])
                            .for_each(|(o, x)| *o += x);
                    }
                });
            }
            Op::GatherRows(a, index) => {
                let c = node.cols;
                self.acc(grads, *a, |ga| {
                    for (i, &src) in index.iter().enumerate() {
                        ga[src * c..(src + 1) * c]
                            .iter_mut()
                            .zip(&g[i * c..(i + 1) * c])
                            .for_each(|(o, x)| *o += x);
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                slots,
                weights,
            } => self.attention_backward(node, g, grads, (*q, *k, *v), *heads, *slots, weights),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        node: &Node,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        (q, k, v): (Var, Var, Var),
        heads: usize,
        slots: usize,
        weights: &[f64],
    ) {
        let (b, u) = (node.rows, node.cols);
        let dh = u / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let qv = &self.nodes[q.0].value;
        let kv = &self.nodes[k.0].value;
        let vv = &self.nodes[v.0].value;

        // d(score) per (batch, head, slot)
        let mut dscore = vec![0.0; b * heads * slots];
        for bi in 0..b {
            for h in 0..heads {
                let off = h * dh;
                let grow = &g[bi * u + off..bi * u + off + dh];
                let base = (bi * heads + h) * slots;
                let w = &weights[base..base + slots];
                let mut dw = vec![0.0; slots];
                for (j, d) in dw.iter_mut().enumerate() {
                    let r = (bi * slots + j) * u + off;
                    *d = grow.iter().zip(&vv[r..r + dh]).map(|(x, y)| x * y).sum();
                }
                let dot: f64 = w.iter().zip(&dw).map(|(a, b)| a * b).sum();
                for j in 0..slots {
                    dscore[base + j] = w[j] * (dw[j] - dot) * scale;
                }
            }
        }
        self.acc(grads, v, |gv| {
            for bi in 0..b {
                for h in 0..heads {
                    let off = h * dh;
                    let grow = &g[bi * u + off..bi * u + off + dh];
                    let base = (bi * heads + h) * slots;
                    for j in 0..slots {
                        let wj = weights[base + j];
                        let r = (bi * slots + j) * u + off;
                        gv[r..r + dh].iter_mut().zip(grow).for_each(|(o, x)| *o += wj * x);
                    }
                }
            }
        });
        self.acc(grads, q, |gq| {
            for bi in 0..b {
                for h in 0..heads {
                    let off = h * dh;
                    let base = (bi * heads + h) * slots;
                    for j in 0..slots {
                        let ds = dscore[base + j];
                        let r = (bi * slots + j) * u + off;
                        gq[bi * u + off..bi * u + off + dh]
                            .iter_mut()
                            .zip(&kv[r..r + dh])
                            .for_each(|(o, x)| *o += ds * x);
                    }
                }
            }
        });
        self.acc(grads, k, |gk| {
            for bi in 0..b {
                for h in 0..heads {
                    let off = h * dh;
                    let base = (bi * heads + h) * slots;
                    let qrow = &qv[bi * u + off..bi * u + off + dh];
                    for j in 0..slots {
                        let ds = dscore[base + j];
                        let r = (bi * slots + j) * u + off;
                        gk[r..r + dh].iter_mut().zip(qrow).for_each(|(o, x)| *o += ds * x);
                    }
                }
            }
        });
    }

    /// Parameter nodes on this tape that belong to `store`, with their ids.
    pub(crate) fn params_of(&self, store: u64) -> impl Iterator<Item = (Var, ParamId)> + '_ {
        self.nodes.iter().enumerate().filter_map(move |(i, n)| match n.op {
            Op::Param { store: s, id } if s == store => Some((Var(i), id)),
            _ => None,
        })
    }
}

impl ParamStore {
    /// Adds this store's share of `grads` into the parameter gradient
    /// buffers. Frozen tensors are skipped.
    pub fn accumulate(&mut self, graph: &Graph, grads: &Gradients) {
        let uid = self.uid();
        for (var, id) in graph.params_of(uid) {
            let t = self.get_mut(id);
            if !t.requires_grad {
                continue;
            }
            if let Some(g) = grads.get(var) {
                t.accumulate_grad(g);
            }
        }
    }
}

/// `c += a·b` for row-major `c` (`n × m`); `a` is `n × k` and `b` is
/// `k × m`, each given with its (row, column) strides.
fn gemm(
    (n, k, m): (usize, usize, usize),
    (a, ars, acs): (&[f64], usize, usize),
    (b, brs, bcs): (&[f64], usize, usize),
    c: &mut [f64],
) {
    if n == 0 || m == 0 || k == 0 {
        return;
    }
    debug_assert!(a.len() >= n * k && b.len() >= k * m && c.len() == n * m);
    // SAFETY: the strides address only elements inside the checked
    // lengths of `a`, `b` and `c`, and `c` does not alias the inputs.
    unsafe {
        matrixmultiply::dgemm(
            n,
            k,
            m,
            1.0,
            a.as_ptr(),
            ars as isize,
            acs as isize,
            b.as_ptr(),
            brs as isize,
            bcs as isize,
            1.0,
            c.as_mut_ptr(),
            m as isize,
            1,
        );
    }
}
