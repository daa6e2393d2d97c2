use std::sync::atomic::{AtomicU64, Ordering};

use crate::{Error, Result};

/// Dense row-major array of `f64` with an optional gradient buffer.
///
/// Rank is 1 or 2; a rank-1 tensor of length `n` behaves as a `1 × n`
/// row wherever a matrix is expected.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub grad: Option<Vec<f64>>,
    pub requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Shape {
                op: "tensor",
                detail: format!("dimensions must be positive, got {shape:?}"),
            });
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                detail: format!("shape {shape:?} needs {n} values, got {}", data.len()),
            });
        }
        Ok(Self {
            shape,
            data,
            grad: None,
            requires_grad: true,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
            grad: None,
            requires_grad: true,
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(rows, cols)` view of the tensor.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            _ => (1, self.data.len()),
        }
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    pub fn accumulate_grad(&mut self, g: &[f64]) {
        debug_assert_eq!(g.len(), self.data.len());
        match self.grad.as_mut() {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(b, x)| *b += x),
            None => self.grad = Some(g.to_vec()),
        }
    }
}

/// Handle to a tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

static NEXT_STORE: AtomicU64 = AtomicU64::new(1);

/// Named collection of learnable tensors.
///
/// Networks hold [`ParamId`]s; the values live here, so a target network
/// is simply a second store with the same layout.
#[derive(Debug)]
pub struct ParamStore {
    uid: u64,
    tensors: Vec<Tensor>,
    names: Vec<String>,
}

impl Clone for ParamStore {
    fn clone(&self) -> Self {
        Self {
            uid: NEXT_STORE.fetch_add(1, Ordering::Relaxed),
            tensors: self.tensors.clone(),
            names: self.names.clone(),
        }
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            uid: NEXT_STORE.fetch_add(1, Ordering::Relaxed),
            tensors: Vec::new(),
            names: Vec::new(),
        }
    }

    pub(crate) fn uid(&self) -> u64 {
        self.uid
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.tensors.push(tensor);
        self.names.push(name);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Marks every parameter whose name starts with `prefix` as frozen
    /// (or unfrozen) and drops any stale gradient.
    pub fn set_frozen(&mut self, prefix: &str, frozen: bool) {
        for (name, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            if name.starts_with(prefix) {
                t.requires_grad = !frozen;
                t.grad = None;
            }
        }
    }

    /// `self ← (1 − tau)·self + tau·source`, parameter by parameter.
    pub fn ema_from(&mut self, source: &ParamStore, tau: f64) {
        debug_assert_eq!(self.tensors.len(), source.tensors.len());
        for (t, s) in self.tensors.iter_mut().zip(&source.tensors) {
            for (a, b) in t.data.iter_mut().zip(&s.data) {
                *a = (1.0 - tau) * *a + tau * b;
            }
        }
    }

    /// Copies values (not gradients or freeze flags) from a store with the
    /// same layout.
    pub fn copy_values_from(&mut self, source: &ParamStore) -> Result<()> {
        if self.names != source.names {
            return Err(Error::Mismatch("parameter layouts differ".into()));
        }
        for (t, s) in self.tensors.iter_mut().zip(&source.tensors) {
            if t.shape != s.shape {
                return Err(Error::Mismatch(format!("shape {:?} vs {:?}", t.shape, s.shape)));
            }
            t.data.copy_from_slice(&s.data);
        }
        Ok(())
    }

    /// Global L2 norm of the current gradients.
    pub fn grad_norm(&self) -> f64 {
        self.tensors
            .iter()
            .filter_map(|t| t.grad.as_ref())
            .flat_map(|g| g.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    /// Gradient norm restricted to parameters under `prefix`.
    pub fn grad_norm_of(&self, prefix: &str) -> f64 {
        self.names
            .iter()
            .zip(&self.tensors)
            .filter(|(n, _)| n.starts_with(prefix))
            .filter_map(|(_, t)| t.grad.as_ref())
            .flat_map(|g| g.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales gradients so the global norm is at most `max_norm`.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm > 0.0 {
            let scale = max_norm / (norm + 1e-6);
            for g in self.tensors.iter_mut().filter_map(|t| t.grad.as_mut()) {
                g.iter_mut().for_each(|x| *x *= scale);
            }
        }
        norm
    }

    /// Flattened copy of every value whose name starts with `prefix`.
    pub fn snapshot(&self, prefix: &str) -> Vec<f64> {
        self.names
            .iter()
            .zip(&self.tensors)
            .filter(|(n, _)| n.starts_with(prefix))
            .flat_map(|(_, t)| t.data.iter().copied())
            .collect()
    }

    pub(crate) fn push_raw(&mut self, name: String, tensor: Tensor) {
        self.names.push(name);
        self.tensors.push(tensor);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
    }

    #[test]
    fn ema_endpoints() {
        let mut a = ParamStore::new();
        a.add("w", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let mut b = a.clone();
        b.get_mut(ParamId(0)).data = vec![5.0, 6.0];
        let mut t = a.clone();
        t.ema_from(&b, 0.0);
        assert_eq!(t.get(ParamId(0)).data, vec![1.0, 2.0]);
        t.ema_from(&b, 1.0);
        assert_eq!(t.get(ParamId(0)).data, vec![5.0, 6.0]);
        assert_ne!(a.uid(), b.uid());
    }
}
