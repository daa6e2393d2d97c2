use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::Rng;

/// Weight initialisation schemes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Orthogonal rows/columns (gain 1).
    Orthogonal,
    /// Uniform in `[-a, a]`.
    Uniform(f64),
    Zeros,
}

impl Init {
    /// Fills an `rows × cols` row-major matrix.
    pub fn fill(self, rows: usize, cols: usize, rng: &mut Rng) -> Vec<f64> {
        match self {
            Init::Orthogonal => orthogonal(rows, cols, rng),
            Init::Uniform(a) => (0..rows * cols).map(|_| rng.random_range(-a..=a)).collect(),
            Init::Zeros => vec![0.0; rows * cols],
        }
    }
}

/// Random matrix with orthonormal rows (if `rows <= cols`) or columns
/// (otherwise), built by modified Gram-Schmidt on a Gaussian draw.
pub fn orthogonal(rows: usize, cols: usize, rng: &mut Rng) -> Vec<f64> {
    let (n, m) = if rows <= cols { (rows, cols) } else { (cols, rows) };
    // n vectors of length m
    let mut vecs: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..m).map(|_| StandardNormal.sample(rng)).collect())
        .collect();
    for i in 0..n {
        for j in 0..i {
            let (done, rest) = vecs.split_at_mut(i);
            let proj: f64 = done[j].iter().zip(&rest[0]).map(|(a, b)| a * b).sum();
            rest[0].iter_mut().zip(&done[j]).for_each(|(x, q)| *x -= proj * q);
        }
        let norm = vecs[i].iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        vecs[i].iter_mut().for_each(|x| *x /= norm);
    }
    let mut out = vec![0.0; rows * cols];
    for (i, v) in vecs.iter().enumerate() {
        for (j, &x) in v.iter().enumerate() {
            if rows <= cols {
                out[i * cols + j] = x;
            } else {
                out[j * cols + i] = x;
            }
        }
    }
    out
}
