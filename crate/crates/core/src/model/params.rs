//! Named parameter storage and initialization.

use indexmap::IndexMap;
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Tape, Tensor, Var};

/// How a parameter is initialized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    /// Orthogonal columns over the `[fan_in, fan_out]` view, scaled by the gain.
    Orthogonal(f64),
}

/// Parameters in a fixed insertion order, addressed by name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: IndexMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.entries.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.get_index_of(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.values_mut()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalars.
    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    /// Records every parameter on `tape` as a differentiable leaf.
    pub fn bind<'s, 't>(&'s self, tape: &'t Tape) -> Bound<'s, 't> {
        Bound { store: self, vars: self.entries.values().map(|t| tape.param(t.clone())).collect() }
    }
}

/// Parameters recorded on a tape.
pub struct Bound<'s, 't> {
    store: &'s ParamStore,
    pub vars: Vec<Var<'t>>,
}

impl<'t> Bound<'_, 't> {
    pub fn get(&self, name: &str) -> Var<'t> {
        let i = self.store.index_of(name).unwrap_or_else(|| panic!("unknown parameter {name}"));
        self.vars[i]
    }

    pub fn maybe(&self, name: &str) -> Option<Var<'t>> {
        self.store.index_of(name).map(|i| self.vars[i])
    }
}

/// Matrix with orthonormal columns (or rows, when wider than tall), via QR of
/// a Gaussian matrix with the sign of `R`'s diagonal folded back in.
pub fn orthogonal(rows: usize, cols: usize, gain: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let (r, c) = if rows >= cols { (rows, cols) } else { (cols, rows) };
    let a = DMatrix::<f64>::from_fn(r, c, |_, _| StandardNormal.sample(rng));
    let qr = a.qr();
    let mut q = qr.q();
    let rm = qr.r();
    for j in 0..c {
        if rm[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[i * cols + j] = gain * if rows >= cols { q[(i, j)] } else { q[(j, i)] };
        }
    }
    out
}

/// Builds a store from `(name, shape, init)` triples. Weights of shape
/// `[taps, cin, cout]` are viewed as `[taps * cin, cout]`; vectors as a column.
pub fn init_store(layout: &[(String, Vec<usize>, Init)], seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for (name, shape, init) in layout {
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Zeros => vec![0.0; n],
            Init::Orthogonal(gain) => {
                let cols = *shape.last().expect("non-empty shape");
                orthogonal(n / cols, cols, *gain, &mut rng)
            }
        };
        store.insert(name.clone(), Tensor::new(shape.clone(), data));
    }
    store
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gram(m: &[f64], rows: usize, cols: usize) -> Vec<f64> {
        let mut g = vec![0.0; cols * cols];
        for a in 0..cols {
            for b in 0..cols {
                g[a * cols + b] = (0..rows).map(|i| m[i * cols + a] * m[i * cols + b]).sum();
            }
        }
        g
    }

    #[test]
    fn orthogonal_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = orthogonal(27, 8, 1.0, &mut rng);
        let g = gram(&m, 27, 8);
        for a in 0..8 {
            for b in 0..8 {
                let want = if a == b { 1.0 } else { 0.0 };
                assert!((g[a * 8 + b] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn orthogonal_rows_when_wide() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = orthogonal(4, 10, 2.0, &mut rng);
        for a in 0..4 {
            for b in 0..4 {
                let dot: f64 = (0..10).map(|j| m[a * 10 + j] * m[b * 10 + j]).sum();
                let want = if a == b { 4.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn store_is_deterministic() {
        let layout = vec![
            ("w".to_string(), vec![9, 3, 4], Init::Orthogonal(1.0)),
            ("b".to_string(), vec![4], Init::Zeros),
        ];
        let a = init_store(&layout, 7);
        assert_eq!(a, init_store(&layout, 7));
        assert_ne!(a, init_store(&layout, 8));
        assert_eq!(a.num_scalars(), 112);
        assert_eq!(a.get("b").unwrap().data(), &[0.0; 4]);
    }
}
