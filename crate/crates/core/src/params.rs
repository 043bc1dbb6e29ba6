//! Named parameter tensors and their binding onto a [`Tape`].

use crate::autodiff::{Grads, Tape, Var};
use crate::real::Real;
use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use std::cell::RefCell;
use std::collections::BTreeMap;

/// Parameters keyed by dotted module path, e.g. `encoder.blocks.0.attn.qkv.weight`.
/// Vectors are stored as single rows.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<F> {
    tensors: BTreeMap<String, Array2<F>>,
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array2<F>) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Array2<F>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array2<F>> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Array2<F>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Array2<F>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalars.
    pub fn num_values(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.mapv(|x| G::of(x.to_f64().unwrap_or(f64::NAN)))))
                .collect(),
        }
    }

    /// Adds `scale · other` into matching entries, inserting missing ones.
    pub fn accumulate(&mut self, other: &ParamStore<F>, scale: F) {
        for (k, v) in &other.tensors {
            match self.tensors.get_mut(k) {
                Some(t) => t.scaled_add(scale, v),
                None => {
                    self.tensors.insert(k.clone(), v * scale);
                }
            }
        }
    }

    /// Copies every tensor whose name starts with `prefix` from `other`.
    pub fn copy_prefix_from(&mut self, other: &ParamStore<F>, prefix: &str) -> usize {
        let mut n = 0;
        for (k, v) in other.tensors.iter().filter(|(k, _)| k.starts_with(prefix)) {
            self.tensors.insert(k.clone(), v.clone());
            n += 1;
        }
        n
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(|t| t.iter().all(|x| x.is_finite()))
    }
}

/// Samples of a normal distribution truncated at two standard deviations.
pub fn trunc_normal<F: Real>(rng: &mut impl Rng, shape: (usize, usize), sd: f64) -> Array2<F> {
    Array2::from_shape_simple_fn(shape, || {
        loop {
            let z: f64 = StandardNormal.sample(rng);
            if z.abs() <= 2.0 {
                break F::of(z * sd);
            }
        }
    })
}

/// Standard initializers used by every module.
pub struct Initializer<'r, R: Rng> {
    pub rng: &'r mut R,
    pub sd: f64,
}

impl<R: Rng> Initializer<'_, R> {
    pub fn linear<F: Real>(&mut self, store: &mut ParamStore<F>, prefix: &str, din: usize, dout: usize) {
        store.insert(format!("{prefix}.weight"), trunc_normal(self.rng, (din, dout), self.sd));
        store.insert(format!("{prefix}.bias"), Array2::zeros((1, dout)));
    }

    pub fn norm<F: Real>(&mut self, store: &mut ParamStore<F>, prefix: &str, dim: usize) {
        store.insert(format!("{prefix}.weight"), Array2::ones((1, dim)));
        store.insert(format!("{prefix}.bias"), Array2::zeros((1, dim)));
    }

    pub fn table<F: Real>(&mut self, store: &mut ParamStore<F>, name: &str, rows: usize, cols: usize) {
        store.insert(name, trunc_normal(self.rng, (rows, cols), self.sd));
    }
}

/// Lazily registers parameters of a store as leaves of a tape.
///
/// Parameters under a frozen prefix become constants, so no gradient work is
/// done for them.
pub struct Binder<'a, F: Real> {
    pub tape: &'a Tape<F>,
    store: &'a ParamStore<F>,
    frozen: Vec<String>,
    bound: RefCell<BTreeMap<String, Var>>,
}

impl<'a, F: Real> Binder<'a, F> {
    pub fn new(tape: &'a Tape<F>, store: &'a ParamStore<F>) -> Self {
        Binder {
            tape,
            store,
            frozen: Vec::new(),
            bound: RefCell::new(BTreeMap::new()),
        }
    }

    /// Treats every parameter whose name starts with one of `prefixes` as a
    /// constant.
    pub fn frozen(mut self, prefixes: &[&str]) -> Self {
        self.frozen = prefixes.iter().map(|s| s.to_string()).collect();
        self
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.iter().any(|p| name.starts_with(p.as_str()))
    }

    /// The tape node of parameter `name`.
    ///
    /// # Panics
    /// When the store has no such parameter; stores are checked against the
    /// model layout when they are loaded.
    pub fn p(&self, name: &str) -> Var {
        if let Some(v) = self.bound.borrow().get(name) {
            return *v;
        }
        let value = self
            .store
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter `{name}`"))
            .clone();
        let v = self.tape.leaf(value, !self.is_frozen(name));
        self.bound.borrow_mut().insert(name.to_string(), v);
        v
    }

    /// `x · W + b` for the linear layer at `prefix`.
    pub fn linear(&self, x: Var, prefix: &str) -> Var {
        let w = self.p(&format!("{prefix}.weight"));
        let b = self.p(&format!("{prefix}.bias"));
        let y = self.tape.matmul(x, w);
        self.tape.add_row(y, b)
    }

    pub fn layer_norm(&self, x: Var, prefix: &str, eps: f64) -> Var {
        let g = self.p(&format!("{prefix}.weight"));
        let b = self.p(&format!("{prefix}.bias"));
        self.tape.layer_norm(x, g, b, F::of(eps))
    }

    /// Gradients of every trainable parameter that took part in the pass.
    pub fn gradients(&self, grads: &Grads<F>) -> ParamStore<F> {
        let mut out = ParamStore::new();
        for (name, &v) in self.bound.borrow().iter() {
            if self.is_frozen(name) {
                continue;
            }
            let g = grads
                .get(v)
                .cloned()
                .unwrap_or_else(|| Array2::zeros(self.tape.shape(v)));
            out.insert(name.clone(), g);
        }
        out
    }

    pub fn bound_names(&self) -> Vec<String> {
        self.bound.borrow().keys().cloned().collect()
    }
}
