use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::Real;

static NEXT_STORE_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_store_id() -> u64 {
    NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed)
}

/// Handle to a tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Weight initialization scheme.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// N(0, std²).
    Normal(f64),
    /// Glorot/Xavier uniform over fan-in + fan-out.
    Xavier,
}

/// Named, ordered collection of trainable matrices belonging to one network.
#[derive(Debug)]
pub struct ParamStore<F: Real> {
    id: u64,
    names: Vec<String>,
    values: Vec<Array2<F>>,
}

impl<F: Real> Clone for ParamStore<F> {
    // A clone is a distinct network: it must not alias the original inside a graph.
    fn clone(&self) -> Self {
        ParamStore {
            id: fresh_store_id(),
            names: self.names.clone(),
            values: self.values.clone(),
        }
    }
}

impl<F: Real> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            id: fresh_store_id(),
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub(crate) fn store_id(&self) -> u64 {
        self.id
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array2<F>) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name `{name}`"
        );
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn init<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        init: Init,
        rng: &mut R,
    ) -> ParamId {
        let value = match init {
            Init::Zeros => Array2::zeros((rows, cols)),
            Init::Ones => Array2::ones((rows, cols)),
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std).expect("valid std");
                Array2::from_shape_simple_fn((rows, cols), || F::of(dist.sample(rng)))
            }
            Init::Xavier => {
                let bound = (6.0 / (rows + cols) as f64).sqrt();
                let dist = Uniform::new(-bound, bound).expect("valid bound");
                Array2::from_shape_simple_fn((rows, cols), || F::of(dist.sample(rng)))
            }
        };
        self.add(name, value)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Array2<F> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<F> {
        &mut self.values[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Element-wise conversion to another precision, as a new store.
    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        let mut out = ParamStore::new();
        for (name, v) in self.names.iter().zip(&self.values) {
            out.add(name.clone(), v.mapv(|x| G::of(x.as_f64())));
        }
        out
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Bit-exact equality of names, shapes and every element.
    pub fn bit_equal(&self, other: &ParamStore<F>) -> bool {
        self.names == other.names
            && self.values.iter().zip(&other.values).all(|(a, b)| {
                a.shape() == b.shape()
                    && a.iter().zip(b.iter()).all(|(x, y)| {
                        let (mut bx, mut by) = (Vec::new(), Vec::new());
                        x.write_le(&mut bx);
                        y.write_le(&mut by);
                        bx == by
                    })
            })
    }
}
