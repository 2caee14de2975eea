use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::Tensor;

/// A named model parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub trainable: bool,
}

/// Ordered collection of named parameters. Iteration order is by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) {
        self.params.insert(name.into(), Param { value, trainable });
    }

    /// Insert an r x c tensor of N(0, std^2) draws.
    pub fn insert_normal<R: Rng>(&mut self, rng: &mut R, name: &str, rows: usize, cols: usize, std: f64, trainable: bool) {
        let data = (0..rows * cols)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z * std
            })
            .collect();
        self.insert(name, Tensor::matrix(rows, cols, data), trainable);
    }

    pub fn insert_filled(&mut self, name: &str, rows: usize, cols: usize, value: f64, trainable: bool) {
        self.insert(name, Tensor::filled(&[rows, cols], value), trainable);
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count over parameters whose name starts with `prefix`.
    pub fn scalar_count(&self, prefix: &str) -> usize {
        self.params.iter().filter(|(n, _)| n.starts_with(prefix)).map(|(_, p)| p.value.len()).sum()
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.params.iter().filter(|(_, p)| p.trainable).map(|(n, _)| n.clone()).collect()
    }

    /// Round every value to `f32` precision (the storage precision of checkpoints).
    pub fn round_to_f32(&mut self) {
        for p in self.params.values_mut() {
            p.value.round_to_f32();
        }
    }
}
