use std::collections::HashMap;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::tensor::Matrix;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Named parameter tensors. Values are kept exactly representable in `f32` so a checkpoint
/// round-trip is lossless.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Matrix>,
    index: HashMap<String, ParamId>,
}

pub(crate) fn round_f32(m: &mut Matrix) {
    for x in m.data.iter_mut() {
        *x = *x as f32 as f64;
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        init: Init,
        rng: &mut ChaCha8Rng,
    ) -> ParamId {
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        let mut m = Matrix::zeros(rows, cols);
        match init {
            Init::Zeros => {}
            Init::Ones => m.data.iter_mut().for_each(|x| *x = 1.0),
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std).expect("finite std");
                m.data.iter_mut().for_each(|x| *x = dist.sample(rng));
            }
        }
        round_f32(&mut m);
        self.insert(name, m)
    }

    pub(crate) fn insert(&mut self, name: &str, m: Matrix) -> ParamId {
        let id = ParamId(self.tensors.len());
        self.names.push(name.to_string());
        self.tensors.push(m);
        self.index.insert(name.to_string(), id);
        id
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Matrix] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Matrix] {
        &mut self.tensors
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Matrix::len).sum()
    }

    /// Replaces values from another store with identical names and shapes.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        if other.names != self.names {
            return Err(Error::Config(
                "parameter names differ from model layout".into(),
            ));
        }
        for (dst, src) in self.tensors.iter_mut().zip(&other.tensors) {
            if dst.shape() != src.shape() {
                return Err(Error::Config(
                    "parameter shapes differ from model layout".into(),
                ));
            }
            dst.data.copy_from_slice(&src.data);
        }
        Ok(())
    }
}
