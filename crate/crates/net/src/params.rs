use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::graph::{Graph, Var};
use crate::NetError;

/// Named trainable arrays with freeze flags. Values are kept at float32
/// precision so checkpoints round-trip exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    data: Vec<Vec<f64>>,
    frozen: Vec<bool>,
    index: BTreeMap<String, usize>,
}

pub enum Init {
    /// Uniform in ±√(1/fan_in).
    FanIn(usize),
    Normal(f64),
    Const(f64),
}

pub(crate) fn quantize(v: f64) -> f64 {
    v as f32 as f64
}

impl ParamSet {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            shapes: Vec::new(),
            data: Vec::new(),
            frozen: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    /// Registers a parameter, drawing its initial values from `rng`.
    pub fn add(&mut self, name: &str, shape: &[usize], init: Init, rng: &mut ChaCha8Rng) -> usize {
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match init {
            Init::FanIn(fan_in) => {
                let a = (1.0 / fan_in as f64).sqrt();
                (0..n).map(|_| quantize(rng.random_range(-a..a))).collect()
            }
            Init::Normal(std) => {
                let d = Normal::new(0.0, std).expect("finite std");
                (0..n).map(|_| quantize(d.sample(rng))).collect()
            }
            Init::Const(c) => vec![quantize(c); n],
        };
        self.insert(name, shape, data)
    }

    pub(crate) fn insert(&mut self, name: &str, shape: &[usize], data: Vec<f64>) -> usize {
        let id = self.names.len();
        self.index.insert(name.to_string(), id);
        self.names.push(name.to_string());
        self.shapes.push(shape.to_vec());
        self.data.push(data);
        self.frozen.push(false);
        id
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn shape(&self, id: usize) -> &[usize] {
        &self.shapes[id]
    }

    pub fn data(&self, id: usize) -> &[f64] {
        &self.data[id]
    }

    pub fn data_mut(&mut self, id: usize) -> &mut Vec<f64> {
        &mut self.data[id]
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.id(name).map(|i| self.data[i].as_slice())
    }

    pub fn is_frozen(&self, id: usize) -> bool {
        self.frozen[id]
    }

    /// Freezes every parameter whose name starts with `prefix`.
    pub fn freeze_prefix(&mut self, prefix: &str) {
        for (i, n) in self.names.iter().enumerate() {
            if n.starts_with(prefix) {
                self.frozen[i] = true;
            }
        }
    }

    pub fn unfreeze_all(&mut self) {
        self.frozen.iter_mut().for_each(|f| *f = false);
    }

    pub fn num_values(&self) -> usize {
        self.data.iter().map(Vec::len).sum()
    }

    /// Places every parameter in `g`; frozen ones (or all, when `train` is
    /// false) are constants.
    pub fn bind(&self, g: &mut Graph, train: bool) -> Result<Vec<Var>, NetError> {
        (0..self.len())
            .map(|i| g.leaf(&self.shapes[i], self.data[i].clone(), train && !self.frozen[i]))
            .collect()
    }

    /// Same names and shapes, in the same order.
    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.names == other.names && self.shapes == other.shapes
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

pub(crate) fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
