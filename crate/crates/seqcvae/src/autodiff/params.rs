use std::collections::BTreeMap;

use rand::Rng;

use crate::rng::stream_rng;

use super::tape::{NodeId, Tape};
use super::tensor::Tensor;

/// Named map of trainable tensors. Names are unique, shapes immutable
/// after creation; iteration order is canonical (sorted by name).
#[derive(Debug, Clone)]
pub struct ParameterStore {
    params: BTreeMap<String, Tensor>,
    seed: u64,
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Constant(f64),
    /// uniform(−1/√fan_in, +1/√fan_in)
    FanIn(usize),
}

impl ParameterStore {
    pub fn new(seed: u64) -> Self {
        ParameterStore { params: BTreeMap::new(), seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn create(&mut self, name: &str, shape: Vec<usize>, init: Init) {
        assert!(
            !self.params.contains_key(name),
            "parameter {name} already exists"
        );
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Zeros => vec![0.0; n],
            Init::Constant(c) => vec![c; n],
            Init::FanIn(fan_in) => {
                let bound = 1.0 / (fan_in as f64).sqrt();
                let mut rng = stream_rng(self.seed, &format!("init/{name}"));
                (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
            }
        };
        self.params.insert(name.to_string(), Tensor::new(shape, data));
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        self.params
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Record a parameter on the tape as trainable, or as a plain constant
    /// when frozen.
    pub fn inject(&self, tape: &mut Tape, name: &str, frozen: bool) -> NodeId {
        let value = self.get(name).clone();
        if frozen {
            tape.named_constant(name, value)
        } else {
            tape.param(name, value)
        }
    }
}
