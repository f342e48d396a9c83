//! Named parameter storage, initialization, and the checkpoint container.

use super::{HyperParams, ModelError};
use crate::nn::tape::{Gradients, Tape, Var};
use crate::nn::tensor::{real, Real, Tensor};
use crate::rng::derive;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

/// Flat registry of named weight tensors. Order is creation order and is
/// the canonical order for optimizer state and checkpoints.
#[derive(Clone, Debug)]
pub struct ParamSet<F: Real> {
    entries: Vec<(String, Tensor<F>)>,
    index: HashMap<String, usize>,
}

impl<F: Real> Default for ParamSet<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> ParamSet<F> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<F>) {
        let name = name.into();
        let prev = self.index.insert(name.clone(), self.entries.len());
        assert!(prev.is_none(), "duplicate parameter {name}");
        self.entries.push((name, tensor));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.entries[i].0
    }

    pub fn tensor(&self, i: usize) -> &Tensor<F> {
        &self.entries[i].1
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor<F> {
        &mut self.entries[i].1
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.index.get(name).map(|i| &self.entries[*i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<F>> {
        self.index.get(name).map(|i| &mut self.entries[*i].1)
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn n_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.is_finite())
    }
}

/// One forward pass's view of a [`ParamSet`]: every parameter registered
/// as a tape leaf, addressable by name.
pub struct Bound<'a, F: Real> {
    set: &'a ParamSet<F>,
    vars: Vec<Var>,
}

impl<'a, F: Real> Bound<'a, F> {
    pub fn new(set: &'a ParamSet<F>, tape: &mut Tape<F>) -> Self {
        let vars = (0..set.len())
            .map(|i| tape.leaf(set.tensor(i).clone()))
            .collect();
        Self { set, vars }
    }

    /// Variable for a parameter; panics on unknown names since those are
    /// construction bugs, not data errors.
    pub fn var(&self, name: &str) -> Var {
        match self.set.position(name) {
            Some(i) => self.vars[i],
            None => panic!("unknown parameter {name}"),
        }
    }

    /// Gradients per parameter in registry order; zero tensors where the
    /// loss did not reach a parameter.
    pub fn gradients(&self, grads: &Gradients<F>) -> Vec<Tensor<F>> {
        (0..self.set.len())
            .map(|i| match grads.wrt(self.vars[i]) {
                Some(g) => g.clone(),
                None => {
                    let t = self.set.tensor(i);
                    Tensor::zeros(t.rows(), t.cols())
                }
            })
            .collect()
    }
}

/// Uniform Xavier/Glorot initialization, optionally rescaled.
pub fn xavier<F: Real, R: Rng>(rows: usize, cols: usize, scale: f64, rng: &mut R) -> Tensor<F> {
    let limit = scale * (6.0 / (rows + cols) as f64).sqrt();
    let mut t = Tensor::zeros(rows, cols);
    for v in t.data_mut() {
        *v = real::<F>(rng.gen_range(-limit..limit));
    }
    t
}

/// Per-parameter deterministic initializer stream: independent of the
/// order parameters are created in.
pub fn init_rng(seed: u64, name: &str) -> rand_chacha::ChaCha8Rng {
    derive(seed, name, 0)
}

/// A weight tensor serialized by exact f64 bit patterns, so checkpoints
/// round-trip without any precision loss.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub bits: Vec<u64>,
}

impl NamedTensor {
    pub fn from_tensor<F: Real>(name: &str, t: &Tensor<F>) -> Self {
        Self {
            name: name.to_string(),
            rows: t.rows(),
            cols: t.cols(),
            bits: t.data().iter().map(|v| v.to_f64_lossy().to_bits()).collect(),
        }
    }

    pub fn to_tensor<F: Real>(&self) -> Result<Tensor<F>, ModelError> {
        if self.bits.len() != self.rows * self.cols {
            return Err(ModelError::Checkpoint(format!(
                "tensor {}: {} values for a {}x{} shape",
                self.name,
                self.bits.len(),
                self.rows,
                self.cols
            )));
        }
        let data = self
            .bits
            .iter()
            .map(|b| real::<F>(f64::from_bits(*b)))
            .collect();
        Ok(Tensor::from_vec(self.rows, self.cols, data))
    }
}

/// Versioned checkpoint: hyperparameters, every named weight, the epoch
/// counter, and an opaque slot for trainer state (optimizer moments,
/// difficulty ledger, augmentation pool) so training can resume exactly.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub epoch: usize,
    pub hyper: HyperParams,
    pub params: Vec<NamedTensor>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trainer: Option<serde_json::Value>,
}

pub const CHECKPOINT_VERSION: u32 = 1;

impl Checkpoint {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        let ck: Checkpoint =
            serde_json::from_str(text).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(ModelError::Checkpoint(format!(
                "unsupported version {}",
                ck.version
            )));
        }
        Ok(ck)
    }
}
