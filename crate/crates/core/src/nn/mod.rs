//! Dense numerics and the two sequence scorers.

pub mod graph;
pub mod lstm;
pub mod optim;
pub mod transformer;

use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde_json::Value;

use crate::artifact;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub use graph::{Gradients, Graph, Var};
pub use lstm::LstmScorer;
pub use optim::{Adam, AdamConfig};
pub use transformer::{TransformerConfig, TransformerScorer};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Named trainable tensors in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter name {name}");
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Digest of parameter names and shapes.
    pub fn architecture_hash(&self) -> String {
        let layout: Vec<(&str, usize, usize)> =
            self.names.iter().zip(&self.tensors).map(|(n, t)| (n.as_str(), t.rows(), t.cols())).collect();
        artifact::hash_json(&layout)
    }

    /// Copies values from `other`, which must have the same layout.
    pub fn load_from(&mut self, other: &ParamSet) -> Result<()> {
        if self.architecture_hash() != other.architecture_hash() {
            return Err(Error::HashMismatch {
                what: "parameter layout".into(),
                expected: self.architecture_hash(),
                found: other.architecture_hash(),
            });
        }
        self.tensors.clone_from(&other.tensors);
        Ok(())
    }

    /// Writes a checkpoint; `header` gains `architecture_hash`.
    pub fn save(&self, path: &Path, mut header: Value) -> Result<()> {
        if let Some(obj) = header.as_object_mut() {
            obj.insert("architecture_hash".into(), Value::String(self.architecture_hash()));
        }
        let named: Vec<(&str, &Tensor)> = self.names.iter().map(String::as_str).zip(&self.tensors).collect();
        artifact::write_tensors(path, header, &named)
    }

    /// Reads a checkpoint into this (already constructed) layout.
    pub fn restore(&mut self, path: &Path) -> Result<Value> {
        let file = artifact::read_tensors(path)?;
        let found = file.header.get("architecture_hash").and_then(Value::as_str).unwrap_or("").to_string();
        if found != self.architecture_hash() {
            return Err(Error::HashMismatch {
                what: "checkpoint architecture".into(),
                expected: self.architecture_hash(),
                found,
            });
        }
        for (name, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            let src = file.get(name).ok_or_else(|| Error::Artifact(format!("checkpoint lacks parameter {name}")))?;
            if src.shape() != t.shape() {
                return Err(Error::Artifact(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    src.shape(),
                    t.shape()
                )));
            }
            *t = src.clone();
        }
        Ok(file.header)
    }
}

/// Uniform in `[-1/√fan_in, 1/√fan_in]`.
pub fn init_uniform(rng: &mut Rng, rows: usize, cols: usize, fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-bound..=bound)).collect())
}

pub fn init_normal(rng: &mut Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    let n = Normal::new(0.0, std).expect("finite std");
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| n.sample(rng)).collect())
}

/// Affine map `x·W + b`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(params: &mut ParamSet, name: &str, input: usize, output: usize, rng: &mut Rng) -> Self {
        let w = params.add(format!("{name}.w"), init_uniform(rng, input, output, input));
        let b = params.add(format!("{name}.b"), init_uniform(rng, 1, output, input));
        Linear { w, b }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.w);
        let b = g.param(self.b);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }

    pub fn zero(&self, params: &mut ParamSet) {
        params.get_mut(self.w).fill(0.0);
        params.get_mut(self.b).fill(0.0);
    }
}

/// Per-feature gain and shift applied after a normalisation.
#[derive(Clone, Copy, Debug)]
pub struct Affine {
    pub gain: ParamId,
    pub shift: ParamId,
}

impl Affine {
    pub fn new(params: &mut ParamSet, name: &str, dim: usize) -> Self {
        let gain = params.add(format!("{name}.gain"), Tensor::filled(1, dim, 1.0));
        let shift = params.add(format!("{name}.shift"), Tensor::zeros(1, dim));
        Affine { gain, shift }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let gain = g.param(self.gain);
        let shift = g.param(self.shift);
        let y = g.mul_row(x, gain);
        g.add_row(y, shift)
    }
}

/// Linear layer with 100 (or `output`) logistic units.
#[derive(Clone, Copy, Debug)]
pub struct RegressionHead {
    pub linear: Linear,
}

impl RegressionHead {
    pub fn new(params: &mut ParamSet, input: usize, output: usize, rng: &mut Rng) -> Self {
        RegressionHead { linear: Linear::new(params, "regression", input, output, rng) }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let y = self.linear.forward(g, x);
        g.sigmoid(y)
    }
}
