//! Named trainable tensors.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph, Var};
use crate::snapshot::{read_snapshot, write_snapshot};
use crate::tensor::Tensor;

/// Negative slope used by every leaky ReLU in the network.
pub const LEAKY_SLOPE: f64 = 0.1;

/// All trainable tensors of a model, addressable by stable dotted names.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

/// Parameters recorded as leaves on one [`Graph`].
#[derive(Debug, Clone, Default)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

/// Per-parameter gradients, aligned with a [`ParamStore`].
pub type ParamGrads = BTreeMap<String, Tensor>;

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Kaiming-uniform weight with gain for [`LEAKY_SLOPE`], bound `sqrt(6 / ((1 + a²) fan_in))`.
    pub fn init_weight<R: Rng + ?Sized>(&mut self, name: &str, shape: &[usize], fan_in: usize, rng: &mut R) {
        let bound = (6.0 / ((1.0 + LEAKY_SLOPE * LEAKY_SLOPE) * fan_in as f64)).sqrt();
        self.insert(name, Tensor::uniform(shape, -bound, bound, rng));
    }

    pub fn init_zeros(&mut self, name: &str, shape: &[usize]) {
        self.insert(name, Tensor::zeros(shape));
    }

    /// Records every parameter as a `requires_grad` leaf.
    pub fn bind(&self, g: &mut Graph) -> BoundParams {
        BoundParams {
            vars: self
                .tensors
                .iter()
                .map(|(k, t)| (k.clone(), g.param(t.clone())))
                .collect(),
        }
    }

    /// Records every parameter as a constant, for inference without gradients.
    pub fn bind_frozen(&self, g: &mut Graph) -> BoundParams {
        BoundParams {
            vars: self
                .tensors
                .iter()
                .map(|(k, t)| (k.clone(), g.constant(t.clone())))
                .collect(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let list: Vec<(&str, &Tensor)> = self.iter().collect();
        write_snapshot(BufWriter::new(File::create(path)?), &list)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let list = read_snapshot(BufReader::new(File::open(path)?))?;
        Ok(Self {
            tensors: list.into_iter().collect(),
        })
    }

    pub fn zeros_like(&self) -> ParamGrads {
        self.tensors
            .iter()
            .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape())))
            .collect()
    }
}

impl BoundParams {
    /// Binds names to already-recorded variables.
    pub fn from_vars<'a>(pairs: impl IntoIterator<Item = (&'a str, Var)>) -> Self {
        Self {
            vars: pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
        }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("missing parameter `{name}`")))
    }

    pub fn has(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    /// Pulls each parameter's gradient out of `grads`; unreached parameters get zeros.
    pub fn collect_grads(&self, g: &Graph, grads: &mut Gradients) -> ParamGrads {
        self.vars
            .iter()
            .map(|(k, &v)| {
                let t = grads.take(v).unwrap_or_else(|| Tensor::zeros(g.shape(v)));
                (k.clone(), t)
            })
            .collect()
    }
}
