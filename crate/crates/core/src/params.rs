//! Named collections of trainable tensors.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};

use crate::autodiff::{Gradients, Tape, Var};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// All trainable tensors of a model, keyed and ordered by name.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelParams {
    tensors: BTreeMap<String, Tensor>,
}

impl ModelParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name).ok_or_else(|| Error::Config(format!("missing parameter tensor {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
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

    /// Total number of scalar coordinates.
    pub fn num_coordinates(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::all_finite)
    }

    /// Registers every tensor as a trainable leaf on `tape`.
    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>) -> ParamVars {
        let vars = self.tensors.iter().map(|(k, t)| (k.clone(), tape.param(t))).collect();
        ParamVars { vars }
    }

    /// Checks that `other` has the same names and shapes.
    pub fn check_layout(&self, other: &ModelParams) -> Result<()> {
        for (name, t) in &self.tensors {
            match other.get(name) {
                None => return Err(Error::Shape(format!("tensor {name} missing"))),
                Some(o) if o.shape() != t.shape() => {
                    return Err(Error::Shape(format!("tensor {name}: expected shape {:?}, found {:?}", t.shape(), o.shape())))
                }
                _ => {}
            }
        }
        if let Some(extra) = other.names().find(|n| self.get(n).is_none()) {
            return Err(Error::Shape(format!("unexpected tensor {extra}")));
        }
        Ok(())
    }
}

/// Tape handles for a bound [`ModelParams`].
#[derive(Debug, Clone)]
pub struct ParamVars {
    vars: BTreeMap<String, Var>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| Error::Config(format!("missing parameter tensor {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// Per-tensor gradients, zero for tensors the loss does not reach.
    pub fn gradients(&self, grads: &Gradients) -> ParamGrads {
        let tensors = self.vars.iter().map(|(k, &v)| (k.to_string(), grads.tensor(v))).collect();
        ParamGrads { tensors }
    }
}

/// Gradients keyed by parameter name.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamGrads {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn squared_norm(&self) -> f64 {
        self.tensors.values().flat_map(|t| t.data().iter()).map(|g| g * g).sum()
    }

    /// Coordinatewise sum with another gradient table of the same layout.
    pub fn add(&self, other: &ParamGrads) -> ParamGrads {
        let tensors = self
            .tensors
            .iter()
            .map(|(k, t)| {
                let o = &other.tensors[k];
                let data = t.data().iter().zip(o.data()).map(|(a, b)| a + b).collect();
                (k.clone(), Tensor::with_shape(t.shape().to_vec(), data))
            })
            .collect();
        ParamGrads { tensors }
    }
}
