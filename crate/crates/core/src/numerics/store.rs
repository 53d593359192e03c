//! Named learnable parameters with accumulated gradients.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

/// One learnable tensor plus its gradient accumulator.
#[derive(Clone, Debug)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
}

/// All learnable tensors of a model, keyed by name.
///
/// Backed by a `BTreeMap` so iteration order is deterministic (by name),
/// which keeps optimizer updates, checkpoints, and gradient reports
/// reproducible.
#[derive(Clone, Debug, Default)]
pub struct ParameterStore {
    params: BTreeMap<String, Param>,
}

impl ParameterStore {
    pub fn new() -> ParameterStore {
        ParameterStore { params: BTreeMap::new() }
    }

    /// Register a new parameter. Each name may be registered exactly once.
    pub fn register(&mut self, name: &str, value: Tensor) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(Error::Config(format!("parameter '{name}' registered twice")));
        }
        let grad = Tensor::zeros(value.rows(), value.cols());
        self.params.insert(name.to_string(), Param { value, grad });
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter '{name}'")))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.get(name)?.value)
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| Error::Contract(format!("unknown parameter '{name}'")))
    }

    pub fn grad(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.get(name)?.grad)
    }

    /// Add `grad` into the accumulator for `name`.
    pub fn accumulate_grad(&mut self, name: &str, grad: &Tensor) -> Result<()> {
        let param = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter '{name}'")))?;
        if param.value.shape() != grad.shape() {
            return Err(Error::Dimension(format!(
                "gradient for '{}' has shape {:?}, parameter has {:?}",
                name,
                grad.shape(),
                param.value.shape()
            )));
        }
        param.grad.add_assign(grad);
        Ok(())
    }

    /// Reset every gradient accumulator to zero.
    pub fn zero_grads(&mut self) {
        for param in self.params.values_mut() {
            param.grad = Tensor::zeros(param.value.rows(), param.value.cols());
        }
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Parameters in name order.
    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    /// Total scalar entry count across all parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }
}
