//! Named trainable parameters.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A trainable tensor identified by a dotted id such as `gol.enc_o.s0.down.w`.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub id: String,
    pub tensor: Tensor,
}

/// Parameters keyed by id. Iteration is always in sorted id order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: impl Into<String>, mut tensor: Tensor) -> Result<()> {
        let id = id.into();
        if self.params.contains_key(&id) {
            return Err(Error::Config(format!("duplicate parameter id `{id}`")));
        }
        tensor.set_requires_grad(true);
        self.params.insert(id.clone(), Parameter { id, tensor });
        Ok(())
    }

    pub fn get(&self, id: &str) -> Result<&Parameter> {
        self.params
            .get(id)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{id}`")))
    }

    pub fn get_mut(&mut self, id: &str) -> Result<&mut Parameter> {
        self.params
            .get_mut(id)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{id}`")))
    }

    pub fn contains(&self, id: &str) -> bool {
        self.params.contains_key(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.values()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.values_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.params.values().map(|p| p.tensor.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.tensor.clear_grad();
        }
    }

    /// Add `scale * grad` into the gradient of parameter `id`.
    pub fn accumulate(&mut self, id: &str, grad: &[f64], scale: f64) -> Result<()> {
        self.get_mut(id)?.tensor.accumulate_grad(grad, scale)
    }

    /// Move every parameter of `other` into `self`.
    pub fn extend(&mut self, other: ParamStore) -> Result<()> {
        for (id, p) in other.params {
            self.insert(id, p.tensor)?;
        }
        Ok(())
    }

    /// Copy of the parameters whose id starts with `prefix`.
    pub fn filter_prefix(&self, prefix: &str) -> ParamStore {
        ParamStore {
            params: self
                .params
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }
}
