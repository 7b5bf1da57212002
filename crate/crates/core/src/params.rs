//! Named parameter storage with gradient and momentum buffers.

use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
    pub momentum: Tensor,
    pub trainable: bool,
}

impl Param {
    pub fn new(value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        let momentum = Tensor::zeros(value.shape());
        Self {
            value,
            grad,
            momentum,
            trainable: true,
        }
    }
}

/// Parameters keyed by name. Iteration order is the lexicographic name order,
/// which keeps every reduction over the set reproducible.
#[derive(Debug, Clone, Default)]
pub struct ParameterSet {
    params: BTreeMap<String, Param>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), Param::new(value));
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        self.params
            .values_mut()
            .for_each(|p| p.trainable = trainable);
    }

    pub fn all_frozen(&self) -> bool {
        self.params.values().all(|p| !p.trainable)
    }

    pub fn zero_grad(&mut self) {
        self.params.values_mut().for_each(|p| p.grad.fill(0.0));
    }

    pub fn reset_momentum(&mut self) {
        self.params.values_mut().for_each(|p| p.momentum.fill(0.0));
    }

    /// Adds `grad` into the accumulator of `name` if that parameter is trainable.
    pub fn accumulate(&mut self, name: &str, grad: &Tensor) -> Result<bool> {
        let Some(p) = self.params.get_mut(name) else {
            return Ok(false);
        };
        grad.ensure_shape(name, p.value.shape())?;
        if p.trainable {
            p.grad.add_assign(grad);
        }
        Ok(p.trainable)
    }

    pub fn set_value(&mut self, name: &str, value: Tensor) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::invalid("parameter", format!("unknown parameter {name}")))?;
        value.ensure_shape(name, p.value.shape())?;
        p.value = value;
        Ok(())
    }

    /// Name of the first parameter whose value differs bitwise from `other`,
    /// or whose presence differs between the two sets.
    pub fn first_difference(&self, other: &ParameterSet) -> Option<String> {
        for (name, p) in &self.params {
            match other.params.get(name) {
                Some(q) if p.value.bit_eq(&q.value) => {}
                _ => return Some(name.clone()),
            }
        }
        other
            .params
            .keys()
            .find(|k| !self.params.contains_key(*k))
            .cloned()
    }

    /// SHA-256 over names, shapes and raw value bits.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, p) in &self.params {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            for &d in p.value.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in p.value.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}
