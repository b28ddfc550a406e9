use std::collections::HashMap;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Index of a tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, named collection of learnable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<T: Scalar = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    /// Registers a parameter; it is marked `requires_grad`.
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.tensors.len());
        self.by_name.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor.with_requires_grad(true));
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count across all parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter_mut())
    }

    /// Replaces the value of a parameter, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let slot = &mut self.tensors[id.0];
        if slot.shape() != value.shape() {
            return Err(Error::shape("ParamStore::set", slot.shape(), value.shape()));
        }
        slot.data_mut().copy_from_slice(value.data());
        Ok(())
    }

    /// Writes gradients produced by a backward pass into the tensors' grad slots,
    /// accumulating onto any gradient already present.
    pub fn accumulate_grads(&mut self, grads: Vec<(ParamId, Tensor<T>)>) {
        for (id, g) in grads {
            let t = &mut self.tensors[id.0];
            if !t.requires_grad {
                continue;
            }
            match &mut t.grad {
                Some(acc) => {
                    for (a, &v) in acc.iter_mut().zip(g.data()) {
                        *a += v;
                    }
                }
                None => t.grad = Some(g.into_data()),
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for t in &mut self.tensors {
            t.grad = None;
        }
    }

    /// Copy with every element converted to another scalar type.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| t.cast::<U>().with_requires_grad(t.requires_grad))
                .collect(),
            by_name: self.by_name.clone(),
        }
    }
}
