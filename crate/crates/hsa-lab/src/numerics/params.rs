//! Named parameter registry. Parameter names are unique and the optimizer
//! walks entries in insertion order, so every parameter is visited exactly
//! once per step.

use super::element::Element;
use super::tensor::Tensor;
use crate::error::{HsaError, Result};
use std::collections::HashMap;
use std::sync::Arc;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct ParamEntry<F: Element> {
    pub name: String,
    pub value: Arc<Tensor<F>>,
    pub grad: Tensor<F>,
}

#[derive(Debug, Clone, Default)]
pub struct ParamSet<F: Element> {
    entries: Vec<ParamEntry<F>>,
    index: HashMap<String, usize>,
}

impl<F: Element> ParamSet<F> {
    pub fn new() -> Self {
        Self { entries: Vec::new(), index: HashMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<F>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(HsaError::InvalidArgument {
                op: "param_insert",
                msg: format!("duplicate parameter name {name:?}"),
            });
        }
        let id = self.entries.len();
        let grad = Tensor::zeros(tensor.shape().to_vec());
        self.entries.push(ParamEntry { name: name.clone(), value: Arc::new(tensor), grad });
        self.index.insert(name, id);
        Ok(ParamId(id))
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index.get(name).map(|&i| ParamId(i)).ok_or_else(|| HsaError::InvalidArgument {
            op: "param_lookup",
            msg: format!("unknown parameter {name:?}"),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<F> {
        &self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Arc<Tensor<F>> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        Arc::make_mut(&mut self.entries[id.0].value)
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<F> {
        &self.entries[id.0].grad
    }

    pub(crate) fn grad_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.entries[id.0].grad
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry<F>)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.data_mut().fill(F::zero());
        }
    }

    /// Global L2 norm over all gradients, accumulated in f64.
    pub fn grad_global_norm(&self) -> f64 {
        self.entries
            .iter()
            .flat_map(|e| e.grad.data())
            .map(|g| g.as_f64() * g.as_f64())
            .sum::<f64>()
            .sqrt()
    }

    pub fn cast<T: Element>(&self) -> ParamSet<T> {
        let mut out = ParamSet::new();
        for e in &self.entries {
            out.insert(e.name.clone(), e.value.cast::<T>()).expect("names already unique");
        }
        out
    }

    pub fn total_elements(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }
}
