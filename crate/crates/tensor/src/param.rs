use std::collections::HashMap;

use crate::error::{config_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BufferId(pub usize);

/// A learnable tensor with its accumulated gradient and a stable dotted name
/// such as `stage2.block0.conv3x3.w`.
#[derive(Debug, Clone)]
pub struct Parameter<T: Scalar> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

/// Non-learnable state that still belongs to a model (running statistics).
#[derive(Debug, Clone)]
pub struct Buffer<T: Scalar> {
    pub name: String,
    pub value: Tensor<T>,
}

/// Named registry of every parameter and buffer of a model.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T: Scalar> {
    params: Vec<Parameter<T>>,
    buffers: Vec<Buffer<T>>,
    names: HashMap<String, ParamId>,
    buffer_names: HashMap<String, BufferId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new(), buffers: Vec::new(), names: HashMap::new(), buffer_names: HashMap::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.names.contains_key(&name) || self.buffer_names.contains_key(&name) {
            return Err(config_err!("duplicate parameter name `{name}`"));
        }
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(value.shape().to_vec());
        self.names.insert(name.clone(), id);
        self.params.push(Parameter { name, value, grad });
        Ok(id)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<BufferId> {
        let name = name.into();
        if self.names.contains_key(&name) || self.buffer_names.contains_key(&name) {
            return Err(config_err!("duplicate buffer name `{name}`"));
        }
        let id = BufferId(self.buffers.len());
        self.buffer_names.insert(name.clone(), id);
        self.buffers.push(Buffer { name, value });
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor<T> {
        &self.buffers[id.0].value
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Tensor<T> {
        &mut self.buffers[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.get(name).copied()
    }

    pub fn buffer_id(&self, name: &str) -> Option<BufferId> {
        self.buffer_names.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn buffers(&self) -> impl Iterator<Item = (BufferId, &Buffer<T>)> {
        self.buffers.iter().enumerate().map(|(i, b)| (BufferId(i), b))
    }

    pub fn buffers_mut(&mut self) -> impl Iterator<Item = &mut Buffer<T>> {
        self.buffers.iter_mut()
    }

    /// Total number of learnable scalars.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(T::zero());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique_and_zero_grad_clears() {
        let mut store = ParamStore::<f32>::new();
        let a = store.add("a.w", Tensor::ones(vec![2, 2])).unwrap();
        assert!(store.add("a.w", Tensor::ones(vec![1])).is_err());
        assert!(store.add_buffer("a.w", Tensor::ones(vec![1])).is_err());
        store.get_mut(a).grad.data_mut().fill(3.0);
        store.zero_grad();
        assert!(store.get(a).grad.data().iter().all(|&g| g == 0.0));
        assert_eq!(store.get(a).grad.shape(), store.get(a).value.shape());
        assert_eq!(store.num_scalars(), 4);
    }
}
