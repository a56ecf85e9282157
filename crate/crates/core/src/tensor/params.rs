//! Named trainable parameters and their gradient buffers.

use super::{Scalar, Tensor};

/// A value tensor paired with a same-shape gradient accumulator.
#[derive(Clone, Debug)]
pub struct Parameter<S: Scalar = f32> {
    pub name: String,
    pub value: Tensor<S>,
    pub grad: Tensor<S>,
}

/// Address of a parameter on the tape: which parameter set it lives in
/// (caller-assigned, e.g. encoder vs decoder) and its index there.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamRef {
    pub set: u32,
    pub index: usize,
}

/// An ordered collection of parameters. Order is the serialization order.
#[derive(Clone, Debug, Default)]
pub struct Params<S: Scalar = f32> {
    items: Vec<Parameter<S>>,
}

impl<S: Scalar> Params<S> {
    pub fn new() -> Self {
        Params { items: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor<S>) -> usize {
        let grad = Tensor::zeros(value.shape());
        self.items.push(Parameter {
            name: name.into(),
            value,
            grad,
        });
        self.items.len() - 1
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, index: usize) -> &Parameter<S> {
        &self.items[index]
    }

    pub fn get_mut(&mut self, index: usize) -> &mut Parameter<S> {
        &mut self.items[index]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<S>> {
        self.items.iter()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.items {
            p.grad.data_mut().iter_mut().for_each(|v| *v = S::ZERO);
        }
    }

    /// Total number of scalar values across all parameters.
    pub fn num_values(&self) -> usize {
        self.items.iter().map(|p| p.value.numel()).sum()
    }
}
