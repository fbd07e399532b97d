use crate::{Real, Tensor};

/// Identifier of a trainable array, unique within one model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub u32);

/// A trainable array and its gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub id: ParamId,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

impl<T: Real> Param<T> {
    pub fn new(id: ParamId, value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.dims());
        Self { id, value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn cast<U: Real>(&self) -> Param<U> {
        Param {
            id: self.id,
            value: self.value.cast(),
            grad: self.grad.cast(),
        }
    }
}

/// Hands out sequential [`ParamId`]s while a model is being built.
#[derive(Debug, Default)]
pub struct IdGen(u32);

impl IdGen {
    pub fn next_id(&mut self) -> ParamId {
        let id = ParamId(self.0);
        self.0 += 1;
        id
    }
}
