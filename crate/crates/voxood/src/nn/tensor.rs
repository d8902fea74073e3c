//! Tensor alias and named trainable parameters.

use super::scalar::Scalar;
use ndarray::ArrayD;

/// Dense N-d tensor; shape invariants are ndarray's.
pub type Tensor<T> = ArrayD<T>;

/// A named trainable tensor with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub value: ArrayD<T>,
    pub grad: ArrayD<T>,
}

impl<T: Scalar> Param<T> {
    pub fn new(name: impl Into<String>, value: ArrayD<T>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Param { name: name.into(), value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }
}

/// Anything exposing an ordered set of trainable parameters. Collection order
/// is the construction order and must be stable: the optimizer state and
/// checkpoints are keyed to it.
pub trait ParamSet<T: Scalar> {
    fn collect_params<'a>(&'a mut self, out: &mut Vec<&'a mut Param<T>>);
    fn collect_params_ref<'a>(&'a self, out: &mut Vec<&'a Param<T>>);

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = Vec::new();
        self.collect_params(&mut v);
        v
    }

    fn params(&self) -> Vec<&Param<T>> {
        let mut v = Vec::new();
        self.collect_params_ref(&mut v);
        v
    }

    fn zero_grads(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }
}

/// True when every element is finite.
pub fn all_finite<T: Scalar>(t: &ArrayD<T>) -> bool {
    t.iter().all(|v| v.is_finite())
}
