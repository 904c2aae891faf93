//! Learnable tensors with gradient storage.

use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub grad: Vec<T>,
}

impl<T: Scalar> Param<T> {
    pub fn new(shape: Vec<usize>, value: Vec<T>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), value.len());
        let grad = vec![T::zero(); value.len()];
        Param { shape, value, grad }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Param::new(shape, vec![T::zero(); n])
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }

    pub fn accumulate(&mut self, grad: &[T]) {
        assert_eq!(grad.len(), self.grad.len());
        for (g, d) in self.grad.iter_mut().zip(grad) {
            *g += *d;
        }
    }
}

/// Anything owning named parameters and non-learnable buffers.
pub trait Parameterized<T: Scalar> {
    /// Visits every learnable tensor in a fixed order.
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<T>));

    /// Visits non-learnable state (running statistics) in a fixed order.
    fn visit_buffers(&mut self, _prefix: &str, _f: &mut dyn FnMut(String, &mut Vec<T>)) {}
}
