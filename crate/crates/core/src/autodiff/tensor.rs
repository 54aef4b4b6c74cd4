//! Dense row-major tensors.
//!
//! A [`Tensor`] is an immutable value: shape plus a shared flat buffer of
//! 64-bit floats. Differentiable computation happens on [`crate::autodiff::Var`]
//! handles; a bare `Tensor` never carries gradient state, so it is freely
//! shareable across threads.

use std::sync::Arc;

/// Immutable dense n-dimensional array of `f64`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl Tensor {
    /// Build a tensor from a flat buffer and shape.
    ///
    /// Panics if `product(shape) != data.len()`.
    pub fn new(data: Vec<f64>, shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(
            numel,
            data.len(),
            "tensor shape {:?} implies {} elements, got {}",
            shape,
            numel,
            data.len()
        );
        Tensor { shape, data: Arc::new(data) }
    }

    /// 1-D tensor from a flat buffer.
    pub fn from_vec(data: Vec<f64>) -> Self {
        let n = data.len();
        Tensor::new(data, vec![n])
    }

    /// Rank-0 scalar.
    pub fn scalar(value: f64) -> Self {
        Tensor::new(vec![value], vec![])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Tensor::new(vec![0.0; numel], shape.to_vec())
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let numel: usize = shape.iter().product();
        Tensor::new(vec![value; numel], shape.to_vec())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Extract the single value of a scalar tensor. Panics otherwise.
    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// Same buffer, new shape. Panics if the element count changes.
    pub fn reshaped(&self, shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(
            numel,
            self.data.len(),
            "reshape {:?} -> {:?} changes element count",
            self.shape,
            shape
        );
        Tensor { shape, data: Arc::clone(&self.data) }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Tensor::new(self.data.iter().map(|&v| f(v)).collect(), self.shape.clone())
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Exact bit-level equality, including shape. `==` on floats treats
    /// `-0.0 == 0.0` and `NaN != NaN`; determinism checks want bits.
    pub fn bitwise_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}
