//! Dense tensors and a small reverse-mode autodiff tape.
//!
//! Every op is generic over [`Scalar`], so the same recorded graph can be
//! evaluated with plain `f64` or with [`Dual`] numbers. Running the backward
//! pass over duals yields Hessian-vector products (forward-over-reverse),
//! which is what [`unroll`] needs to differentiate through optimizer steps.

mod scalar;
mod tape;
pub mod unroll;

pub use scalar::{Dual, Scalar};
pub use tape::{Gradients, OpKind, Tape, Var};
pub(crate) use tape::log_softmax_row;

use crate::error::{bail, Result};

/// N-dimensional row-major array with an optional gradient slot.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T = f64> {
    shape: Vec<usize>,
    data: Vec<T>,
    pub requires_grad: bool,
    pub grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            bail!(Shape, "dimensions must be positive, got {shape:?}");
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            bail!(Shape, "shape {shape:?} holds {numel} elements but data has {}", data.len());
        }
        Ok(Self { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let numel = shape.iter().product();
        Self::new(shape, vec![T::zero(); numel])
    }

    pub fn scalar(value: T) -> Self {
        Self { shape: vec![1], data: vec![value], requires_grad: false, grad: None }
    }

    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::from_f64(v)).collect())
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Real parts of the entries.
    pub fn values(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.re()).collect()
    }

    pub(crate) fn set_grad(&mut self, grad: Vec<T>) {
        debug_assert_eq!(grad.len(), self.data.len());
        self.grad = Some(grad);
    }

    pub(crate) fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.finite())
    }
}
