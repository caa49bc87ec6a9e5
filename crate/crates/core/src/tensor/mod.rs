//! Dense row-major tensors and a tape-based reverse-mode autodiff graph.
//!
//! Shapes are checked eagerly: structural misuse (rank/shape mismatch, bad
//! axes) panics with a description, mirroring the conventions of the usual
//! array crates. Data-dependent failures (non-finite values appearing during
//! the forward pass, backward called twice) surface as [`TensorError`].

mod fd;
mod graph;
pub(crate) mod kernels;

pub use fd::{finite_diff, finite_diff_at};
pub use graph::{Graph, Var};

use num_traits::Float;
use std::fmt;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

/// Element type for tensors: `f32` for training, `f64` for gradient checks.
pub trait Scalar:
    Float + AddAssign + SubAssign + MulAssign + Sum + fmt::Debug + fmt::Display + Send + Sync + 'static
{
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Shorthand for writing float literals in generic code.
#[inline]
pub fn lit<T: Scalar>(x: f64) -> T {
    T::from_f64(x)
}

/// Failures that depend on runtime data rather than on shapes.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TensorError {
    /// An op produced NaN or infinity; the graph refuses to run backward.
    #[error("non-finite values produced by `{op}` (node {node})")]
    NonFinite { op: &'static str, node: usize },
    /// `backward` may only run once per forward build.
    #[error("backward called twice on the same graph")]
    BackwardTwice,
    /// The backward seed must be a scalar.
    #[error("backward target must be a scalar, got shape {0:?}")]
    NotScalar(String),
    /// A finite-difference probe evaluated the loss to NaN or infinity.
    #[error("non-finite loss during finite differences (param {param}, coord {coord})")]
    NonFiniteProbe { param: usize, coord: usize },
}

/// A dense row-major tensor. Scalars have the empty shape `[]`.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
}

impl<T: Scalar> Tensor<T> {
    /// Builds a tensor from a shape and row-major data; lengths must agree.
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Self {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        assert_eq!(
            numel,
            data.len(),
            "tensor data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor { shape, data, requires_grad: false }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Tensor { shape, data: vec![T::zero(); numel], requires_grad: false }
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Tensor { shape, data: vec![value; numel], requires_grad: false }
    }

    /// A rank-0 tensor holding one value.
    pub fn scalar(value: T) -> Self {
        Tensor { shape: vec![], data: vec![value], requires_grad: false }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        Tensor { shape, data: (0..numel).map(&mut f).collect(), requires_grad: false }
    }

    /// Marks the tensor as a differentiable leaf when inserted into a graph.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    /// The value of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// Same data, new shape; element counts must agree.
    pub fn reshaped(&self, shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        assert_eq!(numel, self.data.len(), "reshape {:?} -> {:?}", self.shape, shape);
        Tensor { shape, data: self.data.clone(), requires_grad: self.requires_grad }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            requires_grad: false,
        }
    }

    /// Elementwise conversion, e.g. to widen an `f32` tensor for checks.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::from_f64(v.to_f64())).collect(),
            requires_grad: self.requires_grad,
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v.to_f64()).collect()
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Tensor{:?} {:?}", self.shape, self.data)
        } else {
            write!(f, "Tensor{:?} [{} values]", self.shape, self.data.len())
        }
    }
}
