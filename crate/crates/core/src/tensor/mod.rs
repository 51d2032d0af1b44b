//! Dense tensors and tape-based reverse-mode differentiation.
//!
//! A [`Tensor`] is an immutable, row-major block of numbers with a fixed
//! shape. Values live behind an [`Arc`], so cloning a tensor (or placing a
//! network parameter on a tape) never copies the payload.
//!
//! Differentiable computation is recorded on a [`Tape`]. Each operation on a
//! [`Var`] appends a node; [`Tape::backward`] walks the nodes in reverse and
//! returns [`Gradients`]. Nodes whose inputs carry no gradient are recorded
//! without a backward rule, so inference on a tape costs the same as plain
//! evaluation.
//!
//! ```
//! use plugnet::tensor::{Tape, Tensor};
//!
//! let tape = Tape::<f64>::new();
//! let x = tape.input(&Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap().with_requires_grad(true));
//! let loss = x.mul(x).unwrap().sum();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap(), &[2.0, 4.0, 6.0]);
//! ```

pub mod kernels;
mod tape;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::sync::Arc;

use num_traits::{Float, NumAssign};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use tape::{Gradients, Tape, Var};

/// Element type of tensors: `f32` for training and inference, `f64` for
/// gradient checks.
pub trait Scalar:
    Float + NumAssign + Sum + Default + Debug + Display + Send + Sync + 'static
{
    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn of(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn of(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationKind {
    Relu,
    Sigmoid,
    SoftmaxLastdim,
    Identity,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    BinaryCrossEntropy,
}

/// Tensor dimensions; inline for up to four axes.
pub(crate) type Shape = smallvec::SmallVec<[usize; 4]>;

#[derive(Clone)]
pub struct Tensor<T = f32> {
    shape: Shape,
    values: Arc<Vec<T>>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    /// Builds a tensor; every dimension must be at least 1 and the shape
    /// must account for every value.
    pub fn new(shape: &[usize], values: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::InvalidShape(format!(
                "dimensions must be >= 1, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(Error::LengthMismatch {
                expected,
                actual: values.len(),
            });
        }
        Ok(Self {
            shape: Shape::from_slice(shape),
            values: Arc::new(values),
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(shape, vec![value; n])
    }

    pub fn scalar(value: T) -> Self {
        Self::new(&[1], vec![value]).expect("scalar shape")
    }

    pub fn vector(values: Vec<T>) -> Result<Self> {
        let n = values.len();
        Self::new(&[n], values)
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn set_requires_grad(&mut self, requires_grad: bool) {
        self.requires_grad = requires_grad;
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    /// Mutable access to the payload; copies first if the buffer is shared
    /// (for example with a tape that still holds it).
    pub fn values_mut(&mut self) -> &mut [T] {
        Arc::make_mut(&mut self.values).as_mut_slice()
    }

    pub fn into_values(self) -> Vec<T> {
        Arc::try_unwrap(self.values).unwrap_or_else(|shared| (*shared).clone())
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<T>) -> Result<()> {
        if grad.len() != self.len() {
            return Err(Error::LengthMismatch {
                expected: self.len(),
                actual: grad.len(),
            });
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Returns the single value of a one-element tensor.
    pub fn item(&self) -> Option<T> {
        (self.len() == 1).then(|| self.values[0])
    }

    /// Same payload under a different shape.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if shape.contains(&0) || n != self.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                left: self.shape.to_vec(),
                right: shape.to_vec(),
            });
        }
        Ok(Self {
            shape: Shape::from_slice(shape),
            values: Arc::clone(&self.values),
            requires_grad: self.requires_grad,
            grad: None,
        })
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            values: Arc::new(self.values.iter().map(|v| U::of(v.as_f64())).collect()),
            requires_grad: self.requires_grad,
            grad: self
                .grad
                .as_ref()
                .map(|g| g.iter().map(|v| U::of(v.as_f64())).collect()),
        }
    }

    /// True when both tensors share a shape and every value has the same
    /// bit pattern.
    pub fn bit_eq(&self, other: &Self) -> bool
    where
        T: Into<f64>,
    {
        self.shape == other.shape
            && self
                .values
                .iter()
                .zip(other.values.iter())
                .all(|(a, b)| (*a).into().to_bits() == (*b).into().to_bits())
    }

    pub(crate) fn from_arc(shape: &[usize], values: Arc<Vec<T>>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        Self {
            shape: Shape::from_slice(shape),
            values,
            requires_grad: false,
            grad: None,
        }
    }

    pub(crate) fn shared_values(&self) -> &Arc<Vec<T>> {
        &self.values
    }
}

impl<T: Scalar> PartialEq for Tensor<T> {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.values == other.values
    }
}

impl<T: Scalar> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let mut s = f.debug_struct("Tensor");
        s.field("shape", &self.shape);
        if self.len() <= 16 {
            s.field("values", &self.values);
        } else {
            s.field("values", &format_args!("[{} values]", self.len()));
        }
        s.field("requires_grad", &self.requires_grad).finish()
    }
}
