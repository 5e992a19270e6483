//! Dense tensors and the reverse-mode gradient tape.
//!
//! Values are row-major `Vec<T>` buffers with an explicit shape. All
//! differentiable computation goes through a [`Tape`]: every op appends a
//! node holding its output value plus whatever forward context its backward
//! rule needs, and [`Tape::backward`] replays the nodes in reverse.

mod conv;
pub mod gradcheck;
pub mod io;
mod linalg;
mod norm;
pub mod parallel;
mod rng;
mod shape_ops;
mod tape;

pub use gradcheck::{gradcheck, gradcheck_resampling, GradcheckOptions, GradcheckReport};
pub use linalg::Scalar;
pub use rng::RngState;
pub use tape::{RunningStats, Tape, Var};

#[allow(unused_imports)]
pub(crate) use linalg::gemm;

use crate::error::{CtsError, Result};

/// Dense n-dimensional array with optional gradient storage.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if numel_of(shape) != data.len() {
            return Err(CtsError::config(format!(
                "shape {:?} holds {} elements but {} values were given",
                shape,
                numel_of(shape),
                data.len()
            )));
        }
        Ok(Self::from_parts(shape.to_vec(), data))
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(numel_of(&shape), data.len());
        Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self::from_parts(shape.to_vec(), vec![value; numel_of(shape)])
    }

    pub fn scalar(value: T) -> Self {
        Self::from_parts(Vec::new(), vec![value])
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let data = (0..numel_of(shape)).map(&mut f).collect();
        Self::from_parts(shape.to_vec(), data)
    }

    /// Marks this tensor as a trainable leaf.
    pub fn requiring_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the stored gradient.
    pub fn accumulate_grad(&mut self, g: &[T]) {
        assert_eq!(g.len(), self.data.len(), "gradient length mismatch");
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a = *a + b),
            None => self.grad = Some(g.to_vec()),
        }
    }

    /// First element; intended for scalar tensors.
    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        if numel_of(shape) != self.numel() {
            return Err(CtsError::config(format!(
                "cannot reshape {:?} ({} elements) into {:?} ({} elements)",
                self.shape,
                self.numel(),
                shape,
                numel_of(shape)
            )));
        }
        Ok(Self::from_parts(shape.to_vec(), self.data.clone()))
    }

    /// Axis permutation: output axis `i` is input axis `axes[i]`.
    pub fn permuted(&self, axes: &[usize]) -> Result<Self> {
        validate_axes(&self.shape, axes)?;
        let (shape, data) = shape_ops::permute_data(&self.shape, &self.data, axes);
        Ok(Self::from_parts(shape, data))
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Element-type conversion through `f64`.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor::from_parts(
            self.shape.clone(),
            self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        )
    }
}

pub(crate) fn validate_axes(shape: &[usize], axes: &[usize]) -> Result<()> {
    let mut seen = vec![false; shape.len()];
    if axes.len() != shape.len() {
        return Err(CtsError::config(format!(
            "permutation {:?} does not match rank of {:?}",
            axes, shape
        )));
    }
    for &a in axes {
        if a >= shape.len() || seen[a] {
            return Err(CtsError::config(format!("invalid permutation {:?}", axes)));
        }
        seen[a] = true;
    }
    Ok(())
}
