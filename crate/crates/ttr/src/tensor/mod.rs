//! Dense tensors with reverse-mode automatic differentiation.
//!
//! [`Tensor`] is a detached value: a row-major buffer plus shape, safely
//! shareable once built. Differentiation happens on a [`tape::Tape`], a
//! define-by-run graph rebuilt per forward pass. Parameters and activations
//! are `f32` in production; gradient checks rebuild the same graph in `f64`
//! so the finite-difference oracle stays trustworthy.

pub mod gradcheck;
pub mod tape;

pub use gradcheck::{grad_check, grad_check_sampled};
pub use tape::{Tape, Var};

use crate::error::{Error, Result};
use num_traits::Float;
use std::fmt::{Debug, Display};

/// Scalar element of a tensor. Implemented for `f32` and `f64`.
pub trait Element:
    Float + num_traits::NumAssign + Send + Sync + Debug + Display + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn from_f32(v: f32) -> Self;
    fn as_f32(self) -> f32;
    fn from_usize(v: usize) -> Self {
        Self::from_f64(v as f64)
    }
}

impl Element for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn from_f32(v: f32) -> Self {
        v
    }
    fn as_f32(self) -> f32 {
        self
    }
}

impl Element for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn from_f32(v: f32) -> Self {
        v as f64
    }
    fn as_f32(self) -> f32 {
        self as f32
    }
}

/// Dense row-major tensor. `grad` is populated by [`Tape::backward`] for
/// bound parameters and has the same shape as `data`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F: Element = f32> {
    shape: Vec<usize>,
    data: Vec<F>,
    pub requires_grad: bool,
    pub grad: Option<Vec<F>>,
}

impl<F: Element> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidArgument(format!(
                "tensor shape {:?} implies {} values, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![F::zero(); numel], requires_grad: false, grad: None }
    }

    pub fn full(shape: Vec<usize>, v: F) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![v; numel], requires_grad: false, grad: None }
    }

    pub fn scalar(v: F) -> Self {
        Tensor { shape: vec![1], data: vec![v], requires_grad: false, grad: None }
    }

    pub fn from_vec(data: Vec<F>) -> Self {
        Tensor { shape: vec![data.len()], data, requires_grad: false, grad: None }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn requires_grad(mut self, yes: bool) -> Self {
        self.requires_grad = yes;
        self
    }

    /// Cast element type, e.g. the f32 production weights into an f64
    /// replica for gradient checking.
    pub fn cast<G: Element>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| G::from_f64(v.as_f64())).collect(),
            requires_grad: self.requires_grad,
            grad: None,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Index of the largest value; ties break to the lowest index.
pub fn argmax<F: Element>(values: &[F]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}
