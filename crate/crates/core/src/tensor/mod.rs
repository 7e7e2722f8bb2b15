//! Dense tensors with tape-based reverse-mode differentiation.
//!
//! Values live in a [`Graph`]; every operation appends a node and returns a
//! [`Var`] handle. Leaves are created with [`Graph::param`] (tracked) or
//! [`Graph::constant`] (untracked). [`Graph::backward`] walks the tape once in
//! reverse insertion order, which is a topological order by construction.
//!
//! Arithmetic is generic over [`Real`]: `f32` for training, `f64` for the
//! finite-difference verification suites.

mod approx;
mod graph;
pub mod gradcheck;
mod kernels;
mod params;

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::{Debug, Display};
use core::iter::Sum;
use core::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;
use serde::{Deserialize, Serialize};

pub use graph::{causal_mask, Graph, Var, MASK_VALUE};
pub use kernels::{gemm_nn, gemm_nt, gemm_tn};
pub use params::ParamSet;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Floating-point scalar the engine computes in.
pub trait Real:
    Float
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    const DTYPE: DType;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    /// `exp`, flushed to exactly zero where the result would be subnormal.
    fn exp_fast(self) -> Self;
    fn tanh_fast(self) -> Self;
}

impl Real for f32 {
    const DTYPE: DType = DType::F32;

    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }

    #[inline]
    fn exp_fast(self) -> Self {
        approx::exp_f32(self)
    }

    #[inline]
    fn tanh_fast(self) -> Self {
        approx::tanh_f32(self)
    }
}

impl Real for f64 {
    const DTYPE: DType = DType::F64;

    fn from_f64(v: f64) -> Self {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }

    #[inline]
    fn exp_fast(self) -> Self {
        let e = libm::exp(self);
        if e < f64::MIN_POSITIVE { 0.0 } else { e }
    }

    #[inline]
    fn tanh_fast(self) -> Self {
        libm::tanh(self)
    }
}

/// Row-major dense array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape {
                op: "Tensor::new",
                detail: format!("shape {:?} holds {} values, got {}", shape, numel, data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Self { shape, data: vec![T::zero(); numel] }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Self { shape, data: vec![value; numel] }
    }

    pub fn scalar(value: T) -> Self {
        Self { shape: Vec::new(), data: vec![value] }
    }

    pub fn from_f64(shape: impl Into<Vec<usize>>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::from_f64(v)).collect())
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        Self { shape, data: (0..numel).map(&mut f).collect() }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        match self.data.as_slice() {
            [v] => Ok(*v),
            _ => Err(Error::Shape { op: "item", detail: format!("{:?} is not a scalar", self.shape) }),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    /// Converts precision.
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// `(outer, n, inner)` such that element `(o, i, j)` sits at `(o*n + i)*inner + j`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Resolves a possibly negative axis.
pub(crate) fn resolve_axis(op: &'static str, shape: &[usize], axis: isize) -> Result<usize> {
    let rank = shape.len() as isize;
    let a = if axis < 0 { axis + rank } else { axis };
    if a < 0 || a >= rank {
        return Err(Error::Shape { op, detail: format!("axis {axis} out of range for shape {shape:?}") });
    }
    Ok(a as usize)
}
