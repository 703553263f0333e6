//! Dense tensor engine with reverse-mode automatic differentiation.
//!
//! Tensors are rank <= 4, row-major, and carry `f32` or `f64` scalars behind
//! the [`Scalar`] trait; the same operation code serves both precisions
//! (training runs single precision, gradient checking double). All
//! reductions accumulate left to right so repeated runs are bit-identical.

mod kernels;
mod tape;

pub use tape::{PadMode, Tape, TensorId};

use crate::error::{EvccError, Result};
use crate::rng::Rng;

/// Scalar types the engine computes in.
pub trait Scalar:
    Copy
    + PartialOrd
    + PartialEq
    + std::fmt::Debug
    + std::fmt::Display
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + Send
    + Sync
    + 'static
{
    const ZERO: Self;
    const ONE: Self;
    /// Dtype code used in checkpoint files: 0 = f32, 1 = f64.
    const DTYPE_CODE: u8;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;
    fn abs(self) -> Self;
    fn maximum(self, other: Self) -> Self;
    fn is_finite(self) -> bool;
}

impl Scalar for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    const DTYPE_CODE: u8 = 0;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn exp(self) -> Self {
        f32::exp(self)
    }
    fn ln(self) -> Self {
        f32::ln(self)
    }
    fn sqrt(self) -> Self {
        f32::sqrt(self)
    }
    fn tanh(self) -> Self {
        f32::tanh(self)
    }
    fn abs(self) -> Self {
        f32::abs(self)
    }
    fn maximum(self, other: Self) -> Self {
        f32::max(self, other)
    }
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
}

impl Scalar for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    const DTYPE_CODE: u8 = 1;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    fn abs(self) -> Self {
        f64::abs(self)
    }
    fn maximum(self, other: Self) -> Self {
        f64::max(self, other)
    }
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
}

/// Shape of a tensor: up to four positive extents.
#[derive(Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    dims: [usize; 4],
    rank: u8,
}

impl Shape {
    pub fn new(dims: &[usize]) -> Result<Self> {
        if dims.is_empty() || dims.len() > 4 {
            return Err(EvccError::Dimension(format!(
                "rank must be 1..=4, got {:?}",
                dims
            )));
        }
        if dims.contains(&0) {
            return Err(EvccError::Dimension(format!("zero extent in {:?}", dims)));
        }
        let mut arr = [1usize; 4];
        arr[..dims.len()].copy_from_slice(dims);
        Ok(Shape { dims: arr, rank: dims.len() as u8 })
    }

    pub fn of(dims: &[usize]) -> Self {
        Shape::new(dims).expect("valid shape")
    }

    pub fn rank(&self) -> usize {
        self.rank as usize
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims[..self.rank as usize]
    }

    pub fn numel(&self) -> usize {
        self.dims().iter().product()
    }

    /// Extent of the last axis.
    pub fn last(&self) -> usize {
        self.dims[self.rank as usize - 1]
    }
}

impl std::fmt::Debug for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:?}", self.dims())
    }
}

/// Plain dense tensor value: shape plus a row-major buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Shape, data: Vec<T>) -> Result<Self> {
        if shape.numel() != data.len() {
            return Err(EvccError::Dimension(format!(
                "shape {:?} implies {} elements, buffer has {}",
                shape,
                shape.numel(),
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_vec(dims: &[usize], data: Vec<T>) -> Result<Self> {
        Tensor::new(Shape::new(dims)?, data)
    }

    pub fn zeros(dims: &[usize]) -> Self {
        let shape = Shape::of(dims);
        let n = shape.numel();
        Tensor { shape, data: vec![T::ZERO; n] }
    }

    pub fn full(dims: &[usize], v: T) -> Self {
        let shape = Shape::of(dims);
        let n = shape.numel();
        Tensor { shape, data: vec![v; n] }
    }

    pub fn scalar(v: T) -> Self {
        Tensor { shape: Shape::of(&[1]), data: vec![v] }
    }

    /// Gaussian init with the given standard deviation.
    pub fn randn(dims: &[usize], std: f64, rng: &mut Rng) -> Self {
        let shape = Shape::of(dims);
        let data = (0..shape.numel())
            .map(|_| T::from_f64(rng.normal() * std))
            .collect();
        Tensor { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
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

    /// Single element of a one-element tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Convert the scalar type, rounding through f64.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }
}

/// Indices of the k largest values, ties broken toward the lower index,
/// returned in ascending index order so downstream consumers preserve the
/// original element order.
pub fn topk_indices<T: Scalar>(scores: &[T], k: usize) -> Result<Vec<usize>> {
    let n = scores.len();
    if k == 0 || k > n {
        return Err(EvccError::Argument(format!(
            "topk: k={} out of range for length {}",
            k, n
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    // Descending score; equal scores keep the lower index first.
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut picked: Vec<usize> = order[..k].to_vec();
    picked.sort_unstable();
    Ok(picked)
}
