//! Dense row-major tensors.
//!
//! Parameters and activations are 32-bit floats; reductions and convolution
//! inner loops accumulate in 64 bits. The element type is abstracted behind
//! [`Elem`] so that verification code (the finite-difference oracle) can run
//! the same graphs with 64-bit storage end to end.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::error::{Error, Result};

/// Storage element of a tensor: `f32` in production, `f64` in oracles.
pub trait Elem: Copy + PartialOrd + PartialEq + fmt::Debug + Send + Sync + 'static {
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn from_f32(v: f32) -> Self;
    fn is_finite(self) -> bool;
}

impl Elem for f32 {
    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self as f64
    }
    #[inline(always)]
    fn from_f32(v: f32) -> Self {
        v
    }
    #[inline(always)]
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
}

impl Elem for f64 {
    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self
    }
    #[inline(always)]
    fn from_f32(v: f32) -> Self {
        v as f64
    }
    #[inline(always)]
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
}

/// Dense N-dimensional array in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorOf<E: Elem> {
    shape: Vec<usize>,
    data: Vec<E>,
}

/// The production tensor: 32-bit storage.
pub type Tensor = TensorOf<f32>;
/// 64-bit tensor used by verification oracles.
pub type Tensor64 = TensorOf<f64>;

impl<E: Elem> TensorOf<E> {
    /// Builds a tensor, checking that `data` fills `shape` exactly.
    pub fn new(shape: Vec<usize>, data: Vec<E>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape {
                op: "tensor",
                detail: alloc::format!("zero extent in shape {shape:?}"),
            });
        }
        if numel != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                detail: alloc::format!(
                    "shape {shape:?} holds {numel} elements but {} were provided",
                    data.len()
                ),
            });
        }
        Ok(TensorOf { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        TensorOf {
            shape,
            data: vec![E::from_f64(0.0); numel],
        }
    }

    pub fn filled(shape: Vec<usize>, value: E) -> Self {
        let numel = shape.iter().product();
        TensorOf {
            shape,
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: E) -> Self {
        TensorOf {
            shape: vec![1],
            data: vec![value],
        }
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    #[inline]
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn data(&self) -> &[E] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<E> {
        self.data
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Widens/narrows element storage; `f32 -> f64` is exact.
    pub fn convert<T: Elem>(&self) -> TensorOf<T> {
        TensorOf {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| T::from_f64(v.to_f64())).collect(),
        }
    }

    /// Extent along axis 0 of an NCHW tensor.
    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }
}

impl Tensor {
    pub fn from_f32(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        Tensor::new(shape, data)
    }
}

/// Formats a shape for error messages, e.g. `[2, 4, 5, 5]`.
pub fn shape_string(shape: &[usize]) -> String {
    alloc::format!("{shape:?}")
}
