//! Dense rank-5 tensors in (batch, channel, depth, height, width) layout.
//!
//! The data is always a contiguous row-major `Vec`; every operation in this
//! crate works directly on the flat buffer via [`Dims`] index arithmetic.
//! 32-bit floats are the forward default, 64-bit is used by the gradient
//! check suites.

use std::fmt;

use crate::error::{Error, Result};

/// Element type for tensors: f32 for regular forward/training work, f64 for
/// finite-difference verification.
pub trait Real:
    Copy
    + PartialOrd
    + Send
    + Sync
    + fmt::Debug
    + fmt::Display
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + 'static
{
    fn zero() -> Self;
    fn one() -> Self;
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn erf(self) -> Self;
    fn is_finite(self) -> bool;
    fn max(self, other: Self) -> Self;
    fn min_value() -> Self;
}

impl Real for f32 {
    fn zero() -> Self { 0.0 }
    fn one() -> Self { 1.0 }
    fn from_f64(x: f64) -> Self { x as f32 }
    fn to_f64(self) -> f64 { self as f64 }
    fn exp(self) -> Self { f32::exp(self) }
    fn ln(self) -> Self { f32::ln(self) }
    fn sqrt(self) -> Self { f32::sqrt(self) }
    fn erf(self) -> Self { libm::erff(self) }
    fn is_finite(self) -> bool { f32::is_finite(self) }
    fn max(self, other: Self) -> Self { f32::max(self, other) }
    fn min_value() -> Self { f32::NEG_INFINITY }
}

impl Real for f64 {
    fn zero() -> Self { 0.0 }
    fn one() -> Self { 1.0 }
    fn from_f64(x: f64) -> Self { x }
    fn to_f64(self) -> f64 { self }
    fn exp(self) -> Self { f64::exp(self) }
    fn ln(self) -> Self { f64::ln(self) }
    fn sqrt(self) -> Self { f64::sqrt(self) }
    fn erf(self) -> Self { libm::erf(self) }
    fn is_finite(self) -> bool { f64::is_finite(self) }
    fn max(self, other: Self) -> Self { f64::max(self, other) }
    fn min_value() -> Self { f64::NEG_INFINITY }
}

/// (n, c, d, h, w) dimensions of a rank-5 tensor. All dims are >= 1.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Dims {
    pub n: usize,
    pub c: usize,
    pub d: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims {
    pub fn new(n: usize, c: usize, d: usize, h: usize, w: usize) -> Self {
        Dims { n, c, d, h, w }
    }

    pub fn count(&self) -> usize {
        self.n * self.c * self.d * self.h * self.w
    }

    pub fn spatial(&self) -> usize {
        self.d * self.h * self.w
    }

    #[inline(always)]
    pub fn at(&self, n: usize, c: usize, d: usize, h: usize, w: usize) -> usize {
        (((n * self.c + c) * self.d + d) * self.h + h) * self.w + w
    }

    pub fn with_channels(&self, c: usize) -> Self {
        Dims { c, ..*self }
    }

    /// Strides of the three spatial axes in flat-index units.
    pub fn spatial_strides(&self) -> (usize, usize, usize) {
        (self.h * self.w, self.w, 1)
    }
}

impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {}, {})", self.n, self.c, self.d, self.h, self.w)
    }
}

/// Dense rank-5 array. Invariant: `data.len() == dims.count()` and every
/// dim is at least 1.
#[derive(Clone, PartialEq, Debug)]
pub struct Tensor<T> {
    dims: Dims,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(dims: Dims, data: Vec<T>) -> Result<Self> {
        if dims.n == 0 || dims.c == 0 || dims.d == 0 || dims.h == 0 || dims.w == 0 {
            return Err(Error::msg(format!("every dim must be >= 1, got {dims}")));
        }
        if data.len() != dims.count() {
            return Err(Error::DataLength { dims, expected: dims.count(), got: data.len() });
        }
        Ok(Tensor { dims, data })
    }

    pub fn zeros(dims: Dims) -> Self {
        Tensor { dims, data: vec![T::zero(); dims.count()] }
    }

    pub fn full(dims: Dims, value: T) -> Self {
        Tensor { dims, data: vec![value; dims.count()] }
    }

    pub fn scalar(value: T) -> Self {
        Tensor { dims: Dims::new(1, 1, 1, 1, 1), data: vec![value] }
    }

    pub fn from_f64(dims: Dims, data: &[f64]) -> Result<Self> {
        Self::new(dims, data.iter().map(|&x| T::from_f64(x)).collect())
    }

    pub fn dims(&self) -> Dims {
        self.dims
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

    pub fn is_scalar(&self) -> bool {
        self.dims.count() == 1
    }

    pub fn scalar_value(&self) -> T {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|&x| x.to_f64()).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|&x| x.is_finite())
    }

    /// Convert between element precisions.
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims,
            data: self.data.iter().map(|&x| U::from_f64(x.to_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor { dims: self.dims, data: self.data.iter().map(|&x| f(x)).collect() }
    }
}

/// Integer label volume (n, d, h, w); values index segmentation classes.
#[derive(Clone, PartialEq, Debug)]
pub struct Labels {
    pub n: usize,
    pub d: usize,
    pub h: usize,
    pub w: usize,
    data: Vec<u16>,
}

impl Labels {
    pub fn new(n: usize, d: usize, h: usize, w: usize, data: Vec<u16>) -> Result<Self> {
        if data.len() != n * d * h * w {
            return Err(Error::msg(format!(
                "label buffer has {} values, dims ({n}, {d}, {h}, {w}) need {}",
                data.len(),
                n * d * h * w
            )));
        }
        Ok(Labels { n, d, h, w, data })
    }

    pub fn zeros(n: usize, d: usize, h: usize, w: usize) -> Self {
        Labels { n, d, h, w, data: vec![0; n * d * h * w] }
    }

    pub fn data(&self) -> &[u16] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u16] {
        &mut self.data
    }

    pub fn spatial(&self) -> usize {
        self.d * self.h * self.w
    }

    pub fn count(&self) -> usize {
        self.n * self.spatial()
    }

    /// Error if any label is >= `classes`.
    pub fn check_range(&self, classes: usize) -> Result<()> {
        for &l in &self.data {
            if l as usize >= classes {
                return Err(Error::LabelOutOfRange { label: l as usize, classes });
            }
        }
        Ok(())
    }
}
