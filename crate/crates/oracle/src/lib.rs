//! Independent reference implementations used as test oracles.
//!
//! Everything here is written as plain nested loops over `&[f64]` with
//! explicit dimension arguments, deliberately sharing no code with the
//! optimized kernels under test. Correct, slow, and obvious is the goal;
//! these functions are only ever run on tiny shapes.

pub mod attn;
pub mod conv;
pub mod gates;
pub mod loss;
pub mod norm;
pub mod synth;

/// (n, c, d, h, w) volume dims used throughout the oracle routines.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Vol {
    pub n: usize,
    pub c: usize,
    pub d: usize,
    pub h: usize,
    pub w: usize,
}

impl Vol {
    pub fn new(n: usize, c: usize, d: usize, h: usize, w: usize) -> Self {
        Vol { n, c, d, h, w }
    }

    pub fn count(&self) -> usize {
        self.n * self.c * self.d * self.h * self.w
    }

    pub fn spatial(&self) -> usize {
        self.d * self.h * self.w
    }

    /// Row-major flat index.
    pub fn at(&self, n: usize, c: usize, d: usize, h: usize, w: usize) -> usize {
        (((n * self.c + c) * self.d + d) * self.h + h) * self.w + w
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// In-place softmax of a single row, with max subtraction.
pub fn softmax_row(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}
