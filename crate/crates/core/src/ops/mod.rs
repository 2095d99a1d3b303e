//! Forward and backward kernels. Everything is a pure function from value
//! tensors to value tensors; the autodiff tape wires these together.

pub mod attn;
pub mod conv;
pub mod elementwise;
pub mod loss;
pub mod norm;
pub mod pool;

pub use attn::{axial_attention, merge_heads, split_heads, Axis, HeadView};
pub use conv::{conv3d, conv3d_transposed, conv_out_len};
pub use elementwise::*;
pub use loss::{dice_ce_loss, dice_ce_parts, dsc};
pub use norm::{layer_norm, softmax_rows};
pub use pool::{channel_pool, global_avg_pool};

use crate::tensor::{Real, Tensor};

/// Elementwise nonlinearity kind.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Sigmoid,
}

/// exact-erf GELU: 0.5 * x * (1 + erf(x / sqrt(2)))
pub fn gelu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let half = T::from_f64(0.5);
    let inv_sqrt2 = T::from_f64(std::f64::consts::FRAC_1_SQRT_2);
    x.map(|v| half * v * (T::one() + (v * inv_sqrt2).erf()))
}

/// d/dx gelu = 0.5 * (1 + erf(x/sqrt(2))) + x * pdf(x)
pub fn gelu_grad<T: Real>(x: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let half = T::from_f64(0.5);
    let inv_sqrt2 = T::from_f64(std::f64::consts::FRAC_1_SQRT_2);
    let inv_sqrt_2pi = T::from_f64(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    let mut out = Tensor::zeros(x.dims());
    for ((o, &xi), &g) in out.data_mut().iter_mut().zip(x.data()).zip(grad_out.data()) {
        let cdf = half * (T::one() + (xi * inv_sqrt2).erf());
        let pdf = inv_sqrt_2pi * (-(half * xi * xi)).exp();
        *o = g * (cdf + xi * pdf);
    }
    out
}

pub fn sigmoid<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| T::one() / (T::one() + (-v).exp()))
}

/// Backward from the sigmoid *output* y: dy/dx = y * (1 - y).
pub fn sigmoid_grad_from_output<T: Real>(y: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let mut out = Tensor::zeros(y.dims());
    for ((o, &yi), &g) in out.data_mut().iter_mut().zip(y.data()).zip(grad_out.data()) {
        *o = g * yi * (T::one() - yi);
    }
    out
}

pub fn activation<T: Real>(x: &Tensor<T>, kind: Activation) -> Tensor<T> {
    match kind {
        Activation::Gelu => gelu(x),
        Activation::Sigmoid => sigmoid(x),
    }
}
