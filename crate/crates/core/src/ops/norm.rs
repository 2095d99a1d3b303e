//! Channel layer-norm and the stabilized row softmax.

use crate::error::{Error, Result};
use crate::tensor::{Dims, Real, Tensor};

fn check_affine<T: Real>(op: &'static str, x: &Tensor<T>, v: &Tensor<T>) -> Result<()> {
    let want = Dims::new(1, x.dims().c, 1, 1, 1);
    if v.dims() != want {
        return Err(Error::ChannelMismatch { op, what: "affine vector", got: v.dims().c, expected: x.dims().c });
    }
    Ok(())
}

/// For every voxel, normalize the channel vector to zero mean / unit
/// variance (biased variance, eps inside the sqrt), then scale and shift.
pub fn layer_norm<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    check_affine("layer_norm", x, gamma)?;
    check_affine("layer_norm", x, beta)?;
    let d = x.dims();
    let sp = d.spatial();
    let inv_c = T::from_f64(1.0 / d.c as f64);
    let eps = T::from_f64(eps);
    let mut out = Tensor::zeros(d);
    for n in 0..d.n {
        for v in 0..sp {
            let idx = |c: usize| (n * d.c + c) * sp + v;
            let mut mean = T::zero();
            for c in 0..d.c {
                mean += x.data()[idx(c)];
            }
            mean = mean * inv_c;
            let mut var = T::zero();
            for c in 0..d.c {
                let t = x.data()[idx(c)] - mean;
                var += t * t;
            }
            var = var * inv_c;
            let rstd = T::one() / (var + eps).sqrt();
            for c in 0..d.c {
                let xhat = (x.data()[idx(c)] - mean) * rstd;
                out.data_mut()[idx(c)] = xhat * gamma.data()[c] + beta.data()[c];
            }
        }
    }
    Ok(out)
}

/// Returns (d_x, d_gamma, d_beta).
pub fn layer_norm_grad<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    eps: f64,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let d = x.dims();
    let sp = d.spatial();
    let inv_c = T::from_f64(1.0 / d.c as f64);
    let eps = T::from_f64(eps);
    let mut dx = Tensor::zeros(d);
    let affine = Dims::new(1, d.c, 1, 1, 1);
    let mut dgamma = Tensor::zeros(affine);
    let mut dbeta = Tensor::zeros(affine);
    for n in 0..d.n {
        for v in 0..sp {
            let idx = |c: usize| (n * d.c + c) * sp + v;
            let mut mean = T::zero();
            for c in 0..d.c {
                mean += x.data()[idx(c)];
            }
            mean = mean * inv_c;
            let mut var = T::zero();
            for c in 0..d.c {
                let t = x.data()[idx(c)] - mean;
                var += t * t;
            }
            var = var * inv_c;
            let rstd = T::one() / (var + eps).sqrt();
            // dL/dxhat_c = g_c * gamma_c; reduce the two means once per voxel
            let mut sum_dxhat = T::zero();
            let mut sum_dxhat_xhat = T::zero();
            for c in 0..d.c {
                let g = grad_out.data()[idx(c)];
                let xhat = (x.data()[idx(c)] - mean) * rstd;
                let dxhat = g * gamma.data()[c];
                sum_dxhat += dxhat;
                sum_dxhat_xhat += dxhat * xhat;
                dgamma.data_mut()[c] += g * xhat;
                dbeta.data_mut()[c] += g;
            }
            for c in 0..d.c {
                let g = grad_out.data()[idx(c)];
                let xhat = (x.data()[idx(c)] - mean) * rstd;
                let dxhat = g * gamma.data()[c];
                dx.data_mut()[idx(c)] =
                    rstd * (dxhat - inv_c * sum_dxhat - xhat * inv_c * sum_dxhat_xhat);
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// In-place softmax over rows of a (rows, cols) buffer, with row-max
/// subtraction for overflow safety.
pub fn softmax_rows<T: Real>(buf: &mut [T], rows: usize, cols: usize) {
    debug_assert_eq!(buf.len(), rows * cols);
    for r in 0..rows {
        let row = &mut buf[r * cols..(r + 1) * cols];
        let mut m = T::min_value();
        for &v in row.iter() {
            m = m.max(v);
        }
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            sum += *v;
        }
        let inv = T::one() / sum;
        for v in row.iter_mut() {
            *v = *v * inv;
        }
    }
}
