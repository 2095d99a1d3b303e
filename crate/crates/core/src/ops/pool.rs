//! Global average pooling and channel pooling (per-voxel mean + max).

use crate::tensor::{Dims, Real, Tensor};

/// Per-channel spatial mean -> (n, c, 1, 1, 1).
pub fn global_avg_pool<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let d = x.dims();
    let sp = d.spatial();
    let inv = T::from_f64(1.0 / sp as f64);
    let mut out = Tensor::zeros(Dims::new(d.n, d.c, 1, 1, 1));
    for nc in 0..d.n * d.c {
        let mut acc = T::zero();
        for &v in &x.data()[nc * sp..(nc + 1) * sp] {
            acc += v;
        }
        out.data_mut()[nc] = acc * inv;
    }
    out
}

pub fn global_avg_pool_grad<T: Real>(x_dims: Dims, grad_out: &Tensor<T>) -> Tensor<T> {
    let sp = x_dims.spatial();
    let inv = T::from_f64(1.0 / sp as f64);
    let mut dx = Tensor::zeros(x_dims);
    for nc in 0..x_dims.n * x_dims.c {
        let g = grad_out.data()[nc] * inv;
        for v in &mut dx.data_mut()[nc * sp..(nc + 1) * sp] {
            *v = g;
        }
    }
    dx
}

/// Per-voxel channel statistics: output channel 0 is the mean over c,
/// channel 1 the max over c (first max wins on ties). Returns the pooled
/// tensor and the argmax channel per voxel for the backward pass.
pub fn channel_pool<T: Real>(x: &Tensor<T>) -> (Tensor<T>, Vec<u32>) {
    let d = x.dims();
    let sp = d.spatial();
    let inv_c = T::from_f64(1.0 / d.c as f64);
    let od = Dims::new(d.n, 2, d.d, d.h, d.w);
    let mut out = Tensor::zeros(od);
    let mut argmax = vec![0u32; d.n * sp];
    for n in 0..d.n {
        for v in 0..sp {
            let mut sum = T::zero();
            let mut max = T::min_value();
            let mut arg = 0u32;
            for c in 0..d.c {
                let val = x.data()[(n * d.c + c) * sp + v];
                sum += val;
                if val > max {
                    max = val;
                    arg = c as u32;
                }
            }
            out.data_mut()[(n * 2) * sp + v] = sum * inv_c;
            out.data_mut()[(n * 2 + 1) * sp + v] = max;
            argmax[n * sp + v] = arg;
        }
    }
    (out, argmax)
}

pub fn channel_pool_grad<T: Real>(x_dims: Dims, argmax: &[u32], grad_out: &Tensor<T>) -> Tensor<T> {
    let sp = x_dims.spatial();
    let inv_c = T::from_f64(1.0 / x_dims.c as f64);
    let mut dx = Tensor::zeros(x_dims);
    for n in 0..x_dims.n {
        for v in 0..sp {
            let gmean = grad_out.data()[(n * 2) * sp + v] * inv_c;
            let gmax = grad_out.data()[(n * 2 + 1) * sp + v];
            for c in 0..x_dims.c {
                dx.data_mut()[(n * x_dims.c + c) * sp + v] += gmean;
            }
            let arg = argmax[n * sp + v] as usize;
            dx.data_mut()[(n * x_dims.c + arg) * sp + v] += gmax;
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn gap_of_constant_volume() {
        let x = Tensor::full(Dims::new(2, 3, 2, 2, 2), 1.5_f64);
        let y = global_avg_pool(&x);
        assert_eq!(y.dims(), Dims::new(2, 3, 1, 1, 1));
        for &v in y.data() {
            assert_abs_diff_eq!(v, 1.5);
        }
    }

    #[test]
    fn gap_two_values() {
        let x = Tensor::new(Dims::new(1, 1, 1, 1, 2), vec![2.0, 4.0]).unwrap();
        assert_abs_diff_eq!(global_avg_pool(&x).data()[0], 3.0);
    }

    #[test]
    fn chpool_single_channel_is_identity_twice() {
        let x = Tensor::new(Dims::new(1, 1, 1, 1, 3), vec![1.0, -2.0, 0.5]).unwrap();
        let (y, _) = channel_pool(&x);
        let sp = 3;
        for v in 0..sp {
            assert_eq!(y.data()[v], x.data()[v]); // mean
            assert_eq!(y.data()[sp + v], x.data()[v]); // max
        }
    }

    #[test]
    fn chpool_two_channels() {
        let x = Tensor::new(Dims::new(1, 2, 1, 1, 1), vec![1.0, 3.0]).unwrap();
        let (y, argmax) = channel_pool(&x);
        assert_eq!(y.data(), &[2.0, 3.0]);
        assert_eq!(argmax, vec![1]);
    }
}
