//! Six-nested-loop direct convolution references.

use crate::Vol;

/// Direct grouped 3-D cross-correlation.
///
/// `weight` has shape (c_out, c_in/groups, k, k, k); returns the output
/// volume and its dims. Every output voxel is computed by an explicit loop
/// over the kernel window; out-of-range taps read as zero (zero padding).
pub fn conv3d(
    x: &[f64],
    xd: Vol,
    weight: &[f64],
    c_out: usize,
    k: usize,
    bias: Option<&[f64]>,
    stride: usize,
    padding: usize,
    groups: usize,
) -> (Vec<f64>, Vol) {
    assert_eq!(xd.c % groups, 0);
    assert_eq!(c_out % groups, 0);
    let cig = xd.c / groups;
    let cog = c_out / groups;
    let od = (xd.d + 2 * padding - k) / stride + 1;
    let oh = (xd.h + 2 * padding - k) / stride + 1;
    let ow = (xd.w + 2 * padding - k) / stride + 1;
    let yd = Vol::new(xd.n, c_out, od, oh, ow);
    let mut y = vec![0.0; yd.count()];
    for n in 0..xd.n {
        for co in 0..c_out {
            let g = co / cog;
            for zd in 0..od {
                for zh in 0..oh {
                    for zw in 0..ow {
                        let mut acc = bias.map_or(0.0, |b| b[co]);
                        for ci in 0..cig {
                            for kd in 0..k {
                                for kh in 0..k {
                                    for kw in 0..k {
                                        let id = (zd * stride + kd) as isize - padding as isize;
                                        let ih = (zh * stride + kh) as isize - padding as isize;
                                        let iw = (zw * stride + kw) as isize - padding as isize;
                                        if id < 0
                                            || ih < 0
                                            || iw < 0
                                            || id >= xd.d as isize
                                            || ih >= xd.h as isize
                                            || iw >= xd.w as isize
                                        {
                                            continue;
                                        }
                                        let xi = xd.at(
                                            n,
                                            g * cig + ci,
                                            id as usize,
                                            ih as usize,
                                            iw as usize,
                                        );
                                        let wi = ((co * cig + ci) * k * k * k)
                                            + (kd * k + kh) * k
                                            + kw;
                                        acc += x[xi] * weight[wi];
                                    }
                                }
                            }
                        }
                        y[yd.at(n, co, zd, zh, zw)] = acc;
                    }
                }
            }
        }
    }
    (y, yd)
}

/// Transposed 3-D convolution by explicit scatter.
///
/// `weight` has shape (c_in, c_out, k, k, k); output spatial dims are
/// `(in - 1) * stride + k`, no padding, no bias.
pub fn conv3d_transposed(
    x: &[f64],
    xd: Vol,
    weight: &[f64],
    c_out: usize,
    k: usize,
    stride: usize,
) -> (Vec<f64>, Vol) {
    let od = (xd.d - 1) * stride + k;
    let oh = (xd.h - 1) * stride + k;
    let ow = (xd.w - 1) * stride + k;
    let yd = Vol::new(xd.n, c_out, od, oh, ow);
    let mut y = vec![0.0; yd.count()];
    for n in 0..xd.n {
        for ci in 0..xd.c {
            for id in 0..xd.d {
                for ih in 0..xd.h {
                    for iw in 0..xd.w {
                        let xv = x[xd.at(n, ci, id, ih, iw)];
                        for co in 0..c_out {
                            for kd in 0..k {
                                for kh in 0..k {
                                    for kw in 0..k {
                                        let wi = ((ci * c_out + co) * k * k * k)
                                            + (kd * k + kh) * k
                                            + kw;
                                        let yi = yd.at(
                                            n,
                                            co,
                                            id * stride + kd,
                                            ih * stride + kh,
                                            iw * stride + kw,
                                        );
                                        y[yi] += xv * weight[wi];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (y, yd)
}

/// Per-channel spatial mean, returning one value per (n, c).
pub fn global_avg_pool(x: &[f64], xd: Vol) -> Vec<f64> {
    let mut y = vec![0.0; xd.n * xd.c];
    for n in 0..xd.n {
        for c in 0..xd.c {
            let mut sum = 0.0;
            for d in 0..xd.d {
                for h in 0..xd.h {
                    for w in 0..xd.w {
                        sum += x[xd.at(n, c, d, h, w)];
                    }
                }
            }
            y[n * xd.c + c] = sum / xd.spatial() as f64;
        }
    }
    y
}

/// Per-voxel mean and max over channels: output channel 0 = mean, 1 = max.
pub fn channel_pool(x: &[f64], xd: Vol) -> (Vec<f64>, Vol) {
    let yd = Vol::new(xd.n, 2, xd.d, xd.h, xd.w);
    let mut y = vec![0.0; yd.count()];
    for n in 0..xd.n {
        for d in 0..xd.d {
            for h in 0..xd.h {
                for w in 0..xd.w {
                    let mut sum = 0.0;
                    let mut max = f64::NEG_INFINITY;
                    for c in 0..xd.c {
                        let v = x[xd.at(n, c, d, h, w)];
                        sum += v;
                        if v > max {
                            max = v;
                        }
                    }
                    y[yd.at(n, 0, d, h, w)] = sum / xd.c as f64;
                    y[yd.at(n, 1, d, h, w)] = max;
                }
            }
        }
    }
    (y, yd)
}

/// Pointwise (1x1x1) channel map y = Wx + b applied at every voxel.
/// `weight` is (c_out, c_in) row-major.
pub fn pointwise(x: &[f64], xd: Vol, weight: &[f64], bias: Option<&[f64]>, c_out: usize) -> Vec<f64> {
    let yd = Vol::new(xd.n, c_out, xd.d, xd.h, xd.w);
    let mut y = vec![0.0; yd.count()];
    for n in 0..xd.n {
        for d in 0..xd.d {
            for h in 0..xd.h {
                for w in 0..xd.w {
                    for co in 0..c_out {
                        let mut acc = bias.map_or(0.0, |b| b[co]);
                        for ci in 0..xd.c {
                            acc += weight[co * xd.c + ci] * x[xd.at(n, ci, d, h, w)];
                        }
                        y[yd.at(n, co, d, h, w)] = acc;
                    }
                }
            }
        }
    }
    y
}
