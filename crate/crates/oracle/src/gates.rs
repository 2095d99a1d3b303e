//! Hand-composed references for the channel/spatial gates, MHLK, and the
//! two entanglement compositions.

use crate::conv::{channel_pool, conv3d, global_avg_pool, pointwise};
use crate::{sigmoid, Vol};

/// target ⊙ sigmoid(linear(avgpool(source))), gate broadcast spatially.
pub fn channel_gate(
    source: &[f64],
    target: &[f64],
    d: Vol,
    weight: &[f64], // (c, c)
    bias: &[f64],
) -> Vec<f64> {
    let pooled = global_avg_pool(source, d);
    let mut out = vec![0.0; d.count()];
    for n in 0..d.n {
        for c in 0..d.c {
            let mut z = bias[c];
            for ci in 0..d.c {
                z += weight[c * d.c + ci] * pooled[n * d.c + ci];
            }
            let g = sigmoid(z);
            for dd in 0..d.d {
                for hh in 0..d.h {
                    for ww in 0..d.w {
                        let i = d.at(n, c, dd, hh, ww);
                        out[i] = target[i] * g;
                    }
                }
            }
        }
    }
    out
}

/// target ⊙ sigmoid(conv7(chpool(source))), gate broadcast over channels.
/// `weight` is the (1, 2, 7, 7, 7) kernel, `bias` its single bias.
pub fn spatial_gate(
    source: &[f64],
    target: &[f64],
    d: Vol,
    weight: &[f64],
    bias: f64,
) -> Vec<f64> {
    let (pooled, pd) = channel_pool(source, d);
    let (gate, gd) = conv3d(&pooled, pd, weight, 1, 7, Some(&[bias]), 1, 3, 1);
    let mut out = vec![0.0; d.count()];
    for n in 0..d.n {
        for c in 0..d.c {
            for dd in 0..d.d {
                for hh in 0..d.h {
                    for ww in 0..d.w {
                        let g = sigmoid(gate[gd.at(n, 0, dd, hh, ww)]);
                        let i = d.at(n, c, dd, hh, ww);
                        out[i] = target[i] * g;
                    }
                }
            }
        }
    }
    out
}

/// Channel gate then spatial gate, both self-sourced.
pub fn progressive_entangle(
    x: &[f64],
    d: Vol,
    ch_w: &[f64],
    ch_b: &[f64],
    sp_w: &[f64],
    sp_b: f64,
) -> Vec<f64> {
    let x_ch = channel_gate(x, x, d, ch_w, ch_b);
    spatial_gate(&x_ch, &x_ch, d, sp_w, sp_b)
}

/// Cross-sourced gates, then additive fusion.
#[allow(clippy::too_many_arguments)]
pub fn collaborative_entangle(
    x_lk: &[f64],
    x_sa: &[f64],
    d: Vol,
    ch_w: &[f64],
    ch_b: &[f64],
    sp_w: &[f64],
    sp_b: f64,
) -> Vec<f64> {
    let sa = spatial_gate(x_lk, x_sa, d, sp_w, sp_b);
    let lk = channel_gate(x_sa, x_lk, d, ch_w, ch_b);
    lk.iter().zip(sa.iter()).map(|(a, b)| a + b).collect()
}

/// Per-head depthwise conv bank of an MHLK: pointwise projection, contiguous
/// channel split into `kernels.len()` heads, per-head depthwise conv with
/// same-padding, concatenation.
pub fn mhlk(
    x: &[f64],
    d: Vol,
    proj_w: &[f64],
    proj_b: &[f64],
    kernels: &[(usize, Vec<f64>, Vec<f64>)], // (k, weight (ch,1,k,k,k), bias (ch))
) -> Vec<f64> {
    let heads = kernels.len();
    let ch = d.c / heads;
    let projected = pointwise(x, d, proj_w, Some(proj_b), d.c);
    let hd = Vol::new(d.n, ch, d.d, d.h, d.w);
    let mut out = vec![0.0; d.count()];
    for (i, (k, w, b)) in kernels.iter().enumerate() {
        // slice head i's channels out of the projected tensor
        let mut part = vec![0.0; hd.count()];
        for n in 0..d.n {
            for c in 0..ch {
                for dd in 0..d.d {
                    for hh in 0..d.h {
                        for ww in 0..d.w {
                            part[hd.at(n, c, dd, hh, ww)] =
                                projected[d.at(n, i * ch + c, dd, hh, ww)];
                        }
                    }
                }
            }
        }
        let (conv, _) = conv3d(&part, hd, w, ch, *k, Some(b), 1, (k - 1) / 2, ch);
        for n in 0..d.n {
            for c in 0..ch {
                for dd in 0..d.d {
                    for hh in 0..d.h {
                        for ww in 0..d.w {
                            out[d.at(n, i * ch + c, dd, hh, ww)] =
                                conv[hd.at(n, c, dd, hh, ww)];
                        }
                    }
                }
            }
        }
    }
    out
}
