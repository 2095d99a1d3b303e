//! Axial attention: scaled dot-product attention restricted to sequences
//! along one spatial axis, batched over all positions of the other two.
//!
//! Heads are contiguous channel blocks. Splitting (n, c, d, h, w) into
//! (n, heads, c/heads, d, h, w) is a pure reinterpretation of the row-major
//! buffer, so [`HeadView`] wraps the original tensor without copying and
//! `merge` returns it bit-exactly.

use crate::error::{Error, Result};
use rayon::prelude::*;

use crate::ops::norm::softmax_rows;
use crate::tensor::{Dims, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    D,
    H,
    W,
}

impl Axis {
    /// (length, stride) of this axis plus (length, stride) of the two
    /// remaining spatial axes, in flat-index units.
    fn decompose(self, d: Dims) -> (usize, usize, [(usize, usize); 2]) {
        let (sd, sh, sw) = d.spatial_strides();
        match self {
            Axis::D => (d.d, sd, [(d.h, sh), (d.w, sw)]),
            Axis::H => (d.h, sh, [(d.d, sd), (d.w, sw)]),
            Axis::W => (d.w, sw, [(d.d, sd), (d.h, sh)]),
        }
    }
}

impl std::fmt::Display for Axis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Axis::D => write!(f, "D"),
            Axis::H => write!(f, "H"),
            Axis::W => write!(f, "W"),
        }
    }
}

/// A tensor logically reshaped to (n, heads, c/heads, d, h, w). Head i owns
/// the contiguous channel block [i * c/heads, (i+1) * c/heads).
#[derive(Clone, Debug)]
pub struct HeadView<T> {
    tensor: Tensor<T>,
    heads: usize,
}

impl<T: Real> HeadView<T> {
    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn head_channels(&self) -> usize {
        self.tensor.dims().c / self.heads
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.tensor
    }

    /// Channel range of head `i` in the merged tensor.
    pub fn head_range(&self, i: usize) -> std::ops::Range<usize> {
        let ch = self.head_channels();
        i * ch..(i + 1) * ch
    }
}

/// Split into `heads` contiguous channel blocks. Errors unless the channel
/// count divides evenly.
pub fn split_heads<T: Real>(x: &Tensor<T>, heads: usize) -> Result<HeadView<T>> {
    let c = x.dims().c;
    if heads == 0 || c % heads != 0 {
        return Err(Error::Divisibility { op: "split_heads", channels: c, divisor: heads, unit: "heads" });
    }
    Ok(HeadView { tensor: x.clone(), heads })
}

/// Exact inverse of [`split_heads`].
pub fn merge_heads<T: Real>(hv: HeadView<T>) -> Tensor<T> {
    hv.tensor
}

/// Attention along `axis` for every (batch, head, other-axis) slot.
///
/// For each sequence of length L with c/heads-dim embeddings:
/// scores = softmax(q . k^T / sqrt(c/heads)) over the axis, out = scores . v.
/// Shape is preserved. When `want_probs` is set the per-sequence softmax
/// matrices are returned for the backward pass, laid out as
/// (n * heads * other_a * other_b) consecutive L*L blocks.
pub fn axial_attention<T: Real>(
    q: &HeadView<T>,
    k: &HeadView<T>,
    v: &HeadView<T>,
    axis: Axis,
    want_probs: bool,
) -> Result<(HeadView<T>, Option<Vec<T>>)> {
    let d = q.tensor.dims();
    for (name, t) in [("k", &k.tensor), ("v", &v.tensor)] {
        if t.dims() != d {
            return Err(Error::ShapeMismatch { op: "axial_attention", left: d, right: t.dims() });
        }
        let _ = name;
    }
    let heads = q.heads;
    let ch = q.head_channels();
    let scale = T::from_f64(1.0 / (ch as f64).sqrt());
    let (len, stride, [(la, sa), (lb, sb)]) = axis.decompose(d);
    let cs = d.spatial(); // channel stride
    let qd = q.tensor.data();
    let kd = k.tensor.data();
    let vd = v.tensor.data();

    let n_seq = d.n * heads * la * lb;
    let chunk = ch * cs; // one (batch, head) channel block, contiguous
    let mut probs = if want_probs { vec![T::zero(); n_seq * len * len] } else { Vec::new() };
    let mut out = Tensor::zeros(d);

    // gather each sequence into contiguous (ch, len) scratch, attend, and
    // scatter back into this (batch, head) block of the output
    let work = |nh: usize, oblock: &mut [T], mut pblock: Option<&mut [T]>| {
        let base = nh * chunk;
        let mut qs = vec![T::zero(); ch * len];
        let mut ks = vec![T::zero(); ch * len];
        let mut vs = vec![T::zero(); ch * len];
        let mut scores = vec![T::zero(); len * len];
        for a in 0..la {
            for b in 0..lb {
                let start = a * sa + b * sb;
                for c in 0..ch {
                    let row = c * cs + start;
                    for i in 0..len {
                        qs[c * len + i] = qd[base + row + i * stride];
                        ks[c * len + i] = kd[base + row + i * stride];
                        vs[c * len + i] = vd[base + row + i * stride];
                    }
                }
                for i in 0..len {
                    for j in 0..len {
                        let mut dot = T::zero();
                        for c in 0..ch {
                            dot += qs[c * len + i] * ks[c * len + j];
                        }
                        scores[i * len + j] = dot * scale;
                    }
                }
                softmax_rows(&mut scores, len, len);
                for c in 0..ch {
                    let row = c * cs + start;
                    let vrow = &vs[c * len..(c + 1) * len];
                    for i in 0..len {
                        let mut acc = T::zero();
                        for (s, &vv) in scores[i * len..(i + 1) * len].iter().zip(vrow) {
                            acc += *s * vv;
                        }
                        oblock[row + i * stride] = acc;
                    }
                }
                if let Some(p) = pblock.as_mut() {
                    let seq = a * lb + b;
                    p[seq * len * len..(seq + 1) * len * len].copy_from_slice(&scores);
                }
            }
        }
    };

    if want_probs {
        out.data_mut()
            .par_chunks_mut(chunk)
            .zip(probs.par_chunks_mut(la * lb * len * len))
            .enumerate()
            .for_each(|(nh, (o, p))| work(nh, o, Some(p)));
    } else {
        out.data_mut()
            .par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(nh, o)| work(nh, o, None));
    }
    let out = HeadView { tensor: out, heads };
    Ok((out, want_probs.then_some(probs)))
}

/// Gradients wrt q, k, v given the saved softmax probabilities.
#[allow(clippy::too_many_arguments)]
pub fn axial_attention_grad<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    axis: Axis,
    heads: usize,
    probs: &[T],
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let d = q.dims();
    let ch = d.c / heads;
    let scale = T::from_f64(1.0 / (ch as f64).sqrt());
    let (len, stride, [(la, sa), (lb, sb)]) = axis.decompose(d);
    let cs = d.spatial();
    let chunk = ch * cs;
    let qd = q.data();
    let kd = k.data();
    let vd = v.data();
    let go = grad_out.data();

    let mut dq = Tensor::zeros(d);
    let mut dk = Tensor::zeros(d);
    let mut dv = Tensor::zeros(d);

    dq.data_mut()
        .par_chunks_mut(chunk)
        .zip(dk.data_mut().par_chunks_mut(chunk).zip(dv.data_mut().par_chunks_mut(chunk)))
        .enumerate()
        .for_each(|(nh, (dqb, (dkb, dvb)))| {
            let base = nh * chunk;
            let mut qs = vec![T::zero(); ch * len];
            let mut ks = vec![T::zero(); ch * len];
            let mut vs = vec![T::zero(); ch * len];
            let mut gs = vec![T::zero(); ch * len];
            let mut dqs = vec![T::zero(); ch * len];
            let mut dks = vec![T::zero(); ch * len];
            let mut dvs = vec![T::zero(); ch * len];
            let mut dscores = vec![T::zero(); len * len];
            for a in 0..la {
                for b in 0..lb {
                    let start = a * sa + b * sb;
                    for c in 0..ch {
                        let row = base + c * cs + start;
                        for i in 0..len {
                            qs[c * len + i] = qd[row + i * stride];
                            ks[c * len + i] = kd[row + i * stride];
                            vs[c * len + i] = vd[row + i * stride];
                            gs[c * len + i] = go[row + i * stride];
                        }
                    }
                    for x in dqs.iter_mut().chain(dks.iter_mut()).chain(dvs.iter_mut()) {
                        *x = T::zero();
                    }
                    let seq = (nh * la + a) * lb + b;
                    let p = &probs[seq * len * len..(seq + 1) * len * len];
                    // dV_j += sum_i P_ij g_i ; dP_ij = g_i . v_j
                    for i in 0..len {
                        for j in 0..len {
                            let pij = p[i * len + j];
                            let mut dp = T::zero();
                            for c in 0..ch {
                                let g = gs[c * len + i];
                                dp += g * vs[c * len + j];
                                dvs[c * len + j] += pij * g;
                            }
                            dscores[i * len + j] = dp;
                        }
                    }
                    // softmax backward per row: dS = P * (dP - sum_j P dP)
                    for i in 0..len {
                        let row = &mut dscores[i * len..(i + 1) * len];
                        let prow = &p[i * len..(i + 1) * len];
                        let mut dot = T::zero();
                        for j in 0..len {
                            dot += prow[j] * row[j];
                        }
                        for j in 0..len {
                            row[j] = prow[j] * (row[j] - dot);
                        }
                    }
                    // dQ_i += sum_j dS_ij K_j * scale ; dK_j += sum_i dS_ij Q_i * scale
                    for i in 0..len {
                        for j in 0..len {
                            let ds = dscores[i * len + j] * scale;
                            for c in 0..ch {
                                dqs[c * len + i] += ds * ks[c * len + j];
                                dks[c * len + j] += ds * qs[c * len + i];
                            }
                        }
                    }
                    for c in 0..ch {
                        let row = c * cs + start;
                        for i in 0..len {
                            dqb[row + i * stride] += dqs[c * len + i];
                            dkb[row + i * stride] += dks[c * len + i];
                            dvb[row + i * stride] += dvs[c * len + i];
                        }
                    }
                }
            }
        });
    (dq, dk, dv)
}
