//! Quadratic full-attention reference and a head-aware wrapper for volumes
//! whose spatial extent is nontrivial along exactly one axis.

use crate::{softmax_row, Vol};

/// Full scaled dot-product attention over one sequence.
///
/// `q`, `k`, `v` are (ch, len) row-major; scores are formed between every
/// pair of positions, softmaxed per query row, and applied to `v`.
pub fn full_attention(q: &[f64], k: &[f64], v: &[f64], ch: usize, len: usize, scale: f64) -> Vec<f64> {
    let mut out = vec![0.0; ch * len];
    let mut scores = vec![0.0; len];
    for i in 0..len {
        for (j, s) in scores.iter_mut().enumerate() {
            let mut dot = 0.0;
            for c in 0..ch {
                dot += q[c * len + i] * k[c * len + j];
            }
            *s = dot * scale;
        }
        softmax_row(&mut scores);
        for c in 0..ch {
            let mut acc = 0.0;
            for (j, s) in scores.iter().enumerate() {
                acc += s * v[c * len + j];
            }
            out[c * len + i] = acc;
        }
    }
    out
}

/// Multi-head full attention over a volume with exactly one non-singleton
/// spatial axis. Heads are contiguous channel blocks of size c/heads, and
/// the softmax scale is 1/sqrt(c/heads).
pub fn full_attention_volume(q: &[f64], k: &[f64], v: &[f64], d: Vol, heads: usize) -> Vec<f64> {
    let nontrivial = [d.d, d.h, d.w].iter().filter(|&&l| l > 1).count();
    assert!(nontrivial <= 1, "volume must have at most one nontrivial axis");
    let len = d.spatial();
    let ch = d.c / heads;
    let scale = 1.0 / ((d.c / heads) as f64).sqrt();
    let mut out = vec![0.0; d.count()];
    for n in 0..d.n {
        for head in 0..heads {
            // With one nontrivial axis the spatial block is already a
            // contiguous (ch, len) matrix per head.
            let base = d.at(n, head * ch, 0, 0, 0);
            let take = |buf: &[f64]| buf[base..base + ch * len].to_vec();
            let o = full_attention(&take(q), &take(k), &take(v), ch, len, scale);
            out[base..base + ch * len].copy_from_slice(&o);
        }
    }
    out
}
