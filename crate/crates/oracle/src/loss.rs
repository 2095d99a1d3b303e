//! Voxel-by-voxel reference for the joint cross-entropy + soft-Dice loss.

use crate::softmax_row;

/// Returns (cross_entropy, dice_term) computed with explicit loops.
///
/// `logits` is (n, classes, d, h, w) row-major, `labels` is (n, d, h, w).
/// CE is the mean voxelwise negative log softmax-probability of the true
/// class. The Dice term is 1 minus the mean over all classes (background
/// included) of (2*Σ p*y + eps) / (Σ p + Σ y + eps), with sums pooled over
/// the whole batch.
pub fn dice_ce(
    logits: &[f64],
    labels: &[usize],
    n: usize,
    classes: usize,
    spatial: usize,
    eps: f64,
) -> (f64, f64) {
    let voxels = n * spatial;
    let mut ce = 0.0;
    let mut inter = vec![0.0; classes];
    let mut psum = vec![0.0; classes];
    let mut ysum = vec![0.0; classes];
    let mut row = vec![0.0; classes];
    for b in 0..n {
        for v in 0..spatial {
            for (k, r) in row.iter_mut().enumerate() {
                *r = logits[(b * classes + k) * spatial + v];
            }
            softmax_row(&mut row);
            let y = labels[b * spatial + v];
            ce -= row[y].max(1e-300).ln();
            for k in 0..classes {
                psum[k] += row[k];
                if k == y {
                    inter[k] += row[k];
                    ysum[k] += 1.0;
                }
            }
        }
    }
    ce /= voxels as f64;
    let mut dice_mean = 0.0;
    for k in 0..classes {
        dice_mean += (2.0 * inter[k] + eps) / (psum[k] + ysum[k] + eps);
    }
    dice_mean /= classes as f64;
    (ce, 1.0 - dice_mean)
}
