//! Joint cross-entropy + soft-Dice segmentation loss and the DSC metric.
//!
//! CE is the mean voxelwise negative log softmax-probability of the true
//! class. The Dice term averages (2*intersection + eps)/(sum_p + sum_y + eps)
//! over every class including background, with sums pooled over the whole
//! batch, and subtracts from 1. The gradient wrt the logits is derived in
//! closed form here and verified against finite differences in the gradient
//! suite.

use crate::error::{Error, Result};
use crate::tensor::{Labels, Real, Tensor};

pub const DICE_SMOOTHING: f64 = 1e-5;

/// Returns (total, ce, dice_term, d_total/d_logits).
pub fn dice_ce_loss<T: Real>(logits: &Tensor<T>, labels: &Labels) -> Result<(T, T, T, Tensor<T>)> {
    let ld = logits.dims();
    let classes = ld.c;
    if labels.n != ld.n || labels.d != ld.d || labels.h != ld.h || labels.w != ld.w {
        return Err(Error::msg(format!(
            "dice_ce_loss: logits {} vs labels ({}, {}, {}, {})",
            ld, labels.n, labels.d, labels.h, labels.w
        )));
    }
    labels.check_range(classes)?;

    let sp = ld.spatial();
    let voxels = ld.n * sp;
    let inv_voxels = 1.0 / voxels as f64;
    let eps = DICE_SMOOTHING;

    // softmax probabilities, same layout as logits
    let mut probs = vec![0.0f64; logits.data().len()];
    let mut ce = 0.0f64;
    let mut inter = vec![0.0f64; classes];
    let mut psum = vec![0.0f64; classes];
    let mut ysum = vec![0.0f64; classes];
    let mut row = vec![0.0f64; classes];
    for n in 0..ld.n {
        for v in 0..sp {
            let mut m = f64::NEG_INFINITY;
            for (c, r) in row.iter_mut().enumerate() {
                *r = logits.data()[(n * classes + c) * sp + v].to_f64();
                m = m.max(*r);
            }
            let mut sum = 0.0;
            for r in row.iter_mut() {
                *r = (*r - m).exp();
                sum += *r;
            }
            let y = labels.data()[n * sp + v] as usize;
            for (c, r) in row.iter().enumerate() {
                let p = r / sum;
                probs[(n * classes + c) * sp + v] = p;
                psum[c] += p;
                if c == y {
                    ce -= p.max(1e-300).ln();
                    inter[c] += p;
                    ysum[c] += 1.0;
                }
            }
        }
    }
    ce *= inv_voxels;

    // Dice term and the per-class linear form of dL_dice/dP:
    // dP_c(v) = a_c * Y_c(v) + b_c
    let kf = classes as f64;
    let mut dice_mean = 0.0;
    let mut a = vec![0.0f64; classes];
    let mut b = vec![0.0f64; classes];
    for c in 0..classes {
        let num = 2.0 * inter[c] + eps;
        let den = psum[c] + ysum[c] + eps;
        dice_mean += num / den;
        a[c] = -2.0 / (kf * den);
        b[c] = num / (kf * den * den);
    }
    let dice_term = 1.0 - dice_mean / kf;

    // chain through the softmax per voxel:
    // dlogit_j = P_j * (dP_j - sum_c dP_c * P_c) for the dice part, plus
    // (P_j - Y_j) / V for the CE part.
    let mut grad = Tensor::zeros(ld);
    for n in 0..ld.n {
        for v in 0..sp {
            let y = labels.data()[n * sp + v] as usize;
            let mut dot = 0.0;
            for c in 0..classes {
                let p = probs[(n * classes + c) * sp + v];
                let dp = a[c] * ((c == y) as usize as f64) + b[c];
                dot += dp * p;
            }
            for c in 0..classes {
                let i = (n * classes + c) * sp + v;
                let p = probs[i];
                let dp = a[c] * ((c == y) as usize as f64) + b[c];
                let dice_g = p * (dp - dot);
                let ce_g = (p - ((c == y) as usize as f64)) * inv_voxels;
                grad.data_mut()[i] = T::from_f64(ce_g + dice_g);
            }
        }
    }

    let total = ce + dice_term;
    if !total.is_finite() {
        return Err(Error::NonFinite { op: "dice_ce_loss" });
    }
    Ok((T::from_f64(total), T::from_f64(ce), T::from_f64(dice_term), grad))
}

/// Convenience: just (ce, dice_term).
pub fn dice_ce_parts<T: Real>(logits: &Tensor<T>, labels: &Labels) -> Result<(T, T)> {
    let (_, ce, dice, _) = dice_ce_loss(logits, labels)?;
    Ok((ce, dice))
}

/// Dice similarity coefficient of one class between two hard label volumes.
/// Defined as 1.0 when both masks are empty.
pub fn dsc(pred: &Labels, truth: &Labels, class_id: usize) -> f64 {
    debug_assert_eq!(pred.count(), truth.count());
    let mut inter = 0usize;
    let mut a = 0usize;
    let mut b = 0usize;
    for (&p, &t) in pred.data().iter().zip(truth.data()) {
        let pa = p as usize == class_id;
        let tb = t as usize == class_id;
        a += pa as usize;
        b += tb as usize;
        inter += (pa && tb) as usize;
    }
    if a + b == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (a + b) as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Dims;
    use approx::assert_abs_diff_eq;

    #[test]
    fn peaked_logits_give_near_zero_loss() {
        let d = Dims::new(1, 2, 1, 2, 2);
        let labels = Labels::new(1, 1, 2, 2, vec![0, 1, 1, 0]).unwrap();
        let mut logits = Tensor::<f64>::zeros(d);
        let sp = 4;
        for v in 0..sp {
            let y = labels.data()[v] as usize;
            logits.data_mut()[y * sp + v] = 20.0;
        }
        let (total, _, _, _) = dice_ce_loss(&logits, &labels).unwrap();
        assert!(total < 0.01, "{total}");
    }

    #[test]
    fn uniform_logits_two_classes_is_ln2() {
        let d = Dims::new(1, 2, 1, 2, 2);
        let labels = Labels::new(1, 1, 2, 2, vec![0, 1, 0, 1]).unwrap();
        let logits = Tensor::<f64>::zeros(d);
        let (ce, _) = dice_ce_parts(&logits, &labels).unwrap();
        assert_abs_diff_eq!(ce, std::f64::consts::LN_2, epsilon = 1e-12);
    }

    #[test]
    fn out_of_range_label_errors() {
        let d = Dims::new(1, 2, 1, 1, 1);
        let labels = Labels::new(1, 1, 1, 1, vec![2]).unwrap();
        let logits = Tensor::<f64>::zeros(d);
        assert!(dice_ce_loss(&logits, &labels).is_err());
    }

    #[test]
    fn dsc_identical_disjoint_partial() {
        let a = Labels::new(1, 1, 1, 8, vec![1, 1, 1, 1, 0, 0, 0, 0]).unwrap();
        let b = Labels::new(1, 1, 1, 8, vec![0, 0, 1, 1, 1, 1, 0, 0]).unwrap();
        assert_eq!(dsc(&a, &a, 1), 1.0);
        let disj = Labels::new(1, 1, 1, 8, vec![0, 0, 0, 0, 1, 1, 1, 1]).unwrap();
        assert_eq!(dsc(&a, &disj, 1), 0.0);
        // |A| = 4, |B| = 4, |A ∩ B| = 2 -> 0.5
        assert_eq!(dsc(&a, &b, 1), 0.5);
    }

    #[test]
    fn dsc_empty_masks_define_one() {
        let a = Labels::zeros(1, 1, 1, 4);
        assert_eq!(dsc(&a, &a, 3), 1.0);
    }

    #[test]
    fn dsc_is_symmetric() {
        let a = Labels::new(1, 1, 1, 6, vec![1, 0, 1, 0, 1, 0]).unwrap();
        let b = Labels::new(1, 1, 1, 6, vec![1, 1, 0, 0, 1, 0]).unwrap();
        assert_eq!(dsc(&a, &b, 1), dsc(&b, &a, 1));
    }
}
