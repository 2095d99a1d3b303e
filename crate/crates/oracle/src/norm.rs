//! Per-voxel channel layer-norm reference.

use crate::Vol;

pub fn layer_norm(x: &[f64], d: Vol, gamma: &[f64], beta: &[f64], eps: f64) -> Vec<f64> {
    let mut y = vec![0.0; d.count()];
    for n in 0..d.n {
        for dd in 0..d.d {
            for hh in 0..d.h {
                for ww in 0..d.w {
                    let mut mean = 0.0;
                    for c in 0..d.c {
                        mean += x[d.at(n, c, dd, hh, ww)];
                    }
                    mean /= d.c as f64;
                    let mut var = 0.0;
                    for c in 0..d.c {
                        let t = x[d.at(n, c, dd, hh, ww)] - mean;
                        var += t * t;
                    }
                    var /= d.c as f64;
                    let rstd = 1.0 / (var + eps).sqrt();
                    for c in 0..d.c {
                        let i = d.at(n, c, dd, hh, ww);
                        y[i] = (x[i] - mean) * rstd * gamma[c] + beta[c];
                    }
                }
            }
        }
    }
    y
}
