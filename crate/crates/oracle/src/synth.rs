//! Voxel-counting oracle for the synthetic ellipsoid volumes.

/// Axis-aligned ellipsoid in voxel coordinates.
#[derive(Clone, Copy, Debug)]
pub struct Ellipsoid {
    pub center: [f64; 3],
    pub radii: [f64; 3],
}

impl Ellipsoid {
    pub fn contains(&self, d: usize, h: usize, w: usize) -> bool {
        let p = [d as f64, h as f64, w as f64];
        let mut s = 0.0;
        for a in 0..3 {
            let t = (p[a] - self.center[a]) / self.radii[a];
            s += t * t;
        }
        s <= 1.0
    }

    pub fn analytic_volume(&self) -> f64 {
        4.0 / 3.0 * std::f64::consts::PI * self.radii[0] * self.radii[1] * self.radii[2]
    }
}

/// Rasterize labels independently: class i+1 paints ellipsoid i, later
/// classes overwrite earlier on overlap. Returns the label grid.
pub fn rasterize(dims: (usize, usize, usize), ellipsoids: &[Ellipsoid]) -> Vec<usize> {
    let (d, h, w) = dims;
    let mut labels = vec![0usize; d * h * w];
    for (i, e) in ellipsoids.iter().enumerate() {
        for zd in 0..d {
            for zh in 0..h {
                for zw in 0..w {
                    if e.contains(zd, zh, zw) {
                        labels[(zd * h + zh) * w + zw] = i + 1;
                    }
                }
            }
        }
    }
    labels
}

/// Count voxels per class in a label grid.
pub fn histogram(labels: &[usize], classes: usize) -> Vec<usize> {
    let mut counts = vec![0usize; classes];
    for &l in labels {
        counts[l] += 1;
    }
    counts
}
