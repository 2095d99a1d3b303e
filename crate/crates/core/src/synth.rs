//! Deterministic synthetic 3-D segmentation volumes: one pseudo-random
//! ellipsoid per foreground class on a noisy background, class-dependent
//! intensities, later classes overwriting earlier on overlap.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Dims, Labels, Real, Tensor};

pub const NOISE_SIGMA: f64 = 0.1;
/// Each foreground class must cover at least this fraction of the volume.
pub const MIN_CLASS_FRACTION: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq)]
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

/// One volume plus the ellipsoids that generated it.
pub struct SynthVolume<T> {
    pub image: Tensor<T>,
    pub labels: Labels,
    pub ellipsoids: Vec<Ellipsoid>,
}

/// Paired images and labels for one batch.
pub struct SegBatch<T> {
    pub images: Tensor<T>,
    pub labels: Labels,
}

fn volume_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index.wrapping_add(1));
    rng
}

/// Foreground intensity of class k (background is 0). Classes alternate in
/// sign with growing magnitude, so they differ in the normalized channel
/// direction the network's per-voxel layer norm preserves, not just in the
/// per-voxel scale it divides away.
pub fn class_intensity(class: usize, num_classes: usize) -> f64 {
    debug_assert!(class >= 1 && class < num_classes);
    let _ = num_classes;
    let magnitude = 0.8 * class.div_ceil(2) as f64;
    if class % 2 == 1 {
        -magnitude
    } else {
        magnitude
    }
}

/// Deterministic volume `index` of the stream for `seed`.
pub fn gen_volume<T: Real>(
    seed: u64,
    index: u64,
    shape: (usize, usize, usize),
    num_classes: usize,
) -> Result<SynthVolume<T>> {
    if num_classes < 2 {
        return Err(Error::Config(format!("num_classes must be >= 2, got {num_classes}")));
    }
    let (d, h, w) = shape;
    let voxels = d * h * w;
    let mut rng = volume_rng(seed, index);

    // one ellipsoid per foreground class, resampled until it covers the
    // minimum voxel fraction; later classes overwrite earlier on overlap,
    // but placements that would erase most of an earlier class are
    // resampled so every class keeps a usable remnant
    let mut ellipsoids: Vec<Ellipsoid> = Vec::with_capacity(num_classes - 1);
    let mut labels = Labels::zeros(1, d, h, w);
    for class in 1..num_classes {
        let mut tries = 0;
        let e = loop {
            tries += 1;
            let radii = [
                (0.16 + 0.12 * rng.gen::<f64>()) * d as f64,
                (0.16 + 0.12 * rng.gen::<f64>()) * h as f64,
                (0.16 + 0.12 * rng.gen::<f64>()) * w as f64,
            ];
            let center = [
                radii[0] + rng.gen::<f64>() * (d as f64 - 2.0 * radii[0]),
                radii[1] + rng.gen::<f64>() * (h as f64 - 2.0 * radii[1]),
                radii[2] + rng.gen::<f64>() * (w as f64 - 2.0 * radii[2]),
            ];
            let e = Ellipsoid { center, radii };
            if (count_voxels(&e, shape) as f64) < MIN_CLASS_FRACTION * voxels as f64 {
                continue;
            }
            if tries < 200 && erases_too_much(&e, &ellipsoids, shape) {
                continue;
            }
            break e;
        };
        for zd in 0..d {
            for zh in 0..h {
                for zw in 0..w {
                    if e.contains(zd, zh, zw) {
                        labels.data_mut()[(zd * h + zh) * w + zw] = class as u16;
                    }
                }
            }
        }
        ellipsoids.push(e);
    }

    let mut image = Tensor::zeros(Dims::new(1, 1, d, h, w));
    for (i, v) in image.data_mut().iter_mut().enumerate() {
        let class = labels.data()[i] as usize;
        let base = if class == 0 { 0.0 } else { class_intensity(class, num_classes) };
        let noise = gaussian(&mut rng) * NOISE_SIGMA;
        *v = T::from_f64(base + noise);
    }

    Ok(SynthVolume { image, labels, ellipsoids })
}

/// Batch `n_volumes` consecutive volumes starting at `first_index`.
pub fn gen_synthetic<T: Real>(
    seed: u64,
    first_index: u64,
    n_volumes: usize,
    shape: (usize, usize, usize),
    num_classes: usize,
) -> Result<SegBatch<T>> {
    let (d, h, w) = shape;
    let sp = d * h * w;
    let mut images = Tensor::zeros(Dims::new(n_volumes, 1, d, h, w));
    let mut labels = Labels::zeros(n_volumes, d, h, w);
    for i in 0..n_volumes {
        let v: SynthVolume<T> = gen_volume(seed, first_index + i as u64, shape, num_classes)?;
        images.data_mut()[i * sp..(i + 1) * sp].copy_from_slice(v.image.data());
        labels.data_mut()[i * sp..(i + 1) * sp].copy_from_slice(v.labels.data());
    }
    Ok(SegBatch { images, labels })
}

/// True when placing `e` would overwrite more than 30% of any earlier
/// ellipsoid's voxels.
fn erases_too_much(e: &Ellipsoid, earlier: &[Ellipsoid], shape: (usize, usize, usize)) -> bool {
    let (d, h, w) = shape;
    for prev in earlier {
        let mut total = 0usize;
        let mut eaten = 0usize;
        for zd in 0..d {
            for zh in 0..h {
                for zw in 0..w {
                    if prev.contains(zd, zh, zw) {
                        total += 1;
                        eaten += e.contains(zd, zh, zw) as usize;
                    }
                }
            }
        }
        if total > 0 && eaten * 10 > total * 3 {
            return true;
        }
    }
    false
}

pub fn count_voxels(e: &Ellipsoid, shape: (usize, usize, usize)) -> usize {
    let (d, h, w) = shape;
    let mut count = 0;
    for zd in 0..d {
        for zh in 0..h {
            for zw in 0..w {
                count += e.contains(zd, zh, zw) as usize;
            }
        }
    }
    count
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let u1: f64 = rng.gen();
        let u2: f64 = rng.gen();
        if u1 > f64::MIN_POSITIVE {
            return (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        }
    }
}
