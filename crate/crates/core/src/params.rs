//! Named trainable parameters with deterministic initialization.
//!
//! Parameters are registered in a fixed order; the store draws every value
//! from one seeded ChaCha stream, so identical seed + config means
//! bit-identical initialization regardless of platform or thread count.

use indexmap::IndexMap;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Dims, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Initialization scheme for a parameter tensor.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// Normal(0, std) resampled into [-2 std, 2 std]; the projection /
    /// attention default (std 0.02).
    TruncNormal { std: f64 },
    /// Normal(0, sqrt(2 / fan_in)); the convolution default.
    KaimingFanIn { fan_in: usize },
    Const(f64),
    Zero,
}

struct Entry<T> {
    value: Tensor<T>,
    grad: Tensor<T>,
}

pub struct ParamStore<T> {
    entries: IndexMap<String, Entry<T>>,
    seed: u64,
    rng: ChaCha8Rng,
}

impl<T: Real> ParamStore<T> {
    pub fn new(seed: u64) -> Self {
        ParamStore { entries: IndexMap::new(), seed, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn draw_normal(&mut self) -> f64 {
        // Box-Muller; one value per call keeps the stream order obvious.
        loop {
            let u1: f64 = self.rng.gen();
            let u2: f64 = self.rng.gen();
            if u1 > f64::MIN_POSITIVE {
                return (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
            }
        }
    }

    pub fn register(&mut self, name: impl Into<String>, dims: Dims, init: Init) -> Result<ParamId> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::msg(format!("parameter {name:?} registered twice")));
        }
        let count = dims.count();
        let data: Vec<f64> = match init {
            Init::Zero => vec![0.0; count],
            Init::Const(v) => vec![v; count],
            Init::TruncNormal { std } => (0..count)
                .map(|_| loop {
                    let v = self.draw_normal() * std;
                    if v.abs() <= 2.0 * std {
                        break v;
                    }
                })
                .collect(),
            Init::KaimingFanIn { fan_in } => {
                let std = (2.0 / fan_in.max(1) as f64).sqrt();
                (0..count).map(|_| self.draw_normal() * std).collect()
            }
        };
        let value = Tensor::from_f64(dims, &data)?;
        let grad = Tensor::zeros(dims);
        let id = ParamId(self.entries.len());
        self.entries.insert(name, Entry { value, grad });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        self.entries.get_index(id.0).map(|(n, _)| n.as_str()).unwrap()
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.entries.get_index_of(name).map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].grad
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn accumulate_grad(&mut self, id: ParamId, delta: &Tensor<T>) {
        let g = &mut self.entries[id.0].grad;
        debug_assert_eq!(g.dims(), delta.dims());
        for (a, &b) in g.data_mut().iter_mut().zip(delta.data()) {
            *a += b;
        }
    }

    pub fn zero_grads(&mut self) {
        for e in self.entries.values_mut() {
            for v in e.grad.data_mut() {
                *v = T::zero();
            }
        }
    }

    /// Total number of scalar elements across all parameters.
    pub fn total_elements(&self) -> u64 {
        self.entries.values().map(|e| e.value.dims().count() as u64).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_values() {
        let mk = || {
            let mut s = ParamStore::<f32>::new(9);
            let id = s
                .register("w", Dims::new(4, 4, 1, 1, 1), Init::TruncNormal { std: 0.02 })
                .unwrap();
            s.value(id).data().to_vec()
        };
        assert_eq!(mk(), mk());
    }

    #[test]
    fn duplicate_name_rejected() {
        let mut s = ParamStore::<f32>::new(0);
        let d = Dims::new(1, 1, 1, 1, 1);
        s.register("w", d, Init::Zero).unwrap();
        assert!(s.register("w", d, Init::Zero).is_err());
    }

    #[test]
    fn trunc_normal_stays_in_bounds() {
        let mut s = ParamStore::<f64>::new(3);
        let id = s
            .register("w", Dims::new(1, 64, 2, 2, 2), Init::TruncNormal { std: 0.02 })
            .unwrap();
        assert!(s.value(id).data().iter().all(|v| v.abs() <= 0.04));
    }
}
