//! Helpers shared by unit tests.

use crate::params::{ParamId, ParamStore};
use crate::tensor::{Dims, Real, Tensor};

/// Overwrite a square pointwise weight with the identity matrix.
pub(crate) fn write_identity<T: Real>(store: &mut ParamStore<T>, w: ParamId) {
    let dims = store.value(w).dims();
    assert_eq!(dims.n, dims.c);
    let mut t = Tensor::zeros(dims);
    for i in 0..dims.n {
        t.data_mut()[i * dims.c + i] = T::one();
    }
    *store.value_mut(w) = t;
}

/// Deterministic pseudo-random tensor in (-1, 1).
pub(crate) fn rnd(dims: Dims, salt: u64) -> Tensor<f64> {
    let data = (0..dims.count())
        .map(|i| {
            let x = (i as u64 + 1).wrapping_mul(0x9e3779b97f4a7c15 ^ salt);
            ((x >> 33) as f64 / (1u64 << 31) as f64) - 1.0
        })
        .collect();
    Tensor::new(dims, data).unwrap()
}
