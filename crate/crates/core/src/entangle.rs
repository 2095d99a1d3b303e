//! Multi-head large-kernel feature extraction and the channel/spatial
//! attention gates composed progressively (self-sourced, sequential) or
//! collaboratively (cross-sourced, additive).

use crate::attention::PROJ_STD;
use crate::autodiff::{Tape, Val};
use crate::error::{Error, Result};
use crate::params::{Init, ParamId, ParamStore};
use crate::tensor::{Dims, Real};

/// Kernel size of head `i` (0-based): 3, 5, 7, ...
pub fn head_kernel_size(i: usize) -> usize {
    3 + 2 * i
}

struct HeadConv {
    w: ParamId,
    b: ParamId,
    k: usize,
}

/// Pointwise input projection plus one depthwise conv per head with
/// kernel sizes growing by 2 from 3.
pub struct MhlkParams {
    proj_w: ParamId,
    proj_b: ParamId,
    heads: Vec<HeadConv>,
}

impl MhlkParams {
    pub fn init<T: Real>(store: &mut ParamStore<T>, prefix: &str, c: usize, n: usize) -> Result<Self> {
        if n == 0 || c % n != 0 {
            return Err(Error::Divisibility { op: "mhlk", channels: c, divisor: n, unit: "heads" });
        }
        let ch = c / n;
        let proj_w = store.register(
            format!("{prefix}.proj.weight"),
            Dims::new(c, c, 1, 1, 1),
            Init::TruncNormal { std: PROJ_STD },
        )?;
        let proj_b = store.register(format!("{prefix}.proj.bias"), Dims::new(1, c, 1, 1, 1), Init::Zero)?;
        let mut heads = Vec::with_capacity(n);
        for i in 0..n {
            let k = head_kernel_size(i);
            let w = store.register(
                format!("{prefix}.head{i}.weight"),
                Dims::new(ch, 1, k, k, k),
                Init::KaimingFanIn { fan_in: k * k * k },
            )?;
            let b = store.register(format!("{prefix}.head{i}.bias"), Dims::new(1, ch, 1, 1, 1), Init::Zero)?;
            heads.push(HeadConv { w, b, k });
        }
        Ok(MhlkParams { proj_w, proj_b, heads })
    }

    pub fn head_count(&self) -> usize {
        self.heads.len()
    }

    pub fn kernel_sizes(&self) -> Vec<usize> {
        self.heads.iter().map(|h| h.k).collect()
    }

    pub fn projection(&self) -> (ParamId, ParamId) {
        (self.proj_w, self.proj_b)
    }

    pub fn head_conv(&self, i: usize) -> (ParamId, ParamId, usize) {
        let h = &self.heads[i];
        (h.w, h.b, h.k)
    }
}

/// Project, split channels into contiguous head blocks, run each head's
/// depthwise conv with same-padding, concatenate. Shape preserved.
pub fn mhlk<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    p: &MhlkParams,
    x: Val,
    n: usize,
) -> Result<Val> {
    let d = tape.dims(x);
    if n != p.heads.len() {
        return Err(Error::msg(format!(
            "mhlk: called with {n} heads but parameters hold {}",
            p.heads.len()
        )));
    }
    if d.c % n != 0 {
        return Err(Error::Divisibility { op: "mhlk", channels: d.c, divisor: n, unit: "heads" });
    }
    let ch = d.c / n;
    let w = tape.param(store, p.proj_w)?;
    let b = tape.param(store, p.proj_b)?;
    let projected = tape.conv3d(x, w, Some(b), 1, 0, 1)?;
    let mut parts = Vec::with_capacity(n);
    for (i, head) in p.heads.iter().enumerate() {
        let slice = tape.narrow_channels(projected, i * ch, ch)?;
        let hw = tape.param(store, head.w)?;
        let hb = tape.param(store, head.b)?;
        parts.push(tape.conv3d(slice, hw, Some(hb), 1, (head.k - 1) / 2, ch)?);
    }
    tape.concat_channels(&parts)
}

/// Linear map on the globally pooled source, the gate of the channel-wise
/// attention.
pub struct ChannelAttnParams {
    w: ParamId,
    b: ParamId,
}

impl ChannelAttnParams {
    pub fn init<T: Real>(store: &mut ParamStore<T>, prefix: &str, c: usize) -> Result<Self> {
        let w = store.register(
            format!("{prefix}.weight"),
            Dims::new(c, c, 1, 1, 1),
            Init::TruncNormal { std: PROJ_STD },
        )?;
        let b = store.register(format!("{prefix}.bias"), Dims::new(1, c, 1, 1, 1), Init::Zero)?;
        Ok(ChannelAttnParams { w, b })
    }

    pub fn linear(&self) -> (ParamId, ParamId) {
        (self.w, self.b)
    }
}

/// 7x7x7 conv collapsing the (mean, max) channel-pool pair to one map, the
/// gate of the spatial-wise attention.
pub struct SpatialAttnParams {
    w: ParamId,
    b: ParamId,
}

impl SpatialAttnParams {
    pub const KERNEL: usize = 7;

    pub fn init<T: Real>(store: &mut ParamStore<T>, prefix: &str) -> Result<Self> {
        let k = Self::KERNEL;
        let w = store.register(
            format!("{prefix}.weight"),
            Dims::new(1, 2, k, k, k),
            Init::KaimingFanIn { fan_in: 2 * k * k * k },
        )?;
        let b = store.register(format!("{prefix}.bias"), Dims::new(1, 1, 1, 1, 1), Init::Zero)?;
        Ok(SpatialAttnParams { w, b })
    }

    pub fn conv(&self) -> (ParamId, ParamId) {
        (self.w, self.b)
    }
}

fn check_pair<T: Real>(op: &'static str, tape: &Tape<T>, a: Val, b: Val) -> Result<()> {
    let (da, db) = (tape.dims(a), tape.dims(b));
    if da != db {
        return Err(Error::ShapeMismatch { op, left: da, right: db });
    }
    Ok(())
}

/// target ⊙ sigmoid(linear(avg_pool(source))): per-(batch, channel) gate in
/// (0, 1), broadcast spatially.
pub fn channel_gate<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    p: &ChannelAttnParams,
    source: Val,
    target: Val,
) -> Result<Val> {
    check_pair("channel_gate", tape, source, target)?;
    let pooled = tape.global_avg_pool(source)?;
    let w = tape.param(store, p.w)?;
    let b = tape.param(store, p.b)?;
    let z = tape.conv3d(pooled, w, Some(b), 1, 0, 1)?;
    let gate = tape.sigmoid(z)?;
    tape.broadcast_mul_channel(target, gate)
}

/// target ⊙ sigmoid(conv7(channel_pool(source))): per-voxel gate in (0, 1),
/// broadcast over channels.
pub fn spatial_gate<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    p: &SpatialAttnParams,
    source: Val,
    target: Val,
) -> Result<Val> {
    check_pair("spatial_gate", tape, source, target)?;
    let pooled = tape.channel_pool(source)?;
    let w = tape.param(store, p.w)?;
    let b = tape.param(store, p.b)?;
    let z = tape.conv3d(pooled, w, Some(b), 1, (SpatialAttnParams::KERNEL - 1) / 2, 1)?;
    let gate = tape.sigmoid(z)?;
    tape.broadcast_mul_spatial(target, gate)
}

/// Channel gate then spatial gate, both sourced from their own target.
pub fn progressive_entangle<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    ch: &ChannelAttnParams,
    sp: &SpatialAttnParams,
    x: Val,
) -> Result<Val> {
    let x_ch = channel_gate(tape, store, ch, x, x)?;
    spatial_gate(tape, store, sp, x_ch, x_ch)
}

/// Cross-sourced calibration: the spatial gate of the local features scales
/// the attention features and the channel gate of the attention features
/// scales the local features, fused by addition.
pub fn collaborative_entangle<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    ch: &ChannelAttnParams,
    sp: &SpatialAttnParams,
    x_lk: Val,
    x_sa: Val,
) -> Result<Val> {
    check_pair("collaborative_entangle", tape, x_lk, x_sa)?;
    let sa_gated = spatial_gate(tape, store, sp, x_lk, x_sa)?;
    let lk_gated = channel_gate(tape, store, ch, x_sa, x_lk)?;
    tape.add(lk_gated, sa_gated)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use approx::assert_abs_diff_eq;

    use crate::testutil::{rnd, write_identity};

    #[test]
    fn kernel_sizes_grow_by_two() {
        let mut store = ParamStore::<f32>::new(0);
        let p = MhlkParams::init(&mut store, "m", 6, 3).unwrap();
        assert_eq!(p.kernel_sizes(), vec![3, 5, 7]);
    }

    #[test]
    fn identity_projection_and_delta_kernels_pass_input_through() {
        let c = 6;
        let d = Dims::new(1, c, 3, 3, 3);
        let mut store = ParamStore::<f64>::new(0);
        let p = MhlkParams::init(&mut store, "m", c, 3).unwrap();
        write_identity(&mut store, p.proj_w);
        *store.value_mut(p.proj_b) = Tensor::zeros(Dims::new(1, c, 1, 1, 1));
        for i in 0..3 {
            let (w, b, k) = p.head_conv(i);
            let dims = store.value(w).dims();
            let mut delta = Tensor::zeros(dims);
            let kk = k * k * k;
            for ch in 0..dims.n {
                delta.data_mut()[ch * kk + kk / 2] = 1.0;
            }
            *store.value_mut(w) = delta;
            *store.value_mut(b) = Tensor::zeros(store.value(b).dims());
        }
        let x = rnd(d, 77);
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone()).unwrap();
        let y = mhlk(&mut tape, &store, &p, xv, 3).unwrap();
        for (a, b) in tape.value(y).data().iter().zip(x.data()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn no_cross_head_leakage_after_projection() {
        // with an identity projection, perturbing head 1's channels leaves
        // the conv outputs of heads 0 and 2 unchanged
        let c = 6;
        let d = Dims::new(1, c, 4, 4, 4);
        let mut store = ParamStore::<f64>::new(0);
        let p = MhlkParams::init(&mut store, "m", c, 3).unwrap();
        write_identity(&mut store, p.proj_w);
        let run = |x: &Tensor<f64>| {
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone()).unwrap();
            let y = mhlk(&mut tape, &store, &p, xv, 3).unwrap();
            tape.tensor(y)
        };
        let x = rnd(d, 3);
        let mut x2 = x.clone();
        let sp = d.spatial();
        for v in 0..sp {
            x2.data_mut()[2 * sp + v] += 10.0;
            x2.data_mut()[3 * sp + v] -= 4.0;
        }
        let (y1, y2) = (run(&x), run(&x2));
        for head in [0usize, 2] {
            for c in 2 * head..2 * head + 2 {
                for v in 0..sp {
                    assert_eq!(y1.data()[c * sp + v], y2.data()[c * sp + v]);
                }
            }
        }
        assert_ne!(y1.data()[2 * sp], y2.data()[2 * sp]);
    }

    #[test]
    fn zero_linear_halves_target() {
        let d = Dims::new(1, 4, 2, 2, 2);
        let mut store = ParamStore::<f64>::new(0);
        let p = ChannelAttnParams::init(&mut store, "ch", 4).unwrap();
        *store.value_mut(p.w) = Tensor::zeros(store.value(p.w).dims());
        let src = rnd(d, 5);
        let tgt = rnd(d, 6);
        let mut tape = Tape::new();
        let s = tape.leaf(src).unwrap();
        let t = tape.leaf(tgt.clone()).unwrap();
        let y = channel_gate(&mut tape, &store, &p, s, t).unwrap();
        for (a, b) in tape.value(y).data().iter().zip(tgt.data()) {
            assert_abs_diff_eq!(a, &(b * 0.5), epsilon = 1e-12);
        }
    }

    #[test]
    fn zero_target_stays_zero() {
        let d = Dims::new(1, 4, 2, 2, 2);
        let mut store = ParamStore::<f64>::new(0);
        let p = ChannelAttnParams::init(&mut store, "ch", 4).unwrap();
        let mut tape = Tape::new();
        let s = tape.leaf(rnd(d, 5)).unwrap();
        let t = tape.leaf(Tensor::zeros(d)).unwrap();
        let y = channel_gate(&mut tape, &store, &p, s, t).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_conv7_halves_target() {
        let d = Dims::new(1, 3, 2, 3, 3);
        let mut store = ParamStore::<f64>::new(0);
        let p = SpatialAttnParams::init(&mut store, "sp").unwrap();
        *store.value_mut(p.w) = Tensor::zeros(store.value(p.w).dims());
        let tgt = rnd(d, 9);
        let mut tape = Tape::new();
        let s = tape.leaf(rnd(d, 8)).unwrap();
        let t = tape.leaf(tgt.clone()).unwrap();
        let y = spatial_gate(&mut tape, &store, &p, s, t).unwrap();
        for (a, b) in tape.value(y).data().iter().zip(tgt.data()) {
            assert_abs_diff_eq!(a, &(b * 0.5), epsilon = 1e-12);
        }
    }

    #[test]
    fn gate_magnitude_never_exceeds_target() {
        // spatial-gate values live in (0, 1), so |out| <= |target|
        let d = Dims::new(2, 3, 3, 3, 3);
        let mut store = ParamStore::<f64>::new(4);
        let p = SpatialAttnParams::init(&mut store, "sp").unwrap();
        let tgt = rnd(d, 2);
        let mut tape = Tape::new();
        let s = tape.leaf(rnd(d, 1)).unwrap();
        let t = tape.leaf(tgt.clone()).unwrap();
        let y = spatial_gate(&mut tape, &store, &p, s, t).unwrap();
        for (a, b) in tape.value(y).data().iter().zip(tgt.data()) {
            assert!(a.abs() <= b.abs() + 1e-15);
            assert!(a.abs() > 0.0 || *b == 0.0);
        }
    }

    #[test]
    fn progressive_with_zeroed_gates_quarters_input() {
        let d = Dims::new(1, 4, 2, 2, 2);
        let mut store = ParamStore::<f64>::new(0);
        let ch = ChannelAttnParams::init(&mut store, "ch", 4).unwrap();
        let sp = SpatialAttnParams::init(&mut store, "sp").unwrap();
        *store.value_mut(ch.w) = Tensor::zeros(store.value(ch.w).dims());
        *store.value_mut(sp.w) = Tensor::zeros(store.value(sp.w).dims());
        let x = rnd(d, 13);
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone()).unwrap();
        let y = progressive_entangle(&mut tape, &store, &ch, &sp, xv).unwrap();
        assert_eq!(tape.dims(y), d);
        for (a, b) in tape.value(y).data().iter().zip(x.data()) {
            assert_abs_diff_eq!(a, &(b * 0.25), epsilon = 1e-12);
        }
    }

    #[test]
    fn collaborative_zeros_and_half_gates() {
        let d = Dims::new(1, 4, 2, 2, 2);
        let mut store = ParamStore::<f64>::new(0);
        let ch = ChannelAttnParams::init(&mut store, "ch", 4).unwrap();
        let sp = SpatialAttnParams::init(&mut store, "sp").unwrap();
        // zero inputs stay zero
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::zeros(d)).unwrap();
        let y = collaborative_entangle(&mut tape, &store, &ch, &sp, z, z).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
        // both gates forced to 0.5: out = (lk + sa) / 2
        *store.value_mut(ch.w) = Tensor::zeros(store.value(ch.w).dims());
        *store.value_mut(sp.w) = Tensor::zeros(store.value(sp.w).dims());
        let lk = rnd(d, 31);
        let sa = rnd(d, 32);
        let mut tape = Tape::new();
        let a = tape.leaf(lk.clone()).unwrap();
        let b = tape.leaf(sa.clone()).unwrap();
        let y = collaborative_entangle(&mut tape, &store, &ch, &sp, a, b).unwrap();
        for ((o, x1), x2) in tape.value(y).data().iter().zip(lk.data()).zip(sa.data()) {
            assert_abs_diff_eq!(o, &((x1 + x2) * 0.5), epsilon = 1e-12);
        }
    }
}
