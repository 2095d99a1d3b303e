use crate::error::{Error, Result};
use crate::tensor::{Dims, Real, Tensor};

fn check_same<T: Real>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::ShapeMismatch { op, left: a.dims(), right: b.dims() });
    }
    Ok(())
}

pub fn add<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    check_same("add", a, b)?;
    let mut out = a.clone();
    for (o, &x) in out.data_mut().iter_mut().zip(b.data()) {
        *o += x;
    }
    Ok(out)
}

pub fn mul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    check_same("mul", a, b)?;
    let mut out = a.clone();
    for (o, &x) in out.data_mut().iter_mut().zip(b.data()) {
        *o = *o * x;
    }
    Ok(out)
}

pub fn scale<T: Real>(a: &Tensor<T>, s: T) -> Tensor<T> {
    a.map(|v| v * s)
}

pub fn sum_all<T: Real>(a: &Tensor<T>) -> Tensor<T> {
    let mut acc = T::zero();
    for &v in a.data() {
        acc += v;
    }
    Tensor::scalar(acc)
}

/// target (n,c,d,h,w) ⊙ gate (n,c,1,1,1), gate broadcast over space.
pub fn broadcast_mul_channel<T: Real>(target: &Tensor<T>, gate: &Tensor<T>) -> Result<Tensor<T>> {
    let td = target.dims();
    let gd = gate.dims();
    if gd != Dims::new(td.n, td.c, 1, 1, 1) {
        return Err(Error::ShapeMismatch { op: "broadcast_mul_channel", left: td, right: gd });
    }
    let sp = td.spatial();
    let mut out = target.clone();
    let o = out.data_mut();
    for n in 0..td.n {
        for c in 0..td.c {
            let g = gate.data()[n * td.c + c];
            let base = (n * td.c + c) * sp;
            for v in &mut o[base..base + sp] {
                *v = *v * g;
            }
        }
    }
    Ok(out)
}

/// Returns (d_target, d_gate).
pub fn broadcast_mul_channel_grad<T: Real>(
    target: &Tensor<T>,
    gate: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let td = target.dims();
    let sp = td.spatial();
    let mut dt = Tensor::zeros(td);
    let mut dg = Tensor::zeros(gate.dims());
    for n in 0..td.n {
        for c in 0..td.c {
            let g = gate.data()[n * td.c + c];
            let base = (n * td.c + c) * sp;
            let mut acc = T::zero();
            for i in base..base + sp {
                dt.data_mut()[i] = grad_out.data()[i] * g;
                acc += grad_out.data()[i] * target.data()[i];
            }
            dg.data_mut()[n * td.c + c] = acc;
        }
    }
    (dt, dg)
}

/// target (n,c,d,h,w) ⊙ gate (n,1,d,h,w), gate broadcast over channels.
pub fn broadcast_mul_spatial<T: Real>(target: &Tensor<T>, gate: &Tensor<T>) -> Result<Tensor<T>> {
    let td = target.dims();
    let gd = gate.dims();
    if gd != td.with_channels(1) {
        return Err(Error::ShapeMismatch { op: "broadcast_mul_spatial", left: td, right: gd });
    }
    let sp = td.spatial();
    let mut out = target.clone();
    let o = out.data_mut();
    for n in 0..td.n {
        let gbase = n * sp;
        for c in 0..td.c {
            let base = (n * td.c + c) * sp;
            for i in 0..sp {
                o[base + i] = o[base + i] * gate.data()[gbase + i];
            }
        }
    }
    Ok(out)
}

pub fn broadcast_mul_spatial_grad<T: Real>(
    target: &Tensor<T>,
    gate: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let td = target.dims();
    let sp = td.spatial();
    let mut dt = Tensor::zeros(td);
    let mut dg = Tensor::zeros(gate.dims());
    for n in 0..td.n {
        let gbase = n * sp;
        for c in 0..td.c {
            let base = (n * td.c + c) * sp;
            for i in 0..sp {
                dt.data_mut()[base + i] = grad_out.data()[base + i] * gate.data()[gbase + i];
                dg.data_mut()[gbase + i] += grad_out.data()[base + i] * target.data()[base + i];
            }
        }
    }
    (dt, dg)
}

/// Copy channels [start, start+len) into a new tensor.
pub fn narrow_channels<T: Real>(x: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    let d = x.dims();
    if start + len > d.c {
        return Err(Error::msg(format!(
            "narrow_channels: [{start}, {}) out of {} channels",
            start + len,
            d.c
        )));
    }
    let sp = d.spatial();
    let od = d.with_channels(len);
    let mut out = Tensor::zeros(od);
    for n in 0..d.n {
        let src = (n * d.c + start) * sp;
        let dst = n * len * sp;
        out.data_mut()[dst..dst + len * sp].copy_from_slice(&x.data()[src..src + len * sp]);
    }
    Ok(out)
}

/// Concatenate along the channel axis.
pub fn concat_channels<T: Real>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts.first().ok_or_else(|| Error::msg("concat_channels: empty input"))?;
    let d0 = first.dims();
    let mut c_total = 0;
    for p in parts {
        let d = p.dims();
        if (d.n, d.d, d.h, d.w) != (d0.n, d0.d, d0.h, d0.w) {
            return Err(Error::ShapeMismatch { op: "concat_channels", left: d0, right: d });
        }
        c_total += d.c;
    }
    let od = d0.with_channels(c_total);
    let sp = od.spatial();
    let mut out = Tensor::zeros(od);
    for n in 0..od.n {
        let mut coff = 0;
        for p in parts {
            let pc = p.dims().c;
            let src = n * pc * sp;
            let dst = (n * c_total + coff) * sp;
            out.data_mut()[dst..dst + pc * sp].copy_from_slice(&p.data()[src..src + pc * sp]);
            coff += pc;
        }
    }
    Ok(out)
}

/// Scatter `grad` (over a channel slice) back into a full-width zero tensor.
pub fn narrow_channels_grad<T: Real>(grad: &Tensor<T>, full: Dims, start: usize) -> Tensor<T> {
    let gd = grad.dims();
    let sp = full.spatial();
    let mut out = Tensor::zeros(full);
    for n in 0..full.n {
        let dst = (n * full.c + start) * sp;
        let src = n * gd.c * sp;
        out.data_mut()[dst..dst + gd.c * sp].copy_from_slice(&grad.data()[src..src + gd.c * sp]);
    }
    out
}
