//! Direct 3-D convolution kernels (cross-correlation convention, no kernel
//! flip) and their adjoints. Weights live in the same rank-5 container:
//! conv3d weights are (c_out, c_in/groups, k, k, k), transposed-conv weights
//! are (c_in, c_out, k, k, k). All kernels are cubic.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Dims, Real, Tensor};

pub fn conv_out_len(input: usize, k: usize, stride: usize, padding: usize) -> usize {
    (input + 2 * padding - k) / stride + 1
}

struct ConvGeom {
    k: usize,
    stride: usize,
    padding: usize,
    cig: usize,
    cog: usize,
    out: Dims,
}

fn check_conv<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
    groups: usize,
) -> Result<ConvGeom> {
    let xd = x.dims();
    let wd = w.dims();
    let (c_out, cig, k) = (wd.n, wd.c, wd.d);
    if wd.h != k || wd.w != k {
        return Err(Error::msg(format!("conv3d: kernel must be cubic, got {wd}")));
    }
    if groups == 0 || xd.c % groups != 0 {
        return Err(Error::Divisibility {
            op: "conv3d",
            channels: xd.c,
            divisor: groups,
            unit: "groups",
        });
    }
    if c_out % groups != 0 {
        return Err(Error::Divisibility {
            op: "conv3d",
            channels: c_out,
            divisor: groups,
            unit: "groups (output)",
        });
    }
    if cig != xd.c / groups {
        return Err(Error::ChannelMismatch {
            op: "conv3d",
            what: "weight per-group input",
            got: cig,
            expected: xd.c / groups,
        });
    }
    if let Some(b) = bias {
        if b.dims() != Dims::new(1, c_out, 1, 1, 1) {
            return Err(Error::ChannelMismatch {
                op: "conv3d",
                what: "bias",
                got: b.dims().c,
                expected: c_out,
            });
        }
    }
    if xd.d + 2 * padding < k || xd.h + 2 * padding < k || xd.w + 2 * padding < k {
        return Err(Error::KernelFit { op: "conv3d", k, stride, padding, dims: xd });
    }
    let out = Dims::new(
        xd.n,
        c_out,
        conv_out_len(xd.d, k, stride, padding),
        conv_out_len(xd.h, k, stride, padding),
        conv_out_len(xd.w, k, stride, padding),
    );
    Ok(ConvGeom { k, stride, padding, cig, cog: c_out / groups, out })
}

/// Valid kernel-tap range along one axis for output position z:
/// taps kk with 0 <= z*stride - padding + kk < in_len.
#[inline]
fn tap_range(z: usize, stride: usize, padding: usize, k: usize, in_len: usize) -> (usize, usize, isize) {
    let origin = (z * stride) as isize - padding as isize;
    let lo = (-origin).max(0) as usize;
    let hi = k.min(((in_len as isize) - origin).max(0) as usize);
    (lo, hi, origin)
}

/// Pointwise (1x1x1, stride 1, ungrouped) convolution: a channel matmul
/// with contiguous row arithmetic. Projections dominate this architecture,
/// so the generic tap loop is bypassed for them.
fn pointwise<T: Real>(x: &Tensor<T>, w: &Tensor<T>, bias: Option<&Tensor<T>>) -> Tensor<T> {
    let xd = x.dims();
    let c_out = w.dims().n;
    let sp = xd.spatial();
    let mut out = Tensor::zeros(xd.with_channels(c_out));
    let xdata = x.data();
    let wdata = w.data();
    out.data_mut()
        .par_chunks_mut(sp)
        .enumerate()
        .for_each(|(slab, orow)| {
            let n = slab / c_out;
            let co = slab % c_out;
            let b = bias.map_or(T::zero(), |b| b.data()[co]);
            for v in orow.iter_mut() {
                *v = b;
            }
            for ci in 0..xd.c {
                let wv = wdata[co * xd.c + ci];
                let xrow = &xdata[(n * xd.c + ci) * sp..(n * xd.c + ci + 1) * sp];
                for (o, &xv) in orow.iter_mut().zip(xrow) {
                    *o += wv * xv;
                }
            }
        });
    out
}

fn pointwise_grad<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    has_bias: bool,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Option<Tensor<T>>) {
    let xd = x.dims();
    let c_out = w.dims().n;
    let sp = xd.spatial();
    let xdata = x.data();
    let wdata = w.data();
    let go = grad_out.data();

    let mut dx = Tensor::zeros(xd);
    dx.data_mut()
        .par_chunks_mut(sp)
        .enumerate()
        .for_each(|(slab, drow)| {
            let n = slab / xd.c;
            let ci = slab % xd.c;
            for co in 0..c_out {
                let wv = wdata[co * xd.c + ci];
                let grow = &go[(n * c_out + co) * sp..(n * c_out + co + 1) * sp];
                for (d, &g) in drow.iter_mut().zip(grow) {
                    *d += wv * g;
                }
            }
        });

    let mut dw = Tensor::zeros(w.dims());
    dw.data_mut()
        .par_chunks_mut(xd.c)
        .enumerate()
        .for_each(|(co, wrow)| {
            for n in 0..xd.n {
                let grow = &go[(n * c_out + co) * sp..(n * c_out + co + 1) * sp];
                for (ci, wv) in wrow.iter_mut().enumerate() {
                    let xrow = &xdata[(n * xd.c + ci) * sp..(n * xd.c + ci + 1) * sp];
                    let mut acc = T::zero();
                    for (&g, &xv) in grow.iter().zip(xrow) {
                        acc += g * xv;
                    }
                    *wv += acc;
                }
            }
        });
    let db = has_bias.then(|| {
        let mut db = Tensor::zeros(Dims::new(1, c_out, 1, 1, 1));
        for n in 0..xd.n {
            for co in 0..c_out {
                let mut acc = T::zero();
                for &g in &go[(n * c_out + co) * sp..(n * c_out + co + 1) * sp] {
                    acc += g;
                }
                db.data_mut()[co] += acc;
            }
        }
        db
    });
    (dx, dw, db)
}

fn is_pointwise<T: Real>(w: &Tensor<T>, stride: usize, padding: usize, groups: usize) -> bool {
    w.dims().d == 1 && w.dims().h == 1 && w.dims().w == 1 && stride == 1 && padding == 0 && groups == 1
}


#[inline(always)]
fn xc_row(base: usize, offset: usize) -> usize {
    base + offset
}

/// Contiguous output-position range [lo, hi) along one axis for a fixed
/// kernel tap: positions z with 0 <= z * stride - padding + k_off < in_len.
#[inline]
fn out_range(stride: usize, padding: usize, k_off: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    let off = k_off as isize - padding as isize;
    // z * stride + off >= 0
    let lo = if off >= 0 { 0 } else { ((-off) as usize).div_ceil(stride) };
    // z * stride + off <= in_len - 1
    let max = in_len as isize - 1 - off;
    if max < 0 {
        return (0, 0);
    }
    let hi = (max as usize / stride + 1).min(out_len);
    (lo.min(hi), hi)
}

/// Grouped direct 3-D convolution.
pub fn conv3d<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
    groups: usize,
) -> Result<Tensor<T>> {
    let g = check_conv(x, w, bias, stride, padding, groups)?;
    if is_pointwise(w, stride, padding, groups) {
        return Ok(pointwise(x, w, bias));
    }
    let xd = x.dims();
    let od = g.out;
    let (k, cig) = (g.k, g.cig);
    let in_sp = xd.spatial();
    let out_sp = od.spatial();
    let kk = k * k * k;
    let xdata = x.data();
    let wdata = w.data();

    let mut out = Tensor::zeros(od);
    // One contiguous (d,h,w) slab per (batch, out-channel) pair; slabs are
    // disjoint so the parallel loop is deterministic.
    out.data_mut()
        .par_chunks_mut(out_sp)
        .enumerate()
        .for_each(|(slab, oslab)| {
            let n = slab / od.c;
            let co = slab % od.c;
            let grp = co / g.cog;
            let b = bias.map_or(T::zero(), |b| b.data()[co]);
            let wbase = co * cig * kk;
            for v in oslab.iter_mut() {
                *v = b;
            }
            // stream whole output rows per kernel tap: for each kw the set
            // of valid output positions is one contiguous range
            for zd in 0..od.d {
                let (kd_lo, kd_hi, id0) = tap_range(zd, g.stride, g.padding, k, xd.d);
                for zh in 0..od.h {
                    let (kh_lo, kh_hi, ih0) = tap_range(zh, g.stride, g.padding, k, xd.h);
                    let orow = (zd * od.h + zh) * od.w;
                    for ci in 0..cig {
                        let xc = (n * xd.c + grp * cig + ci) * in_sp;
                        let wc = wbase + ci * kk;
                        for kd in kd_lo..kd_hi {
                            let id = (id0 + kd as isize) as usize;
                            for kh in kh_lo..kh_hi {
                                let ih = (ih0 + kh as isize) as usize;
                                let xrow = xc + (id * xd.h + ih) * xd.w;
                                let wrow = wc + (kd * k + kh) * k;
                                for kw in 0..k {
                                    let (zw_lo, zw_hi) =
                                        out_range(g.stride, g.padding, kw, xd.w, od.w);
                                    if zw_lo >= zw_hi {
                                        continue;
                                    }
                                    let wv = wdata[wrow + kw];
                                    let off = kw as isize - g.padding as isize;
                                    if g.stride == 1 {
                                        let xs = (zw_lo as isize + off) as usize;
                                        let xseg = &xdata[xc_row(xrow, xs)..xc_row(xrow, xs) + (zw_hi - zw_lo)];
                                        for (o, &xv) in
                                            oslab[orow + zw_lo..orow + zw_hi].iter_mut().zip(xseg)
                                        {
                                            *o += wv * xv;
                                        }
                                    } else {
                                        for zw in zw_lo..zw_hi {
                                            let iw = (zw * g.stride) as isize + off;
                                            oslab[orow + zw] += wv * xdata[xrow + iw as usize];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
    Ok(out)
}

/// Kernel taps hitting input position `i` along one axis: pairs (z, kk)
/// with z * stride - padding + kk == i and z a valid output position.
fn input_taps(i: usize, stride: usize, padding: usize, k: usize, out_len: usize) -> Vec<(usize, usize)> {
    (0..k)
        .filter_map(|kx| {
            let z = i as isize + padding as isize - kx as isize;
            if z >= 0 && z % stride as isize == 0 {
                let z = (z / stride as isize) as usize;
                (z < out_len).then_some((z, kx))
            } else {
                None
            }
        })
        .collect()
}

/// Gradients of conv3d wrt (input, weight, bias).
pub fn conv3d_grad<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    has_bias: bool,
    stride: usize,
    padding: usize,
    groups: usize,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Option<Tensor<T>>)> {
    let g = check_conv(x, w, None, stride, padding, groups)?;
    if is_pointwise(w, stride, padding, groups) {
        let (dx, dw, db) = pointwise_grad(x, w, has_bias, grad_out);
        return Ok((dx, dw, db));
    }
    let xd = x.dims();
    let od = g.out;
    debug_assert_eq!(grad_out.dims(), od);
    let (k, cig, cog) = (g.k, g.cig, g.cog);
    let kk = k * k * k;
    let in_sp = xd.spatial();
    let out_sp = od.spatial();
    let go = grad_out.data();
    let wdata = w.data();
    let xdata = x.data();

    // dx in gather form: every input voxel sums the output taps that read
    // it, so (batch, in-channel) slabs are independent
    let taps_d: Vec<Vec<(usize, usize)>> =
        (0..xd.d).map(|i| input_taps(i, stride, padding, k, od.d)).collect();
    let taps_h: Vec<Vec<(usize, usize)>> =
        (0..xd.h).map(|i| input_taps(i, stride, padding, k, od.h)).collect();
    let mut dx = Tensor::zeros(xd);
    dx.data_mut()
        .par_chunks_mut(in_sp)
        .enumerate()
        .for_each(|(slab, dxrow)| {
            let n = slab / xd.c;
            let ci = slab % xd.c;
            let grp = ci / cig;
            let ci_local = ci % cig;
            for id in 0..xd.d {
                for ih in 0..xd.h {
                    let drow_base = (id * xd.h + ih) * xd.w;
                    for co in grp * cog..(grp + 1) * cog {
                        let obase = (n * od.c + co) * out_sp;
                        let wbase = (co * cig + ci_local) * kk;
                        for &(zd, kd) in &taps_d[id] {
                            for &(zh, kh) in &taps_h[ih] {
                                let orow = obase + (zd * od.h + zh) * od.w;
                                let wrow = wbase + (kd * k + kh) * k;
                                for kw in 0..k {
                                    let (zw_lo, zw_hi) =
                                        out_range(stride, padding, kw, xd.w, od.w);
                                    if zw_lo >= zw_hi {
                                        continue;
                                    }
                                    let wv = wdata[wrow + kw];
                                    let off = kw as isize - padding as isize;
                                    if stride == 1 {
                                        let xs = (zw_lo as isize + off) as usize;
                                        for (d, &g) in dxrow
                                            [drow_base + xs..drow_base + xs + (zw_hi - zw_lo)]
                                            .iter_mut()
                                            .zip(&go[orow + zw_lo..orow + zw_hi])
                                        {
                                            *d += wv * g;
                                        }
                                    } else {
                                        for zw in zw_lo..zw_hi {
                                            let iw = (zw * stride) as isize + off;
                                            dxrow[drow_base + iw as usize] += wv * go[orow + zw];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });

    // dw per out-channel slab
    let mut dw = Tensor::zeros(w.dims());
    dw.data_mut()
        .par_chunks_mut(cig * kk)
        .enumerate()
        .for_each(|(co, dwslab)| {
            let grp = co / cog;
            for n in 0..xd.n {
                let obase = (n * od.c + co) * out_sp;
                for zd in 0..od.d {
                    let (kd_lo, kd_hi, id0) = tap_range(zd, stride, padding, k, xd.d);
                    for zh in 0..od.h {
                        let (kh_lo, kh_hi, ih0) = tap_range(zh, stride, padding, k, xd.h);
                        let orow = obase + (zd * od.h + zh) * od.w;
                        for ci in 0..cig {
                            let xc = (n * xd.c + grp * cig + ci) * in_sp;
                            let wc = ci * kk;
                            for kd in kd_lo..kd_hi {
                                let id = (id0 + kd as isize) as usize;
                                for kh in kh_lo..kh_hi {
                                    let ih = (ih0 + kh as isize) as usize;
                                    let xrow = xc + (id * xd.h + ih) * xd.w;
                                    let wrow = wc + (kd * k + kh) * k;
                                    for kw in 0..k {
                                        let (zw_lo, zw_hi) =
                                            out_range(stride, padding, kw, xd.w, od.w);
                                        if zw_lo >= zw_hi {
                                            continue;
                                        }
                                        let off = kw as isize - padding as isize;
                                        let mut acc = T::zero();
                                        if stride == 1 {
                                            let xs = (zw_lo as isize + off) as usize;
                                            for (&g, &xv) in go[orow + zw_lo..orow + zw_hi]
                                                .iter()
                                                .zip(&xdata[xrow + xs..xrow + xs + (zw_hi - zw_lo)])
                                            {
                                                acc += g * xv;
                                            }
                                        } else {
                                            for zw in zw_lo..zw_hi {
                                                let iw = (zw * stride) as isize + off;
                                                acc += go[orow + zw] * xdata[xrow + iw as usize];
                                            }
                                        }
                                        dwslab[wrow + kw] += acc;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });

    let db = has_bias.then(|| {
        let mut db = Tensor::zeros(Dims::new(1, od.c, 1, 1, 1));
        for n in 0..xd.n {
            for co in 0..od.c {
                let mut acc = T::zero();
                for &g in &go[(n * od.c + co) * out_sp..(n * od.c + co + 1) * out_sp] {
                    acc += g;
                }
                db.data_mut()[co] += acc;
            }
        }
        db
    });
    Ok((dx, dw, db))
}

fn check_conv_t<T: Real>(x: &Tensor<T>, w: &Tensor<T>, stride: usize) -> Result<(usize, usize, Dims)> {
    let xd = x.dims();
    let wd = w.dims();
    let (c_in, c_out, k) = (wd.n, wd.c, wd.d);
    if wd.h != k || wd.w != k {
        return Err(Error::msg(format!("conv3d_transposed: kernel must be cubic, got {wd}")));
    }
    if c_in != xd.c {
        return Err(Error::ChannelMismatch {
            op: "conv3d_transposed",
            what: "weight input",
            got: c_in,
            expected: xd.c,
        });
    }
    if stride == 0 || stride > k {
        return Err(Error::msg(format!(
            "conv3d_transposed: stride {stride} must be in 1..={k}"
        )));
    }
    let out = Dims::new(
        xd.n,
        c_out,
        (xd.d - 1) * stride + k,
        (xd.h - 1) * stride + k,
        (xd.w - 1) * stride + k,
    );
    Ok((c_out, k, out))
}

/// Transposed convolution (adjoint of the corresponding strided conv3d),
/// no padding, no bias. Output spatial dims are (in - 1) * stride + k.
pub fn conv3d_transposed<T: Real>(x: &Tensor<T>, w: &Tensor<T>, stride: usize) -> Result<Tensor<T>> {
    let (c_out, k, od) = check_conv_t(x, w, stride)?;
    let xd = x.dims();
    let kk = k * k * k;
    let in_sp = xd.spatial();
    let out_sp = od.spatial();
    let xdata = x.data();
    let wdata = w.data();

    // Gather form: for output position z, contributing taps satisfy
    // i * stride + kk == z with 0 <= i < in_len.
    let taps = |z: usize, in_len: usize| -> Vec<(usize, usize)> {
        (0..k)
            .filter_map(|kx| {
                let r = z as isize - kx as isize;
                if r >= 0 && r % stride as isize == 0 {
                    let i = (r / stride as isize) as usize;
                    (i < in_len).then_some((i, kx))
                } else {
                    None
                }
            })
            .collect()
    };
    let taps_d: Vec<Vec<(usize, usize)>> = (0..od.d).map(|z| taps(z, xd.d)).collect();
    let taps_h: Vec<Vec<(usize, usize)>> = (0..od.h).map(|z| taps(z, xd.h)).collect();
    let taps_w: Vec<Vec<(usize, usize)>> = (0..od.w).map(|z| taps(z, xd.w)).collect();

    let mut out = Tensor::zeros(od);
    out.data_mut()
        .par_chunks_mut(out_sp)
        .enumerate()
        .for_each(|(slab, oslab)| {
            let n = slab / od.c;
            let co = slab % od.c;
            for zd in 0..od.d {
                for zh in 0..od.h {
                    for zw in 0..od.w {
                        let mut acc = T::zero();
                        for &(id, kd) in &taps_d[zd] {
                            for &(ih, kh) in &taps_h[zh] {
                                for &(iw, kw) in &taps_w[zw] {
                                    for ci in 0..xd.c {
                                        let xi = (n * xd.c + ci) * in_sp
                                            + (id * xd.h + ih) * xd.w
                                            + iw;
                                        let wi = (ci * c_out + co) * kk + (kd * k + kh) * k + kw;
                                        acc += xdata[xi] * wdata[wi];
                                    }
                                }
                            }
                        }
                        oslab[(zd * od.h + zh) * od.w + zw] = acc;
                    }
                }
            }
        });
    Ok(out)
}

/// Gradients of conv3d_transposed wrt (input, weight).
pub fn conv3d_transposed_grad<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (c_out, k, od) = check_conv_t(x, w, stride)?;
    let xd = x.dims();
    debug_assert_eq!(grad_out.dims(), od);
    let kk = k * k * k;
    let in_sp = xd.spatial();
    let out_sp = od.spatial();
    let go = grad_out.data();

    let mut dx = Tensor::zeros(xd);
    let mut dw = Tensor::zeros(w.dims());
    for n in 0..xd.n {
        for ci in 0..xd.c {
            for id in 0..xd.d {
                for ih in 0..xd.h {
                    for iw in 0..xd.w {
                        let xi = (n * xd.c + ci) * in_sp + (id * xd.h + ih) * xd.w + iw;
                        let xv = x.data()[xi];
                        let mut acc = T::zero();
                        for co in 0..c_out {
                            let obase = (n * c_out + co) * out_sp;
                            let wbase = (ci * c_out + co) * kk;
                            for kd in 0..k {
                                let zd = id * stride + kd;
                                for kh in 0..k {
                                    let zh = ih * stride + kh;
                                    let orow = obase + (zd * od.h + zh) * od.w + iw * stride;
                                    let wrow = wbase + (kd * k + kh) * k;
                                    for kw in 0..k {
                                        let gv = go[orow + kw];
                                        acc += gv * w.data()[wrow + kw];
                                        dw.data_mut()[wrow + kw] += gv * xv;
                                    }
                                }
                            }
                        }
                        dx.data_mut()[xi] = acc;
                    }
                }
            }
        }
    }
    Ok((dx, dw))
}
