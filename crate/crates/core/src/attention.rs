//! Decomposed efficient self-attention: pointwise Q/K/V projections, then
//! multi-head axial attention applied along H, W, D in sequence, output
//! projection, dropout.
//!
//! In the chained default each axis consumes the previous axis's output as
//! its value while Q and K stay fixed; the independent mode keeps the
//! original value for every axis and returns the D-axis result alone.

use crate::autodiff::{Tape, Val};
use crate::error::{Error, Result};
use crate::ops::Axis;
use crate::params::{Init, ParamId, ParamStore};
use crate::tensor::{Dims, Real};

pub const PROJ_STD: f64 = 0.02;

/// Whether the three axial attentions feed each other or each consume the
/// original value.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum AxisMode {
    #[default]
    Chained,
    Independent,
}

/// Q/K/V and output projections (pointwise C -> C). When `shared_qk` is set
/// a single matrix projects both Q and K, used where the query and key share
/// one source. A separate key projection carries no bias: a per-channel key
/// offset shifts every score in a softmax row equally, so it is exactly
/// function- and gradient-dead.
pub struct DesaParams {
    wq: ParamId,
    bq: ParamId,
    wk: Option<ParamId>,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    pub dropout: f64,
    pub mode: AxisMode,
}

impl DesaParams {
    pub fn init<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        c: usize,
        shared_qk: bool,
        dropout: f64,
    ) -> Result<Self> {
        let mat = Dims::new(c, c, 1, 1, 1);
        let vec = Dims::new(1, c, 1, 1, 1);
        let tn = Init::TruncNormal { std: PROJ_STD };
        let wq = store.register(format!("{prefix}.q.weight"), mat, tn)?;
        let bq = store.register(format!("{prefix}.q.bias"), vec, Init::Zero)?;
        let wk =
            if shared_qk { None } else { Some(store.register(format!("{prefix}.k.weight"), mat, tn)?) };
        let wv = store.register(format!("{prefix}.v.weight"), mat, tn)?;
        let bv = store.register(format!("{prefix}.v.bias"), vec, Init::Zero)?;
        let wo = store.register(format!("{prefix}.out.weight"), mat, tn)?;
        let bo = store.register(format!("{prefix}.out.bias"), vec, Init::Zero)?;
        Ok(DesaParams { wq, bq, wk, wv, bv, wo, bo, dropout, mode: AxisMode::Chained })
    }

    pub fn shares_qk(&self) -> bool {
        self.wk.is_none()
    }

    pub fn query_projection(&self) -> (ParamId, ParamId) {
        (self.wq, self.bq)
    }

    /// (weight, bias): the bias is present only when Q and K share the
    /// projection.
    pub fn key_projection(&self) -> (ParamId, Option<ParamId>) {
        match self.wk {
            Some(wk) => (wk, None),
            None => (self.wq, Some(self.bq)),
        }
    }

    pub fn value_projection(&self) -> (ParamId, ParamId) {
        (self.wv, self.bv)
    }

    pub fn out_projection(&self) -> (ParamId, ParamId) {
        (self.wo, self.bo)
    }
}

/// Sequential H -> W -> D axis order of the chained decomposition.
pub const AXIS_ORDER: [Axis; 3] = [Axis::H, Axis::W, Axis::D];

/// Full DESA: project sources, attend axially per head, merge, project, drop.
/// All three sources must share one (n, C, d, h, w) shape with C divisible
/// by `heads`; the output preserves it.
pub fn desa<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    p: &DesaParams,
    q_src: Val,
    k_src: Val,
    v_src: Val,
    heads: usize,
) -> Result<Val> {
    let d = tape.dims(q_src);
    for src in [k_src, v_src] {
        if tape.dims(src) != d {
            return Err(Error::ShapeMismatch { op: "desa", left: d, right: tape.dims(src) });
        }
    }
    if heads == 0 || d.c % heads != 0 {
        return Err(Error::Divisibility { op: "desa", channels: d.c, divisor: heads, unit: "heads" });
    }

    let project = |tape: &mut Tape<T>, src: Val, w: ParamId, b: Option<ParamId>| -> Result<Val> {
        let w = tape.param(store, w)?;
        let b = b.map(|b| tape.param(store, b)).transpose()?;
        tape.conv3d(src, w, b, 1, 0, 1)
    };
    let q = project(tape, q_src, p.wq, Some(p.bq))?;
    let (wk, bk) = p.key_projection();
    let k = project(tape, k_src, wk, bk)?;
    let v = project(tape, v_src, p.wv, Some(p.bv))?;

    let attended = match p.mode {
        AxisMode::Chained => {
            let mut cur = v;
            for axis in AXIS_ORDER {
                cur = tape.axial_attention(q, k, cur, axis, heads)?;
            }
            cur
        }
        AxisMode::Independent => tape.axial_attention(q, k, v, Axis::D, heads)?,
    };

    let out = project(tape, attended, p.wo, Some(p.bo))?;
    tape.dropout(out, p.dropout)
}
