//! Exact parameter and FLOP accounting by structural walk, mirroring the
//! builder layer by layer without instantiating anything.
//!
//! FLOP conventions (fixed and deliberately simple):
//!   - one multiply-accumulate = 2 FLOPs; convolution and projection costs
//!     are 2 * MACs, bias adds not counted
//!   - softmax = 5 FLOPs per score element, sigmoid and GELU = 4 per
//!     element, layer norm = 8 per element, add/multiply = 1 per element
//!   - pooling = 1 FLOP per input element (2 for the mean+max channel pool)
//!   - dropout is free (identity at evaluation)
//! Orderings between variants are exact under any such convention; absolute
//! totals are convention-dependent and judged loosely.

use crate::blocks::MlpVariant;
use crate::entangle::head_kernel_size;
use crate::error::Result;
use crate::model::{DecoderVariant, ModelConfig, Schedule};

#[derive(Clone, Debug)]
pub struct CostItem {
    pub name: String,
    pub params: u64,
    pub flops: u64,
}

#[derive(Clone, Debug, Default)]
pub struct CostReport {
    pub items: Vec<CostItem>,
}

impl CostReport {
    pub fn total_params(&self) -> u64 {
        self.items.iter().map(|i| i.params).sum()
    }

    pub fn total_flops(&self) -> u64 {
        self.items.iter().map(|i| i.flops).sum()
    }

    fn push(&mut self, name: impl Into<String>, cost: Cost) {
        self.items.push(CostItem { name: name.into(), params: cost.params, flops: cost.flops });
    }
}

#[derive(Clone, Copy, Debug, Default)]
struct Cost {
    params: u64,
    flops: u64,
}

impl std::ops::Add for Cost {
    type Output = Cost;
    fn add(self, rhs: Cost) -> Cost {
        Cost { params: self.params + rhs.params, flops: self.flops + rhs.flops }
    }
}

#[derive(Clone, Copy, Debug, Default)]
struct Space {
    d: u64,
    h: u64,
    w: u64,
}

impl Space {
    fn vox(&self) -> u64 {
        self.d * self.h * self.w
    }

    fn axes_sum(&self) -> u64 {
        self.d + self.h + self.w
    }

    fn half(&self) -> Space {
        Space { d: self.d / 2, h: self.h / 2, w: self.w / 2 }
    }
}

fn conv(cin: u64, cout: u64, k: u64, groups: u64, bias: bool, out_vox: u64) -> Cost {
    let per_out = (cin / groups) * k * k * k;
    Cost {
        params: cout * per_out + if bias { cout } else { 0 },
        flops: 2 * per_out * cout * out_vox,
    }
}

fn conv_transposed(cin: u64, cout: u64, k: u64, in_vox: u64) -> Cost {
    Cost { params: cin * cout * k * k * k, flops: 2 * cin * cout * k * k * k * in_vox }
}

fn layer_norm(c: u64, vox: u64) -> Cost {
    Cost { params: 2 * c, flops: 8 * c * vox }
}

fn elementwise(flops_per_elem: u64, elems: u64) -> Cost {
    Cost { params: 0, flops: flops_per_elem * elems }
}

/// Score-matmul FLOPs of axial attention along all three axes.
pub fn axial_score_flops(n: u64, c: u64, s: (u64, u64, u64)) -> u64 {
    let vox = s.0 * s.1 * s.2;
    2 * n * c * vox * (s.0 + s.1 + s.2)
}

/// Score-matmul FLOPs of full attention over all voxels jointly.
pub fn full_score_flops(n: u64, c: u64, s: (u64, u64, u64)) -> u64 {
    let vox = s.0 * s.1 * s.2;
    2 * n * c * vox * vox
}

/// Counter-derived ratio of full-attention to decomposed-axial score FLOPs.
/// The head count cancels; it is accepted to match the op signature.
pub fn desa_vs_full_ratio(shape: (usize, usize, usize), c: usize, heads: usize) -> f64 {
    let _ = heads;
    let s = (shape.0 as u64, shape.1 as u64, shape.2 as u64);
    full_score_flops(1, c as u64, s) as f64 / axial_score_flops(1, c as u64, s) as f64
}

/// Attention FLOPs of one chained DESA pass (scores + apply + softmax over
/// the three axes), excluding projections.
pub fn axial_attention_flops_at(n: u64, c: u64, heads: u64, shape: (u64, u64, u64)) -> u64 {
    axial_attention_flops(n, c, heads, Space { d: shape.0, h: shape.1, w: shape.2 })
}

fn axial_attention_flops(n: u64, c: u64, heads: u64, s: Space) -> u64 {
    let vox = s.vox();
    let sum = s.axes_sum();
    // scores and apply are each c-sized MACs per (voxel, axis position);
    // softmax touches heads-many score matrices
    let score_apply = 2 * axial_score_flops(n, c, (s.d, s.h, s.w));
    let softmax = 5 * n * heads * vox * sum;
    score_apply + softmax
}

fn mhlk(c: u64, heads: u64, vox: u64) -> Cost {
    let ch = c / heads;
    let mut cost = conv(c, c, 1, 1, true, vox);
    for i in 0..heads {
        let k = head_kernel_size(i as usize) as u64;
        cost = cost + conv(ch, ch, k, ch, true, vox);
    }
    cost
}

fn channel_gate(c: u64, n: u64, vox: u64) -> Cost {
    elementwise(1, c * vox * n)                  // global average pool
        + conv(c, c, 1, 1, true, n)              // linear on the pooled vector
        + elementwise(4, c * n)                  // sigmoid
        + elementwise(1, c * vox * n)            // broadcast multiply
}

fn spatial_gate(c: u64, n: u64, vox: u64) -> Cost {
    elementwise(2, c * vox * n)                  // channel pool (mean + max)
        + conv(2, 1, 7, 1, true, vox * n)        // 7x7x7 collapse
        + elementwise(4, vox * n)                // sigmoid
        + elementwise(1, c * vox * n)            // broadcast multiply
}

fn desa(c: u64, heads: u64, shared_qk: bool, n: u64, s: Space) -> Cost {
    let vox = s.vox() * n;
    // q/v/out projections carry bias; a separate k projection does not
    let q = conv(c, c, 1, 1, true, vox);
    let k = Cost { params: if shared_qk { 0 } else { c * c }, flops: 2 * c * c * vox };
    let v = conv(c, c, 1, 1, true, vox);
    let out = conv(c, c, 1, 1, true, vox);
    q + k + v + out + Cost { params: 0, flops: axial_attention_flops(n, c, heads, s) }
}

fn ag_mlp(c: u64, variant: MlpVariant, vox: u64) -> Cost {
    let hidden = 4 * c;
    let mut cost = conv(c, hidden, 1, 1, true, vox) + elementwise(4, hidden * vox);
    if variant != MlpVariant::Ffn {
        cost = cost + conv(hidden, hidden, 3, hidden, true, vox);
    }
    if variant == MlpVariant::AgMlp {
        cost = cost
            + conv(hidden, hidden, 1, hidden, true, vox) // per-channel gate scores
            + elementwise(4, hidden * vox)               // sigmoid
            + elementwise(1, hidden * vox);              // gate multiply
    }
    cost + conv(hidden, c, 1, 1, true, vox)
}

fn ptlk_mixer(c: u64, heads: u64, n: u64, s: Space) -> Cost {
    mhlk(c, heads, s.vox() * n)
        + channel_gate(c, n, s.vox())
        + spatial_gate(c, n, s.vox())
        + desa(c, heads, true, n, s)
}

fn ctlk_mixer(c: u64, heads: u64, n: u64, s: Space) -> Cost {
    mhlk(c, heads, s.vox() * n)
        + desa(c, heads, false, n, s)
        + spatial_gate(c, n, s.vox())
        + channel_gate(c, n, s.vox())
        + elementwise(1, c * s.vox() * n) // collaborative additive fusion
}

fn transformer_block(ptlk: bool, c: u64, heads: u64, variant: MlpVariant, n: u64, s: Space) -> Cost {
    let vox = s.vox() * n;
    let mixer = if ptlk { ptlk_mixer(c, heads, n, s) } else { ctlk_mixer(c, heads, n, s) };
    layer_norm(c, vox)
        + mixer
        + elementwise(1, c * vox) // residual
        + layer_norm(c, vox)
        + ag_mlp(c, variant, vox)
        + elementwise(1, c * vox) // residual
}

fn mixed_block(c: u64, heads: u64, variant: MlpVariant, n: u64, s: Space) -> Cost {
    transformer_block(false, c, heads, variant, n, s) + transformer_block(true, c, heads, variant, n, s)
}

fn pfi(c: u64, heads: u64, n: u64, s: Space) -> Cost {
    // cross-grouping is a copy, counted free
    mhlk(c, heads, s.vox() * n)
        + channel_gate(c, n, s.vox())
        + spatial_gate(c, n, s.vox())
        + desa(c, heads, true, n, s)
}

fn cfi(c: u64, heads: u64, n: u64, s: Space) -> Cost {
    mhlk(c, heads, s.vox() * n)
        + desa(c, heads, false, n, s)
        + spatial_gate(c, n, s.vox())
        + channel_gate(c, n, s.vox())
        + elementwise(1, c * s.vox() * n)
}

fn ced(c: u64, heads: u64, variant: MlpVariant, n: u64, s: Space) -> Cost {
    pfi(c, heads, n, s)
        + transformer_block(false, c, heads, variant, n, s)
        + cfi(c, heads, n, s)
        + transformer_block(true, c, heads, variant, n, s)
        + elementwise(1, c * s.vox() * n) // path sum
}

fn network_cost(cfg: &ModelConfig, batch: u64, input: Option<(u64, u64, u64)>) -> Result<CostReport> {
    cfg.validate()?;
    let mut report = CostReport::default();
    let heads = cfg.heads as u64;
    let variant = cfg.mlp_variant;
    let sc = cfg.stage_channels.map(|c| c as u64);
    let bneck = cfg.bottleneck_channels() as u64;
    let full = match input {
        Some((d, h, w)) => {
            cfg.schedule_plan(d as usize, h as usize, w as usize)?;
            Space { d, h, w }
        }
        None => Space::default(), // zero voxels: params only
    };

    let mut s = full.half();
    report.push(
        "stem.conv",
        conv(cfg.in_channels as u64, cfg.base_channels as u64, 7, 1, true, s.vox() * batch),
    );
    if cfg.schedule == Schedule::StemDouble || cfg.base_channels as u64 != sc[0] {
        report.push("stem.expand", conv(cfg.base_channels as u64, sc[0], 1, 1, true, s.vox() * batch));
    }

    let mut stage_spaces = [Space::default(); 4];
    for i in 0..4 {
        stage_spaces[i] = s;
        report.push(format!("encoder.stage{i}"), mixed_block(sc[i], heads, variant, batch, s));
        let c_out = if i < 3 { sc[i + 1] } else { bneck };
        s = s.half();
        report.push(format!("encoder.down{i}"), conv(sc[i], c_out, 3, 1, true, s.vox() * batch));
    }

    report.push("bottleneck", mixed_block(bneck, heads, variant, batch, s));

    for i in (0..4).rev() {
        let c_in = if i == 3 { bneck } else { sc[i + 1] };
        let in_vox = s.vox();
        s = stage_spaces[i];
        report.push(format!("decoder.up{i}"), conv_transposed(c_in, sc[i], 2, in_vox * batch));
        match cfg.decoder_variant {
            DecoderVariant::Ced => {
                report.push(format!("decoder.ced{i}"), ced(sc[i], heads, variant, batch, s));
            }
            DecoderVariant::PlainConcat => {
                let recover = conv(2 * sc[i], sc[i], 1, 1, true, s.vox() * batch);
                report.push(
                    format!("decoder.fuse{i}"),
                    recover + mixed_block(sc[i], heads, variant, batch, s),
                );
            }
        }
    }

    let mid = cfg.head_mid_channels() as u64;
    report.push("head.up", conv_transposed(sc[0], mid, 2, s.vox() * batch));
    report.push(
        "head.final",
        conv(mid, cfg.num_classes as u64, 1, 1, true, full.vox() * batch),
    );
    Ok(report)
}

/// Exact parameter tally by structural walk; no tensors are allocated.
pub fn count_params(cfg: &ModelConfig) -> Result<CostReport> {
    network_cost(cfg, 1, None)
}

/// Forward-pass FLOPs for one volume of the given spatial shape.
pub fn count_flops(cfg: &ModelConfig, shape: (usize, usize, usize)) -> Result<CostReport> {
    network_cost(cfg, 1, Some((shape.0 as u64, shape.1 as u64, shape.2 as u64)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ratio_of_cube_is_l_squared_over_three() {
        // d = h = w = L gives L^3 / (3 L) = L^2 / 3; L = 12 -> 48
        assert_eq!(desa_vs_full_ratio((12, 12, 12), 96, 3), 48.0);
    }

    #[test]
    fn degenerate_line_ratio() {
        // (1, 1, L): vox = L, axes sum = L + 2, so the ratio is L / (L + 2)
        let r = desa_vs_full_ratio((1, 1, 10), 6, 3);
        assert_eq!(r, 10.0 / 12.0);
    }

    #[test]
    fn params_independent_of_shape() {
        let cfg = ModelConfig::default();
        let a = count_params(&cfg).unwrap().total_params();
        let b = count_flops(&cfg, (32, 32, 32)).unwrap().total_params();
        let c = count_flops(&cfg, (64, 96, 32)).unwrap().total_params();
        assert_eq!(a, b);
        assert_eq!(a, c);
    }

    #[test]
    fn flops_reject_indivisible_shape() {
        assert!(count_flops(&ModelConfig::default(), (50, 50, 50)).is_err());
    }

    #[test]
    fn conv_flops_scale_linearly_with_one_axis() {
        // doubling one spatial dim doubles every conv item exactly
        let cfg = ModelConfig::default();
        let a = count_flops(&cfg, (32, 32, 32)).unwrap();
        let b = count_flops(&cfg, (64, 32, 32)).unwrap();
        for (x, y) in a.items.iter().zip(&b.items) {
            assert_eq!(x.name, y.name);
            if x.name.contains("down") || x.name.contains("stem.conv") || x.name.contains("up") {
                assert_eq!(2 * x.flops, y.flops, "{}", x.name);
            }
        }
    }

    #[test]
    fn axial_attention_flops_follow_the_axis_formula() {
        // counter output equals 4*C*vox*(d+h+w) + 5*N*vox*(d+h+w) exactly
        for (c, heads, s) in [(96u64, 3u64, (8u64, 8, 8)), (48, 3, (4, 6, 8)), (24, 2, (2, 10, 6))] {
            let vox = s.0 * s.1 * s.2;
            let sum = s.0 + s.1 + s.2;
            let expect = 4 * c * vox * sum + 5 * heads * vox * sum;
            assert_eq!(axial_attention_flops_at(1, c, heads, s), expect);
        }
    }

    #[test]
    fn score_flops_match_closed_forms() {
        let s = (4u64, 6, 8);
        let vox = 4 * 6 * 8;
        assert_eq!(axial_score_flops(1, 96, s), 2 * 96 * vox * 18);
        assert_eq!(full_score_flops(1, 96, s), 2 * 96 * vox * vox);
    }
}
