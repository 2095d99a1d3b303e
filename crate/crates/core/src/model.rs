//! Network assembly: stem, four encoder stages with downsampling, the
//! bottleneck, the cross-entanglement decoder (or the plain concat variant),
//! and the prediction head.
//!
//! Two channel schedules exist. In the `narrow` default the stem projects
//! to `base_channels` and the stages run at `stage_channels` directly, with
//! the bottleneck at twice the deepest stage width. `stem_double` adds a
//! pointwise expansion after the stem and runs the bottleneck at the deepest
//! stage width itself. Either way every stage sits at 1/2^i resolution with
//! a strided conv after each stage, so inputs must divide by 32.

use crate::attention::{desa, DesaParams};
use crate::autodiff::{Tape, Val};
use crate::blocks::{transformer_block, BlockParams, InnerKind, MixedParams, MlpVariant};
use crate::entangle::{
    collaborative_entangle, mhlk, progressive_entangle, ChannelAttnParams, MhlkParams,
    SpatialAttnParams,
};
use crate::error::{Error, Result};
use crate::params::{Init, ParamId, ParamStore};
use crate::tensor::{Dims, Real, Tensor};

pub const DOWNSAMPLE_FACTOR: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Schedule {
    #[default]
    Narrow,
    StemDouble,
}

impl Schedule {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "narrow" => Some(Schedule::Narrow),
            "stem_double" => Some(Schedule::StemDouble),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Schedule::Narrow => "narrow",
            Schedule::StemDouble => "stem_double",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum DecoderVariant {
    #[default]
    Ced,
    PlainConcat,
}

impl DecoderVariant {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "ced" => Some(DecoderVariant::Ced),
            "plain_concat" => Some(DecoderVariant::PlainConcat),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            DecoderVariant::Ced => "ced",
            DecoderVariant::PlainConcat => "plain_concat",
        }
    }
}

/// Every architecture hyperparameter.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub base_channels: usize,
    pub stage_channels: [usize; 4],
    pub heads: usize,
    pub mlp_variant: MlpVariant,
    pub decoder_variant: DecoderVariant,
    pub schedule: Schedule,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 1,
            num_classes: 16,
            base_channels: 48,
            stage_channels: [48, 96, 192, 384],
            heads: 3,
            mlp_variant: MlpVariant::AgMlp,
            decoder_variant: DecoderVariant::Ced,
            schedule: Schedule::Narrow,
            dropout: 0.0,
            seed: 42,
        }
    }
}

impl ModelConfig {
    /// The alternative reading: stages at [96, 192, 384, 768] behind a
    /// stem that doubles 48 -> 96; bottleneck at 768.
    pub fn stem_double() -> Self {
        ModelConfig {
            stage_channels: [96, 192, 384, 768],
            schedule: Schedule::StemDouble,
            ..Self::default()
        }
    }

    pub fn bottleneck_channels(&self) -> usize {
        match self.schedule {
            Schedule::Narrow => 2 * self.stage_channels[3],
            Schedule::StemDouble => self.stage_channels[3],
        }
    }

    pub fn head_mid_channels(&self) -> usize {
        self.stage_channels[0] / 2
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!("num_classes must be >= 2, got {}", self.num_classes)));
        }
        if self.in_channels == 0 || self.base_channels == 0 {
            return Err(Error::Config("in_channels and base_channels must be >= 1".into()));
        }
        let sc = self.stage_channels;
        if !(sc[0] < sc[1] && sc[1] < sc[2] && sc[2] < sc[3]) {
            return Err(Error::Config(format!("stage_channels must strictly increase, got {sc:?}")));
        }
        for (i, &c) in sc.iter().enumerate() {
            if self.heads == 0 || c % self.heads != 0 {
                return Err(Error::Config(format!(
                    "stage {i} channels {c} not divisible by {} heads",
                    self.heads
                )));
            }
            if c % 2 != 0 {
                return Err(Error::Config(format!("stage {i} channels {c} must be even")));
            }
        }
        if self.bottleneck_channels() % self.heads != 0 {
            return Err(Error::Config(format!(
                "bottleneck channels {} not divisible by {} heads",
                self.bottleneck_channels(),
                self.heads
            )));
        }
        if self.schedule == Schedule::Narrow && self.base_channels != self.stage_channels[0] {
            return Err(Error::Config(format!(
                "narrow schedule needs base_channels == stage_channels[0], got {} vs {}",
                self.base_channels, self.stage_channels[0]
            )));
        }
        if self.schedule == Schedule::StemDouble && self.base_channels > self.stage_channels[0] {
            return Err(Error::Config(format!(
                "stem_double schedule needs base_channels <= stage_channels[0], got {} vs {}",
                self.base_channels, self.stage_channels[0]
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} must be in [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// Planned (channels, spatial) of every point in the pipeline for a
    /// given input, without instantiating anything.
    pub fn schedule_plan(&self, d: usize, h: usize, w: usize) -> Result<SchedulePlan> {
        check_input_divisibility("schedule", d, h, w)?;
        let half = |s: (usize, usize, usize)| (s.0 / 2, s.1 / 2, s.2 / 2);
        let mut res = (d, h, w);
        res = half(res);
        let stem = Slot { channels: self.base_channels, spatial: res };
        let mut stages = [Slot::default(); 4];
        for i in 0..4 {
            stages[i] = Slot { channels: self.stage_channels[i], spatial: res };
            res = half(res);
        }
        let bottleneck = Slot { channels: self.bottleneck_channels(), spatial: res };
        let mut decoder = [Slot::default(); 4];
        for i in (0..4).rev() {
            decoder[i] = stages[i]; // fused at the matching skip resolution
        }
        Ok(SchedulePlan {
            stem,
            stages,
            bottleneck,
            decoder,
            head_mid: Slot { channels: self.head_mid_channels(), spatial: (d, h, w) },
            logits: Slot { channels: self.num_classes, spatial: (d, h, w) },
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Slot {
    pub channels: usize,
    pub spatial: (usize, usize, usize),
}

/// Shapes at every pipeline point; `stages[i]` doubles as the skip shape.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SchedulePlan {
    pub stem: Slot,
    pub stages: [Slot; 4],
    pub bottleneck: Slot,
    pub decoder: [Slot; 4],
    pub head_mid: Slot,
    pub logits: Slot,
}

fn check_input_divisibility(op: &'static str, d: usize, h: usize, w: usize) -> Result<()> {
    let f = DOWNSAMPLE_FACTOR;
    if d % f != 0 || h % f != 0 || w % f != 0 || d == 0 || h == 0 || w == 0 {
        return Err(Error::SpatialDivisibility { op, d, h, w, required: f });
    }
    Ok(())
}

// ---- parameters ----

struct StemParams {
    conv_w: ParamId,
    conv_b: ParamId,
    expand: Option<(ParamId, ParamId)>,
}

struct DownsampleParams {
    w: ParamId,
    b: ParamId,
}

pub struct PfiParams {
    mhlk: MhlkParams,
    ch: ChannelAttnParams,
    sp: SpatialAttnParams,
    desa: DesaParams,
}

pub struct CfiParams {
    mhlk: MhlkParams,
    desa: DesaParams,
    ch: ChannelAttnParams,
    sp: SpatialAttnParams,
}

pub struct CedParams {
    pub pfi: PfiParams,
    pub cfi: CfiParams,
    pub ctlk_block: BlockParams,
    pub ptlk_block: BlockParams,
}

pub enum FuseParams {
    Ced(CedParams),
    Plain { recover_w: ParamId, recover_b: ParamId, mixed: MixedParams },
}

struct DecoderStageParams {
    up_w: ParamId,
    fuse: FuseParams,
}

struct HeadParams {
    up_w: ParamId,
    final_w: ParamId,
    final_b: ParamId,
}

impl PfiParams {
    pub fn init<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        c: usize,
        n: usize,
        dropout: f64,
    ) -> Result<Self> {
        Ok(PfiParams {
            mhlk: MhlkParams::init(store, &format!("{prefix}.mhlk"), c, n)?,
            ch: ChannelAttnParams::init(store, &format!("{prefix}.ch_gate"), c)?,
            sp: SpatialAttnParams::init(store, &format!("{prefix}.sp_gate"))?,
            // query and key both project the same cross-group, shared matrix
            desa: DesaParams::init(store, &format!("{prefix}.desa"), c, true, dropout)?,
        })
    }

    pub fn desa(&self) -> &DesaParams {
        &self.desa
    }

    pub fn mhlk(&self) -> &MhlkParams {
        &self.mhlk
    }

    pub fn channel_attn(&self) -> &ChannelAttnParams {
        &self.ch
    }

    pub fn spatial_attn(&self) -> &SpatialAttnParams {
        &self.sp
    }
}

impl CfiParams {
    pub fn init<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        c: usize,
        n: usize,
        dropout: f64,
    ) -> Result<Self> {
        Ok(CfiParams {
            mhlk: MhlkParams::init(store, &format!("{prefix}.mhlk"), c, n)?,
            desa: DesaParams::init(store, &format!("{prefix}.desa"), c, false, dropout)?,
            ch: ChannelAttnParams::init(store, &format!("{prefix}.ch_gate"), c)?,
            sp: SpatialAttnParams::init(store, &format!("{prefix}.sp_gate"))?,
        })
    }

    pub fn desa(&self) -> &DesaParams {
        &self.desa
    }

    pub fn mhlk(&self) -> &MhlkParams {
        &self.mhlk
    }

    pub fn channel_attn(&self) -> &ChannelAttnParams {
        &self.ch
    }

    pub fn spatial_attn(&self) -> &SpatialAttnParams {
        &self.sp
    }
}

impl CedParams {
    pub fn init<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        c: usize,
        n: usize,
        variant: MlpVariant,
        dropout: f64,
    ) -> Result<Self> {
        Ok(CedParams {
            pfi: PfiParams::init(store, &format!("{prefix}.pfi"), c, n, dropout)?,
            cfi: CfiParams::init(store, &format!("{prefix}.cfi"), c, n, dropout)?,
            ctlk_block: BlockParams::init(
                store,
                &format!("{prefix}.ctlk"),
                InnerKind::Ctlk,
                c,
                n,
                variant,
                dropout,
            )?,
            ptlk_block: BlockParams::init(
                store,
                &format!("{prefix}.ptlk"),
                InnerKind::Ptlk,
                c,
                n,
                variant,
                dropout,
            )?,
        })
    }
}

struct NetParams {
    stem: StemParams,
    stages: Vec<MixedParams>,
    downsamples: Vec<DownsampleParams>,
    bottleneck: MixedParams,
    decoder: Vec<DecoderStageParams>,
    head: HeadParams,
}

// ---- module-level operations ----

/// Halve both inputs along channels and cross-group the halves:
/// X1 = concat(skip_lo, up_lo), X2 = concat(skip_hi, up_hi).
pub fn cross_group<T: Real>(tape: &mut Tape<T>, x_skip: Val, x_up: Val) -> Result<(Val, Val)> {
    let d = tape.dims(x_skip);
    if tape.dims(x_up) != d {
        return Err(Error::ShapeMismatch { op: "cross_group", left: d, right: tape.dims(x_up) });
    }
    if d.c % 2 != 0 {
        return Err(Error::Divisibility { op: "cross_group", channels: d.c, divisor: 2, unit: "halves" });
    }
    let half = d.c / 2;
    let s_lo = tape.narrow_channels(x_skip, 0, half)?;
    let s_hi = tape.narrow_channels(x_skip, half, half)?;
    let u_lo = tape.narrow_channels(x_up, 0, half)?;
    let u_hi = tape.narrow_channels(x_up, half, half)?;
    let x1 = tape.concat_channels(&[s_lo, u_lo])?;
    let x2 = tape.concat_channels(&[s_hi, u_hi])?;
    Ok((x1, x2))
}

/// Progressive feature interaction: MHLK + progressive entanglement refine
/// X1 into the value path; X2 drives query and key. No residual.
pub fn pfi<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    p: &PfiParams,
    x_skip: Val,
    x_up: Val,
    n: usize,
) -> Result<Val> {
    let (x1, x2) = cross_group(tape, x_skip, x_up)?;
    let local = mhlk(tape, store, &p.mhlk, x1, n)?;
    let refined = progressive_entangle(tape, store, &p.ch, &p.sp, local)?;
    desa(tape, store, &p.desa, x2, x2, refined, n)
}

/// Collaborative feature interaction: MHLK on X1 and DESA on X2, mutually
/// calibrated and summed. No residual.
pub fn cfi<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    p: &CfiParams,
    x_skip: Val,
    x_up: Val,
    n: usize,
) -> Result<Val> {
    let (x1, x2) = cross_group(tape, x_skip, x_up)?;
    let local = mhlk(tape, store, &p.mhlk, x1, n)?;
    let global = desa(tape, store, &p.desa, x2, x2, x2, n)?;
    collaborative_entangle(tape, store, &p.ch, &p.sp, local, global)
}

/// Dual-path decoder fusion: PFI -> CTLK block and CFI -> PTLK block, summed.
pub fn ced<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    p: &CedParams,
    x_skip: Val,
    x_up: Val,
    n: usize,
) -> Result<Val> {
    let p1 = pfi(tape, store, &p.pfi, x_skip, x_up, n)?;
    let path1 = transformer_block(tape, store, &p.ctlk_block, p1, n)?;
    let p2 = cfi(tape, store, &p.cfi, x_skip, x_up, n)?;
    let path2 = transformer_block(tape, store, &p.ptlk_block, p2, n)?;
    tape.add(path1, path2)
}

/// The four encoder-stage outputs, shallow to deep, each consumed exactly
/// once by the decoder.
pub struct SkipSet {
    slots: [Option<Val>; 4],
}

impl SkipSet {
    fn new(vals: [Val; 4]) -> Self {
        SkipSet { slots: vals.map(Some) }
    }

    pub fn peek(&self, stage: usize) -> Option<Val> {
        self.slots[stage]
    }

    fn take(&mut self, stage: usize) -> Val {
        self.slots[stage].take().expect("skip consumed twice")
    }

    fn all_consumed(&self) -> bool {
        self.slots.iter().all(Option::is_none)
    }

    fn live(&self) -> Vec<Val> {
        self.slots.iter().flatten().copied().collect()
    }

    fn remap(&mut self, old: &[Val], new: &[Val]) {
        for slot in self.slots.iter_mut() {
            if let Some(v) = slot {
                if let Some(pos) = old.iter().position(|o| o == v) {
                    *slot = Some(new[pos]);
                }
            }
        }
    }
}

/// The assembled network: config plus layer handles into a [`ParamStore`].
/// The store lives outside the model so optimizers and gradient checks can
/// mutate parameters while the architecture stays shared and read-only.
pub struct Model {
    cfg: ModelConfig,
    params: NetParams,
}

/// Register a fresh model's parameters and return both halves.
pub fn build<T: Real>(cfg: ModelConfig) -> Result<(Model, ParamStore<T>)> {
    let mut store = ParamStore::new(cfg.seed);
    let model = Model::init(cfg, &mut store)?;
    Ok((model, store))
}

impl Model {
    pub fn init<T: Real>(cfg: ModelConfig, store: &mut ParamStore<T>) -> Result<Self> {
        cfg.validate()?;
        let store = store;
        let sc = cfg.stage_channels;
        let n = cfg.heads;
        let bneck = cfg.bottleneck_channels();

        let stem = StemParams {
            conv_w: store.register(
                "stem.conv.weight",
                Dims::new(cfg.base_channels, cfg.in_channels, 7, 7, 7),
                Init::KaimingFanIn { fan_in: cfg.in_channels * 343 },
            )?,
            conv_b: store.register(
                "stem.conv.bias",
                Dims::new(1, cfg.base_channels, 1, 1, 1),
                Init::Zero,
            )?,
            expand: if cfg.base_channels != sc[0] {
                Some((
                    store.register(
                        "stem.expand.weight",
                        Dims::new(sc[0], cfg.base_channels, 1, 1, 1),
                        Init::TruncNormal { std: crate::attention::PROJ_STD },
                    )?,
                    store.register("stem.expand.bias", Dims::new(1, sc[0], 1, 1, 1), Init::Zero)?,
                ))
            } else {
                None
            },
        };

        let mut stages = Vec::with_capacity(4);
        let mut downsamples = Vec::with_capacity(4);
        for i in 0..4 {
            stages.push(MixedParams::init(
                store,
                &format!("encoder.stage{i}"),
                sc[i],
                n,
                cfg.mlp_variant,
                cfg.dropout,
            )?);
            let c_out = if i < 3 { sc[i + 1] } else { bneck };
            downsamples.push(DownsampleParams {
                w: store.register(
                    format!("encoder.down{i}.weight"),
                    Dims::new(c_out, sc[i], 3, 3, 3),
                    Init::KaimingFanIn { fan_in: sc[i] * 27 },
                )?,
                b: store.register(
                    format!("encoder.down{i}.bias"),
                    Dims::new(1, c_out, 1, 1, 1),
                    Init::Zero,
                )?,
            });
        }

        let bottleneck =
            MixedParams::init(store, "bottleneck", bneck, n, cfg.mlp_variant, cfg.dropout)?;

        // decoder stages deepest-first: upsample into stage i's width, then
        // fuse with stage i's skip
        let mut decoder = Vec::with_capacity(4);
        for i in (0..4).rev() {
            let c_in = if i == 3 { bneck } else { sc[i + 1] };
            let prefix = format!("decoder.stage{i}");
            let up_w = store.register(
                format!("{prefix}.up.weight"),
                Dims::new(c_in, sc[i], 2, 2, 2),
                Init::KaimingFanIn { fan_in: c_in * 8 },
            )?;
            let fuse = match cfg.decoder_variant {
                DecoderVariant::Ced => FuseParams::Ced(CedParams::init(
                    store,
                    &format!("{prefix}.ced"),
                    sc[i],
                    n,
                    cfg.mlp_variant,
                    cfg.dropout,
                )?),
                DecoderVariant::PlainConcat => FuseParams::Plain {
                    recover_w: store.register(
                        format!("{prefix}.recover.weight"),
                        Dims::new(sc[i], 2 * sc[i], 1, 1, 1),
                        Init::TruncNormal { std: crate::attention::PROJ_STD },
                    )?,
                    recover_b: store.register(
                        format!("{prefix}.recover.bias"),
                        Dims::new(1, sc[i], 1, 1, 1),
                        Init::Zero,
                    )?,
                    mixed: MixedParams::init(
                        store,
                        &format!("{prefix}.mixed"),
                        sc[i],
                        n,
                        cfg.mlp_variant,
                        cfg.dropout,
                    )?,
                },
            };
            decoder.push(DecoderStageParams { up_w, fuse });
        }

        let mid = cfg.head_mid_channels();
        let head = HeadParams {
            up_w: store.register(
                "head.up.weight",
                Dims::new(sc[0], mid, 2, 2, 2),
                Init::KaimingFanIn { fan_in: sc[0] * 8 },
            )?,
            final_w: store.register(
                "head.final.weight",
                Dims::new(cfg.num_classes, mid, 1, 1, 1),
                Init::TruncNormal { std: crate::attention::PROJ_STD },
            )?,
            final_b: store.register(
                "head.final.bias",
                Dims::new(1, cfg.num_classes, 1, 1, 1),
                Init::Zero,
            )?,
        };

        Ok(Model { cfg, params: NetParams { stem, stages, downsamples, bottleneck, decoder, head } })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Large-kernel stem conv (stride 2) plus the optional pointwise
    /// expansion into stage 1. Checks the full-pipeline divisibility.
    pub fn stem_encode<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, img: Val) -> Result<Val> {
        let d = tape.dims(img);
        check_input_divisibility("stem_encode", d.d, d.h, d.w)?;
        if d.c != self.cfg.in_channels {
            return Err(Error::ChannelMismatch {
                op: "stem_encode",
                what: "input",
                got: d.c,
                expected: self.cfg.in_channels,
            });
        }
        let w = tape.param(store, self.params.stem.conv_w)?;
        let b = tape.param(store, self.params.stem.conv_b)?;
        let mut x = tape.conv3d(img, w, Some(b), 2, 3, 1)?;
        if let Some((ew, eb)) = self.params.stem.expand {
            let ew = tape.param(store, ew)?;
            let eb = tape.param(store, eb)?;
            x = tape.conv3d(x, ew, Some(eb), 1, 0, 1)?;
        }
        Ok(x)
    }

    /// Run the four mixed-block stages, recording each stage output as a
    /// skip, downsampling after every stage. Returns the bottleneck input.
    pub fn encoder_forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Val,
    ) -> Result<(Val, SkipSet)> {
        let n = self.cfg.heads;
        let compact = !tape.recording();
        let mut cur = x;
        let mut skips: Vec<Val> = Vec::with_capacity(4);
        for (stage, down) in self.params.stages.iter().zip(&self.params.downsamples) {
            for block in [&stage.ctlk, &stage.ptlk] {
                let mark = tape.mark();
                let y = transformer_block(tape, store, block, cur, n)?;
                cur = if compact {
                    let mut live = skips.clone();
                    live.push(y);
                    let kept = tape.keep_only(mark, &live)?;
                    let n_skips = skips.len();
                    skips.copy_from_slice(&kept[..n_skips]);
                    kept[n_skips]
                } else {
                    y
                };
            }
            skips.push(cur);
            let w = tape.param(store, down.w)?;
            let b = tape.param(store, down.b)?;
            cur = tape.conv3d(cur, w, Some(b), 2, 1, 1)?;
        }
        let skips = SkipSet::new([skips[0], skips[1], skips[2], skips[3]]);
        Ok((cur, skips))
    }

    /// Mixed block at the bottleneck width; shape preserved.
    pub fn bottleneck<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Val) -> Result<Val> {
        use crate::blocks::mixed_block;
        mixed_block(tape, store, &self.params.bottleneck, x, self.cfg.heads)
    }

    /// Four upsample-and-fuse stages, deepest first. Each stage consumes
    /// exactly its own encoder skip.
    pub fn decoder_forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Val,
        mut skips: SkipSet,
    ) -> Result<Val> {
        let n = self.cfg.heads;
        let compact = !tape.recording();
        let mut cur = x;
        for (idx, stage) in self.params.decoder.iter().enumerate() {
            let enc_stage = 3 - idx;
            let mark = tape.mark();
            let w = tape.param(store, stage.up_w)?;
            let up = tape.conv3d_transposed(cur, w, 2)?;
            let skip = skips.take(enc_stage);
            let up_d = tape.dims(up);
            let skip_d = tape.dims(skip);
            if up_d != skip_d {
                return Err(Error::Config(format!(
                    "decoder stage {enc_stage}: upsampled {up_d} does not match skip {skip_d}"
                )));
            }
            let fused = match &stage.fuse {
                FuseParams::Ced(p) => ced(tape, store, p, skip, up, n)?,
                FuseParams::Plain { recover_w, recover_b, mixed } => {
                    let cat = tape.concat_channels(&[skip, up])?;
                    let w = tape.param(store, *recover_w)?;
                    let b = tape.param(store, *recover_b)?;
                    let rec = tape.conv3d(cat, w, Some(b), 1, 0, 1)?;
                    crate::blocks::mixed_block(tape, store, mixed, rec, n)?
                }
            };
            cur = if compact {
                let mut live = skips.live();
                live.push(fused);
                let kept = tape.keep_only(mark, &live)?;
                skips.remap(&live, &kept);
                kept[live.len() - 1]
            } else {
                fused
            };
        }
        debug_assert!(skips.all_consumed());
        Ok(cur)
    }

    /// Transposed conv to full resolution, then pointwise to class logits.
    pub fn predict_head<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Val) -> Result<Val> {
        let w = tape.param(store, self.params.head.up_w)?;
        let up = tape.conv3d_transposed(x, w, 2)?;
        let fw = tape.param(store, self.params.head.final_w)?;
        let fb = tape.param(store, self.params.head.final_b)?;
        tape.conv3d(up, fw, Some(fb), 1, 0, 1)
    }

    /// Whole pipeline: stem, encoder, bottleneck, decoder, head.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, img: Val) -> Result<Val> {
        let x = self.stem_encode(tape, store, img)?;
        let (x, skips) = self.encoder_forward(tape, store, x)?;
        let x = self.bottleneck(tape, store, x)?;
        let x = self.decoder_forward(tape, store, x, skips)?;
        self.predict_head(tape, store, x)
    }

    /// Forward on a plain tensor without recording; logits out.
    pub fn infer<T: Real>(&self, store: &ParamStore<T>, img: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::inference();
        let v = tape.leaf(img.clone())?;
        let out = self.forward(&mut tape, store, v)?;
        Ok(tape.tensor(out))
    }

    /// Hard segmentation: argmax over class logits.
    pub fn predict_labels<T: Real>(
        &self,
        store: &ParamStore<T>,
        img: &Tensor<T>,
    ) -> Result<crate::tensor::Labels> {
        let logits = self.infer(store, img)?;
        Ok(argmax_labels(&logits))
    }
}

/// Per-voxel argmax over the channel axis.
pub fn argmax_labels<T: Real>(logits: &Tensor<T>) -> crate::tensor::Labels {
    let d = logits.dims();
    let sp = d.spatial();
    let mut out = crate::tensor::Labels::zeros(d.n, d.d, d.h, d.w);
    for n in 0..d.n {
        for v in 0..sp {
            let mut best = T::min_value();
            let mut arg = 0u16;
            for c in 0..d.c {
                let val = logits.data()[(n * d.c + c) * sp + v];
                if val > best {
                    best = val;
                    arg = c as u16;
                }
            }
            out.data_mut()[n * sp + v] = arg;
        }
    }
    out
}
