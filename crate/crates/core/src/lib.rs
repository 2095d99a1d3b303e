//! Desk-scale 3-D segmentation network built from large-kernel depthwise
//! convolutions and decomposed axial self-attention, together with the
//! minimal tensor engine, reverse-mode autodiff, training harness, and
//! parameter/FLOP accounting it runs on.

pub mod attention;
pub mod autodiff;
pub mod blocks;
pub mod config;
pub mod cost;
pub mod entangle;
pub mod gradcheck;
pub mod io;
pub mod model;
pub mod synth;
pub mod train;
pub mod error;
pub mod ops;
pub mod params;
pub mod tensor;

#[cfg(test)]
pub(crate) mod testutil;

pub use attention::{desa, AxisMode, DesaParams};
pub use autodiff::{Tape, Val};
pub use config::{FullConfig, TrainConfig};
pub use cost::{count_flops, count_params, desa_vs_full_ratio, CostItem, CostReport};
pub use blocks::{
    ag_mlp, ctlk_module, mixed_block, ptlk_module, transformer_block, AgMlpParams, BlockParams,
    InnerKind, InnerParams, MixedParams, MlpVariant,
};
pub use entangle::{
    channel_gate, collaborative_entangle, mhlk, progressive_entangle, spatial_gate,
    ChannelAttnParams, MhlkParams, SpatialAttnParams,
};
pub use error::{Error, Result};
pub use ops::{Activation, Axis, HeadView};
pub use gradcheck::{grad_check, grad_check_sampled, run_suite, CheckResult, SuiteReport};
pub use model::{
    argmax_labels, build, ced, cfi, cross_group, pfi, CedParams, CfiParams, DecoderVariant, Model,
    ModelConfig, PfiParams, Schedule, SchedulePlan, SkipSet, Slot,
};
pub use params::{Init, ParamId, ParamStore};
pub use synth::{gen_synthetic, gen_volume, SegBatch, SynthVolume};
pub use tensor::{Dims, Labels, Real, Tensor};
pub use train::{train_toy, AdamW, TrainReport};
