//! Whole-network structural behavior: schedules, shapes, determinism, skip
//! wiring, and the stem's divisibility contract.

use tlk_core::model::build;
use tlk_core::{DecoderVariant, Dims, ModelConfig, Tape, Tensor};

fn rnd32(dims: Dims, salt: u64) -> Tensor<f32> {
    let data = (0..dims.count())
        .map(|i| {
            let x = (i as u64 + 1).wrapping_mul(0x9e3779b97f4a7c15 ^ (salt << 5 | 1));
            (((x >> 33) as f64 / (1u64 << 31) as f64) - 1.0) as f32
        })
        .collect();
    Tensor::new(dims, data).unwrap()
}

fn toy_cfg() -> ModelConfig {
    ModelConfig {
        num_classes: 3,
        base_channels: 6,
        stage_channels: [6, 12, 24, 48],
        seed: 21,
        ..ModelConfig::default()
    }
}

#[test]
fn stem_doubles_resolution_and_projects() {
    // 96^3 single-channel input under the stem_double schedule
    let cfg = ModelConfig::stem_double();
    let (model, store) = build::<f32>(cfg).unwrap();
    let mut tape = Tape::inference();
    let img = tape.leaf(rnd32(Dims::new(1, 1, 96, 96, 96), 1)).unwrap();
    let out = model.stem_encode(&mut tape, &store, img).unwrap();
    assert_eq!(tape.dims(out), Dims::new(1, 96, 48, 48, 48));
}

#[test]
fn stem_four_modality_plan() {
    // (1, 4, 128^3) -> (1, 96, 64^3) by schedule arithmetic
    let cfg = ModelConfig { in_channels: 4, ..ModelConfig::stem_double() };
    let plan = cfg.schedule_plan(128, 128, 128).unwrap();
    assert_eq!(plan.stages[0].channels, 96);
    assert_eq!(plan.stages[0].spatial, (64, 64, 64));
}

#[test]
fn stem_rejects_indivisible_input() {
    let (model, store) = build::<f32>(ModelConfig::default()).unwrap();
    let mut tape = Tape::inference();
    let img = tape.leaf(Tensor::zeros(Dims::new(1, 1, 50, 50, 50))).unwrap();
    let err = model.stem_encode(&mut tape, &store, img).unwrap_err();
    assert!(err.to_string().contains("divisible by 32"), "{err}");
}

#[test]
fn encoder_produces_stem_double_skip_ladder() {
    // skip channel list [96, 192, 384, 768] with halving resolutions and a
    // 1/32-resolution bottleneck input at the deepest width
    let cfg = ModelConfig::stem_double();
    let (model, store) = build::<f32>(cfg).unwrap();
    let mut tape = Tape::inference();
    let img = tape.leaf(rnd32(Dims::new(1, 1, 32, 32, 32), 3)).unwrap();
    let x = model.stem_encode(&mut tape, &store, img).unwrap();
    let (bneck_in, skips) = model.encoder_forward(&mut tape, &store, x).unwrap();
    let expect = [(96, 16), (192, 8), (384, 4), (768, 2)];
    for (i, (c, s)) in expect.into_iter().enumerate() {
        let skip = skips.peek(i).unwrap();
        assert_eq!(tape.dims(skip), Dims::new(1, c, s, s, s), "skip {i}");
    }
    assert_eq!(tape.dims(bneck_in), Dims::new(1, 768, 1, 1, 1));
}

#[test]
fn decoder_schedule_arithmetic_at_96() {
    // 3^3/768 -> 6^3/768 (+skip4) -> 12^3/384 -> 24^3/192 -> 48^3/96
    let cfg = ModelConfig::stem_double();
    let plan = cfg.schedule_plan(96, 96, 96).unwrap();
    assert_eq!(plan.bottleneck.spatial, (3, 3, 3));
    assert_eq!(plan.decoder.map(|s| (s.channels, s.spatial.0)), [(96, 48), (192, 24), (384, 12), (768, 6)]);
}

#[test]
fn forward_preserves_spatial_dims_32() {
    // (1, 1, 32^3), 3 classes -> (1, 3, 32^3)
    let cfg = ModelConfig { num_classes: 3, ..ModelConfig::default() };
    let (model, store) = build::<f32>(cfg).unwrap();
    let start = std::time::Instant::now();
    let logits = model.infer(&store, &rnd32(Dims::new(1, 1, 32, 32, 32), 5)).unwrap();
    assert_eq!(logits.dims(), Dims::new(1, 3, 32, 32, 32));
    assert!(logits.all_finite());
    assert!(start.elapsed().as_secs() < 60, "forward took {:?}", start.elapsed());
}

#[test]
fn forward_is_bit_deterministic() {
    let cfg = toy_cfg();
    let img = rnd32(Dims::new(1, 1, 32, 32, 32), 7);
    let run = || {
        let (model, store) = build::<f32>(cfg.clone()).unwrap();
        model.infer(&store, &img).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.data(), b.data());
}

#[test]
fn seeds_change_initialization() {
    let a = build::<f32>(toy_cfg()).unwrap().1;
    let b = build::<f32>(ModelConfig { seed: 22, ..toy_cfg() }).unwrap().1;
    let id = a.ids().next().unwrap();
    assert_ne!(a.value(id).data(), b.value(id).data());
}

#[test]
fn decoder_variants_agree_on_shape() {
    let img = rnd32(Dims::new(1, 1, 32, 32, 32), 9);
    let shapes: Vec<Dims> = [DecoderVariant::Ced, DecoderVariant::PlainConcat]
        .into_iter()
        .map(|variant| {
            let cfg = ModelConfig { decoder_variant: variant, ..toy_cfg() };
            let (model, store) = build::<f32>(cfg).unwrap();
            model.infer(&store, &img).unwrap().dims()
        })
        .collect();
    assert_eq!(shapes[0], shapes[1]);
    assert_eq!(shapes[0], Dims::new(1, 3, 32, 32, 32));
}

#[test]
fn head_recovers_full_resolution() {
    // (1, 96, 16^3) through the stem_double head -> (1, classes, 32^3);
    // the 48^3 -> 96^3 case follows the same doubling arithmetic
    let cfg = ModelConfig { num_classes: 15, ..ModelConfig::stem_double() };
    let (model, store) = build::<f32>(cfg.clone()).unwrap();
    let mut tape = Tape::inference();
    let x = tape.leaf(rnd32(Dims::new(1, 96, 16, 16, 16), 11)).unwrap();
    let logits = model.predict_head(&mut tape, &store, x).unwrap();
    assert_eq!(tape.dims(logits), Dims::new(1, 15, 32, 32, 32));
    assert!(tape.value(logits).all_finite());
    let plan = cfg.schedule_plan(96, 96, 96).unwrap();
    assert_eq!(plan.logits.channels, 15);
    assert_eq!(plan.logits.spatial, (96, 96, 96));
}

#[test]
fn bottleneck_preserves_shape_and_batch() {
    let cfg = toy_cfg();
    let (model, store) = build::<f32>(cfg).unwrap();
    let mut tape = Tape::inference();
    let d = Dims::new(2, 96, 2, 2, 2);
    let x = tape.leaf(rnd32(d, 13)).unwrap();
    let y = model.bottleneck(&mut tape, &store, x).unwrap();
    assert_eq!(tape.dims(y), d);
}

#[test]
fn training_tape_forward_matches_inference_forward() {
    // compaction must not change values
    let cfg = toy_cfg();
    let (model, store) = build::<f32>(cfg).unwrap();
    let img = rnd32(Dims::new(1, 1, 32, 32, 32), 15);
    let mut tape = Tape::new();
    let v = tape.leaf(img.clone()).unwrap();
    let out = model.forward(&mut tape, &store, v).unwrap();
    let recorded = tape.tensor(out);
    let inferred = model.infer(&store, &img).unwrap();
    assert_eq!(recorded.data(), inferred.data());
}
