//! Acceptance suite: one test per release criterion, each printing a
//! PASS/FAIL line with its measured detail and runtime. Run with
//! `cargo test -p tlk-cli --test acceptance -- --nocapture`.

use std::process::Command;
use std::time::{Duration, Instant};

use tlk_core::blocks::zero_block_outputs;
use tlk_core::config::{FullConfig, TrainConfig};
use tlk_core::cost::{count_flops, count_params, desa_vs_full_ratio};
use tlk_core::model::build;
use tlk_core::{
    BlockParams, Dims, InnerKind, MixedParams, MlpVariant, ModelConfig, ParamStore, Schedule,
    Tape, Tensor,
};

/// Published reference total this implementation is compared against.
const REFERENCE_PARAMS: f64 = 40.95e6;

fn pass(name: &str, detail: String, start: Instant, budget: Duration) {
    let took = start.elapsed();
    assert!(took <= budget, "{name}: took {took:?}, budget {budget:?}");
    println!("PASS {name}: {detail} ({took:.2?})");
}

fn toy_config() -> FullConfig {
    FullConfig {
        model: ModelConfig {
            num_classes: 3,
            base_channels: 12,
            stage_channels: [12, 24, 48, 96],
            seed: 42,
            ..ModelConfig::default()
        },
        train: TrainConfig { steps: 200, batch: 2, lr: 5e-3, ..TrainConfig::default() },
    }
}

fn rnd32(dims: Dims, salt: u64) -> Tensor<f32> {
    let data = (0..dims.count())
        .map(|i| {
            let x = (i as u64 + 1).wrapping_mul(0x9e3779b97f4a7c15 ^ (salt << 3 | 1));
            (((x >> 33) as f64 / (1u64 << 31) as f64) - 1.0) as f32
        })
        .collect();
    Tensor::new(dims, data).unwrap()
}

fn write_config(dir: &std::path::Path, cfg: &FullConfig) -> std::path::PathBuf {
    let path = dir.join("config.txt");
    std::fs::write(&path, tlk_core::config::to_text(cfg)).unwrap();
    path
}

#[test]
fn criterion_parameter_count() {
    let start = Instant::now();
    // the default schedule reading must land within 15% of the reference;
    // the alternative is kept behind the schedule flag
    let default_cfg = ModelConfig::default();
    assert_eq!(default_cfg.schedule, Schedule::Narrow, "default must be the passing reading");
    let narrow = count_params(&default_cfg).unwrap().total_params() as f64;
    let wide = count_params(&ModelConfig::stem_double()).unwrap().total_params() as f64;
    let narrow_dev = (narrow - REFERENCE_PARAMS) / REFERENCE_PARAMS;
    let wide_dev = (wide - REFERENCE_PARAMS) / REFERENCE_PARAMS;
    assert!(
        narrow_dev.abs() <= 0.20,
        "default reading {narrow:.0} deviates {:.1}% (> 20%)",
        narrow_dev * 100.0
    );
    assert!(
        narrow_dev.abs() <= 0.15 || wide_dev.abs() <= 0.15,
        "no schedule reading within 15%: narrow {:.1}%, stem_double {:.1}%",
        narrow_dev * 100.0,
        wide_dev * 100.0
    );
    assert!(narrow_dev.abs() <= 0.15, "the default must be the reading inside 15%");

    // `describe` reports the same total in under a second
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write_config(dir.path(), &FullConfig::default());
    let t0 = Instant::now();
    let out = Command::new(env!("CARGO_BIN_EXE_tlk"))
        .args(["describe", cfg_path.to_str().unwrap()])
        .output()
        .unwrap();
    let describe_time = t0.elapsed();
    assert!(out.status.success());
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains(&format!("total {:>14}", narrow as u64)) || stdout.contains(&format!("{}", narrow as u64)), "{stdout}");
    assert!(describe_time < Duration::from_secs(1), "describe took {describe_time:?}");

    pass(
        "parameter-count",
        format!(
            "default (narrow) {:.2} M = {:+.1}% of {:.2} M; stem_double {:.2} M ({:+.1}%); describe {describe_time:.0?}",
            narrow / 1e6,
            narrow_dev * 100.0,
            REFERENCE_PARAMS / 1e6,
            wide / 1e6,
            wide_dev * 100.0,
        ),
        start,
        Duration::from_secs(30),
    );
}

#[test]
fn criterion_head_count_ordering() {
    let start = Instant::now();
    let mut params = Vec::new();
    let mut flops = Vec::new();
    for heads in [2usize, 3, 4] {
        let cfg = ModelConfig { heads, ..ModelConfig::default() };
        params.push(count_params(&cfg).unwrap().total_params());
        flops.push(count_flops(&cfg, (96, 96, 96)).unwrap().total_flops());
    }
    assert!(params[0] < params[1] && params[1] < params[2], "params not increasing: {params:?}");
    assert!(flops[0] < flops[1] && flops[1] < flops[2], "flops not increasing: {flops:?}");
    pass(
        "head-count-ordering",
        format!(
            "params {:.2}/{:.2}/{:.2} M, flops {:.1}/{:.1}/{:.1} G across 2/3/4 heads",
            params[0] as f64 / 1e6,
            params[1] as f64 / 1e6,
            params[2] as f64 / 1e6,
            flops[0] as f64 / 1e9,
            flops[1] as f64 / 1e9,
            flops[2] as f64 / 1e9
        ),
        start,
        Duration::from_secs(5),
    );
}

#[test]
fn criterion_mlp_variant_ordering() {
    let start = Instant::now();
    let mut params = Vec::new();
    for variant in [MlpVariant::Ffn, MlpVariant::Mlp, MlpVariant::AgMlp] {
        let cfg = ModelConfig { mlp_variant: variant, ..ModelConfig::default() };
        params.push(count_params(&cfg).unwrap().total_params());
    }
    assert!(params[0] < params[1] && params[1] < params[2], "not increasing: {params:?}");
    pass(
        "mlp-variant-ordering",
        format!(
            "params {:.3}/{:.3}/{:.3} M across ffn/mlp/ag_mlp",
            params[0] as f64 / 1e6,
            params[1] as f64 / 1e6,
            params[2] as f64 / 1e6
        ),
        start,
        Duration::from_secs(5),
    );
}

#[test]
fn criterion_gradient_suite() {
    let start = Instant::now();
    let report = tlk_core::run_suite(2024, None).unwrap();
    let failures: Vec<_> = report.entries.iter().filter(|e| !e.passed()).collect();
    assert!(failures.is_empty(), "failing gradient checks: {failures:?}");
    let worst = report
        .entries
        .iter()
        .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
        .unwrap();
    pass(
        "gradient-suite",
        format!("{} checks, worst {} at {:.2e}", report.entries.len(), worst.name, worst.max_rel_err),
        start,
        Duration::from_secs(600),
    );
}

#[test]
fn criterion_oracle_equivalence() {
    use tlk_oracle::Vol;
    let start = Instant::now();
    let tol = 1e-6;

    // conv3d on the reference shape
    let x = rnd32(Dims::new(2, 6, 5, 5, 5), 1).cast::<f64>();
    let w = rnd32(Dims::new(4, 6, 3, 3, 3), 2).cast::<f64>();
    let got = tlk_core::ops::conv3d(&x, &w, None, 1, 1, 1).unwrap();
    let (want, _) = tlk_oracle::conv::conv3d(
        &x.to_f64_vec(),
        Vol::new(2, 6, 5, 5, 5),
        &w.to_f64_vec(),
        4,
        3,
        None,
        1,
        1,
        1,
    );
    let conv_err = max_abs_diff(&got.to_f64_vec(), &want);
    assert!(conv_err < tol, "conv3d vs oracle: {conv_err}");

    // pooling
    let (got, _) = tlk_core::ops::channel_pool(&x);
    let (want, _) = tlk_oracle::conv::channel_pool(&x.to_f64_vec(), Vol::new(2, 6, 5, 5, 5));
    let pool_err = max_abs_diff(&got.to_f64_vec(), &want);
    assert!(pool_err < tol, "channel_pool vs oracle: {pool_err}");

    // gates + mhlk + pfi/cfi and axial-vs-full live in the core oracle
    // suite; run it as a child test binary would, in-process here
    let gates = std::panic::catch_unwind(run_module_oracles);
    assert!(gates.is_ok(), "module oracle comparisons failed");

    pass(
        "oracle-equivalence",
        format!("conv {conv_err:.1e}, pool {pool_err:.1e}, modules within 1e-6/1e-5"),
        start,
        Duration::from_secs(120),
    );
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Compact re-run of the module-level oracle comparisons: gates, MHLK, and
/// the cross-group interactions at one-nontrivial-axis shapes where the
/// axial chain equals quadratic full attention.
fn run_module_oracles() {
    use tlk_core::{channel_gate, mhlk, pfi, ParamId};
    use tlk_oracle::Vol;

    let export = |s: &ParamStore<f64>, id: ParamId| s.value(id).to_f64_vec();

    // channel gate composition
    let d = Dims::new(2, 6, 3, 3, 3);
    let v = Vol::new(2, 6, 3, 3, 3);
    let mut store = ParamStore::<f64>::new(7);
    let ch = tlk_core::ChannelAttnParams::init(&mut store, "ch", 6).unwrap();
    let source = rnd32(d, 41).cast::<f64>();
    let target = rnd32(d, 42).cast::<f64>();
    let mut tape = Tape::new();
    let s = tape.leaf(source.clone()).unwrap();
    let t = tape.leaf(target.clone()).unwrap();
    let got = channel_gate(&mut tape, &store, &ch, s, t).unwrap();
    let want = tlk_oracle::gates::channel_gate(
        &source.to_f64_vec(),
        &target.to_f64_vec(),
        v,
        &export(&store, ch.linear().0),
        &export(&store, ch.linear().1),
    );
    assert!(max_abs_diff(&tape.value(got).to_f64_vec(), &want) < 1e-6);

    // axial equals full attention on a single nontrivial axis
    let d = Dims::new(1, 6, 1, 1, 7);
    let q = rnd32(d, 21).cast::<f64>();
    let k = rnd32(d, 22).cast::<f64>();
    let val = rnd32(d, 23).cast::<f64>();
    let mut tape = Tape::new();
    let qv = tape.leaf(q.clone()).unwrap();
    let kv = tape.leaf(k.clone()).unwrap();
    let vv = tape.leaf(val.clone()).unwrap();
    let out = tape.axial_attention(qv, kv, vv, tlk_core::Axis::W, 3).unwrap();
    let want = tlk_oracle::attn::full_attention_volume(
        &q.to_f64_vec(),
        &k.to_f64_vec(),
        &val.to_f64_vec(),
        Vol::new(1, 6, 1, 1, 7),
        3,
    );
    assert!(max_abs_diff(&tape.value(out).to_f64_vec(), &want) < 1e-6);

    // mhlk against the composed depthwise-bank oracle
    let d = Dims::new(1, 6, 4, 4, 4);
    let v = Vol::new(1, 6, 4, 4, 4);
    let mut store = ParamStore::<f64>::new(10);
    let mp = tlk_core::MhlkParams::init(&mut store, "m", 6, 3).unwrap();
    let x = rnd32(d, 61).cast::<f64>();
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone()).unwrap();
    let got = mhlk(&mut tape, &store, &mp, xv, 3).unwrap();
    let kernels: Vec<(usize, Vec<f64>, Vec<f64>)> = (0..3)
        .map(|i| {
            let (w, b, k) = mp.head_conv(i);
            (k, export(&store, w), export(&store, b))
        })
        .collect();
    let want = tlk_oracle::gates::mhlk(
        &x.to_f64_vec(),
        v,
        &export(&store, mp.projection().0),
        &export(&store, mp.projection().1),
        &kernels,
    );
    assert!(max_abs_diff(&tape.value(got).to_f64_vec(), &want) < 1e-6);

    // pfi against composed sub-oracles at a one-axis shape
    let d = Dims::new(1, 6, 1, 1, 5);
    let v = Vol::new(1, 6, 1, 1, 5);
    let mut store = ParamStore::<f64>::new(12);
    let pp = tlk_core::PfiParams::init(&mut store, "pfi", 6, 3, 0.0).unwrap();
    let skip = rnd32(d, 71).cast::<f64>();
    let up = rnd32(d, 72).cast::<f64>();
    let mut tape = Tape::new();
    let sv = tape.leaf(skip.clone()).unwrap();
    let uv = tape.leaf(up.clone()).unwrap();
    let got = pfi(&mut tape, &store, &pp, sv, uv, 3).unwrap();
    // oracle: cross-group, mhlk, progressive gates, projections + full attn
    let half = 3;
    let sp = v.spatial();
    let mut x1 = vec![0.0; v.count()];
    let mut x2 = vec![0.0; v.count()];
    let (sd, ud) = (skip.to_f64_vec(), up.to_f64_vec());
    for c in 0..half {
        for i in 0..sp {
            x1[c * sp + i] = sd[c * sp + i];
            x1[(half + c) * sp + i] = ud[c * sp + i];
            x2[c * sp + i] = sd[(half + c) * sp + i];
            x2[(half + c) * sp + i] = ud[(half + c) * sp + i];
        }
    }
    let kernels: Vec<(usize, Vec<f64>, Vec<f64>)> = (0..3)
        .map(|i| {
            let (w, b, k) = pp.mhlk().head_conv(i);
            (k, export(&store, w), export(&store, b))
        })
        .collect();
    let local = tlk_oracle::gates::mhlk(
        &x1,
        v,
        &export(&store, pp.mhlk().projection().0),
        &export(&store, pp.mhlk().projection().1),
        &kernels,
    );
    let refined = tlk_oracle::gates::progressive_entangle(
        &local,
        v,
        &export(&store, pp.channel_attn().linear().0),
        &export(&store, pp.channel_attn().linear().1),
        &export(&store, pp.spatial_attn().conv().0),
        export(&store, pp.spatial_attn().conv().1)[0],
    );
    let dp = pp.desa();
    let qp = tlk_oracle::conv::pointwise(
        &x2,
        v,
        &export(&store, dp.query_projection().0),
        Some(&export(&store, dp.query_projection().1)),
        6,
    );
    let kb = dp.key_projection().1.map(|id| export(&store, id));
    let kp = tlk_oracle::conv::pointwise(&x2, v, &export(&store, dp.key_projection().0), kb.as_deref(), 6);
    let vp = tlk_oracle::conv::pointwise(
        &refined,
        v,
        &export(&store, dp.value_projection().0),
        Some(&export(&store, dp.value_projection().1)),
        6,
    );
    let attended = tlk_oracle::attn::full_attention_volume(&qp, &kp, &vp, v, 3);
    let want = tlk_oracle::conv::pointwise(
        &attended,
        v,
        &export(&store, dp.out_projection().0),
        Some(&export(&store, dp.out_projection().1)),
        6,
    );
    assert!(max_abs_diff(&tape.value(got).to_f64_vec(), &want) < 1e-5);
}

#[test]
fn criterion_structural_invariants() {
    let start = Instant::now();

    // shape preservation of both block kinds at every stage width
    for &c in &[96usize, 192, 384, 768] {
        let mut store = ParamStore::<f32>::new(1);
        let p = MixedParams::init(&mut store, "mix", c, 3, MlpVariant::AgMlp, 0.0).unwrap();
        let d = Dims::new(1, c, 2, 2, 2);
        let mut tape = Tape::new();
        let x = tape.leaf(rnd32(d, c as u64)).unwrap();
        let y = tlk_core::mixed_block(&mut tape, &store, &p, x, 3).unwrap();
        assert_eq!(tape.dims(y), d, "width {c}");
    }

    // residual identity under zeroed branch projections
    for kind in [InnerKind::Ptlk, InnerKind::Ctlk] {
        let mut store = ParamStore::<f64>::new(3);
        let p = BlockParams::init(&mut store, "blk", kind, 6, 3, MlpVariant::AgMlp, 0.0).unwrap();
        zero_block_outputs(&mut store, &p);
        let d = Dims::new(1, 6, 2, 3, 3);
        let x = rnd32(d, 17).cast::<f64>();
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone()).unwrap();
        let y = tlk_core::transformer_block(&mut tape, &store, &p, xv, 3).unwrap();
        let err = max_abs_diff(tape.value(y).data(), x.data());
        assert!(err < 1e-12, "{kind:?} residual identity: {err}");
    }

    // cross-group channel partition
    let d = Dims::new(1, 8, 1, 1, 2);
    let mut tape = Tape::<f64>::new();
    let skip = tape.leaf(rnd32(d, 5).cast()).unwrap();
    let up = tape.leaf(rnd32(d, 6).cast()).unwrap();
    let (x1, x2) = tlk_core::cross_group(&mut tape, skip, up).unwrap();
    let mut all: Vec<f64> = tape.value(x1).data().to_vec();
    all.extend(tape.value(x2).data());
    let mut orig: Vec<f64> = tape.value(skip).data().to_vec();
    orig.extend(tape.value(up).data());
    all.sort_by(f64::total_cmp);
    orig.sort_by(f64::total_cmp);
    assert_eq!(all, orig, "cross_group loses or duplicates channels");

    // end-to-end spatial preservation at 32^3 and 64^3 on the default config
    let (model, store) = build::<f32>(ModelConfig::default()).unwrap();
    for edge in [32usize, 64] {
        let img = rnd32(Dims::new(1, 1, edge, edge, edge), edge as u64);
        let logits = model.infer(&store, &img).unwrap();
        assert_eq!(logits.dims(), Dims::new(1, 16, edge, edge, edge), "edge {edge}");
    }

    pass(
        "structural-invariants",
        "block shapes at 96/192/384/768, residual identity, channel partition, 32^3 and 64^3 end-to-end".into(),
        start,
        Duration::from_secs(120),
    );
}

#[test]
fn criterion_desa_efficiency_ratio() {
    let start = Instant::now();
    // counter-measured ratio vs the closed form vox / (d + h + w)
    let mut details = Vec::new();
    for shape in [(4usize, 6usize, 8usize), (12, 12, 12), (6, 10, 14)] {
        let measured = desa_vs_full_ratio(shape, 96, 3);
        let vox = (shape.0 * shape.1 * shape.2) as f64;
        let closed = vox / (shape.0 + shape.1 + shape.2) as f64;
        let rel = (measured - closed).abs() / closed;
        assert!(rel <= 0.05, "shape {shape:?}: measured {measured}, closed form {closed}");
        details.push(format!("{shape:?} -> {measured:.2}"));
    }
    // cubic case: L^2 / 3
    assert_eq!(desa_vs_full_ratio((12, 12, 12), 96, 3), 48.0);
    pass("desa-efficiency", details.join(", "), start, Duration::from_secs(1));
}

#[test]
fn criterion_training_smoke() {
    let start = Instant::now();
    let cfg = toy_config();

    // determinism probe: two short runs must agree bit for bit
    let mut short = cfg.clone();
    short.train.steps = 5;
    let (a, _, _) = tlk_core::train_toy::<f32>(&short).unwrap();
    let (b, _, _) = tlk_core::train_toy::<f32>(&short).unwrap();
    assert_eq!(a.losses, b.losses, "training is not deterministic");

    let (report, _, _) = tlk_core::train_toy::<f32>(&cfg).unwrap();
    let first = report.losses[0];
    let last = *report.losses.last().unwrap();
    let fg = report.mean_foreground_dsc();
    assert!(last < first, "loss did not decrease: {first} -> {last}");
    assert!(fg >= 0.80, "mean foreground DSC {fg:.4} < 0.80 (dsc: {:?})", report.dsc);
    pass(
        "training-smoke",
        format!("loss {first:.3} -> {last:.3}, mean foreground DSC {fg:.3} over {} steps", report.losses.len()),
        start,
        Duration::from_secs(900),
    );
}

#[test]
fn criterion_decoder_ablation() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = toy_config();
    cfg.train.steps = 30;
    let cfg_path = write_config(dir.path(), &cfg);
    let csv_path = dir.path().join("decoder.csv");
    let out = Command::new(env!("CARGO_BIN_EXE_tlk"))
        .args([
            "ablate",
            "decoder",
            cfg_path.to_str().unwrap(),
            "--out",
            csv_path.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(&csv_path).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "variant,params,flops,dsc");
    assert_eq!(lines.len(), 3, "expected both decoder variants: {csv}");
    assert!(lines[1].starts_with("ced,"));
    assert!(lines[2].starts_with("plain_concat,"));
    for line in &lines[1..] {
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields.len(), 4);
        fields[1].parse::<u64>().unwrap();
        fields[2].parse::<u64>().unwrap();
        let dsc: f64 = fields[3].parse().unwrap();
        assert!((0.0..=1.0).contains(&dsc));
    }
    // both variants ran to completion; no claim about which wins
    pass("decoder-ablation", format!("{}, {}", lines[1], lines[2]), start, Duration::from_secs(600));
}
