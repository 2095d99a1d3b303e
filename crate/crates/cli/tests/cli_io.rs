//! End-to-end CLI behavior: exit codes, train outputs, checkpoint/infer
//! round trips, and the ablation CSVs.

use std::process::Command;

fn tlk() -> Command {
    Command::new(env!("CARGO_BIN_EXE_tlk"))
}

const TINY_CFG: &str = "\
model.num_classes = 3
model.base_channels = 6
model.stage_channels = 6,12,24,48
train.steps = 2
train.batch = 1
train.eval_batch = 1
seed = 5
";

#[test]
fn bad_flags_exit_two() {
    let out = tlk().arg("describe").output().unwrap(); // missing config operand
    assert_eq!(out.status.code(), Some(2));
    let out = tlk().arg("frobnicate").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn runtime_failures_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "model.depth = 4\n").unwrap();
    let out = tlk().args(["describe", cfg.to_str().unwrap()]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown key"));

    let missing = dir.path().join("nope.cfg");
    let out = tlk().args(["describe", missing.to_str().unwrap()]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn flops_rejects_indivisible_shape() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.cfg");
    std::fs::write(&cfg, TINY_CFG).unwrap();
    let out = tlk()
        .args(["flops", cfg.to_str().unwrap(), "--shape", "50x50x50"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("divisible"));
}

#[test]
fn train_then_infer_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.cfg");
    std::fs::write(&cfg, TINY_CFG).unwrap();
    let run_dir = dir.path().join("run");

    let out = tlk()
        .args(["train", cfg.to_str().unwrap(), "--out", run_dir.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    // report has the step,loss rows and dsc footer
    let report = std::fs::read_to_string(run_dir.join("report.csv")).unwrap();
    assert!(report.starts_with("step,loss\n0,"));
    assert_eq!(report.matches("# dsc,").count(), 3);
    // snapshot round-trips through the parser
    let snap = std::fs::read_to_string(run_dir.join("config.snapshot")).unwrap();
    let parsed = tlk_core::config::parse(&snap).unwrap();
    assert_eq!(parsed.train.steps, 2);

    // a synthetic volume through the trained checkpoint
    let vol = tlk_core::gen_volume::<f32>(5, 123, (32, 32, 32), 3).unwrap();
    let vol_path = dir.path().join("vol.tlk1");
    tlk_core::io::save_tensor(&vol_path, &vol.image).unwrap();
    let pred_path = dir.path().join("pred.tlk1");
    let out = tlk()
        .args([
            "infer",
            cfg.to_str().unwrap(),
            "--ckpt",
            run_dir.join("model.tlkc").to_str().unwrap(),
            "--in",
            vol_path.to_str().unwrap(),
            "--out",
            pred_path.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let pred: tlk_core::Tensor<f32> = tlk_core::io::load_tensor(&pred_path).unwrap();
    assert_eq!(pred.dims(), tlk_core::Dims::new(1, 1, 32, 32, 32));
    assert!(pred.data().iter().all(|&v| v == 0.0 || v == 1.0 || v == 2.0));
}

#[test]
fn infer_rejects_mismatched_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.cfg");
    std::fs::write(&cfg, TINY_CFG).unwrap();
    // checkpoint from a different architecture
    let other = tlk_core::ModelConfig {
        num_classes: 2,
        base_channels: 6,
        stage_channels: [6, 12, 24, 48],
        ..tlk_core::ModelConfig::default()
    };
    let (_, store) = tlk_core::build::<f32>(other).unwrap();
    let ckpt = dir.path().join("other.tlkc");
    tlk_core::io::save_checkpoint(&ckpt, &store).unwrap();
    let vol_path = dir.path().join("vol.tlk1");
    let vol = tlk_core::gen_volume::<f32>(5, 1, (32, 32, 32), 3).unwrap();
    tlk_core::io::save_tensor(&vol_path, &vol.image).unwrap();
    let out = tlk()
        .args([
            "infer",
            cfg.to_str().unwrap(),
            "--ckpt",
            ckpt.to_str().unwrap(),
            "--in",
            vol_path.to_str().unwrap(),
            "--out",
            dir.path().join("p.tlk1").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn ablate_heads_reports_monotone_params() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.cfg");
    // widths divisible by every head count in the sweep
    std::fs::write(
        &cfg,
        "model.num_classes = 3
model.base_channels = 12
model.stage_channels = 12,24,48,96
seed = 5
",
    )
    .unwrap();
    let out = tlk()
        .args(["ablate", "heads", cfg.to_str().unwrap(), "--steps", "0"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "variant,params,flops,dsc");
    let rows: Vec<Vec<&str>> = lines[1..].iter().map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[0][0], "heads_2");
    assert_eq!(rows[1][0], "heads_3");
    assert_eq!(rows[2][0], "heads_4");
    let params: Vec<u64> = rows.iter().map(|r| r[1].parse().unwrap()).collect();
    assert!(params[0] < params[1] && params[1] < params[2], "{params:?}");
    let flops: Vec<u64> = rows.iter().map(|r| r[2].parse().unwrap()).collect();
    assert!(flops[0] < flops[1] && flops[1] < flops[2], "{flops:?}");
}

#[test]
fn ablate_unknown_axis_fails() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.cfg");
    std::fs::write(&cfg, TINY_CFG).unwrap();
    let out = tlk().args(["ablate", "widths", cfg.to_str().unwrap()]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn gradcheck_filter_runs_quickly() {
    let out = tlk().args(["gradcheck", "--filter", "sigmoid"]).output().unwrap();
    assert!(out.status.success());
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("pass  sigmoid"));
}
