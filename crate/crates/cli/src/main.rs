//! `tlk`: cost reports, gradient checks, toy training, inference, and
//! variant ablations for the large-kernel / axial-attention segmentation
//! network.

use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use tlk_core::config::{parse_file, FullConfig};
use tlk_core::cost::{count_flops, count_params, desa_vs_full_ratio, CostReport};
use tlk_core::io::{load_checkpoint, load_tensor, save_checkpoint, save_tensor};
use tlk_core::model::{argmax_labels, build, DecoderVariant};
use tlk_core::train::{evaluate, train_toy, write_report};
use tlk_core::{Dims, MlpVariant, Tensor};

#[derive(Parser)]
#[command(name = "tlk", about = "Volumetric segmentation network toolkit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the per-module parameter tally of a configuration.
    Describe { config: PathBuf },
    /// Print the per-module forward FLOP tally at a given input shape.
    Flops {
        config: PathBuf,
        /// Input shape as DxHxW or a single cubic edge length.
        #[arg(long, default_value = "96x96x96")]
        shape: String,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck {
        /// Only run checks whose name contains this substring.
        #[arg(long)]
        filter: Option<String>,
        #[arg(long, default_value_t = 2024)]
        seed: u64,
    },
    /// Train on the synthetic task and write report, config snapshot, and
    /// checkpoint into the output directory.
    Train {
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Segment a TLK1 volume with a trained checkpoint.
    Infer {
        config: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sweep a variant axis and emit a comparison CSV.
    Ablate {
        /// Which axis to sweep: heads, mlp, or decoder.
        axis: String,
        config: PathBuf,
        /// Override the training steps per variant (0 evaluates untrained).
        #[arg(long)]
        steps: Option<usize>,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_shape(s: &str) -> anyhow::Result<(usize, usize, usize)> {
    let parts: Vec<&str> = s.split('x').collect();
    let p = |v: &str| v.parse::<usize>().context("shape components must be integers");
    match parts.as_slice() {
        [one] => {
            let e = p(one)?;
            Ok((e, e, e))
        }
        [d, h, w] => Ok((p(d)?, p(h)?, p(w)?)),
        _ => bail!("expected DxHxW or a single edge length, got {s:?}"),
    }
}

fn print_report(report: &CostReport, with_flops: bool) {
    if with_flops {
        println!("{:<20} {:>14} {:>18}", "module", "params", "flops");
        for item in &report.items {
            println!("{:<20} {:>14} {:>18}", item.name, item.params, item.flops);
        }
        println!("{:<20} {:>14} {:>18}", "total", report.total_params(), report.total_flops());
        println!(
            "total: {:.2} M params, {:.2} G flops",
            report.total_params() as f64 / 1e6,
            report.total_flops() as f64 / 1e9
        );
    } else {
        println!("{:<20} {:>14}", "module", "params");
        for item in &report.items {
            println!("{:<20} {:>14}", item.name, item.params);
        }
        println!("{:<20} {:>14}", "total", report.total_params());
        println!("total: {:.2} M params", report.total_params() as f64 / 1e6);
    }
}

fn run() -> anyhow::Result<()> {
    match Cli::parse().command {
        Command::Describe { config } => {
            let cfg = parse_file(&config)?;
            let report = count_params(&cfg.model)?;
            print_report(&report, false);
        }
        Command::Flops { config, shape } => {
            let cfg = parse_file(&config)?;
            let shape = parse_shape(&shape)?;
            let report = count_flops(&cfg.model, shape)?;
            print_report(&report, true);
            println!(
                "full-vs-axial attention score-flop ratio at {}x{}x{}: {:.2}",
                shape.0,
                shape.1,
                shape.2,
                desa_vs_full_ratio(shape, cfg.model.stage_channels[0], cfg.model.heads)
            );
        }
        Command::Gradcheck { filter, seed } => {
            let report = tlk_core::run_suite(seed, filter.as_deref())?;
            if report.entries.is_empty() {
                bail!("no gradient checks matched the filter");
            }
            let mut failed = false;
            for e in &report.entries {
                let status = if e.passed() { "pass" } else { "FAIL" };
                println!("{status}  {:<32} {:>12.3e} (< {:.0e})", e.name, e.max_rel_err, e.threshold);
                failed |= !e.passed();
            }
            if failed {
                bail!("gradient checks failed");
            }
        }
        Command::Train { config, out } => {
            let cfg = parse_file(&config)?;
            let (report, _, store) = train_toy::<f32>(&cfg)?;
            write_report(&out, &cfg, &report)?;
            save_checkpoint(&out.join("model.tlkc"), &store)?;
            println!(
                "steps {}  first loss {:.4}  final loss {:.4}  mean foreground dsc {:.4}  ({:.1} s)",
                report.losses.len(),
                report.losses.first().copied().unwrap_or(f64::NAN),
                report.losses.last().copied().unwrap_or(f64::NAN),
                report.mean_foreground_dsc(),
                report.wall_seconds,
            );
            println!("wrote {}", out.display());
        }
        Command::Infer { config, ckpt, input, out } => {
            let cfg = parse_file(&config)?;
            let (model, mut store) = build::<f32>(cfg.model.clone())?;
            load_checkpoint(&ckpt, &mut store)?;
            let volume: Tensor<f32> = load_tensor(&input)?;
            let logits = model.infer(&store, &volume)?;
            let labels = argmax_labels(&logits);
            let d = logits.dims();
            let data: Vec<f64> = labels.data().iter().map(|&l| l as f64).collect();
            let pred = Tensor::<f32>::from_f64(Dims::new(d.n, 1, d.d, d.h, d.w), &data)?;
            save_tensor(&out, &pred)?;
            println!("wrote {}", out.display());
        }
        Command::Ablate { axis, config, steps, out } => {
            let cfg = parse_file(&config)?;
            let csv = ablate(&axis, cfg, steps)?;
            match out {
                Some(path) => {
                    std::fs::write(&path, csv)?;
                    println!("wrote {}", path.display());
                }
                None => print!("{csv}"),
            }
        }
    }
    Ok(())
}

/// Sweep one variant axis; each row reports parameters, forward FLOPs at
/// the training volume, and held-out DSC after the toy run.
fn ablate(axis: &str, base: FullConfig, steps: Option<usize>) -> anyhow::Result<String> {
    let mut variants: Vec<(String, FullConfig)> = Vec::new();
    match axis {
        "heads" => {
            for n in [2usize, 3, 4] {
                let mut cfg = base.clone();
                cfg.model.heads = n;
                variants.push((format!("heads_{n}"), cfg));
            }
        }
        "mlp" => {
            for v in [MlpVariant::Ffn, MlpVariant::Mlp, MlpVariant::AgMlp] {
                let mut cfg = base.clone();
                cfg.model.mlp_variant = v;
                variants.push((v.name().to_string(), cfg));
            }
        }
        "decoder" => {
            for v in [DecoderVariant::Ced, DecoderVariant::PlainConcat] {
                let mut cfg = base.clone();
                cfg.model.decoder_variant = v;
                variants.push((v.name().to_string(), cfg));
            }
        }
        other => bail!("unknown ablation axis {other:?} (expected heads, mlp, or decoder)"),
    }

    let mut csv = String::from("variant,params,flops,dsc\n");
    for (name, mut cfg) in variants {
        if let Some(s) = steps {
            cfg.train.steps = s;
        }
        cfg.model.validate()?;
        let params = count_params(&cfg.model)?.total_params();
        let flops = count_flops(&cfg.model, cfg.train.volume)?.total_flops();
        let dsc = if cfg.train.steps == 0 {
            let (model, store) = build::<f32>(cfg.model.clone())?;
            let per_class = evaluate(&model, &store, &cfg)?;
            mean_foreground(&per_class)
        } else {
            let (report, _, _) = train_toy::<f32>(&cfg)?;
            report.mean_foreground_dsc()
        };
        csv.push_str(&format!("{name},{params},{flops},{dsc:.4}\n"));
    }
    Ok(csv)
}

fn mean_foreground(per_class: &[(usize, f64)]) -> f64 {
    let fg: Vec<f64> = per_class.iter().filter(|(c, _)| *c > 0).map(|(_, d)| *d).collect();
    fg.iter().sum::<f64>() / fg.len().max(1) as f64
}

fn main() {
    if let Err(err) = run() {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}
