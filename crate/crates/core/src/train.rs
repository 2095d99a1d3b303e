//! Toy trainer: decoupled-weight-decay Adam with cosine learning-rate decay
//! on the synthetic ellipsoid task, plus the training report.

use std::path::Path;
use std::time::Instant;

use sha2::{Digest, Sha256};

use crate::autodiff::Tape;
use crate::config::{to_text, FullConfig};
use crate::error::{Error, Result};
use crate::model::{argmax_labels, build, Model};
use crate::ops::dsc;
use crate::params::ParamStore;
use crate::synth::gen_synthetic;
use crate::tensor::Real;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
/// Held-out volumes start at this stream index so they never collide with
/// training batches.
pub const EVAL_STREAM_BASE: u64 = 1 << 32;

/// AdamW over a parameter store.
pub struct AdamW {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: usize,
    pub weight_decay: f64,
}

impl AdamW {
    pub fn new<T: Real>(store: &ParamStore<T>, weight_decay: f64) -> Self {
        let m = store.ids().map(|id| vec![0.0; store.value(id).dims().count()]).collect();
        let v = store.ids().map(|id| vec![0.0; store.value(id).dims().count()]).collect();
        AdamW { m, v, step: 0, weight_decay }
    }

    /// One update from the accumulated gradients; leaves gradients zeroed.
    pub fn step<T: Real>(&mut self, store: &mut ParamStore<T>, lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.step as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.step as i32);
        for (i, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let grads: Vec<f64> = store.grad(id).data().iter().map(|g| g.to_f64()).collect();
            let value = store.value_mut(id);
            for (j, g) in grads.into_iter().enumerate() {
                let m = &mut self.m[i][j];
                let v = &mut self.v[i][j];
                *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                let p = value.data()[j].to_f64();
                let update = mhat / (vhat.sqrt() + ADAM_EPS) + self.weight_decay * p;
                value.data_mut()[j] = T::from_f64(p - lr * update);
            }
        }
        store.zero_grads();
    }
}

/// Cosine decay from `peak` to zero over `total` steps.
pub fn cosine_lr(peak: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return peak;
    }
    let t = step as f64 / total as f64;
    0.5 * peak * (1.0 + (std::f64::consts::PI * t).cos())
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub losses: Vec<f64>,
    /// (class, dsc) for every class on the held-out batch.
    pub dsc: Vec<(usize, f64)>,
    pub wall_seconds: f64,
    pub seed: u64,
    pub config_hash: String,
    pub diverged: bool,
}

impl TrainReport {
    pub fn mean_foreground_dsc(&self) -> f64 {
        let fg: Vec<f64> = self.dsc.iter().filter(|(c, _)| *c > 0).map(|(_, d)| *d).collect();
        fg.iter().sum::<f64>() / fg.len().max(1) as f64
    }

    /// `step,loss` rows then a `# dsc,class,value` footer.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,loss\n");
        for (i, l) in self.losses.iter().enumerate() {
            out.push_str(&format!("{i},{l}\n"));
        }
        for (class, d) in &self.dsc {
            out.push_str(&format!("# dsc,{class},{d}\n"));
        }
        out
    }
}

pub fn config_hash(cfg: &FullConfig) -> String {
    let mut hasher = Sha256::new();
    hasher.update(to_text(cfg).as_bytes());
    let digest = hasher.finalize();
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Evaluate per-class DSC on a fresh held-out batch.
pub fn evaluate<T: Real>(
    model: &Model,
    store: &ParamStore<T>,
    cfg: &FullConfig,
) -> Result<Vec<(usize, f64)>> {
    let eval = gen_synthetic::<T>(
        cfg.model.seed,
        EVAL_STREAM_BASE,
        cfg.train.eval_batch,
        cfg.train.volume,
        cfg.model.num_classes,
    )?;
    let logits = model.infer(store, &eval.images)?;
    let pred = argmax_labels(&logits);
    Ok((0..cfg.model.num_classes).map(|c| (c, dsc(&pred, &eval.labels, c))).collect())
}

/// Run the toy task: `steps` AdamW updates on streamed synthetic batches,
/// then held-out evaluation. Deterministic for a fixed config.
pub fn train_toy<T: Real>(cfg: &FullConfig) -> Result<(TrainReport, Model, ParamStore<T>)> {
    let start = Instant::now();
    let (model, mut store) = build::<T>(cfg.model.clone())?;
    let mut opt = AdamW::new(&store, cfg.train.weight_decay);
    let mut losses = Vec::with_capacity(cfg.train.steps);
    let mut diverged = false;

    for step in 0..cfg.train.steps {
        let batch = gen_synthetic::<T>(
            cfg.model.seed,
            (step * cfg.train.batch) as u64,
            cfg.train.batch,
            cfg.train.volume,
            cfg.model.num_classes,
        )?;
        let mut tape = Tape::new().train_mode(cfg.model.seed ^ step as u64);
        let img = tape.leaf(batch.images)?;
        let logits = model.forward(&mut tape, &store, img)?;
        let loss = tape.dice_ce_loss(logits, &batch.labels)?;
        let loss_val = tape.value(loss).scalar_value().to_f64();
        losses.push(loss_val);
        if !loss_val.is_finite() {
            diverged = true;
            break;
        }
        tape.backward(loss, &mut store)?;
        let lr = cosine_lr(cfg.train.lr, step, cfg.train.steps);
        opt.step(&mut store, lr);
    }

    let dsc = evaluate(&model, &store, cfg)?;
    let report = TrainReport {
        losses,
        dsc,
        wall_seconds: start.elapsed().as_secs_f64(),
        seed: cfg.model.seed,
        config_hash: config_hash(cfg),
        diverged,
    };
    if report.diverged {
        return Err(Error::Diverged { step: report.losses.len().saturating_sub(1) });
    }
    Ok((report, model, store))
}

/// Write report CSV and the config snapshot into `dir`.
pub fn write_report(dir: &Path, cfg: &FullConfig, report: &TrainReport) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("report.csv"), report.to_csv())?;
    std::fs::write(dir.join("config.snapshot"), to_text(cfg))?;
    Ok(())
}
