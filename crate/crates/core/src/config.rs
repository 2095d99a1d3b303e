//! Line-oriented `key = value` configuration files.
//!
//! Comments start with `#`, blank lines are ignored, every key must be one
//! of the documented set, and unknown keys are hard errors so a config that
//! parses is a config that reproduces.

use crate::blocks::MlpVariant;
use crate::error::{Error, Result};
use crate::model::{DecoderVariant, ModelConfig, Schedule};

/// Training hyperparameters for the toy task.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub volume: (usize, usize, usize),
    pub eval_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 200,
            batch: 2,
            lr: 1e-3,
            weight_decay: 3e-5,
            volume: (32, 32, 32),
            eval_batch: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct FullConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

pub const KNOWN_KEYS: &[&str] = &[
    "model.in_channels",
    "model.num_classes",
    "model.base_channels",
    "model.stage_channels",
    "model.heads",
    "model.mlp_variant",
    "model.decoder_variant",
    "model.schedule_variant",
    "model.dropout",
    "train.steps",
    "train.batch",
    "train.lr",
    "train.weight_decay",
    "train.volume",
    "train.eval_batch",
    "seed",
];

fn parse_usize(key: &str, v: &str) -> Result<usize> {
    v.parse().map_err(|_| Error::Config(format!("{key}: expected an integer, got {v:?}")))
}

fn parse_f64(key: &str, v: &str) -> Result<f64> {
    v.parse().map_err(|_| Error::Config(format!("{key}: expected a number, got {v:?}")))
}

/// `32` (cube) or `DxHxW`.
fn parse_volume(key: &str, v: &str) -> Result<(usize, usize, usize)> {
    let parts: Vec<&str> = v.split('x').collect();
    match parts.as_slice() {
        [one] => {
            let s = parse_usize(key, one)?;
            Ok((s, s, s))
        }
        [d, h, w] => Ok((parse_usize(key, d)?, parse_usize(key, h)?, parse_usize(key, w)?)),
        _ => Err(Error::Config(format!("{key}: expected S or DxHxW, got {v:?}"))),
    }
}

pub fn parse(text: &str) -> Result<FullConfig> {
    let mut cfg = FullConfig::default();
    let mut schedule_given = false;
    let mut stages_given = false;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {raw:?}", lineno + 1)))?;
        let key = key.trim();
        let value = value.trim();
        if !KNOWN_KEYS.contains(&key) {
            return Err(Error::Config(format!("line {}: unknown key {key:?}", lineno + 1)));
        }
        match key {
            "model.in_channels" => cfg.model.in_channels = parse_usize(key, value)?,
            "model.num_classes" => cfg.model.num_classes = parse_usize(key, value)?,
            "model.base_channels" => cfg.model.base_channels = parse_usize(key, value)?,
            "model.stage_channels" => {
                let parts: Vec<usize> = value
                    .split(',')
                    .map(|p| parse_usize(key, p.trim()))
                    .collect::<Result<_>>()?;
                if parts.len() != 4 {
                    return Err(Error::Config(format!(
                        "{key}: expected exactly 4 comma-separated widths, got {}",
                        parts.len()
                    )));
                }
                cfg.model.stage_channels = [parts[0], parts[1], parts[2], parts[3]];
                stages_given = true;
            }
            "model.heads" => cfg.model.heads = parse_usize(key, value)?,
            "model.mlp_variant" => {
                cfg.model.mlp_variant = MlpVariant::parse(value).ok_or_else(|| {
                    Error::Config(format!("{key}: expected ffn|mlp|ag_mlp, got {value:?}"))
                })?
            }
            "model.decoder_variant" => {
                cfg.model.decoder_variant = DecoderVariant::parse(value).ok_or_else(|| {
                    Error::Config(format!("{key}: expected ced|plain_concat, got {value:?}"))
                })?
            }
            "model.schedule_variant" => {
                cfg.model.schedule = Schedule::parse(value).ok_or_else(|| {
                    Error::Config(format!("{key}: expected narrow|stem_double, got {value:?}"))
                })?;
                schedule_given = true;
            }
            "model.dropout" => cfg.model.dropout = parse_f64(key, value)?,
            "train.steps" => cfg.train.steps = parse_usize(key, value)?,
            "train.batch" => cfg.train.batch = parse_usize(key, value)?,
            "train.lr" => cfg.train.lr = parse_f64(key, value)?,
            "train.weight_decay" => cfg.train.weight_decay = parse_f64(key, value)?,
            "train.volume" => cfg.train.volume = parse_volume(key, value)?,
            "train.eval_batch" => cfg.train.eval_batch = parse_usize(key, value)?,
            "seed" => cfg.model.seed = value
                .parse()
                .map_err(|_| Error::Config(format!("seed: expected an integer, got {value:?}")))?,
            _ => unreachable!("key set checked above"),
        }
    }
    // a bare schedule switch picks that schedule's stock widths
    if schedule_given && !stages_given {
        cfg.model.stage_channels = match cfg.model.schedule {
            Schedule::Narrow => [48, 96, 192, 384],
            Schedule::StemDouble => [96, 192, 384, 768],
        };
    }
    cfg.model.validate()?;
    Ok(cfg)
}

pub fn parse_file(path: &std::path::Path) -> Result<FullConfig> {
    parse(&std::fs::read_to_string(path)?)
}

/// Canonical text round-trip, written next to training outputs.
pub fn to_text(cfg: &FullConfig) -> String {
    let m = &cfg.model;
    let t = &cfg.train;
    let sc = m.stage_channels;
    format!(
        "model.in_channels = {}\n\
         model.num_classes = {}\n\
         model.base_channels = {}\n\
         model.stage_channels = {},{},{},{}\n\
         model.heads = {}\n\
         model.mlp_variant = {}\n\
         model.decoder_variant = {}\n\
         model.schedule_variant = {}\n\
         model.dropout = {}\n\
         train.steps = {}\n\
         train.batch = {}\n\
         train.lr = {}\n\
         train.weight_decay = {}\n\
         train.volume = {}x{}x{}\n\
         train.eval_batch = {}\n\
         seed = {}\n",
        m.in_channels,
        m.num_classes,
        m.base_channels,
        sc[0],
        sc[1],
        sc[2],
        sc[3],
        m.heads,
        m.mlp_variant.name(),
        m.decoder_variant.name(),
        m.schedule.name(),
        m.dropout,
        t.steps,
        t.batch,
        t.lr,
        t.weight_decay,
        t.volume.0,
        t.volume.1,
        t.volume.2,
        t.eval_batch,
        m.seed,
    )
}
