//! Flat `section.key = value` run configuration with command-line overrides.
//!
//! ```text
//! # comments start with '#'
//! seed = 7
//! ofdm.l_f = 16
//! train.snr = uniform:0:20
//! model.variant = dual
//! ```

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use crate::csi::EstimatorKind;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Variant};
use crate::ofdm::{ChannelMode, OfdmConfig};
use crate::train::{SnrMode, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataSource {
    Synthetic,
    Cifar10,
    Raw,
}

impl FromStr for DataSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "synthetic" => Ok(DataSource::Synthetic),
            "cifar10" => Ok(DataSource::Cifar10),
            "raw" => Ok(DataSource::Raw),
            other => Err(Error::Config(format!(
                "unknown data.source {other:?} (expected synthetic|cifar10|raw)"
            ))),
        }
    }
}

impl std::fmt::Display for DataSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DataSource::Synthetic => "synthetic",
            DataSource::Cifar10 => "cifar10",
            DataSource::Raw => "raw",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub source: DataSource,
    pub paths: Vec<PathBuf>,
    /// Synthetic image count, or a cap on loaded images (0 = all).
    pub count: usize,
    pub val_fraction: f64,
    /// Square random crop applied after loading (0 = none).
    pub crop: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub realizations: usize,
    pub snrs: Vec<f64>,
    /// SNR for single-point commands (eval, report-power, csi-matrix).
    pub mu: f64,
    pub estimator: EstimatorKind,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub ofdm: OfdmConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub data: DataConfig,
    pub ckpt_perfect: Option<PathBuf>,
    pub ckpt_mmse: Option<PathBuf>,
    pub bench_trials: usize,
}

impl Default for RunConfig {
    /// The desk-scale setup: 500 synthetic 1×8×8 images on 16 subcarriers.
    fn default() -> Self {
        let model = ModelConfig::toy();
        Self {
            seed: 0,
            out: PathBuf::from("out"),
            ofdm: OfdmConfig {
                subcarriers: model.subcarriers,
                symbols: model.symbols,
                ..OfdmConfig::default()
            },
            model,
            train: TrainConfig::default(),
            eval: EvalConfig {
                realizations: 10,
                snrs: vec![0.0, 5.0, 10.0, 15.0, 20.0],
                mu: 5.0,
                estimator: EstimatorKind::Mmse,
                checkpoint: None,
            },
            data: DataConfig {
                source: DataSource::Synthetic,
                paths: Vec::new(),
                count: 500,
                val_fraction: 0.1,
                crop: 0,
            },
            ckpt_perfect: None,
            ckpt_mmse: None,
            bench_trials: 10_000,
        }
    }
}

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_list<V: FromStr>(key: &str, value: &str) -> Result<Vec<V>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn join<V: std::fmt::Display>(v: &[V]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn opt_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

/// Every recognized key, in the order the resolved form lists them.
pub const KEYS: &[&str] = &[
    "seed",
    "out",
    "ofdm.l_f",
    "ofdm.n_s",
    "ofdm.n_p",
    "ofdm.cp_len",
    "ofdm.l_t",
    "ofdm.channel",
    "ofdm.power",
    "model.image",
    "model.widths",
    "model.strides",
    "model.kernel",
    "model.padding",
    "model.reduction",
    "model.variant",
    "csi.estimator",
    "train.snr",
    "train.batch",
    "train.epochs",
    "train.patience",
    "train.lr",
    "train.val_realizations",
    "eval.realizations",
    "eval.snrs",
    "eval.mu",
    "eval.estimator",
    "eval.checkpoint",
    "data.source",
    "data.paths",
    "data.count",
    "data.val_fraction",
    "data.crop",
    "matrix.ckpt_perfect",
    "matrix.ckpt_mmse",
    "bench.trials",
];

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "seed" => self.seed = parse(key, v)?,
            "out" => self.out = PathBuf::from(v),
            "ofdm.l_f" => self.ofdm.subcarriers = parse(key, v)?,
            "ofdm.n_s" => self.ofdm.symbols = parse(key, v)?,
            "ofdm.n_p" => self.ofdm.pilots = parse(key, v)?,
            "ofdm.cp_len" => self.ofdm.cp_len = parse(key, v)?,
            "ofdm.l_t" => self.ofdm.taps = parse(key, v)?,
            "ofdm.channel" => self.ofdm.channel = v.parse::<ChannelMode>()?,
            "ofdm.power" => self.ofdm.power = parse(key, v)?,
            "model.image" => {
                let dims: Vec<usize> = v.split('x').map(|d| parse(key, d)).collect::<Result<_>>()?;
                let [c, h, w] = dims[..] else {
                    return Err(Error::Config(format!("model.image must look like CxHxW, got {v:?}")));
                };
                (self.model.channels, self.model.height, self.model.width) = (c, h, w);
            }
            "model.widths" => self.model.widths = parse_list(key, v)?,
            "model.strides" => self.model.strides = parse_list(key, v)?,
            "model.kernel" => self.model.kernel = parse(key, v)?,
            "model.padding" => self.model.padding = parse(key, v)?,
            "model.reduction" => self.model.attention_reduction = parse(key, v)?,
            "model.variant" => self.model.variant = v.parse::<Variant>()?,
            "csi.estimator" => self.train.estimator = v.parse()?,
            "train.snr" => self.train.snr = v.parse::<SnrMode>()?,
            "train.batch" => self.train.batch = parse(key, v)?,
            "train.epochs" => self.train.epochs = parse(key, v)?,
            "train.patience" => self.train.patience = parse(key, v)?,
            "train.lr" => self.train.lr = parse(key, v)?,
            "train.val_realizations" => self.train.val_realizations = parse(key, v)?,
            "eval.realizations" => self.eval.realizations = parse(key, v)?,
            "eval.snrs" => self.eval.snrs = parse_list(key, v)?,
            "eval.mu" => self.eval.mu = parse(key, v)?,
            "eval.estimator" => self.eval.estimator = v.parse()?,
            "eval.checkpoint" => self.eval.checkpoint = opt_path(v),
            "data.source" => self.data.source = v.parse()?,
            "data.paths" => self.data.paths = v.split(',').filter_map(|p| opt_path(p.trim())).collect(),
            "data.count" => self.data.count = parse(key, v)?,
            "data.val_fraction" => self.data.val_fraction = parse(key, v)?,
            "data.crop" => self.data.crop = parse(key, v)?,
            "matrix.ckpt_perfect" => self.ckpt_perfect = opt_path(v),
            "matrix.ckpt_mmse" => self.ckpt_mmse = opt_path(v),
            "bench.trials" => self.bench_trials = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown configuration key {other:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {raw:?}", n + 1)))?;
            self.set(k.trim(), v)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects key=value, got {pair:?}")))?;
        self.set(k.trim(), v)
    }

    /// The model configuration with the OFDM-derived fields filled in.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            subcarriers: self.ofdm.subcarriers,
            symbols: self.ofdm.symbols,
            power: self.ofdm.power,
            ..self.model.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.ofdm.validate()?;
        self.model_config().validate()?;
        self.train.validate()?;
        if self.eval.realizations == 0 {
            return Err(Error::Config("eval.realizations must be at least 1".into()));
        }
        if self.eval.snrs.is_empty() || self.eval.snrs.iter().any(|v| !v.is_finite()) || !self.eval.mu.is_finite() {
            return Err(Error::Config("eval.snrs and eval.mu must be finite".into()));
        }
        if !(self.data.val_fraction > 0.0 && self.data.val_fraction < 1.0) {
            return Err(Error::Config(format!(
                "data.val_fraction must lie in (0,1), got {}",
                self.data.val_fraction
            )));
        }
        if self.data.source != DataSource::Synthetic && self.data.paths.is_empty() {
            return Err(Error::Config(format!("data.source = {} needs data.paths", self.data.source)));
        }
        if self.data.source == DataSource::Synthetic && self.data.count < 2 {
            return Err(Error::Config("data.count must be at least 2 for synthetic data".into()));
        }
        if self.bench_trials == 0 {
            return Err(Error::Config("bench.trials must be positive".into()));
        }
        Ok(())
    }

    fn value_of(&self, key: &str) -> String {
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        match key {
            "seed" => self.seed.to_string(),
            "out" => self.out.display().to_string(),
            "ofdm.l_f" => self.ofdm.subcarriers.to_string(),
            "ofdm.n_s" => self.ofdm.symbols.to_string(),
            "ofdm.n_p" => self.ofdm.pilots.to_string(),
            "ofdm.cp_len" => self.ofdm.cp_len.to_string(),
            "ofdm.l_t" => self.ofdm.taps.to_string(),
            "ofdm.channel" => self.ofdm.channel.to_string(),
            "ofdm.power" => self.ofdm.power.to_string(),
            "model.image" => format!("{}x{}x{}", self.model.channels, self.model.height, self.model.width),
            "model.widths" => join(&self.model.widths),
            "model.strides" => join(&self.model.strides),
            "model.kernel" => self.model.kernel.to_string(),
            "model.padding" => self.model.padding.to_string(),
            "model.reduction" => self.model.attention_reduction.to_string(),
            "model.variant" => self.model.variant.to_string(),
            "csi.estimator" => self.train.estimator.to_string(),
            "train.snr" => self.train.snr.to_string(),
            "train.batch" => self.train.batch.to_string(),
            "train.epochs" => self.train.epochs.to_string(),
            "train.patience" => self.train.patience.to_string(),
            "train.lr" => self.train.lr.to_string(),
            "train.val_realizations" => self.train.val_realizations.to_string(),
            "eval.realizations" => self.eval.realizations.to_string(),
            "eval.snrs" => join(&self.eval.snrs),
            "eval.mu" => self.eval.mu.to_string(),
            "eval.estimator" => self.eval.estimator.to_string(),
            "eval.checkpoint" => path(&self.eval.checkpoint),
            "data.source" => self.data.source.to_string(),
            "data.paths" => join(&self.data.paths.iter().map(|p| p.display().to_string()).collect::<Vec<_>>()),
            "data.count" => self.data.count.to_string(),
            "data.val_fraction" => self.data.val_fraction.to_string(),
            "data.crop" => self.data.crop.to_string(),
            "matrix.ckpt_perfect" => path(&self.ckpt_perfect),
            "matrix.ckpt_mmse" => path(&self.ckpt_mmse),
            "bench.trials" => self.bench_trials.to_string(),
            _ => unreachable!("KEYS and value_of disagree on {key}"),
        }
    }

    /// Every effective setting, one `key = value` per line; parsing it back
    /// reproduces `self`.
    pub fn resolved(&self) -> String {
        let mut s = String::new();
        for key in KEYS {
            let _ = writeln!(s, "{key} = {}", self.value_of(key));
        }
        s
    }
}
