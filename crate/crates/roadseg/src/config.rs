//! Flat `key=value` configuration with dotted keys.
//!
//! Blank lines and lines starting with `#` are ignored. Later assignments
//! win, so command-line overrides are applied after the file.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use roadseg_core::data::Split;
use roadseg_core::decoder::{InterScaleColumns, Topology};
use roadseg_core::geometry::HeightEstimator;
use roadseg_core::losses::{DepthMaskSource, LossConfig, Reduction};
use roadseg_core::model::ModelConfig;

use crate::error::{Result, RunError};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub decay_factor: f64,
    /// Epochs between learning-rate decays.
    pub decay_interval: usize,
    pub max_epochs: usize,
    /// Epochs without a validation improvement before stopping.
    pub patience: usize,
    pub batch_size: usize,
    pub augment: bool,
    pub seed: u64,
    pub loss: LossConfig,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            decay_factor: 0.5,
            decay_interval: 20,
            max_epochs: 100,
            patience: 10,
            batch_size: 4,
            augment: true,
            seed: 0,
            loss: LossConfig::default(),
            model: ModelConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub split: Split,
    pub train_frames: usize,
    pub val_frames: usize,
    pub width: usize,
    pub height: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            split: Split::Hard,
            train_frames: 160,
            val_frames: 40,
            width: 128,
            height: 128,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub data: DataConfig,
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| RunError::Config(format!("invalid value '{value}' for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "on" | "yes" => Ok(true),
        "false" | "0" | "off" | "no" => Ok(false),
        _ => Err(RunError::Config(format!("invalid boolean '{value}' for {key}"))),
    }
}

fn choice<T: Copy>(key: &str, value: &str, options: &[(&str, T)]) -> Result<T> {
    options
        .iter()
        .find(|(name, _)| *name == value.trim())
        .map(|(_, v)| *v)
        .ok_or_else(|| {
            let names: Vec<&str> = options.iter().map(|(n, _)| *n).collect();
            RunError::Config(format!("{key} must be one of {}, got '{value}'", names.join("|")))
        })
}

const SPLITS: &[(&str, Split)] = &[("easy", Split::Easy), ("hard", Split::Hard)];
const INTER_SCALE: &[(&str, InterScaleColumns)] = &[("final", InterScaleColumns::Final), ("all", InterScaleColumns::All)];
const REDUCTIONS: &[(&str, Reduction)] = &[("sum", Reduction::Sum), ("mean", Reduction::Mean)];
const DEPTH_MASKS: &[(&str, DepthMaskSource)] = &[
    ("predicted", DepthMaskSource::Predicted),
    ("ground_truth", DepthMaskSource::GroundTruth),
];
const HEIGHTS: &[(&str, HeightEstimator)] = &[("mean", HeightEstimator::Mean), ("median", HeightEstimator::Median)];

fn name_of<T: PartialEq + Copy>(options: &[(&'static str, T)], v: T) -> &'static str {
    options.iter().find(|(_, o)| *o == v).map(|(n, _)| *n).unwrap_or("?")
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        let sw = &mut t.model.switches;
        match key.trim() {
            "seed" => {
                t.seed = parse(key, value)?;
                t.model.seed = t.seed;
            }
            "train.lr" => t.lr = parse(key, value)?,
            "train.decay_factor" => t.decay_factor = parse(key, value)?,
            "train.decay_interval" => t.decay_interval = parse(key, value)?,
            "train.max_epochs" => t.max_epochs = parse(key, value)?,
            "train.patience" => t.patience = parse(key, value)?,
            "train.batch_size" => t.batch_size = parse(key, value)?,
            "train.augment" => t.augment = parse_bool(key, value)?,
            "loss.lambda_s" => t.loss.lambda_s = parse(key, value)?,
            "loss.lambda_d" => t.loss.lambda_d = parse(key, value)?,
            "loss.radius" => t.loss.radius = parse(key, value)?,
            "loss.eps" => t.loss.eps = parse(key, value)?,
            "loss.reduction" => t.loss.reduction = choice(key, value, REDUCTIONS)?,
            "loss.depth_mask" => t.loss.depth_mask = choice(key, value, DEPTH_MASKS)?,
            "loss.height_estimator" => t.loss.height_estimator = choice(key, value, HEIGHTS)?,
            "model.channels" => {
                t.model.channels = value
                    .split(',')
                    .map(|c| parse(key, c))
                    .collect::<Result<Vec<usize>>>()?;
            }
            "model.patch" => t.model.patch = parse(key, value)?,
            "model.decoder" => {
                t.model.decoder = Topology::parse(value.trim())
                    .ok_or_else(|| RunError::Config(format!("unknown decoder '{value}'")))?;
            }
            "model.inter_scale" => t.model.inter_scale = choice(key, value, INTER_SCALE)?,
            "fusion.spatial.enabled" => sw.spatial = parse_bool(key, value)?,
            "fusion.channel.enabled" => sw.channel = parse_bool(key, value)?,
            "fusion.atrous.enabled" => sw.atrous = parse_bool(key, value)?,
            "fusion.hfcd.enabled" => sw.hfcd = parse_bool(key, value)?,
            "fusion.awfr.enabled" => sw.awfr = parse_bool(key, value)?,
            "fusion.baseline_sum" => sw.baseline_sum = parse_bool(key, value)?,
            "data.split" => self.data.split = choice(key, value, SPLITS)?,
            "data.train_frames" => self.data.train_frames = parse(key, value)?,
            "data.val_frames" => self.data.val_frames = parse(key, value)?,
            "data.width" => self.data.width = parse(key, value)?,
            "data.height" => self.data.height = parse(key, value)?,
            "data.seed" => self.data.seed = parse(key, value)?,
            other => return Err(RunError::Config(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    /// Applies `KEY=VALUE`.
    pub fn apply(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| RunError::Config(format!("expected KEY=VALUE, got '{assignment}'")))?;
        self.set(k, v)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            self.apply(line)
                .map_err(|e| RunError::Config(format!("line {}: {}", i + 1, e)))?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| RunError::io(path, e))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in pairs {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    /// Every key with its current value, in a stable order.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let t = &self.train;
        let sw = &t.model.switches;
        let d = &self.data;
        fn s(v: impl Display) -> String {
            v.to_string()
        }
        let channels: Vec<String> = t.model.channels.iter().map(|c| c.to_string()).collect();
        [
            ("seed", s(t.seed)),
            ("train.lr", s(t.lr)),
            ("train.decay_factor", s(t.decay_factor)),
            ("train.decay_interval", s(t.decay_interval)),
            ("train.max_epochs", s(t.max_epochs)),
            ("train.patience", s(t.patience)),
            ("train.batch_size", s(t.batch_size)),
            ("train.augment", s(t.augment)),
            ("loss.lambda_s", s(t.loss.lambda_s)),
            ("loss.lambda_d", s(t.loss.lambda_d)),
            ("loss.radius", s(t.loss.radius)),
            ("loss.eps", s(t.loss.eps)),
            ("loss.reduction", s(name_of(REDUCTIONS, t.loss.reduction))),
            ("loss.depth_mask", s(name_of(DEPTH_MASKS, t.loss.depth_mask))),
            ("loss.height_estimator", s(name_of(HEIGHTS, t.loss.height_estimator))),
            ("model.channels", channels.join(",")),
            ("model.patch", s(t.model.patch)),
            ("model.decoder", s(t.model.decoder.name())),
            ("model.inter_scale", s(name_of(INTER_SCALE, t.model.inter_scale))),
            ("fusion.spatial.enabled", s(sw.spatial)),
            ("fusion.channel.enabled", s(sw.channel)),
            ("fusion.atrous.enabled", s(sw.atrous)),
            ("fusion.hfcd.enabled", s(sw.hfcd)),
            ("fusion.awfr.enabled", s(sw.awfr)),
            ("fusion.baseline_sum", s(sw.baseline_sum)),
            ("data.split", s(name_of(SPLITS, d.split))),
            ("data.train_frames", s(d.train_frames)),
            ("data.val_frames", s(d.val_frames)),
            ("data.width", s(d.width)),
            ("data.height", s(d.height)),
            ("data.seed", s(d.seed)),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_owned(), v))
        .collect()
    }

    pub fn to_text(&self) -> String {
        self.to_pairs().iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.train.model.check_input(self.data.width, self.data.height)?;
        Ok(())
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = self.lr > 0.0 && self.lr.is_finite() && self.decay_factor > 0.0 && self.decay_factor <= 1.0;
        if !positive || self.decay_interval == 0 || self.max_epochs == 0 || self.batch_size == 0 {
            return Err(RunError::Config(
                "learning rate, decay and epoch counts must be positive (decay factor at most 1)".into(),
            ));
        }
        if self.patience == 0 {
            return Err(RunError::Config("train.patience must be at least 1".into()));
        }
        self.loss.validate()?;
        self.model.validate()?;
        Ok(())
    }
}
