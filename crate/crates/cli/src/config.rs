//! Run configuration: a TOML file with `[model]`, `[data]` and `[train]`
//! tables, overlaid by `section.key=value` overrides. Unknown keys are
//! rejected by name.

use std::fs;
use std::path::{Path, PathBuf};

use resvm::dataset::SynthConfig;
use resvm::model::{ModelConfig, Variant};
use resvm::training::{AdamWConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelSection,
    pub data: DataSection,
    pub train: TrainSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    /// `nano`, `micro` or `small`.
    pub preset: String,
    /// `plain` or `res`.
    pub variant: String,
    /// Square input side; images are resized to it. A multiple of 32.
    pub input_size: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            preset: "nano".into(),
            variant: "res".into(),
            input_size: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Generate the synthetic dataset inside the run directory.
    pub synth: bool,
    /// `root/class_name/image` tree; ignored when `synth` is set.
    pub root: Option<PathBuf>,
    /// Existing split list to apply instead of drawing a fresh split.
    pub split_list: Option<PathBuf>,
    /// Train share of each class. Unset means 0.7 for a directory and no
    /// hold-out for synthetic data, which trains on every image.
    pub split_ratio: Option<f64>,
    pub split_seed: u64,
    pub synth_classes: usize,
    pub synth_per_class: usize,
    pub synth_size: usize,
    pub synth_seed: u64,
    pub synth_noise: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        let s = SynthConfig::default();
        Self {
            synth: false,
            root: None,
            split_list: None,
            split_ratio: None,
            split_seed: 0,
            synth_classes: s.classes,
            synth_per_class: s.per_class,
            synth_size: s.size,
            synth_seed: s.seed,
            synth_noise: s.noise,
        }
    }
}

impl DataSection {
    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            classes: self.synth_classes,
            per_class: self.synth_per_class,
            size: self.synth_size,
            seed: self.synth_seed,
            noise: self.synth_noise,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub warmup_init: f64,
    pub label_smoothing: f64,
    pub ema_decay: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub scan_chunk: usize,
    pub train_eval_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            warmup_epochs: t.warmup_epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            lr_min: t.lr_min,
            warmup_init: t.warmup_init,
            label_smoothing: t.label_smoothing,
            ema_decay: t.ema_decay,
            weight_decay: t.optimizer.weight_decay,
            beta1: t.optimizer.beta1,
            beta2: t.optimizer.beta2,
            adam_eps: t.optimizer.eps,
            seed: t.seed,
            scan_chunk: t.scan_chunk,
            train_eval_every: t.train_eval_every,
        }
    }
}

impl TrainSection {
    pub fn to_train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            warmup_epochs: self.warmup_epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            lr_min: self.lr_min,
            warmup_init: self.warmup_init,
            label_smoothing: self.label_smoothing,
            ema_decay: self.ema_decay,
            optimizer: AdamWConfig {
                beta1: self.beta1,
                beta2: self.beta2,
                weight_decay: self.weight_decay,
                eps: self.adam_eps,
            },
            seed: self.seed,
            scan_chunk: self.scan_chunk,
            train_eval_every: self.train_eval_every,
        }
    }
}

impl RunConfig {
    /// Defaults, then `file`, then each `section.key=value` override in
    /// order. Override values parse as TOML, falling back to a bare string.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match file {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
                text.parse::<toml::Table>()
                    .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
            }
            None => toml::Table::new(),
        };
        for item in overrides {
            apply_override(&mut table, item)?;
        }
        let cfg: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn variant(&self) -> Result<Variant> {
        self.model
            .variant
            .parse()
            .map_err(|e: resvm::Error| CliError::Config(e.to_string()))
    }

    pub fn model_config(&self, num_classes: usize) -> Result<ModelConfig> {
        let mut cfg = ModelConfig::preset(&self.model.preset, num_classes, self.variant()?)?;
        cfg.input_size = (self.model.input_size, self.model.input_size);
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        self.variant()?;
        self.model_config(2)?;
        if !self.data.synth && self.data.root.is_none() {
            return Err(CliError::Config(
                "no training data: set data.root or data.synth".into(),
            ));
        }
        if let Some(r) = self.data.split_ratio {
            if !(r > 0.0 && r < 1.0) {
                return Err(CliError::Config(format!(
                    "data.split_ratio must lie in (0, 1), got {r}"
                )));
            }
        }
        if self.train.epochs == 0 || self.train.batch_size == 0 {
            return Err(CliError::Config(
                "train.epochs and train.batch_size must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }
}

fn apply_override(table: &mut toml::Table, item: &str) -> Result<()> {
    let bad = || CliError::Config(format!("override `{item}` is not section.key=value"));
    let (key, raw) = item.split_once('=').ok_or_else(bad)?;
    let (section, field) = key.trim().split_once('.').ok_or_else(bad)?;
    let value = parse_value(raw.trim());
    let entry = table
        .entry(section.to_string())
        .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    let toml::Value::Table(sub) = entry else {
        return Err(CliError::Config(format!("`{section}` is not a table")));
    };
    sub.insert(field.to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}
