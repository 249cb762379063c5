//! Trainer configuration file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use ftkit_core::augment::{AugmentOp, AugmentPipeline, DEFAULT_BATCH_SIZE};
use ftkit_core::data::SplitSpec;
use ftkit_core::error::{Error, Result};
use ftkit_core::models::ModelConfig;
use ftkit_core::optim::{EarlyStopConfig, MonitorMode, PlateauConfig, DEFAULT_LR, DEFAULT_MAX_NORM};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    ValLoss,
    ValAcc,
}

impl Metric {
    pub fn natural_mode(self) -> MonitorMode {
        match self {
            Metric::ValLoss => MonitorMode::Min,
            Metric::ValAcc => MonitorMode::Max,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchedulerConfig {
    pub factor: f64,
    pub patience: usize,
    pub min_lr: f64,
    pub monitor: Metric,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        let p = PlateauConfig::default();
        Self {
            factor: p.factor,
            patience: p.patience,
            min_lr: p.min_lr,
            monitor: Metric::ValLoss,
        }
    }
}

impl SchedulerConfig {
    pub fn plateau(&self) -> PlateauConfig {
        PlateauConfig {
            factor: self.factor,
            patience: self.patience,
            mode: self.monitor.natural_mode(),
            min_lr: self.min_lr,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EarlyStopSection {
    pub patience: usize,
    pub monitor: Metric,
}

impl Default for EarlyStopSection {
    fn default() -> Self {
        Self {
            patience: EarlyStopConfig::default().patience,
            monitor: Metric::ValAcc,
        }
    }
}

impl EarlyStopSection {
    pub fn stopper(&self) -> EarlyStopConfig {
        EarlyStopConfig {
            patience: self.patience,
            mode: self.monitor.natural_mode(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub init: u64,
    pub shuffle: u64,
    pub augment: u64,
    pub dropout: u64,
}

impl Seeds {
    pub fn all(n: u64) -> Self {
        Self {
            init: n,
            shuffle: n,
            augment: n,
            dropout: n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerConfig {
    #[serde(default)]
    pub data_root: Option<PathBuf>,
    #[serde(flatten)]
    pub model: ModelConfig,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub max_epochs: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_clip")]
    pub clip_max_norm: f64,
    #[serde(default)]
    pub scheduler: SchedulerConfig,
    #[serde(default)]
    pub early_stop: EarlyStopSection,
    #[serde(default)]
    pub split: SplitSpec,
    /// Training-time ops; `None` means the standard pipeline at the model's input size.
    #[serde(default)]
    pub augmentation: Option<Vec<AugmentOp>>,
    #[serde(default = "yes")]
    pub augment: bool,
    #[serde(default)]
    pub seeds: Seeds,
    #[serde(default = "yes")]
    pub freeze_backbone: bool,
    /// Backbone weights to import before freezing (`features.*` tensors).
    #[serde(default)]
    pub init_checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

const KNOWN_KEYS: &[&str] = &[
    "data_root",
    "arch",
    "input_size",
    "num_classes",
    "width_factor",
    "stage_blocks",
    "dropout",
    "batch_size",
    "max_epochs",
    "lr",
    "clip_max_norm",
    "scheduler",
    "early_stop",
    "split",
    "augmentation",
    "augment",
    "seeds",
    "freeze_backbone",
    "init_checkpoint",
    "output_dir",
];

fn default_batch() -> usize {
    DEFAULT_BATCH_SIZE
}
fn default_epochs() -> usize {
    25
}
fn default_lr() -> f64 {
    DEFAULT_LR
}
fn default_clip() -> f64 {
    DEFAULT_MAX_NORM
}
fn yes() -> bool {
    true
}

impl TrainerConfig {
    pub fn new(model: ModelConfig) -> Self {
        Self {
            data_root: None,
            model,
            batch_size: default_batch(),
            max_epochs: default_epochs(),
            lr: default_lr(),
            clip_max_norm: default_clip(),
            scheduler: SchedulerConfig::default(),
            early_stop: EarlyStopSection::default(),
            split: SplitSpec::default(),
            augmentation: None,
            augment: true,
            seeds: Seeds::default(),
            freeze_backbone: true,
            init_checkpoint: None,
            output_dir: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        // serde cannot combine `flatten` with `deny_unknown_fields`, so check keys by hand
        let mut value: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(obj) = value.as_object_mut() {
            // echoed by resolved-config.json; recomputed, never trusted
            obj.remove("config_digest");
            if let Some(k) = obj.keys().find(|k| !KNOWN_KEYS.contains(&k.as_str())) {
                return Err(Error::Config(format!("unknown config key {k:?}")));
            }
        }
        let cfg: Self = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.model.validate()?;
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be at least 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.clip_max_norm > 0.0 && self.clip_max_norm.is_finite()) {
            return bad(format!("clip_max_norm must be positive, got {}", self.clip_max_norm));
        }
        if !(self.scheduler.factor > 0.0 && self.scheduler.factor < 1.0) {
            return bad(format!("scheduler.factor must be in (0, 1), got {}", self.scheduler.factor));
        }
        if !(self.scheduler.min_lr > 0.0) {
            return bad("scheduler.min_lr must be positive".into());
        }
        if !(self.split.train_fraction > 0.0 && self.split.train_fraction < 1.0) {
            return bad(format!("split.train_fraction must be in (0, 1), got {}", self.split.train_fraction));
        }
        if let Some(ops) = &self.augmentation {
            AugmentPipeline::new(ops.clone(), 0)?;
        }
        Ok(())
    }

    /// Training pipeline: configured (or standard) ops, stochastic ones dropped when augmentation is off.
    pub fn train_pipeline(&self) -> AugmentPipeline {
        let size = self.model.input();
        let full = match &self.augmentation {
            Some(ops) => AugmentPipeline {
                ops: ops.clone(),
                base_seed: self.seeds.augment,
            },
            None => AugmentPipeline::standard(size, self.seeds.augment),
        };
        if self.augment {
            full
        } else {
            full.without_stochastic()
        }
    }

    /// Validation, evaluation and prediction: deterministic ops only.
    pub fn eval_pipeline(&self) -> AugmentPipeline {
        self.train_pipeline().without_stochastic()
    }

    /// SHA-256 over the canonical JSON of everything that affects results.
    /// The output directory is excluded so identical runs in different
    /// directories share a digest.
    pub fn digest(&self) -> String {
        let mut c = self.clone();
        c.output_dir = None;
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        let hash = Sha256::digest(&bytes);
        hash.iter().map(|b| format!("{b:02x}")).collect()
    }
}
