//! Experiment configuration file: TOML with one table per concern. Every
//! key has a default and unknown keys are rejected.

use std::path::{Path, PathBuf};

use eqcon::augment::AugmentConfig;
use eqcon::encoder::{EncoderConfig, HeadKind};
use eqcon::geometry::TranslationMode;
use eqcon::rng;
use eqcon::trainer::{FinetuneConfig, Objective, PretrainConfig, ProbeConfig};
use eqcon::{Error, Result};
use serde::{Deserialize, Serialize};

/// Overrides `[output] dir`.
pub const OUTPUT_DIR_ENV: &str = "EQCON_OUTPUT_DIR";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub dataset: DatasetSection,
    pub augment: AugmentSection,
    pub model: EncoderConfig,
    pub objective: ObjectiveSection,
    pub optimizer: OptimizerSection,
    pub schedule: ScheduleSection,
    pub probe: ProbeConfig,
    pub seeds: SeedSection,
    pub output: OutputSection,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    /// Directories written by `gen-data`; pretraining draws from all of them.
    pub train: Vec<PathBuf>,
    /// Fine-tune scoring set. Without it the last tenth of the first train
    /// set is held out.
    pub eval: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentSection {
    pub pretrain: AugmentConfig,
    pub finetune: AugmentConfig,
}

impl Default for AugmentSection {
    fn default() -> Self {
        AugmentSection {
            pretrain: AugmentConfig::pretrain(),
            finetune: AugmentConfig::finetune(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveSection {
    pub kind: Objective,
    pub temperature: f64,
    pub translation_mode: TranslationMode,
}

impl Default for ObjectiveSection {
    fn default() -> Self {
        let p = PretrainConfig::default();
        ObjectiveSection {
            kind: p.objective,
            temperature: p.temperature,
            translation_mode: p.translation_mode,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerSection {
    /// Pretraining peak lr; `sqrt(batch) * 1e-4` when absent.
    pub base_lr: Option<f64>,
    pub lars: bool,
    pub weight_decay: f64,
    pub finetune_lr: f64,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        let p = PretrainConfig::default();
        OptimizerSection {
            base_lr: p.base_lr,
            lars: p.lars,
            weight_decay: p.weight_decay,
            finetune_lr: FinetuneConfig::default().lr,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    pub batch_size: usize,
    pub epochs: u64,
    pub warmup_epochs: u64,
    pub max_steps: Option<u64>,
    pub finetune_epochs: u64,
    /// `clamp(labeled / 8, 16, 128)` when absent.
    pub finetune_batch_size: Option<usize>,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        let p = PretrainConfig::default();
        let f = FinetuneConfig::default();
        ScheduleSection {
            batch_size: p.batch_size,
            epochs: p.epochs,
            warmup_epochs: p.warmup_epochs,
            max_steps: p.max_steps,
            finetune_epochs: f.epochs,
            finetune_batch_size: f.batch_size,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeedSection {
    pub root: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection { dir: PathBuf::from("runs") }
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            encoder: EncoderConfig {
                head: HeadKind::Projection,
                ..self.model.clone()
            },
            augment: self.augment.pretrain.clone(),
            objective: self.objective.kind,
            translation_mode: self.objective.translation_mode,
            temperature: self.objective.temperature,
            batch_size: self.schedule.batch_size,
            epochs: self.schedule.epochs,
            warmup_epochs: self.schedule.warmup_epochs,
            base_lr: self.optimizer.base_lr,
            lars: self.optimizer.lars,
            weight_decay: self.optimizer.weight_decay,
            seed: self.seeds.root,
            max_steps: self.schedule.max_steps,
        }
    }

    pub fn finetune_config(&self, aligned: bool) -> FinetuneConfig {
        FinetuneConfig {
            encoder: self.model.clone(),
            augment: self.augment.finetune.clone(),
            batch_size: self.schedule.finetune_batch_size,
            epochs: self.schedule.finetune_epochs,
            lr: self.optimizer.finetune_lr,
            seed: self.seeds.root,
            aligned,
        }
    }

    pub fn probe_config(&self) -> ProbeConfig {
        ProbeConfig {
            seed: self.seeds.root,
            ..self.probe.clone()
        }
    }
}

/// Resolved configuration plus run metadata, written as `manifest.toml`
/// before a command starts its work.
#[derive(Clone, Debug, Serialize)]
pub struct Manifest<'a> {
    pub command: &'a str,
    pub version: &'a str,
    pub root_seed: u64,
    pub rng_streams: [&'a str; 4],
    pub args: toml::Table,
    pub config: &'a ExperimentConfig,
}

impl<'a> Manifest<'a> {
    pub fn new(command: &'a str, config: &'a ExperimentConfig, args: toml::Table) -> Self {
        Manifest {
            command,
            version: env!("CARGO_PKG_VERSION"),
            root_seed: config.seeds.root,
            rng_streams: [rng::STREAM_DATASET, rng::STREAM_AUGMENT, rng::STREAM_INIT, rng::STREAM_SHUFFLE],
            args,
            config,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest always serializes")
    }
}
