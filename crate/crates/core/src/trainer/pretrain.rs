use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::data::BatchSampler;
use super::{adam_lars_step, base_lr_for_batch, Schedule};
use crate::augment::{apply, sample_transform, AugmentConfig, TransformSpec};
use crate::contrastive::{inverse_maps, nt_xent_node, peclr_node, DEFAULT_TEMPERATURE};
use crate::encoder::{model_graph, Checkpoint, EncoderConfig, HeadKind, Model, RngState};
use crate::error::{Error, Result};
use crate::geometry::TranslationMode;
use crate::image::{to_network_input, Image};
use crate::ndiff::Tensor;
use crate::rng;
use crate::synthhand::Dataset;

/// Side length the augmentation translation ranges are quoted for; ranges
/// are scaled by `L / REFERENCE_SIDE` for other image sizes.
pub const REFERENCE_SIDE: f64 = 128.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Simclr,
    Peclr,
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Objective::Simclr => "simclr",
            Objective::Peclr => "peclr",
        })
    }
}

impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "simclr" => Ok(Objective::Simclr),
            "peclr" => Ok(Objective::Peclr),
            other => Err(Error::invalid(format!("unknown objective `{other}` (simclr or peclr)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub encoder: EncoderConfig,
    pub augment: AugmentConfig,
    pub objective: Objective,
    pub translation_mode: TranslationMode,
    pub temperature: f64,
    /// Source images per step; each contributes two views.
    pub batch_size: usize,
    pub epochs: u64,
    pub warmup_epochs: u64,
    /// Defaults to `√batch_size · 1e-4`.
    pub base_lr: Option<f64>,
    pub lars: bool,
    pub weight_decay: f64,
    pub seed: u64,
    /// Stops early after this many steps; the schedule still spans all epochs.
    pub max_steps: Option<u64>,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            encoder: EncoderConfig::default(),
            augment: AugmentConfig::pretrain(),
            objective: Objective::Peclr,
            translation_mode: TranslationMode::Normalized,
            temperature: DEFAULT_TEMPERATURE,
            batch_size: 64,
            epochs: 100,
            warmup_epochs: 10,
            base_lr: None,
            lars: true,
            weight_decay: 1e-6,
            seed: 0,
            max_steps: None,
        }
    }
}

impl PretrainConfig {
    pub fn resolved_base_lr(&self) -> f64 {
        self.base_lr.unwrap_or_else(|| base_lr_for_batch(self.batch_size))
    }

    /// The augmentation actually applied to `side`-pixel images.
    pub fn effective_augment(&self, side: usize) -> AugmentConfig {
        let mut a = self.augment.clone();
        a.scale_translation(side as f64 / REFERENCE_SIDE);
        a
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.augment.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.epochs == 0 || self.warmup_epochs > self.epochs {
            return Err(Error::Config("need epochs > 0 and warmup_epochs <= epochs".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be nonnegative".into()));
        }
        Ok(())
    }
}

/// One optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub loss: f64,
}

impl TraceRow {
    pub const CSV_HEADER: &'static str = "step,epoch,lr,loss";

    pub fn csv_row(&self) -> String {
        format!("{},{},{},{}", self.step, self.epoch, self.lr, self.loss)
    }
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub checkpoint: Checkpoint,
    pub trace: Vec<TraceRow>,
}

pub(crate) fn check_sources(datasets: &[&Dataset], side: usize) -> Result<()> {
    if datasets.is_empty() || datasets.iter().any(|d| d.is_empty()) {
        return Err(Error::invalid("training needs at least one non-empty dataset"));
    }
    if let Some(d) = datasets.iter().find(|d| d.image_size() != side) {
        return Err(Error::Config(format!(
            "dataset images are {0}×{0} but the encoder expects {side}×{side}",
            d.image_size()
        )));
    }
    Ok(())
}

/// Contrastive pretraining. Batch sources are drawn with
/// [`BatchSampler`]; every step draws two transforms per source image from
/// the step's own `augment` stream, so the run is a pure function of the
/// config and the data.
pub fn pretrain(cfg: &PretrainConfig, datasets: &[&Dataset]) -> Result<PretrainOutcome> {
    cfg.validate()?;
    let encoder = EncoderConfig {
        head: HeadKind::Projection,
        ..cfg.encoder.clone()
    };
    let side = encoder.input_side;
    check_sources(datasets, side)?;

    let total: usize = datasets.iter().map(|d| d.len()).sum();
    let batch = cfg.batch_size.min(total);
    let steps_per_epoch = (total / batch).max(1) as u64;
    let schedule = Schedule::from_epochs(cfg.resolved_base_lr(), cfg.warmup_epochs, cfg.epochs, steps_per_epoch)?;
    let steps = cfg.max_steps.map_or(schedule.total_steps, |m| m.min(schedule.total_steps));
    let augment = cfg.effective_augment(side);

    let model = Model::init(encoder.clone(), cfg.seed)?;
    let mut ckpt = Checkpoint::fresh(model, cfg.lars, cfg.weight_decay, cfg.seed);
    let (mut g, nodes) = model_graph(&encoder, 2 * batch)?;
    let maps_node = g.input("maps", &[2 * batch, 6])?;
    let loss_node = match cfg.objective {
        Objective::Simclr => nt_xent_node(&mut g, nodes.output, cfg.temperature)?,
        Objective::Peclr => peclr_node(&mut g, nodes.output, maps_node, cfg.temperature, cfg.translation_mode)?,
    };
    g.mark_output("loss", loss_node)?;

    let sizes: Vec<usize> = datasets.iter().map(|d| d.len()).collect();
    let mut sampler = BatchSampler::new(&sizes, cfg.seed)?;
    let seed_grad = Tensor::scalar(1.0);
    let mut trace = Vec::with_capacity(steps as usize);
    for step in 0..steps {
        let picks = sampler.next_batch(batch);
        let mut r = rng::stream(cfg.seed, rng::STREAM_AUGMENT, step);
        let mut specs: Vec<TransformSpec> = Vec::with_capacity(2 * batch);
        let mut views: Vec<Image> = Vec::with_capacity(2 * batch);
        for &(src, idx) in &picks {
            let img = datasets[src].image(idx);
            for _ in 0..2 {
                let spec = sample_transform(&mut r, &augment);
                views.push(apply(&spec, &img));
                specs.push(spec);
            }
        }
        let refs: Vec<&Image> = views.iter().collect();
        let x = to_network_input(&refs)?;
        let maps = inverse_maps(&specs, side as f64, cfg.translation_mode);
        let lr = schedule.lr_at(step + 1);
        let out = g
            .forward(&ckpt.model.params, &[("images", &x), ("maps", &maps)])
            .map_err(|e| numeric(step, lr, e))?;
        let loss = out["loss"].item();
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("pretrain loss is {loss} at step {} (lr {lr})", step + 1)));
        }
        let grads = g.backward(&[("loss", &seed_grad)])?;
        adam_lars_step(&mut ckpt.model.params, &grads.params, &mut ckpt.optimizer, lr)?;
        trace.push(TraceRow {
            step: step + 1,
            epoch: step / steps_per_epoch,
            lr,
            loss,
        });
    }
    ckpt.schedule_step = steps;
    ckpt.rng = RngState {
        seed: cfg.seed,
        counter: steps,
    };
    Ok(PretrainOutcome { checkpoint: ckpt, trace })
}

pub(crate) fn numeric(step: u64, lr: f64, e: Error) -> Error {
    match e {
        Error::NonFinite { node, op } => Error::Numeric(format!(
            "non-finite value at node {node} ({op}) in step {} (lr {lr})",
            step + 1
        )),
        other => other,
    }
}
