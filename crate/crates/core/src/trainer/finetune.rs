use serde::{Deserialize, Serialize};

use super::data::BatchSampler;
use super::eval::evaluate_model;
use super::pretrain::{check_sources, numeric, REFERENCE_SIDE};
use super::{adam_lars_step, OptimizerState, Schedule};
use crate::augment::{apply, sample_transform, AugmentConfig};
use crate::encoder::{encode_pose, model_graph, swap_head_for_pose, Checkpoint, EncoderConfig, HeadKind, Model};
use crate::error::{Error, Result};
use crate::image::{to_network_input, Image};
use crate::ndiff::Tensor;
use crate::pose::{pose_loss_nodes, transform_keypoints, MetricReport};
use crate::rng;
use crate::synthhand::{Dataset, NUM_JOINTS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    /// Must match the pretrained checkpoint's encoder (the head is ignored).
    pub encoder: EncoderConfig,
    pub augment: AugmentConfig,
    /// Defaults to `clamp(labeled / 8, 16, 128)`.
    pub batch_size: Option<usize>,
    pub epochs: u64,
    pub lr: f64,
    pub seed: u64,
    /// Report Procrustes-aligned PCK/AUC.
    pub aligned: bool,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            encoder: EncoderConfig::default(),
            augment: AugmentConfig::finetune(),
            batch_size: None,
            epochs: 100,
            lr: 5e-4,
            seed: 0,
            aligned: false,
        }
    }
}

impl FinetuneConfig {
    pub fn resolved_batch(&self, labeled: usize) -> usize {
        self.batch_size.unwrap_or_else(|| (labeled / 8).clamp(16, 128)).min(labeled).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.augment.validate()?;
        if self.epochs == 0 || self.batch_size == Some(0) {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.lr >= 0.0) {
            return Err(Error::Config("lr must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: u64,
    pub step: u64,
    pub lr: f64,
    /// Mean training loss over the epoch.
    pub loss: f64,
    pub metrics: MetricReport,
}

impl EpochReport {
    pub const CSV_HEADER: &'static str = "epoch,step,lr,loss,epe_cm,pa_epe_cm,auc,epe_2d_px";

    pub fn csv_row(&self) -> String {
        let m = &self.metrics;
        format!(
            "{},{},{},{},{},{},{},{}",
            self.epoch, self.step, self.lr, self.loss, m.epe, m.pa_epe, m.auc, m.epe_2d
        )
    }
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    pub checkpoint: Checkpoint,
    pub trace: Vec<EpochReport>,
    pub train_indices: Vec<usize>,
}

/// The first `⌊n · fraction⌋` (at least one) labeled indices.
pub fn label_prefix(data: &Dataset, fraction: f64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid(format!("label fraction must lie in (0, 1], got {fraction}")));
    }
    let pool = data.labeled_indices();
    if pool.is_empty() {
        return Err(Error::invalid("dataset has no labeled samples"));
    }
    let k = ((pool.len() as f64 * fraction + 1e-9).floor() as usize).max(1);
    Ok(pool[..k].to_vec())
}

/// Pose-headed starting point: the checkpoint's encoder with a fresh head,
/// or, without a checkpoint, a freshly initialized encoder with the same
/// head draw.
pub fn initial_pose_checkpoint(cfg: &FinetuneConfig, init: Option<&Checkpoint>) -> Result<Checkpoint> {
    let projection = EncoderConfig {
        head: HeadKind::Projection,
        ..cfg.encoder.clone()
    };
    let start = match init {
        Some(ck) => {
            if ck.model.config != projection {
                return Err(Error::Config(
                    "pretrained checkpoint was written for a different encoder config".into(),
                ));
            }
            ck.clone()
        }
        None => Checkpoint::fresh(Model::init(projection, cfg.seed)?, false, 0.0, cfg.seed),
    };
    let mut ck = swap_head_for_pose(&start, cfg.seed)?;
    ck.optimizer = OptimizerState::new(&ck.model.params, false, 0.0);
    ck.rng.seed = cfg.seed;
    Ok(ck)
}

/// Supervised 2.5D training on the first `label_fraction` of `train`'s
/// labeled samples, scored on all of `eval` after every epoch.
pub fn finetune(
    cfg: &FinetuneConfig,
    init: Option<&Checkpoint>,
    train: &Dataset,
    eval: &Dataset,
    label_fraction: f64,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    let side = cfg.encoder.input_side;
    check_sources(&[train, eval], side)?;
    let indices = label_prefix(train, label_fraction)?;
    let eval_indices: Vec<usize> = (0..eval.len()).collect();
    let mut ck = initial_pose_checkpoint(cfg, init)?;
    let pose_cfg = ck.model.config.clone();

    let batch = cfg.resolved_batch(indices.len());
    let steps_per_epoch = (indices.len() / batch).max(1) as u64;
    let schedule = Schedule::from_epochs(cfg.lr, 0, cfg.epochs, steps_per_epoch)?;
    let mut augment = cfg.augment.clone();
    augment.scale_translation(side as f64 / REFERENCE_SIDE);

    let (mut g, nodes) = model_graph(&pose_cfg, batch)?;
    let target = g.input("target", &[batch, 3 * NUM_JOINTS])?;
    let (l2d, ldr) = pose_loss_nodes(&mut g, nodes.output, target, NUM_JOINTS)?;
    let loss_node = g.add(l2d, ldr)?;
    g.mark_output("loss", loss_node)?;

    let mut sampler = BatchSampler::new(&[indices.len()], cfg.seed)?;
    let seed_grad = Tensor::scalar(1.0);
    let mut trace = Vec::with_capacity(cfg.epochs as usize);
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        for _ in 0..steps_per_epoch {
            let mut r = rng::stream(cfg.seed, rng::STREAM_AUGMENT, step);
            let mut views: Vec<Image> = Vec::with_capacity(batch);
            let mut targets = Vec::with_capacity(batch * 3 * NUM_JOINTS);
            for (_, slot) in sampler.next_batch(batch) {
                let i = indices[slot];
                let img = train.image(i);
                let spec = sample_transform(&mut r, &augment);
                let label = &train.labels[i];
                let j2d = transform_keypoints(&spec.geometric, &img, &label.j2d);
                targets.extend(encode_pose(&j2d, &label.d_r, side as f64));
                views.push(apply(&spec, &img));
            }
            let refs: Vec<&Image> = views.iter().collect();
            let x = to_network_input(&refs)?;
            let t = Tensor::new(vec![batch, 3 * NUM_JOINTS], targets)?;
            lr = schedule.lr_at(step + 1);
            let out = g
                .forward(&ck.model.params, &[("images", &x), ("target", &t)])
                .map_err(|e| numeric(step, lr, e))?;
            let loss = out["loss"].item();
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("fine-tune loss is {loss} at step {} (lr {lr})", step + 1)));
            }
            let grads = g.backward(&[("loss", &seed_grad)])?;
            adam_lars_step(&mut ck.model.params, &grads.params, &mut ck.optimizer, lr)?;
            loss_sum += loss;
            step += 1;
        }
        let metrics = evaluate_model(&ck.model, eval, &eval_indices, cfg.aligned)?;
        trace.push(EpochReport {
            epoch: epoch + 1,
            step,
            lr,
            loss: loss_sum / steps_per_epoch as f64,
            metrics,
        });
    }
    ck.schedule_step = step;
    ck.rng.counter = step;
    Ok(FinetuneOutcome {
        checkpoint: ck,
        trace,
        train_indices: indices,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthhand::{generate, SynthConfig};
    use crate::trainer::{pretrain, PretrainConfig};

    fn encoder() -> EncoderConfig {
        EncoderConfig {
            input_side: 16,
            channels: vec![4, 8],
            feature_dim: 16,
            projection_hidden: 16,
            latent_points: 4,
            head: HeadKind::Projection,
        }
    }

    fn cfg() -> FinetuneConfig {
        FinetuneConfig {
            encoder: encoder(),
            batch_size: Some(4),
            epochs: 2,
            ..FinetuneConfig::default()
        }
    }

    #[test]
    fn label_prefix_is_deterministic() {
        let ds = generate(20, 0, 0.5, &SynthConfig::with_size(16)).unwrap();
        let all = ds.labeled_indices();
        assert_eq!(all.len(), 10);
        assert_eq!(label_prefix(&ds, 1.0).unwrap(), all);
        assert_eq!(label_prefix(&ds, 0.3).unwrap(), all[..3].to_vec());
        assert_eq!(label_prefix(&ds, 0.01).unwrap().len(), 1);
        assert!(label_prefix(&ds, 1.5).is_err());
        assert!(label_prefix(&ds, 0.0).is_err());
    }

    #[test]
    fn baseline_and_pretrained_differ_only_in_encoder_start() {
        let ds = generate(12, 1, 1.0, &SynthConfig::with_size(16)).unwrap();
        let pre = pretrain(
            &PretrainConfig {
                encoder: encoder(),
                batch_size: 4,
                epochs: 1,
                warmup_epochs: 0,
                ..PretrainConfig::default()
            },
            &[&ds],
        )
        .unwrap();
        let base = initial_pose_checkpoint(&cfg(), None).unwrap();
        let warm = initial_pose_checkpoint(&cfg(), Some(&pre.checkpoint)).unwrap();
        assert_eq!(base.model.config, warm.model.config);
        assert_eq!(base.model.params.get("pose.w"), warm.model.params.get("pose.w"));
        assert_ne!(base.model.params.get("enc.fc.w"), warm.model.params.get("enc.fc.w"));
        assert_eq!(warm.model.params.get("enc.fc.w"), pre.checkpoint.model.params.get("enc.fc.w"));

        let other = FinetuneConfig {
            encoder: EncoderConfig {
                feature_dim: 8,
                ..encoder()
            },
            ..cfg()
        };
        assert!(initial_pose_checkpoint(&other, Some(&pre.checkpoint)).is_err());
    }

    #[test]
    fn runs_and_is_deterministic() {
        let train = generate(16, 2, 1.0, &SynthConfig::with_size(16)).unwrap();
        let eval = generate(4, 3, 1.0, &SynthConfig::with_size(16)).unwrap();
        let a = finetune(&cfg(), None, &train, &eval, 0.5).unwrap();
        let b = finetune(&cfg(), None, &train, &eval, 0.5).unwrap();
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.trace.len(), 2);
        assert_eq!(a.train_indices, (0..8).collect::<Vec<_>>());
        assert_eq!(a.checkpoint.model.config.head, HeadKind::Pose);
        assert!(a.trace.iter().all(|r| r.metrics.epe.is_finite()));
        assert!(finetune(&cfg(), None, &train, &eval, 1.5).is_err());
    }

    #[test]
    fn default_batch_rule() {
        let c = FinetuneConfig::default();
        assert_eq!(c.resolved_batch(2000), 128);
        assert_eq!(c.resolved_batch(400), 50);
        assert_eq!(c.resolved_batch(40), 16);
        assert_eq!(c.resolved_batch(5), 5);
    }
}
