//! Optimizer, schedule, and the training procedures built on them:
//! contrastive pretraining, supervised 2.5D fine-tuning, the frozen-encoder
//! probe and the augmentation composition search.

mod data;
mod eval;
mod finetune;
mod optim;
mod pretrain;
mod probe;
mod schedule;
mod search;

pub use data::BatchSampler;
pub use eval::{evaluate_model, evaluate_poses, ground_truth_poses};
pub use finetune::{finetune, initial_pose_checkpoint, label_prefix, EpochReport, FinetuneConfig, FinetuneOutcome};
pub use optim::{adam_lars_step, trust_ratio, OptimizerMeta, OptimizerState, BETA1, BETA2, EPSILON};
pub use pretrain::{pretrain, Objective, PretrainConfig, PretrainOutcome, TraceRow, REFERENCE_SIDE};
pub use probe::{probe, ProbeConfig, ProbeReport};
pub use schedule::{base_lr_for_batch, Schedule};
pub use search::{composition_key, composition_search, subsets, CompositionResult, MAX_CANDIDATES};
