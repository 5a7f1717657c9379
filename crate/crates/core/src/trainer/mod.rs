//! Optimisers, contrastive pre-training, linear probing and fine-tuning.

mod finetune;
mod optim;
mod pretrain;
mod probe;

pub use finetune::{
    finetune, finetune_metadata, finetune_with_monitor, ContextMode, ContextWeights, EpochSnapshot, FinetuneConfig,
    FinetuneOutcome, KlDirection, Method, Monitor, Objective, ObjectiveOutput, StepRecord, TrainLog,
};
pub use optim::{adamw_step, cosine_lr, AdamWConfig, OptimizerState};
pub use pretrain::{info_nce, pretrain_contrastive, InfoNceOutput, PretrainConfig, PretrainOutcome};
pub use probe::{linear_probe, LinearProbeConfig, LinearProbeOutcome};
