//! Pretraining and fine-tuning runners.

pub mod config;
pub mod frames;
pub mod log;
pub mod runners;

pub use config::{LossParams, RunConfig, RunStage, SplitUsage};
pub use frames::{load_frames, stack, Frame};
pub use log::{EpochRecord, TrainLog};
pub use runners::{
    finetune, pretrain_contrastive, pretrain_mim, read_run_manifest, run, segmentation_loss_and_logit_grad, sigmoid,
    validation_loss, RunOutput, BEST_CHECKPOINT, FINAL_CHECKPOINT, RUN_MANIFEST, TRAIN_LOG,
};
