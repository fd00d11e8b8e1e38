//! Experiment configuration and the end-to-end driver.

pub mod config;
pub mod reproduce;
pub mod stages;

pub use config::{ExperimentConfig, ENV_PREFIX, OUT_ROOT_ENV};
pub use reproduce::{prepare_data, reproduce, run_configs, Layout, Ordering, Reproduction};
pub use stages::{frame_ids, fuse_dirs, infer, StageAccess};
