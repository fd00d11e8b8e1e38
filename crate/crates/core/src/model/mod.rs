//! Segmentation backbone, parameter groups, checkpoints and weight transfer.

pub mod backbone;
pub mod checkpoint;
pub mod config;

pub use backbone::{Backbone, EmbedCache, Group, PixelCache, PixelHead};
pub use checkpoint::{
    load_checkpoint, save_checkpoint, transfer_weights, Checkpoint, CheckpointMeta, GroupReport, Stage,
    TensorEntry, TransferReport,
};
pub use config::{BackboneConfig, PROJECTION_DIM};
