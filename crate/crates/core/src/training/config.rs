use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{AugmentationConfig, Domain, Split};
use crate::error::{Error, Result};
use crate::model::{BackboneConfig, Group};
use crate::optim::{OptimizerConfig, OptimizerKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStage {
    PretrainMim,
    PretrainContrastive,
    Finetune,
}

/// Which splits of which domain feed training and validation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitUsage {
    pub domain: Domain,
    pub train: Vec<Split>,
    #[serde(default)]
    pub val: Vec<Split>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossParams {
    /// Fraction of patches hidden from the reconstruction branch.
    pub mask_ratio: f64,
    /// Side of a masked patch in pixels.
    pub mask_patch: usize,
    pub temperature: f64,
    /// Same-video frames closer than this are not used as negatives.
    pub min_frame_gap: u64,
}

impl Default for LossParams {
    fn default() -> Self {
        Self {
            mask_ratio: 0.6,
            mask_patch: 8,
            temperature: 0.5,
            min_frame_gap: 15,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    pub stage: RunStage,
    pub manifest_path: PathBuf,
    pub splits: SplitUsage,
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub loss: LossParams,
    #[serde(default)]
    pub augmentation: AugmentationConfig,
    #[serde(default)]
    pub backbone: BackboneConfig,
    pub seed: u64,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub init_checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub transfer_groups: Vec<Group>,
}

impl RunConfig {
    /// Defaults for `stage` with the optimizer presets used at desk scale.
    pub fn preset(stage: RunStage, name: &str, manifest_path: PathBuf, splits: SplitUsage, output_dir: PathBuf, seed: u64) -> Self {
        let (optimizer, epochs, batch_size) = match stage {
            RunStage::PretrainMim => (OptimizerConfig::new(OptimizerKind::Adamw, 1e-3, 0.05), 40, 16),
            RunStage::PretrainContrastive => (OptimizerConfig::new(OptimizerKind::Adam, 1e-3, 0.05), 40, 32),
            RunStage::Finetune => (OptimizerConfig::new(OptimizerKind::Sgd, 0.01, 1e-4), 30, 8),
        };
        let backbone = BackboneConfig::default();
        Self {
            name: name.to_string(),
            stage,
            manifest_path,
            splits,
            optimizer,
            epochs,
            batch_size,
            loss: LossParams::default(),
            augmentation: AugmentationConfig::with_output_size(backbone.image_size),
            backbone,
            seed,
            output_dir,
            init_checkpoint: None,
            transfer_groups: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("run `{}`: {m}", self.name)));
        self.optimizer.validate()?;
        self.backbone.validate()?;
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.splits.train.is_empty() {
            return bad("no training splits".into());
        }
        match self.stage {
            RunStage::PretrainMim => {
                let l = &self.loss;
                if !(l.mask_ratio > 0.0 && l.mask_ratio <= 1.0) {
                    return bad(format!("mask_ratio {} outside (0, 1]", l.mask_ratio));
                }
                if l.mask_patch == 0 || self.backbone.image_size % l.mask_patch != 0 {
                    return bad(format!(
                        "mask_patch {} does not tile image_size {}",
                        l.mask_patch, self.backbone.image_size
                    ));
                }
            }
            RunStage::PretrainContrastive => {
                if !(self.loss.temperature > 0.0) {
                    return bad("temperature must be > 0".into());
                }
                self.augmentation.validate()?;
                if self.augmentation.output_size != self.backbone.image_size {
                    return bad("augmentation output_size must equal image_size".into());
                }
            }
            RunStage::Finetune => {
                if self.init_checkpoint.is_none() && !self.transfer_groups.is_empty() {
                    return bad("transfer_groups given without init_checkpoint".into());
                }
                if let Some(g) = self
                    .transfer_groups
                    .iter()
                    .find(|g| !matches!(g, Group::Embedding | Group::Encoder | Group::Projection))
                {
                    return bad(format!("group `{g}` cannot be transferred into a fine-tune"));
                }
            }
        }
        Ok(())
    }

    /// Digest of the settings that determine the run's result; paths are
    /// excluded so relocated reruns agree.
    pub fn digest(&self) -> String {
        let mut c = self.clone();
        c.manifest_path = PathBuf::new();
        c.output_dir = PathBuf::new();
        c.init_checkpoint = c.init_checkpoint.map(|_| PathBuf::from("<init>"));
        let json = serde_json::to_vec(&c).expect("config serializes");
        crate::model::config::hex(&Sha256::digest(json))
    }
}
