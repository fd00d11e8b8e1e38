//! Experiment configuration: built-in defaults, overlaid by a TOML file,
//! then `XDSSL__SECTION__KEY` environment variables, then `key.path=value`
//! assignments from the command line.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{AugmentationConfig, DomainProfile, PhantomConfig};
use crate::error::{Error, Result};
use crate::fusion::{EntropyBase, FusionStrategy, NormScope};
use crate::model::{BackboneConfig, Group};
use crate::optim::{OptimizerConfig, OptimizerKind};
use crate::training::LossParams;

/// Prefix of environment variables that override config keys.
pub const ENV_PREFIX: &str = "XDSSL__";
/// Environment variable naming the default output root.
pub const OUT_ROOT_ENV: &str = "XDSSL_OUT_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomPair {
    pub source: PhantomConfig,
    pub target: PhantomConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    /// Groups copied from the pretrained checkpoint.
    pub transfer_groups: Vec<Group>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionSettings {
    pub strategy: FusionStrategy,
    pub scope: NormScope,
    pub entropy_base: EntropyBase,
    /// Also evaluate every other strategy.
    pub ablation: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationSettings {
    pub threshold: f64,
    pub overlays: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed; every stage derives its own stream from it.
    pub seed: u64,
    pub phantom: PhantomPair,
    pub split: SplitFractions,
    pub backbone: BackboneConfig,
    pub loss: LossParams,
    pub augmentation: AugmentationConfig,
    pub mim: StageSettings,
    pub contrastive: StageSettings,
    pub finetune: FinetuneSettings,
    pub fusion: FusionSettings,
    pub evaluation: EvaluationSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let backbone = BackboneConfig::tiny();
        Self {
            seed: 7,
            phantom: PhantomPair {
                source: PhantomConfig::profile(DomainProfile::ASource, 0),
                target: PhantomConfig::profile(DomainProfile::BTarget, 0),
            },
            split: SplitFractions {
                train: 0.7,
                val: 0.15,
                test: 0.15,
            },
            loss: LossParams::default(),
            augmentation: AugmentationConfig::with_output_size(backbone.image_size),
            backbone,
            mim: StageSettings {
                epochs: 20,
                batch_size: 16,
                optimizer: OptimizerConfig::new(OptimizerKind::Adamw, 1e-3, 0.05),
            },
            contrastive: StageSettings {
                epochs: 20,
                batch_size: 32,
                optimizer: OptimizerConfig::new(OptimizerKind::Adam, 1e-3, 0.05),
            },
            finetune: FinetuneSettings {
                epochs: 20,
                batch_size: 8,
                optimizer: OptimizerConfig::new(OptimizerKind::Sgd, 0.01, 1e-4),
                transfer_groups: vec![Group::Embedding, Group::Encoder],
            },
            fusion: FusionSettings {
                strategy: FusionStrategy::Entropy,
                scope: NormScope::PerImage,
                entropy_base: EntropyBase::Two,
                ablation: true,
            },
            evaluation: EvaluationSettings {
                threshold: 0.5,
                overlays: false,
            },
        }
    }
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Interprets `raw` as a TOML value, falling back to a bare string.
fn literal(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn assign(root: &mut toml::Value, path: &[&str], value: toml::Value) -> Result<()> {
    let mut cur = root;
    for (i, key) in path.iter().enumerate() {
        let table = cur
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{}` is not a table", path[..i].join("."))))?;
        if i + 1 == path.len() {
            table.insert(key.to_string(), value);
            return Ok(());
        }
        cur = table
            .entry(key.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    Err(Error::Config("empty override key".into()))
}

impl ExperimentConfig {
    /// Resolves the layered configuration. `env` is typically
    /// `std::env::vars()`; `sets` are `dotted.key=value` strings.
    pub fn resolve(
        file: Option<&Path>,
        env: impl IntoIterator<Item = (String, String)>,
        sets: &[String],
    ) -> Result<Self> {
        let mut value = toml::Value::try_from(Self::default())
            .map_err(|e| Error::Config(format!("default config: {e}")))?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let table: toml::Table = toml::from_str(&text)
                .map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?;
            merge(&mut value, toml::Value::Table(table));
        }
        let mut env: Vec<(String, String)> = env.into_iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
        env.sort();
        for (k, v) in env {
            let key = k[ENV_PREFIX.len()..].to_lowercase();
            let path: Vec<&str> = key.split("__").collect();
            assign(&mut value, &path, literal(&v))?;
        }
        for s in sets {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{s}` is not key=value")))?;
            let path: Vec<&str> = k.trim().split('.').collect();
            assign(&mut value, &path, literal(v.trim()))?;
        }
        let cfg: Self = value.try_into().map_err(|e: toml::de::Error| Error::Schema(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.phantom.source.validate()?;
        self.phantom.target.validate()?;
        for (name, s) in [("mim", &self.mim), ("contrastive", &self.contrastive)] {
            s.optimizer.validate()?;
            if s.epochs == 0 || s.batch_size == 0 {
                return Err(Error::Config(format!("{name}: epochs and batch_size must be >= 1")));
            }
        }
        self.finetune.optimizer.validate()?;
        if self.finetune.epochs == 0 || self.finetune.batch_size == 0 {
            return Err(Error::Config("finetune: epochs and batch_size must be >= 1".into()));
        }
        if self.phantom.source.domain_profile != DomainProfile::ASource
            || self.phantom.target.domain_profile != DomainProfile::BTarget
        {
            return Err(Error::Config("phantom.source/target must use the A_source/B_target profiles".into()));
        }
        let f = &self.split;
        if [f.train, f.val, f.test].iter().any(|v| !(*v >= 0.0)) || ((f.train + f.val + f.test) - 1.0).abs() > 1e-9 {
            return Err(Error::Config("split fractions must be non-negative and sum to 1".into()));
        }
        if !(0.0..=1.0).contains(&self.evaluation.threshold) {
            return Err(Error::Config("evaluation.threshold must lie in [0, 1]".into()));
        }
        if self.augmentation.output_size != self.backbone.image_size {
            return Err(Error::Config("augmentation.output_size must equal backbone.image_size".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
