use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{concatenate, s, Array2, Array4, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{RunConfig, RunStage};
use super::frames::{load_frames, stack, Frame};
use super::log::{EpochRecord, TrainLog};
use crate::audit::{AccessAudit, AccessSummary};
use crate::data::augment_pair;
use crate::data::{FrameRecord, Manifest};
use crate::error::{Error, Result};
use crate::losses::{
    dice_bce_loss, dice_grad, masked_mae_grad, masked_mae_loss, mt_nxent_loss_and_grad, EmbeddingBatch, MaskedBatch,
    SegPair,
};
use crate::model::{
    transfer_weights, Backbone, Checkpoint, CheckpointMeta, Group, PixelHead, Stage, TransferReport,
};
use crate::optim::Optimizer;
use crate::seed::derive_seed;

pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const RUN_MANIFEST: &str = "run_manifest.json";

/// Artifacts of a finished run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutput {
    pub name: String,
    pub stage: RunStage,
    pub best_checkpoint: PathBuf,
    pub final_checkpoint: PathBuf,
    pub log: TrainLog,
    /// Unique data files opened, relative to the manifest root.
    pub files_opened: Vec<String>,
    pub access: AccessSummary,
    pub transfer: Option<TransferReport>,
}

#[derive(Serialize)]
struct RunManifest<'a> {
    config: &'a RunConfig,
    config_digest: String,
    best_epoch: Option<usize>,
    best_val_loss: Option<f64>,
    final_train_loss: Option<f64>,
    access: &'a AccessSummary,
    files_opened: &'a [String],
    transfer: Option<&'a TransferReport>,
}

pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

struct Session {
    manifest: Manifest,
    audit: AccessAudit,
    started: Instant,
}

impl Session {
    fn open(cfg: &RunConfig, stage: RunStage) -> Result<Self> {
        if cfg.stage != stage {
            return Err(Error::Config(format!(
                "run `{}` has stage {:?}, expected {stage:?}",
                cfg.name, cfg.stage
            )));
        }
        cfg.validate()?;
        let manifest = Manifest::load(&cfg.manifest_path)?;
        std::fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
        Ok(Self {
            manifest,
            audit: AccessAudit::new(),
            started: Instant::now(),
        })
    }

    fn records(&self, cfg: &RunConfig, val: bool, labelled_only: bool) -> Vec<&FrameRecord> {
        let splits = if val { &cfg.splits.val } else { &cfg.splits.train };
        self.manifest
            .select(cfg.splits.domain, splits)
            .into_iter()
            .filter(|r| !labelled_only || r.mask_path.is_some())
            .collect()
    }

    fn elapsed(&self) -> f64 {
        self.started.elapsed().as_secs_f64()
    }

    #[allow(clippy::too_many_arguments)]
    fn finish(
        self,
        cfg: &RunConfig,
        stage: Stage,
        log: TrainLog,
        final_model: &Backbone<f32>,
        best_model: Option<&Backbone<f32>>,
        transfer: Option<TransferReport>,
    ) -> Result<RunOutput> {
        let meta = |epoch| CheckpointMeta {
            stage,
            config_digest: cfg.digest(),
            rng_seed: cfg.seed,
            epoch,
            backbone: cfg.backbone.clone(),
        };
        let final_path = cfg.output_dir.join(FINAL_CHECKPOINT);
        let best_path = cfg.output_dir.join(BEST_CHECKPOINT);
        Checkpoint::from_model(final_model, meta(cfg.epochs)).save(&final_path)?;
        let best_epoch = log.best_epoch.unwrap_or(cfg.epochs);
        Checkpoint::from_model(best_model.unwrap_or(final_model), meta(best_epoch)).save(&best_path)?;
        log.write(&cfg.output_dir.join(TRAIN_LOG))?;
        let files_opened = self.audit.relative_to(&self.manifest.root);
        let access = self.audit.summarize(&self.manifest);
        let manifest = RunManifest {
            config: cfg,
            config_digest: cfg.digest(),
            best_epoch: log.best_epoch,
            best_val_loss: log.best_val_loss,
            final_train_loss: log.records.last().map(|r| r.train_loss),
            access: &access,
            files_opened: &files_opened,
            transfer: transfer.as_ref(),
        };
        let path = cfg.output_dir.join(RUN_MANIFEST);
        std::fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n").map_err(|e| Error::io(&path, e))?;
        Ok(RunOutput {
            name: cfg.name.clone(),
            stage: cfg.stage,
            best_checkpoint: best_path,
            final_checkpoint: final_path,
            log,
            files_opened,
            access,
            transfer,
        })
    }
}

fn shuffled(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}

fn mim_batch_loss(
    model: &Backbone<f32>,
    frames: &[&Frame],
    cfg: &RunConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(f32, MaskedBatch<f32>, Array4<f32>, crate::model::PixelCache<f32>)> {
    let images = stack(frames.iter().map(|f| &f.image));
    let batch = MaskedBatch::sample(images, cfg.loss.mask_patch, cfg.loss.mask_ratio, rng)?;
    let (recon, cache) = model.pixel_forward(&batch.masked_images, PixelHead::Reconstruct)?;
    let loss = masked_mae_loss(&batch, recon.view())?;
    Ok((loss, batch, recon, cache))
}

/// Masked image modeling on unlabeled frames; masks are never opened.
pub fn pretrain_mim(cfg: &RunConfig) -> Result<RunOutput> {
    let session = Session::open(cfg, RunStage::PretrainMim)?;
    let size = cfg.backbone.image_size;
    let train_recs = session.records(cfg, false, false);
    if train_recs.is_empty() {
        return Err(Error::Config(format!("run `{}`: training split is empty", cfg.name)));
    }
    let train = load_frames(&session.manifest, &train_recs, size, false, &session.audit)?;
    let val = load_frames(&session.manifest, &session.records(cfg, true, false), size, false, &session.audit)?;

    let mut model = Backbone::<f32>::new(cfg.backbone.clone(), derive_seed(cfg.seed, "init"))?;
    let mut opt = Optimizer::new(
        cfg.optimizer.clone(),
        &model,
        &[Group::Embedding, Group::Encoder, Group::Decoder, Group::Head],
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "train"));
    let mut log = TrainLog::default();
    let mut best = None;
    for epoch in 1..=cfg.epochs {
        let (mut total, mut count) = (0.0f64, 0usize);
        for chunk in shuffled(train.len(), &mut rng).chunks(cfg.batch_size) {
            let frames: Vec<&Frame> = chunk.iter().map(|&i| &train[i]).collect();
            let (loss, batch, recon, cache) = mim_batch_loss(&model, &frames, cfg, &mut rng)?;
            let grad = masked_mae_grad(&batch, recon.view())?;
            model.zero_grad();
            model.pixel_backward(&cache, &grad);
            opt.step(&mut model);
            total += loss as f64 * frames.len() as f64;
            count += frames.len();
        }
        let val_loss = if val.is_empty() {
            None
        } else {
            // The same masks every epoch, so validation losses are comparable.
            let mut vrng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "val-mask"));
            let (mut vt, mut vc) = (0.0f64, 0usize);
            for chunk in val.chunks(cfg.batch_size) {
                let frames: Vec<&Frame> = chunk.iter().collect();
                let (loss, ..) = mim_batch_loss(&model, &frames, cfg, &mut vrng)?;
                vt += loss as f64 * frames.len() as f64;
                vc += frames.len();
            }
            Some(vt / vc as f64)
        };
        let improved = log.push(EpochRecord {
            epoch,
            train_loss: total / count as f64,
            val_loss,
            wall_time: session.elapsed(),
        });
        if improved {
            best = Some(model.clone());
        }
    }
    session.finish(cfg, Stage::PretrainMim, log, &model, best.as_ref(), None)
}

/// Contrastive pretraining with temporally masked negatives. Each step draws
/// a batch uniformly at random from the whole training split; the final
/// epoch's weights are kept.
pub fn pretrain_contrastive(cfg: &RunConfig) -> Result<RunOutput> {
    let session = Session::open(cfg, RunStage::PretrainContrastive)?;
    let size = cfg.backbone.image_size;
    let train_recs = session.records(cfg, false, false);
    if train_recs.is_empty() {
        return Err(Error::Config(format!("run `{}`: training split is empty", cfg.name)));
    }
    let train = load_frames(&session.manifest, &train_recs, size, false, &session.audit)?;
    let mut model = Backbone::<f32>::new(cfg.backbone.clone(), derive_seed(cfg.seed, "init"))?;
    let mut opt = Optimizer::new(
        cfg.optimizer.clone(),
        &model,
        &[Group::Embedding, Group::Encoder, Group::Projection],
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "train"));
    let b = cfg.batch_size.min(train.len());
    let steps = train.len().div_ceil(b);
    let mut log = TrainLog::default();
    for epoch in 1..=cfg.epochs {
        let mut total = 0.0f64;
        for _ in 0..steps {
            let idx = rand::seq::index::sample(&mut rng, train.len(), b).into_vec();
            let mut first = Vec::with_capacity(b);
            let mut second = Vec::with_capacity(b);
            for &i in &idx {
                let (v1, v2) = augment_pair(&train[i].image, &cfg.augmentation, &mut rng)?;
                first.push(v1);
                second.push(v2);
            }
            let x = stack(first.iter().chain(second.iter()).collect::<Vec<_>>().into_iter());
            let (z, cache) = model.embed_forward(&x)?;
            let batch = EmbeddingBatch::new(
                z.slice(s![..b, ..]).to_owned(),
                z.slice(s![b.., ..]).to_owned(),
                idx.iter().map(|&i| train[i].record.video_id.clone()).collect(),
                idx.iter().map(|&i| train[i].record.frame_index).collect(),
                cfg.loss.temperature as f32,
                cfg.loss.min_frame_gap,
            )?;
            let (loss, gz, gzp) = mt_nxent_loss_and_grad(&batch)?;
            let dz = concatenate(Axis(0), &[gz.view(), gzp.view()]).expect("equal widths");
            model.zero_grad();
            model.embed_backward(&cache, &dz);
            opt.step(&mut model);
            total += loss as f64;
        }
        log.push(EpochRecord {
            epoch,
            train_loss: total / steps as f64,
            val_loss: None,
            wall_time: session.elapsed(),
        });
    }
    session.finish(cfg, Stage::PretrainContrastive, log, &model, None, None)
}

/// Dice-BCE of a probability batch plus its gradient with respect to the
/// logits. The BCE part uses the closed form `(p - y) / n`.
pub fn segmentation_loss_and_logit_grad(logits: &Array4<f32>, targets: &Array4<f32>) -> Result<(f32, Array4<f32>)> {
    let probs = logits.mapv(sigmoid);
    let p = probs.as_slice().expect("standard layout");
    let y = targets.as_slice().expect("standard layout");
    let pair = SegPair::new(p, y)?;
    let loss = dice_bce_loss(&pair);
    let dice = dice_grad(&pair);
    let n = p.len() as f32;
    let grad: Vec<f32> = p
        .iter()
        .zip(y)
        .zip(dice)
        .map(|((&p, &y), d)| d * p * (1.0 - p) + (p - y) / n)
        .collect();
    Ok((loss, Array4::from_shape_vec(logits.raw_dim(), grad).expect("same size")))
}

/// Mean per-image Dice-BCE on labeled frames.
pub fn validation_loss(model: &Backbone<f32>, frames: &[Frame], batch_size: usize) -> Result<f64> {
    let mut total = 0.0f64;
    for chunk in frames.chunks(batch_size.max(1)) {
        let x = stack(chunk.iter().map(|f| &f.image));
        let logits = model.forward_segment(&x)?;
        for (i, f) in chunk.iter().enumerate() {
            let p: Vec<f32> = logits.slice(s![i, 0, .., ..]).iter().map(|&v| sigmoid(v)).collect();
            let y: Vec<f32> = f.mask.as_ref().expect("labeled frame").iter().map(|&m| m as u8 as f32).collect();
            total += dice_bce_loss(&SegPair::new(&p, &y)?) as f64;
        }
    }
    Ok(total / frames.len() as f64)
}

fn mask_batch(frames: &[&Frame]) -> Array4<f32> {
    let masks: Vec<Array2<f32>> = frames
        .iter()
        .map(|f| f.mask.as_ref().expect("labeled frame").mapv(|m| m as u8 as f32))
        .collect();
    stack(masks.iter())
}

/// Supervised Dice-BCE training, optionally from pretrained groups; the
/// weights with the lowest validation loss are kept.
pub fn finetune(cfg: &RunConfig) -> Result<RunOutput> {
    let session = Session::open(cfg, RunStage::Finetune)?;
    let size = cfg.backbone.image_size;
    let train_recs = session.records(cfg, false, true);
    if train_recs.is_empty() {
        return Err(Error::Config(format!(
            "run `{}`: no labeled frames in {:?} of the {} domain",
            cfg.name, cfg.splits.train, cfg.splits.domain
        )));
    }
    let val_recs = session.records(cfg, true, true);
    if !cfg.splits.val.is_empty() && val_recs.is_empty() {
        return Err(Error::Config(format!("run `{}`: no labeled validation frames", cfg.name)));
    }

    let mut model = Backbone::<f32>::new(cfg.backbone.clone(), derive_seed(cfg.seed, "init"))?;
    let transfer = match &cfg.init_checkpoint {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            let groups: BTreeSet<Group> = cfg.transfer_groups.iter().copied().collect();
            let report = transfer_weights(&mut model, &ck, &groups, derive_seed(cfg.seed, "reinit"))?;
            for g in &groups {
                if model.group_digest(*g) != ck.group_digest(*g) {
                    return Err(Error::Integrity(format!("group {g} differs from checkpoint after transfer")));
                }
            }
            Some(report)
        }
        None => None,
    };
    let stage = if transfer.is_some() { Stage::Finetune } else { Stage::Baseline };

    let train = load_frames(&session.manifest, &train_recs, size, true, &session.audit)?;
    let val = load_frames(&session.manifest, &val_recs, size, true, &session.audit)?;
    let mut opt = Optimizer::new(
        cfg.optimizer.clone(),
        &model,
        &[Group::Embedding, Group::Encoder, Group::Decoder, Group::Head],
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "train"));
    let mut log = TrainLog::default();
    let mut best = None;
    for epoch in 1..=cfg.epochs {
        let (mut total, mut count) = (0.0f64, 0usize);
        for chunk in shuffled(train.len(), &mut rng).chunks(cfg.batch_size) {
            let frames: Vec<&Frame> = chunk.iter().map(|&i| &train[i]).collect();
            let x = stack(frames.iter().map(|f| &f.image));
            let y = mask_batch(&frames);
            let (logits, cache) = model.pixel_forward(&x, PixelHead::Segment)?;
            let (loss, grad) = segmentation_loss_and_logit_grad(&logits, &y)?;
            model.zero_grad();
            model.pixel_backward(&cache, &grad);
            opt.step(&mut model);
            total += loss as f64 * frames.len() as f64;
            count += frames.len();
        }
        let val_loss = if val.is_empty() {
            None
        } else {
            Some(validation_loss(&model, &val, cfg.batch_size)?)
        };
        let improved = log.push(EpochRecord {
            epoch,
            train_loss: total / count as f64,
            val_loss,
            wall_time: session.elapsed(),
        });
        if improved {
            best = Some(model.clone());
        }
    }
    session.finish(cfg, stage, log, &model, best.as_ref(), transfer)
}

/// Dispatches on `cfg.stage`.
pub fn run(cfg: &RunConfig) -> Result<RunOutput> {
    match cfg.stage {
        RunStage::PretrainMim => pretrain_mim(cfg),
        RunStage::PretrainContrastive => pretrain_contrastive(cfg),
        RunStage::Finetune => finetune(cfg),
    }
}

/// Reads a run's manifest back as JSON.
pub fn read_run_manifest(dir: &Path) -> Result<serde_json::Value> {
    let path = dir.join(RUN_MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}
