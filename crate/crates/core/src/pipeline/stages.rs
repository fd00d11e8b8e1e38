//! Inference and fusion over prediction directories.

use std::path::Path;

use ndarray::{s, Array3, Axis};

use crate::audit::{AccessAudit, AccessSummary};
use crate::data::image::write_mask_png;
use crate::data::raster::{read_probability, write_probability};
use crate::data::{Domain, FrameRecord, Manifest, Split};
use crate::error::{Error, Result};
use crate::fusion::{fuse, FusionInputs, FusionOptions, FusionStrategy, NormScope};
use crate::model::Checkpoint;
use crate::training::{load_frames, sigmoid, stack};

/// Frames evaluated per forward pass during inference.
pub const INFER_BATCH: usize = 16;

/// Outcome of a stage that reads dataset files.
#[derive(Debug, Clone, PartialEq)]
pub struct StageAccess {
    pub images: usize,
    pub access: AccessSummary,
}

/// Writes a probability map for every frame of `domain`/`splits`; only
/// images are read.
pub fn infer(checkpoint: &Path, manifest: &Manifest, domain: Domain, splits: &[Split], out_dir: &Path) -> Result<StageAccess> {
    let ck = Checkpoint::load(checkpoint)?;
    let model = ck.to_model::<f32>()?;
    let size = model.config.image_size;
    let mut records: Vec<&FrameRecord> = manifest.select(domain, splits);
    if records.is_empty() {
        return Err(Error::Data(format!("no {domain} frames in {splits:?}")));
    }
    records.sort_by_key(|r| r.image_id());
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let audit = AccessAudit::new();
    for chunk in records.chunks(INFER_BATCH) {
        let frames = load_frames(manifest, chunk, size, false, &audit)?;
        let x = stack(frames.iter().map(|f| &f.image));
        let logits = model.forward_segment(&x)?;
        for (i, f) in frames.iter().enumerate() {
            let p = logits.slice(s![i, 0, .., ..]).mapv(sigmoid);
            write_probability(out_dir, &f.record.image_id(), &p)?;
        }
    }
    Ok(StageAccess {
        images: records.len(),
        access: audit.summarize(manifest),
    })
}

/// Fuses two prediction directories image by image. Writes the fused
/// probability map and `masks/<id>.png` into `out_dir`. With
/// [`NormScope::PerBatch`] the confidence range is taken over all images.
pub fn fuse_dirs(
    generative: &Path,
    contrastive: &Path,
    ids: &[String],
    strategy: FusionStrategy,
    options: FusionOptions,
    out_dir: &Path,
) -> Result<()> {
    let audit = AccessAudit::new();
    let load = |dir: &Path| -> Result<Vec<ndarray::Array2<f32>>> {
        let mut missing = Vec::new();
        let mut maps = Vec::new();
        for id in ids {
            match read_probability(dir, id, &audit)? {
                Some(m) => maps.push(m),
                None => missing.push(id.clone()),
            }
        }
        if missing.is_empty() {
            Ok(maps)
        } else {
            Err(Error::MissingPredictions(missing))
        }
    };
    let pg = load(generative)?;
    let pc = load(contrastive)?;
    let masks_dir = out_dir.join("masks");
    std::fs::create_dir_all(&masks_dir).map_err(|e| Error::io(&masks_dir, e))?;
    let to3 = |m: &[&ndarray::Array2<f32>]| -> Result<Array3<f32>> {
        let views: Vec<_> = m.iter().map(|a| a.view().insert_axis(Axis(0))).collect();
        ndarray::concatenate(Axis(0), &views).map_err(|e| Error::InvalidInput(format!("prediction sizes differ: {e}")))
    };
    let groups: Vec<Vec<usize>> = match options.scope {
        NormScope::PerImage => (0..ids.len()).map(|i| vec![i]).collect(),
        NormScope::PerBatch => vec![(0..ids.len()).collect()],
    };
    for group in groups.into_iter().filter(|g| !g.is_empty()) {
        let inputs = FusionInputs {
            p_g: to3(&group.iter().map(|&i| &pg[i]).collect::<Vec<_>>())?,
            p_c: to3(&group.iter().map(|&i| &pc[i]).collect::<Vec<_>>())?,
            strategy,
            options,
        };
        let fused = fuse(&inputs)?;
        for (k, &i) in group.iter().enumerate() {
            write_probability(out_dir, &ids[i], &fused.probabilities.index_axis(Axis(0), k).to_owned())?;
            write_mask_png(
                &masks_dir.join(format!("{}.png", ids[i])),
                &fused.binary_mask.index_axis(Axis(0), k).to_owned(),
            )?;
        }
    }
    Ok(())
}

/// Image ids of every frame of `domain`/`splits`, sorted.
pub fn frame_ids(manifest: &Manifest, domain: Domain, splits: &[Split]) -> Vec<String> {
    let mut ids: Vec<String> = manifest.select(domain, splits).iter().map(|r| r.image_id()).collect();
    ids.sort();
    ids
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::raster::read_f32_raster;
    use ndarray::Array2;

    #[test]
    fn fused_average_written_per_image() {
        let dir = tempfile::tempdir().unwrap();
        let (g, c, o) = (dir.path().join("g"), dir.path().join("c"), dir.path().join("o"));
        let ids: Vec<String> = vec!["a".into(), "b".into()];
        for (i, id) in ids.iter().enumerate() {
            write_probability(&g, id, &Array2::from_elem((4, 4), 0.2 + 0.1 * i as f32)).unwrap();
            write_probability(&c, id, &Array2::from_elem((4, 4), 0.8)).unwrap();
        }
        fuse_dirs(&g, &c, &ids, FusionStrategy::Average, FusionOptions::default(), &o).unwrap();
        let a = read_f32_raster(&o.join("a.f32")).unwrap();
        assert!(a.iter().all(|&v| (v - 0.5).abs() < 1e-6));
        assert!(o.join("masks/b.png").is_file());
    }

    #[test]
    fn missing_branch_prediction_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let (g, c) = (dir.path().join("g"), dir.path().join("c"));
        write_probability(&g, "a", &Array2::from_elem((2, 2), 0.5)).unwrap();
        std::fs::create_dir_all(&c).unwrap();
        let r = fuse_dirs(&g, &c, &["a".into()], FusionStrategy::Entropy, FusionOptions::default(), &dir.path().join("o"));
        assert!(matches!(r, Err(Error::MissingPredictions(v)) if v == vec!["a".to_string()]));
    }
}
