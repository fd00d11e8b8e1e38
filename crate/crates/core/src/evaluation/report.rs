//! Scoring prediction directories against ground truth and writing the
//! per-run tables, aggregate JSON and overlays.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::metrics::{ImageScore, Overlap};
use super::wilcoxon::{wilcoxon_signed_rank, PairedTestResult};
use crate::audit::AccessAudit;
use crate::data::raster::read_probability;
use crate::data::{image::write_rgb_png, pad_and_resize, read_gray_png, read_mask_png, Domain, FrameRecord, Manifest, Split};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEvaluation {
    pub name: String,
    pub scores: Vec<ImageScore>,
    pub mean_dsc: f64,
    pub mean_iou: f64,
}

/// Annotated frames of `domain`/`split`, sorted by image id.
pub fn scored_records<'a>(manifest: &'a Manifest, domain: Domain, split: Split) -> Vec<&'a FrameRecord> {
    let mut recs: Vec<&FrameRecord> = manifest
        .select(domain, &[split])
        .into_iter()
        .filter(|r| r.mask_path.is_some())
        .collect();
    recs.sort_by_key(|r| r.image_id());
    recs
}

fn ground_truth(manifest: &Manifest, r: &FrameRecord, size: (usize, usize), audit: &AccessAudit) -> Result<Array2<bool>> {
    let rel = r.mask_path.as_ref().expect("annotated frame");
    let gt = read_mask_png(&manifest.resolve(rel), audit)?;
    if gt.dim() == size {
        return Ok(gt);
    }
    if size.0 != size.1 {
        return Err(Error::Data(format!("prediction for {} is not square: {size:?}", r.image_id())));
    }
    let gt = pad_and_resize(&gt.mapv(|m| m as u8 as f32), size.0)?;
    Ok(gt.mapv(|v| v >= 0.5))
}

/// Scores every annotated frame of `split`; fails listing all frames whose
/// prediction is missing.
pub fn evaluate_run(
    name: &str,
    predictions: &Path,
    manifest: &Manifest,
    domain: Domain,
    split: Split,
    threshold: f64,
    audit: &AccessAudit,
) -> Result<RunEvaluation> {
    let records = scored_records(manifest, domain, split);
    if records.is_empty() {
        return Err(Error::Data(format!("no annotated {domain} frames in the {split} split")));
    }
    let missing: Vec<String> = records
        .iter()
        .map(|r| r.image_id())
        .filter(|id| crate::data::raster::probability_path(predictions, id).is_none())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingPredictions(missing));
    }
    let mut scores = Vec::with_capacity(records.len());
    for r in records {
        let id = r.image_id();
        let prob = read_probability(predictions, &id, audit)?.expect("presence checked");
        let pred = prob.mapv(|p| p as f64 >= threshold);
        let gt = ground_truth(manifest, r, prob.dim(), audit)?;
        let o = Overlap::count(pred.view(), gt.view())?;
        scores.push(ImageScore {
            image_id: id,
            video_id: r.video_id.clone(),
            patient_id: r.patient_id.clone(),
            dsc: o.dsc(),
            iou: o.iou(),
        });
    }
    let n = scores.len() as f64;
    Ok(RunEvaluation {
        name: name.to_string(),
        mean_dsc: scores.iter().map(|s| s.dsc).sum::<f64>() / n,
        mean_iou: scores.iter().map(|s| s.iou).sum::<f64>() / n,
        scores,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Dsc,
    Iou,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub n_images: usize,
    pub mean_dsc: f64,
    pub mean_iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseTest {
    pub a: String,
    pub b: String,
    pub metric: Metric,
    /// Mean of `a - b`.
    pub mean_difference: f64,
    pub result: Option<PairedTestResult>,
    /// Why no test result is available (e.g. too few nonzero differences).
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub threshold: f64,
    pub runs: BTreeMap<String, RunSummary>,
    pub tests: Vec<PairwiseTest>,
    /// Additional named sections supplied by the caller.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub sections: BTreeMap<String, serde_json::Value>,
}

fn paired_test(a: &RunEvaluation, b: &RunEvaluation, metric: Metric) -> Result<PairwiseTest> {
    let by_id: BTreeMap<&str, &ImageScore> = b.scores.iter().map(|s| (s.image_id.as_str(), s)).collect();
    let pick = |s: &ImageScore| match metric {
        Metric::Dsc => s.dsc,
        Metric::Iou => s.iou,
    };
    let mut xa = Vec::with_capacity(a.scores.len());
    let mut xb = Vec::with_capacity(a.scores.len());
    for s in &a.scores {
        let other = by_id.get(s.image_id.as_str()).ok_or_else(|| {
            Error::Data(format!("runs `{}` and `{}` disagree on image {}", a.name, b.name, s.image_id))
        })?;
        xa.push(pick(s));
        xb.push(pick(other));
    }
    if xa.len() != b.scores.len() {
        return Err(Error::Data(format!("runs `{}` and `{}` cover different images", a.name, b.name)));
    }
    let mean_difference = xa.iter().zip(&xb).map(|(x, y)| x - y).sum::<f64>() / xa.len() as f64;
    let (result, error) = match wilcoxon_signed_rank(&xa, &xb) {
        Ok(r) => (Some(r), None),
        Err(e) => (None, Some(e.to_string())),
    };
    Ok(PairwiseTest {
        a: a.name.clone(),
        b: b.name.clone(),
        metric,
        mean_difference,
        result,
        error,
    })
}

/// Per-run CSV rows: `image_id,video_id,patient_id,dsc,iou`.
pub fn scores_csv(run: &RunEvaluation) -> String {
    let mut out = String::from("image_id,video_id,patient_id,dsc,iou\n");
    for s in &run.scores {
        writeln!(out, "{},{},{},{},{}", s.image_id, s.video_id, s.patient_id, s.dsc, s.iou).unwrap();
    }
    out
}

/// Builds the aggregate and paired tests. `pairings = None` tests every
/// unordered pair in input order.
pub fn build_report(runs: &[RunEvaluation], pairings: Option<&[(String, String)]>, threshold: f64) -> Result<Report> {
    let find = |name: &str| {
        runs.iter()
            .find(|r| r.name == name)
            .ok_or_else(|| Error::Config(format!("pairing references unknown run `{name}`")))
    };
    let pairs: Vec<(&RunEvaluation, &RunEvaluation)> = match pairings {
        Some(p) => p.iter().map(|(a, b)| Ok((find(a)?, find(b)?))).collect::<Result<_>>()?,
        None => runs
            .iter()
            .enumerate()
            .flat_map(|(i, a)| runs[i + 1..].iter().map(move |b| (a, b)))
            .collect(),
    };
    let mut tests = Vec::new();
    for (a, b) in pairs {
        for m in [Metric::Dsc, Metric::Iou] {
            tests.push(paired_test(a, b, m)?);
        }
    }
    Ok(Report {
        threshold,
        runs: runs
            .iter()
            .map(|r| {
                (
                    r.name.clone(),
                    RunSummary {
                        n_images: r.scores.len(),
                        mean_dsc: r.mean_dsc,
                        mean_iou: r.mean_iou,
                    },
                )
            })
            .collect(),
        tests,
        sections: BTreeMap::new(),
    })
}

pub const REPORT_JSON: &str = "report.json";

/// Writes `scores_<run>.csv` per run and `report.json` into `out_dir`.
pub fn emit_report(report: &Report, runs: &[RunEvaluation], out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    for r in runs {
        let p = out_dir.join(format!("scores_{}.csv", r.name));
        std::fs::write(&p, scores_csv(r)).map_err(|e| Error::io(&p, e))?;
    }
    let p = out_dir.join(REPORT_JSON);
    std::fs::write(&p, serde_json::to_string_pretty(report)? + "\n").map_err(|e| Error::io(&p, e))
}

fn contour(mask: &Array2<bool>) -> Array2<bool> {
    let (h, w) = mask.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        mask[[y, x]]
            && (y == 0
                || x == 0
                || y + 1 == h
                || x + 1 == w
                || !mask[[y - 1, x]]
                || !mask[[y + 1, x]]
                || !mask[[y, x - 1]]
                || !mask[[y, x + 1]])
    })
}

/// One RGB overlay per scored frame: ground-truth contour in green,
/// prediction contour in red (yellow where they coincide).
pub fn write_overlays(
    run: &RunEvaluation,
    predictions: &Path,
    manifest: &Manifest,
    threshold: f64,
    out_dir: &Path,
    audit: &AccessAudit,
) -> Result<()> {
    let records: BTreeMap<String, &FrameRecord> = manifest.records.iter().map(|r| (r.image_id(), r)).collect();
    for s in &run.scores {
        let r = records[&s.image_id];
        let prob = read_probability(predictions, &s.image_id, audit)?
            .ok_or_else(|| Error::MissingPredictions(vec![s.image_id.clone()]))?;
        let size = prob.dim();
        let base = pad_and_resize(&read_gray_png(&manifest.resolve(&r.image_path), audit)?, size.0)?;
        let gt = contour(&ground_truth(manifest, r, size, audit)?);
        let pred = contour(&prob.mapv(|p| p as f64 >= threshold));
        let mut rgb = Vec::with_capacity(3 * prob.len());
        for ((&v, &g), &p) in base.iter().zip(gt.iter()).zip(pred.iter()) {
            let b = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            rgb.extend_from_slice(&match (p, g) {
                (true, true) => [255, 255, 0],
                (true, false) => [255, 0, 0],
                (false, true) => [0, 255, 0],
                (false, false) => [b, b, b],
            });
        }
        write_rgb_png(&out_dir.join(format!("{}.png", s.image_id)), size.1 as u32, size.0 as u32, rgb)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(name: &str, dscs: &[f64]) -> RunEvaluation {
        let scores: Vec<ImageScore> = dscs
            .iter()
            .enumerate()
            .map(|(i, &d)| ImageScore {
                image_id: format!("im{i}"),
                video_id: "v".into(),
                patient_id: "p".into(),
                dsc: d,
                iou: d / (2.0 - d),
            })
            .collect();
        RunEvaluation {
            name: name.into(),
            mean_dsc: dscs.iter().sum::<f64>() / dscs.len() as f64,
            mean_iou: scores.iter().map(|s| s.iou).sum::<f64>() / dscs.len() as f64,
            scores,
        }
    }

    #[test]
    fn pairwise_tests_per_metric() {
        let a = run("a", &[0.9, 0.8, 0.85, 0.7, 0.95, 0.6]);
        let b = run("b", &[0.5, 0.6, 0.55, 0.65, 0.7, 0.5]);
        let r = build_report(&[a.clone(), b.clone()], None, 0.5).unwrap();
        assert_eq!(r.tests.len(), 2);
        assert!(r.tests.iter().all(|t| t.result.is_some()));
        assert!((r.tests[0].result.as_ref().unwrap().p_value - 2.0 / 64.0).abs() < 1e-12);
        let single = build_report(&[a.clone()], None, 0.5).unwrap();
        assert!(single.tests.is_empty());
        assert_eq!(single.runs["a"].n_images, 6);
        let few = build_report(&[run("x", &[0.5, 0.6]), run("y", &[0.4, 0.3])], None, 0.5).unwrap();
        assert!(few.tests[0].error.is_some());
        assert!(build_report(&[a, b], Some(&[("a".into(), "zzz".into())]), 0.5).is_err());
    }

    #[test]
    fn csv_is_deterministic() {
        let a = run("a", &[0.25, 1.0]);
        assert_eq!(scores_csv(&a), scores_csv(&a.clone()));
        assert_eq!(scores_csv(&a).lines().next().unwrap(), "image_id,video_id,patient_id,dsc,iou");
        assert_eq!(scores_csv(&a).lines().count(), 3);
    }

    #[test]
    fn contour_of_square() {
        let mut m = Array2::from_elem((5, 5), false);
        for y in 1..4 {
            for x in 1..4 {
                m[[y, x]] = true;
            }
        }
        let c = contour(&m);
        assert!(!c[[2, 2]]);
        assert!(c[[1, 1]] && c[[3, 2]]);
        assert_eq!(c.iter().filter(|&&v| v).count(), 8);
    }
}
