use ndarray::{ArrayView, Dimension};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pixel counts of a prediction/ground-truth pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Overlap {
    pub intersection: u64,
    pub predicted: u64,
    pub truth: u64,
}

impl Overlap {
    pub fn count<D: Dimension>(pred: ArrayView<'_, bool, D>, gt: ArrayView<'_, bool, D>) -> Result<Self> {
        if pred.shape() != gt.shape() {
            return Err(Error::InvalidInput(format!(
                "mask shapes differ: {:?} vs {:?}",
                pred.shape(),
                gt.shape()
            )));
        }
        let mut o = Overlap::default();
        for (&p, &g) in pred.iter().zip(gt.iter()) {
            o.predicted += p as u64;
            o.truth += g as u64;
            o.intersection += (p && g) as u64;
        }
        Ok(o)
    }

    pub fn union(&self) -> u64 {
        self.predicted + self.truth - self.intersection
    }

    /// `2|A∩B| / (|A| + |B|)`; 1 when both masks are empty.
    pub fn dsc(&self) -> f64 {
        let denom = self.predicted + self.truth;
        if denom == 0 {
            1.0
        } else {
            2.0 * self.intersection as f64 / denom as f64
        }
    }

    /// `|A∩B| / |A∪B|`; 1 when both masks are empty.
    pub fn iou(&self) -> f64 {
        let u = self.union();
        if u == 0 {
            1.0
        } else {
            self.intersection as f64 / u as f64
        }
    }
}

pub fn dsc<D: Dimension>(pred: ArrayView<'_, bool, D>, gt: ArrayView<'_, bool, D>) -> Result<f64> {
    Overlap::count(pred, gt).map(|o| o.dsc())
}

pub fn iou<D: Dimension>(pred: ArrayView<'_, bool, D>, gt: ArrayView<'_, bool, D>) -> Result<f64> {
    Overlap::count(pred, gt).map(|o| o.iou())
}

/// Per-image score row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub image_id: String,
    pub video_id: String,
    pub patient_id: String,
    pub dsc: f64,
    pub iou: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr2, Array2};

    #[test]
    fn hand_cases() {
        let a = arr2(&[[true, true], [true, true]]);
        assert_eq!(dsc(a.view(), a.view()).unwrap(), 1.0);
        assert_eq!(iou(a.view(), a.view()).unwrap(), 1.0);

        let x = arr2(&[[true, false], [false, false]]);
        let y = arr2(&[[false, true], [false, false]]);
        assert_eq!(dsc(x.view(), y.view()).unwrap(), 0.0);
        assert_eq!(iou(x.view(), y.view()).unwrap(), 0.0);

        // |A| = |B| = 4, overlap 2, union 6.
        let a = arr2(&[[true, true, true, true, false, false]]);
        let b = arr2(&[[false, false, true, true, true, true]]);
        assert_eq!(dsc(a.view(), b.view()).unwrap(), 0.5);
        let i = iou(a.view(), b.view()).unwrap();
        assert!((i - 1.0 / 3.0).abs() < 1e-15);
        assert!((i - 0.5 / 1.5).abs() < 1e-15);
    }

    #[test]
    fn both_empty_scores_one() {
        let e = Array2::from_elem((3, 3), false);
        assert_eq!(dsc(e.view(), e.view()).unwrap(), 1.0);
        assert_eq!(iou(e.view(), e.view()).unwrap(), 1.0);
    }

    #[test]
    fn shape_mismatch() {
        let a = Array2::from_elem((2, 3), false);
        let b = Array2::from_elem((3, 2), false);
        assert!(dsc(a.view(), b.view()).is_err());
    }
}
