use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};

/// Smoothing constant added to both numerator and denominator of Dice.
pub const DICE_SMOOTH: f64 = 1.0;
/// Probabilities are clamped to `[BCE_CLAMP, 1 - BCE_CLAMP]` before `ln`.
pub const BCE_CLAMP: f64 = 1e-7;

/// Flattened prediction/label pair for binary segmentation.
#[derive(Debug, Clone, Copy)]
pub struct SegPair<'a, T: Scalar> {
    /// Per-pixel probabilities in `[0, 1]`.
    pub prediction: &'a [T],
    /// Per-pixel labels in `{0, 1}`.
    pub target: &'a [T],
    pub smooth: T,
}

impl<'a, T: Scalar> SegPair<'a, T> {
    pub fn new(prediction: &'a [T], target: &'a [T]) -> Result<Self> {
        if prediction.len() != target.len() {
            return Err(Error::InvalidInput(format!(
                "prediction has {} pixels, target has {}",
                prediction.len(),
                target.len()
            )));
        }
        if prediction.is_empty() {
            return Err(Error::InvalidInput("empty segmentation pair".into()));
        }
        if let Some(p) = prediction
            .iter()
            .find(|p| !p.is_finite() || **p < T::zero() || **p > T::one())
        {
            return Err(Error::InvalidInput(format!(
                "prediction {p} outside [0, 1]"
            )));
        }
        if let Some(y) = target.iter().find(|y| **y != T::zero() && **y != T::one()) {
            return Err(Error::InvalidInput(format!("label {y} is not binary")));
        }
        Ok(Self {
            prediction,
            target,
            smooth: lit(DICE_SMOOTH),
        })
    }

    pub fn pixel_count(&self) -> usize {
        self.prediction.len()
    }
}

fn dice_terms<T: Scalar>(pair: &SegPair<'_, T>) -> (T, T) {
    let mut inter = T::zero();
    let mut sum = T::zero();
    for (&p, &y) in pair.prediction.iter().zip(pair.target) {
        inter += p * y;
        sum += p + y;
    }
    (inter, sum)
}

/// `1 - (2 * sum(p * y) + eps) / (sum(p) + sum(y) + eps)`.
pub fn dice_loss<T: Scalar>(pair: &SegPair<'_, T>) -> T {
    let (inter, sum) = dice_terms(pair);
    let two = lit::<T>(2.0);
    T::one() - (two * inter + pair.smooth) / (sum + pair.smooth)
}

pub fn dice_grad<T: Scalar>(pair: &SegPair<'_, T>) -> Vec<T> {
    let (inter, sum) = dice_terms(pair);
    let two = lit::<T>(2.0);
    let num = two * inter + pair.smooth;
    let den = sum + pair.smooth;
    let den2 = den * den;
    pair.target
        .iter()
        .map(|&y| -(two * y * den - num) / den2)
        .collect()
}

#[inline]
fn clamp_prob<T: Scalar>(p: T) -> (T, bool) {
    let lo = lit::<T>(BCE_CLAMP);
    let hi = T::one() - lo;
    if p < lo {
        (lo, true)
    } else if p > hi {
        (hi, true)
    } else {
        (p, false)
    }
}

/// Mean binary cross-entropy with clamped probabilities (natural log).
pub fn bce_loss<T: Scalar>(pair: &SegPair<'_, T>) -> T {
    let n = T::from_usize(pair.pixel_count()).unwrap();
    let mut acc = T::zero();
    for (&p, &y) in pair.prediction.iter().zip(pair.target) {
        let (pc, _) = clamp_prob(p);
        acc += y * pc.ln() + (T::one() - y) * (T::one() - pc).ln();
    }
    -acc / n
}

/// Gradient of [`bce_loss`]; zero where the clamp is active.
pub fn bce_grad<T: Scalar>(pair: &SegPair<'_, T>) -> Vec<T> {
    let n = T::from_usize(pair.pixel_count()).unwrap();
    pair.prediction
        .iter()
        .zip(pair.target)
        .map(|(&p, &y)| {
            let (pc, clamped) = clamp_prob(p);
            if clamped {
                T::zero()
            } else {
                (-y / pc + (T::one() - y) / (T::one() - pc)) / n
            }
        })
        .collect()
}

/// Unweighted sum of Dice and BCE.
pub fn dice_bce_loss<T: Scalar>(pair: &SegPair<'_, T>) -> T {
    dice_loss(pair) + bce_loss(pair)
}

pub fn dice_bce_grad<T: Scalar>(pair: &SegPair<'_, T>) -> Vec<T> {
    dice_grad(pair)
        .into_iter()
        .zip(bce_grad(pair))
        .map(|(a, b)| a + b)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dice_hand_cases() {
        let ones = vec![1.0f64; 4];
        let zeros = vec![0.0f64; 4];
        assert_eq!(dice_loss(&SegPair::new(&ones, &ones).unwrap()), 0.0);
        assert!((dice_loss(&SegPair::new(&ones, &zeros).unwrap()) - 0.8).abs() < 1e-15);
        assert_eq!(dice_loss(&SegPair::new(&zeros, &zeros).unwrap()), 0.0);
    }

    #[test]
    fn bce_hand_cases() {
        let half = vec![0.5f64; 6];
        let y = vec![1.0, 0.0, 1.0, 1.0, 0.0, 0.0];
        let l = bce_loss(&SegPair::new(&half, &y).unwrap());
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);

        assert!(bce_loss(&SegPair::new(&y, &y).unwrap()) <= 1e-6);

        let l = bce_loss(&SegPair::new(&[0.9f64], &[1.0]).unwrap());
        assert!((l - 0.105_360_515_657_826_3).abs() < 1e-12);
    }

    #[test]
    fn dice_bce_half_against_ones() {
        let p = vec![0.5f64; 4];
        let y = vec![1.0f64; 4];
        let pair = SegPair::new(&p, &y).unwrap();
        assert!((dice_loss(&pair) - 2.0 / 7.0).abs() < 1e-12);
        let total = dice_bce_loss(&pair);
        assert!((total - (2.0 / 7.0 + std::f64::consts::LN_2)).abs() < 1e-12);
        assert!((total - 0.97886).abs() < 1e-5);
        assert_eq!(total, dice_loss(&pair) + bce_loss(&pair));
    }

    #[test]
    fn rejects_bad_pairs() {
        assert!(SegPair::new(&[0.5f32], &[1.0, 0.0]).is_err());
        assert!(SegPair::new(&[1.5f32], &[1.0]).is_err());
        assert!(SegPair::new(&[f32::NAN], &[1.0]).is_err());
        assert!(SegPair::new(&[0.5f32], &[0.5]).is_err());
        assert!(SegPair::<f32>::new(&[], &[]).is_err());
    }

    #[test]
    fn clamped_pixels_have_zero_bce_gradient() {
        let g = bce_grad(&SegPair::new(&[0.0f64, 1.0], &[1.0, 0.0]).unwrap());
        assert_eq!(g, vec![0.0, 0.0]);
    }
}
