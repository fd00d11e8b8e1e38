//! Confidence-aware fusion of two branch probability maps.
//!
//! `y = (p_g * c_g + p_c * c_c) / 2`, with each branch's confidence map
//! min-max normalized before weighting. Maps are `N x H x W`.

use ndarray::{Array, Array3, ArrayView, ArrayView3, Axis, Dimension, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};

/// Clamp applied before taking logarithms of probabilities.
pub const PROB_CLAMP: f64 = 1e-7;
pub const DECISION_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FusionStrategy {
    #[default]
    Entropy,
    Margin,
    Average,
}

impl std::str::FromStr for FusionStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "entropy" => Ok(Self::Entropy),
            "margin" => Ok(Self::Margin),
            "average" => Ok(Self::Average),
            other => Err(Error::Config(format!("unknown fusion strategy `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EntropyBase {
    /// Binary entropy in bits; confidence lands in `[0, 1]`.
    #[default]
    Two,
    Natural,
}

/// Extent over which min and max are taken.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NormScope {
    #[default]
    PerImage,
    PerBatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct FusionOptions {
    pub entropy_base: EntropyBase,
    pub scope: NormScope,
}

#[derive(Debug, Clone)]
pub struct FusionInputs<T: Scalar> {
    pub p_g: Array3<T>,
    pub p_c: Array3<T>,
    pub strategy: FusionStrategy,
    pub options: FusionOptions,
}

#[derive(Debug, Clone)]
pub struct FusedPrediction<T: Scalar> {
    pub probabilities: Array3<T>,
    pub binary_mask: Array3<bool>,
    /// `(c_g*, c_c*)`; absent for the plain average.
    pub normalized_confidences: Option<(Array3<T>, Array3<T>)>,
}

/// `1 + sum_k p_k log p_k` over `{p, 1 - p}`.
pub fn entropy_confidence<T: Scalar, D: Dimension>(
    p: ArrayView<'_, T, D>,
    base: EntropyBase,
) -> Array<T, D> {
    let lo = lit::<T>(PROB_CLAMP);
    let hi = T::one() - lo;
    p.mapv(|v| {
        let a = v.max(lo).min(hi);
        let b = (T::one() - v).max(lo).min(hi);
        let s = match base {
            EntropyBase::Two => a * a.log2() + b * b.log2(),
            EntropyBase::Natural => a * a.ln() + b * b.ln(),
        };
        T::one() + s
    })
}

/// Gap between the top two class probabilities, `|2p - 1|`.
pub fn margin_confidence<T: Scalar, D: Dimension>(p: ArrayView<'_, T, D>) -> Array<T, D> {
    p.mapv(|v| (v - (T::one() - v)).abs())
}

fn minmax_in_place<T: Scalar>(values: &mut [T]) {
    let (mn, mx) = values
        .iter()
        .fold((T::infinity(), T::neg_infinity()), |(a, b), &v| (a.min(v), b.max(v)));
    if !(mx > mn) {
        values.iter_mut().for_each(|v| *v = T::one());
        return;
    }
    let range = mx - mn;
    values.iter_mut().for_each(|v| *v = (*v - mn) / range);
}

/// `(c - min) / (max - min)`; a constant map becomes all ones.
pub fn minmax_normalize<T: Scalar, D: Dimension>(c: ArrayView<'_, T, D>) -> Array<T, D> {
    let mut out = c.as_standard_layout().into_owned();
    minmax_in_place(out.as_slice_mut().expect("standard layout"));
    out
}

/// Min-max normalization of an `N x H x W` stack under the chosen scope.
pub fn normalize_scoped<T: Scalar>(c: ArrayView3<'_, T>, scope: NormScope) -> Array3<T> {
    match scope {
        NormScope::PerBatch => minmax_normalize(c),
        NormScope::PerImage => {
            let mut out = c.as_standard_layout().into_owned();
            for mut img in out.axis_iter_mut(Axis(0)) {
                let mut buf: Vec<T> = img.iter().copied().collect();
                minmax_in_place(&mut buf);
                img.iter_mut().zip(buf).for_each(|(d, s)| *d = s);
            }
            out
        }
    }
}

fn validate<T: Scalar>(p: &Array3<T>, name: &str) -> Result<()> {
    if let Some(v) = p.iter().find(|v| !v.is_finite() || **v < T::zero() || **v > T::one()) {
        return Err(Error::InvalidInput(format!(
            "{name} probability {v} outside [0, 1]"
        )));
    }
    Ok(())
}

pub fn fuse<T: Scalar>(inputs: &FusionInputs<T>) -> Result<FusedPrediction<T>> {
    if inputs.p_g.dim() != inputs.p_c.dim() {
        return Err(Error::InvalidInput(format!(
            "branch shapes differ: {:?} vs {:?}",
            inputs.p_g.dim(),
            inputs.p_c.dim()
        )));
    }
    validate(&inputs.p_g, "generative")?;
    validate(&inputs.p_c, "contrastive")?;
    let half = lit::<T>(0.5);
    let (probabilities, normalized_confidences) = match inputs.strategy {
        FusionStrategy::Average => {
            let mut y = inputs.p_g.clone();
            Zip::from(&mut y).and(&inputs.p_c).for_each(|a, &b| *a = (*a + b) * half);
            (y, None)
        }
        FusionStrategy::Entropy | FusionStrategy::Margin => {
            let raw = |p: &Array3<T>| match inputs.strategy {
                FusionStrategy::Entropy => entropy_confidence(p.view(), inputs.options.entropy_base),
                _ => margin_confidence(p.view()),
            };
            let cg = normalize_scoped(raw(&inputs.p_g).view(), inputs.options.scope);
            let cc = normalize_scoped(raw(&inputs.p_c).view(), inputs.options.scope);
            let mut y = Array3::zeros(inputs.p_g.dim());
            Zip::from(&mut y)
                .and(&inputs.p_g)
                .and(&cg)
                .and(&inputs.p_c)
                .and(&cc)
                .for_each(|y, &pg, &wg, &pc, &wc| *y = (pg * wg + pc * wc) * half);
            (y, Some((cg, cc)))
        }
    };
    let threshold = lit::<T>(DECISION_THRESHOLD);
    let binary_mask = probabilities.mapv(|v| v >= threshold);
    Ok(FusedPrediction {
        probabilities,
        binary_mask,
        normalized_confidences,
    })
}
