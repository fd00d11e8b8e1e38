//! NT-Xent with temporal negative masking.
//!
//! The `2B` samples are ordered `[z_1..z_B, z'_1..z'_B]`; sample `i` and
//! `i + B` form the positive pair and share `(video_id, frame_index)`.
//! Same-video samples closer than `min_frame_gap` frames are removed from the
//! negative set by overwriting their similarity with the most negative finite
//! value of the scalar type before the softmax.

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::scalar::{to_f64, Scalar};

#[derive(Debug, Clone)]
pub struct EmbeddingBatch<T: Scalar> {
    /// `B x d` embeddings of the first views, rows unit-norm.
    pub z: Array2<T>,
    /// `B x d` embeddings of the second views, rows unit-norm.
    pub z_prime: Array2<T>,
    pub video_ids: Vec<String>,
    pub frame_indices: Vec<u64>,
    pub temperature: T,
    pub min_frame_gap: u64,
}

impl<T: Scalar> EmbeddingBatch<T> {
    pub fn new(
        z: Array2<T>,
        z_prime: Array2<T>,
        video_ids: Vec<String>,
        frame_indices: Vec<u64>,
        temperature: T,
        min_frame_gap: u64,
    ) -> Result<Self> {
        let b = z.nrows();
        if b == 0 {
            return Err(Error::InvalidInput("empty embedding batch".into()));
        }
        if z.dim() != z_prime.dim() {
            return Err(Error::InvalidInput(format!(
                "view shapes differ: {:?} vs {:?}",
                z.dim(),
                z_prime.dim()
            )));
        }
        if video_ids.len() != b || frame_indices.len() != b {
            return Err(Error::InvalidInput(format!(
                "metadata lengths ({}, {}) differ from batch size {b}",
                video_ids.len(),
                frame_indices.len()
            )));
        }
        if !(temperature > T::zero()) || !temperature.is_finite() {
            return Err(Error::InvalidInput(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        // f32 rounding of a normalized row leaves ~1e-7 relative error per
        // component; widen the band slightly for narrow types.
        let tol = (16.0 * to_f64(T::epsilon())).max(1e-6);
        for (name, m) in [("z", &z), ("z_prime", &z_prime)] {
            for (i, row) in m.outer_iter().enumerate() {
                let norm = row
                    .iter()
                    .map(|&v| to_f64(v) * to_f64(v))
                    .sum::<f64>()
                    .sqrt();
                if (norm - 1.0).abs() > tol {
                    return Err(Error::InvalidInput(format!(
                        "{name} row {i} has norm {norm}, expected 1"
                    )));
                }
            }
        }
        Ok(Self {
            z,
            z_prime,
            video_ids,
            frame_indices,
            temperature,
            min_frame_gap,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.z.nrows()
    }

    /// Concatenated `2B x d` matrix `[z; z']`.
    pub fn stacked(&self) -> Array2<T> {
        concatenate(Axis(0), &[self.z.view(), self.z_prime.view()]).expect("equal widths")
    }
}

/// `M[k][l]` is true when `l` is excluded from the softmax denominator of row
/// `k`: the diagonal, plus same-video pairs with `|frame_k - frame_l| < gap`
/// that are not the positive pair.
pub fn build_temporal_mask(
    video_ids: &[String],
    frame_indices: &[u64],
    b: usize,
    min_frame_gap: u64,
) -> Result<Array2<bool>> {
    if video_ids.len() != b || frame_indices.len() != b {
        return Err(Error::InvalidInput(format!(
            "metadata lengths ({}, {}) differ from batch size {b}",
            video_ids.len(),
            frame_indices.len()
        )));
    }
    let n = 2 * b;
    let mut mask = Array2::from_elem((n, n), false);
    for k in 0..n {
        for l in 0..n {
            let (ok, ol) = (k % b, l % b);
            let positive = k != l && ok == ol;
            let close = video_ids[ok] == video_ids[ol]
                && frame_indices[ok].abs_diff(frame_indices[ol]) < min_frame_gap;
            mask[[k, l]] = k == l || (close && !positive);
        }
    }
    Ok(mask)
}

/// `s_kl = z_k . z_l / tau` over the stacked rows.
pub fn similarity_matrix<T: Scalar>(stacked: ArrayView2<T>, temperature: T) -> Array2<T> {
    stacked.dot(&stacked.t()) / temperature
}

#[derive(Debug, Clone)]
pub struct MaskedSimilarity<T: Scalar> {
    pub s: Array2<T>,
    pub mask: Array2<bool>,
    pub s_tilde: Array2<T>,
    /// Column of the positive for each row.
    pub positive_index: Vec<usize>,
}

pub fn masked_similarity<T: Scalar>(batch: &EmbeddingBatch<T>) -> Result<MaskedSimilarity<T>> {
    let b = batch.batch_size();
    let mask = build_temporal_mask(&batch.video_ids, &batch.frame_indices, b, batch.min_frame_gap)?;
    let s = similarity_matrix(batch.stacked().view(), batch.temperature);
    let sentinel = T::min_value();
    let mut s_tilde = s.clone();
    s_tilde.zip_mut_with(&mask, |v, &m| {
        if m {
            *v = sentinel;
        }
    });
    let positive_index = (0..2 * b).map(|k| (k + b) % (2 * b)).collect();
    Ok(MaskedSimilarity {
        s,
        mask,
        s_tilde,
        positive_index,
    })
}

/// Loss and gradient with respect to the stacked rows, for an arbitrary
/// (not necessarily normalized) `2B x d` matrix and a precomputed mask.
pub fn mt_nxent_raw<T: Scalar>(
    stacked: ArrayView2<T>,
    mask: &Array2<bool>,
    temperature: T,
) -> (T, Array2<T>) {
    let n = stacked.nrows();
    let b = n / 2;
    let s = similarity_matrix(stacked, temperature);
    let sentinel = T::min_value();
    let inv_n = T::one() / T::from_usize(n).unwrap();
    let mut loss = T::zero();
    let mut g = Array2::<T>::zeros((n, n));
    for k in 0..n {
        let pos = (k + b) % n;
        let row: Vec<T> = (0..n)
            .map(|l| if mask[[k, l]] { sentinel } else { s[[k, l]] })
            .collect();
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = row.iter().map(|&v| (v - m).exp()).collect();
        let denom: T = exps.iter().copied().sum();
        loss += m + denom.ln() - row[pos];
        for l in 0..n {
            if mask[[k, l]] {
                continue;
            }
            let soft = exps[l] / denom;
            let target = if l == pos { T::one() } else { T::zero() };
            g[[k, l]] = (soft - target) * inv_n;
        }
    }
    let sym = &g + &g.t();
    let grad = sym.dot(&stacked) / temperature;
    (loss * inv_n, grad)
}

/// Mean cross-entropy of each row's positive over the masked similarity row.
pub fn mt_nxent_loss<T: Scalar>(batch: &EmbeddingBatch<T>) -> Result<T> {
    mt_nxent_loss_and_grad(batch).map(|(l, _, _)| l)
}

/// Loss plus gradients with respect to `z` and `z_prime`.
pub fn mt_nxent_loss_and_grad<T: Scalar>(
    batch: &EmbeddingBatch<T>,
) -> Result<(T, Array2<T>, Array2<T>)> {
    let b = batch.batch_size();
    let mask = build_temporal_mask(&batch.video_ids, &batch.frame_indices, b, batch.min_frame_gap)?;
    let (loss, grad) = mt_nxent_raw(batch.stacked().view(), &mask, batch.temperature);
    let gz = grad.slice(s![..b, ..]).to_owned();
    let gzp = grad.slice(s![b.., ..]).to_owned();
    Ok((loss, gz, gzp))
}
