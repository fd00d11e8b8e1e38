use ndarray::{Array2, Array4, ArrayView4};
use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Boolean patch grid; `true` marks a masked patch.
pub type PatchMask = Array2<bool>;

/// Draws a mask with exactly `floor(ratio * grid_h * grid_w)` masked cells,
/// chosen uniformly without replacement.
pub fn sample_patch_mask<R: Rng + ?Sized>(
    grid_h: usize,
    grid_w: usize,
    ratio: f64,
    rng: &mut R,
) -> PatchMask {
    let total = grid_h * grid_w;
    let ratio = ratio.clamp(0.0, 1.0);
    // Guard against 0.6 * 10 = 5.999999 style undercounts.
    let count = ((ratio * total as f64) + 1e-9).floor() as usize;
    let count = count.min(total);
    let mut mask = Array2::from_elem((grid_h, grid_w), false);
    if count == 0 {
        return mask;
    }
    let flat = mask.as_slice_mut().expect("fresh array is contiguous");
    for idx in sample(rng, total, count).into_iter() {
        flat[idx] = true;
    }
    mask
}

/// A batch prepared for masked image modeling.
#[derive(Debug, Clone)]
pub struct MaskedBatch<T: Scalar> {
    /// `N x C x H x W`, values in `[0, 1]`.
    pub images: Array4<T>,
    /// One grid of shape `(H / patch_size, W / patch_size)` per image.
    pub patch_mask: Vec<PatchMask>,
    pub patch_size: usize,
    /// `images` with every masked patch set to zero.
    pub masked_images: Array4<T>,
}

impl<T: Scalar> MaskedBatch<T> {
    pub fn new(images: Array4<T>, patch_mask: Vec<PatchMask>, patch_size: usize) -> Result<Self> {
        let (n, _c, h, w) = images.dim();
        if patch_size == 0 || h % patch_size != 0 || w % patch_size != 0 {
            return Err(Error::InvalidInput(format!(
                "image {h}x{w} is not divisible by mask patch size {patch_size}"
            )));
        }
        if patch_mask.len() != n {
            return Err(Error::InvalidInput(format!(
                "{} patch masks for {n} images",
                patch_mask.len()
            )));
        }
        let grid = (h / patch_size, w / patch_size);
        if let Some(bad) = patch_mask.iter().find(|m| m.dim() != grid) {
            return Err(Error::InvalidInput(format!(
                "patch mask shape {:?} does not match grid {grid:?}",
                bad.dim()
            )));
        }
        let mut masked_images = images.clone();
        for (i, mask) in patch_mask.iter().enumerate() {
            for ((gy, gx), &m) in mask.indexed_iter() {
                if m {
                    masked_images
                        .slice_mut(ndarray::s![
                            i,
                            ..,
                            gy * patch_size..(gy + 1) * patch_size,
                            gx * patch_size..(gx + 1) * patch_size
                        ])
                        .fill(T::zero());
                }
            }
        }
        Ok(Self {
            images,
            patch_mask,
            patch_size,
            masked_images,
        })
    }

    /// Samples an independent mask per image.
    pub fn sample<R: Rng + ?Sized>(
        images: Array4<T>,
        patch_size: usize,
        ratio: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let (n, _, h, w) = images.dim();
        if patch_size == 0 || h % patch_size != 0 || w % patch_size != 0 {
            return Err(Error::InvalidInput(format!(
                "image {h}x{w} is not divisible by mask patch size {patch_size}"
            )));
        }
        let masks = (0..n)
            .map(|_| sample_patch_mask(h / patch_size, w / patch_size, ratio, rng))
            .collect();
        Self::new(images, masks, patch_size)
    }

    #[inline]
    fn pixel_masked(&self, img: usize, y: usize, x: usize) -> bool {
        self.patch_mask[img][[y / self.patch_size, x / self.patch_size]]
    }

    fn masked_pixel_counts(&self) -> Result<Vec<usize>> {
        let c = self.images.dim().1;
        let area = self.patch_size * self.patch_size * c;
        self.patch_mask
            .iter()
            .enumerate()
            .map(|(i, m)| {
                let patches = m.iter().filter(|&&v| v).count();
                if patches == 0 {
                    Err(Error::UndefinedLoss(format!(
                        "image {i} has no masked patches"
                    )))
                } else {
                    Ok(patches * area)
                }
            })
            .collect()
    }

    fn check_recon(&self, recon: &ArrayView4<T>) -> Result<()> {
        if recon.dim() != self.images.dim() {
            return Err(Error::InvalidInput(format!(
                "reconstruction shape {:?} differs from image shape {:?}",
                recon.dim(),
                self.images.dim()
            )));
        }
        Ok(())
    }
}

/// Mean absolute error over masked pixels of each image, averaged over the
/// batch. Unmasked pixels never enter the sum.
pub fn masked_mae_loss<T: Scalar>(batch: &MaskedBatch<T>, recon: ArrayView4<T>) -> Result<T> {
    batch.check_recon(&recon)?;
    let counts = batch.masked_pixel_counts()?;
    let (n, c, h, w) = batch.images.dim();
    let mut total = T::zero();
    for i in 0..n {
        let mut acc = T::zero();
        for y in 0..h {
            for x in 0..w {
                if !batch.pixel_masked(i, y, x) {
                    continue;
                }
                for ch in 0..c {
                    acc += (batch.images[[i, ch, y, x]] - recon[[i, ch, y, x]]).abs();
                }
            }
        }
        total += acc / T::from_usize(counts[i]).unwrap();
    }
    Ok(total / T::from_usize(n).unwrap())
}

/// Gradient of [`masked_mae_loss`] with respect to the reconstruction.
/// Uses `sign(0) = 0` at exact matches.
pub fn masked_mae_grad<T: Scalar>(batch: &MaskedBatch<T>, recon: ArrayView4<T>) -> Result<Array4<T>> {
    batch.check_recon(&recon)?;
    let counts = batch.masked_pixel_counts()?;
    let (n, c, h, w) = batch.images.dim();
    let mut grad = Array4::zeros((n, c, h, w));
    let bn = T::from_usize(n).unwrap();
    for i in 0..n {
        let scale = T::one() / (T::from_usize(counts[i]).unwrap() * bn);
        for y in 0..h {
            for x in 0..w {
                if !batch.pixel_masked(i, y, x) {
                    continue;
                }
                for ch in 0..c {
                    let d = recon[[i, ch, y, x]] - batch.images[[i, ch, y, x]];
                    let s = if d > T::zero() {
                        T::one()
                    } else if d < T::zero() {
                        -T::one()
                    } else {
                        T::zero()
                    };
                    grad[[i, ch, y, x]] = s * scale;
                }
            }
        }
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mask_count_is_floor_of_ratio() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = sample_patch_mask(7, 7, 0.6, &mut rng);
        assert_eq!(m.iter().filter(|&&v| v).count(), 29);
        assert!(sample_patch_mask(3, 5, 0.0, &mut rng).iter().all(|&v| !v));
        assert!(sample_patch_mask(3, 5, 1.0, &mut rng).iter().all(|&v| v));
        assert_eq!(
            sample_patch_mask(10, 1, 0.6, &mut rng).iter().filter(|&&v| v).count(),
            6
        );
    }

    #[test]
    fn mask_is_deterministic_per_rng_state() {
        let a = sample_patch_mask(8, 8, 0.6, &mut ChaCha8Rng::seed_from_u64(5));
        let b = sample_patch_mask(8, 8, 0.6, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(a, b);
    }

    fn two_by_two_batch() -> MaskedBatch<f64> {
        let images = Array4::from_shape_fn((1, 1, 4, 4), |(_, _, y, x)| (y * 4 + x) as f64 / 16.0);
        let mut mask = Array2::from_elem((2, 2), false);
        mask[[0, 1]] = true;
        MaskedBatch::new(images, vec![mask], 2).unwrap()
    }

    #[test]
    fn masked_images_zero_only_masked_patch() {
        let b = two_by_two_batch();
        for y in 0..4 {
            for x in 0..4 {
                let masked = y < 2 && x >= 2;
                if masked {
                    assert_eq!(b.masked_images[[0, 0, y, x]], 0.0);
                } else {
                    assert_eq!(b.masked_images[[0, 0, y, x]], b.images[[0, 0, y, x]]);
                }
            }
        }
    }

    #[test]
    fn identity_reconstruction_has_zero_loss() {
        let b = two_by_two_batch();
        assert_eq!(masked_mae_loss(&b, b.images.view()).unwrap(), 0.0);
    }

    #[test]
    fn constant_offset_on_masked_pixels() {
        let b = two_by_two_batch();
        let mut r = b.images.clone();
        for y in 0..2 {
            for x in 2..4 {
                r[[0, 0, y, x]] += 0.25;
            }
        }
        assert!((masked_mae_loss(&b, r.view()).unwrap() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn empty_mask_is_refused() {
        let images = Array4::<f64>::zeros((1, 1, 4, 4));
        let b = MaskedBatch::new(images, vec![Array2::from_elem((2, 2), false)], 2).unwrap();
        assert!(matches!(
            masked_mae_loss(&b, b.images.view()),
            Err(Error::UndefinedLoss(_))
        ));
    }

    #[test]
    fn indivisible_patch_size_rejected() {
        let images = Array4::<f32>::zeros((1, 1, 5, 4));
        assert!(MaskedBatch::new(images, vec![Array2::from_elem((2, 2), true)], 2).is_err());
    }
}
