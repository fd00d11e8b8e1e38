//! Two-view augmentation for contrastive pretraining: random resized crop,
//! horizontal flip and color jitter.

use ndarray::{s, Array2};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::image::resize_bilinear;
use crate::error::{Error, Result};
use crate::scalar::{lit, to_f64, Scalar};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentationConfig {
    pub crop_scale_min: f64,
    pub crop_scale_max: f64,
    pub aspect_min: f64,
    pub aspect_max: f64,
    pub flip_probability: f64,
    pub brightness: f64,
    pub contrast: f64,
    /// No effect on single-channel images; the factor is still drawn so the
    /// random stream matches the color case.
    pub saturation: f64,
    pub jitter_probability: f64,
    pub output_size: usize,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            crop_scale_min: 0.5,
            crop_scale_max: 1.0,
            aspect_min: 3.0 / 4.0,
            aspect_max: 4.0 / 3.0,
            flip_probability: 0.5,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
            jitter_probability: 0.8,
            output_size: 64,
        }
    }
}

impl AugmentationConfig {
    pub fn with_output_size(output_size: usize) -> Self {
        Self {
            output_size,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        if !(self.crop_scale_min > 0.0
            && self.crop_scale_min <= self.crop_scale_max
            && self.crop_scale_max <= 1.0)
        {
            return Err(Error::Config(format!(
                "crop scale range [{}, {}] must satisfy 0 < min <= max <= 1",
                self.crop_scale_min, self.crop_scale_max
            )));
        }
        if !(self.aspect_min > 0.0 && self.aspect_min <= self.aspect_max) {
            return Err(Error::Config("aspect range must satisfy 0 < min <= max".into()));
        }
        if !prob(self.flip_probability) || !prob(self.jitter_probability) {
            return Err(Error::Config("probabilities must lie in [0, 1]".into()));
        }
        if self.brightness < 0.0 || self.contrast < 0.0 || self.saturation < 0.0 {
            return Err(Error::Config("jitter strengths must be non-negative".into()));
        }
        if self.output_size == 0 {
            return Err(Error::Config("output size must be positive".into()));
        }
        Ok(())
    }
}

/// An augmented view carrying the temporal metadata of its source frame.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedView<T: Scalar> {
    pub image: Array2<T>,
    pub video_id: String,
    pub frame_index: u64,
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// Crop window `(top, left, height, width)`, sampled like the usual
/// random-resized-crop: ten tries at the requested area and aspect, then a
/// centered fallback.
fn crop_window<R: Rng + ?Sized>(h: usize, w: usize, cfg: &AugmentationConfig, rng: &mut R) -> (usize, usize, usize, usize) {
    let area = (h * w) as f64;
    let (log_lo, log_hi) = (cfg.aspect_min.ln(), cfg.aspect_max.ln());
    for _ in 0..10 {
        let target = area * uniform(rng, cfg.crop_scale_min, cfg.crop_scale_max);
        let aspect = uniform(rng, log_lo, log_hi).exp();
        let cw = (target * aspect).sqrt().round() as usize;
        let ch = (target / aspect).sqrt().round() as usize;
        if cw > 0 && ch > 0 && cw <= w && ch <= h {
            let top = rng.random_range(0..=h - ch);
            let left = rng.random_range(0..=w - cw);
            return (top, left, ch, cw);
        }
    }
    let ratio = w as f64 / h as f64;
    let (ch, cw) = if ratio < cfg.aspect_min {
        (((w as f64) / cfg.aspect_min).round() as usize, w)
    } else if ratio > cfg.aspect_max {
        (h, ((h as f64) * cfg.aspect_max).round() as usize)
    } else {
        (h, w)
    };
    ((h - ch) / 2, (w - cw) / 2, ch, cw)
}

fn jitter<T: Scalar, R: Rng + ?Sized>(img: &mut Array2<T>, cfg: &AugmentationConfig, rng: &mut R) {
    let mut ops = [0u8, 1, 2];
    ops.shuffle(rng);
    let clamp01 = |v: f64| v.clamp(0.0, 1.0);
    for op in ops {
        match op {
            0 => {
                let f = uniform(rng, (1.0 - cfg.brightness).max(0.0), 1.0 + cfg.brightness);
                img.mapv_inplace(|v| lit(clamp01(to_f64(v) * f)));
            }
            1 => {
                let f = uniform(rng, (1.0 - cfg.contrast).max(0.0), 1.0 + cfg.contrast);
                let mean = img.iter().map(|&v| to_f64(v)).sum::<f64>() / img.len() as f64;
                img.mapv_inplace(|v| lit(clamp01(to_f64(v) * f + mean * (1.0 - f))));
            }
            _ => {
                // Blending a gray image with its own grayscale is the identity.
                let _ = uniform(rng, (1.0 - cfg.saturation).max(0.0), 1.0 + cfg.saturation);
            }
        }
    }
}

/// One augmented view of `image` (already `output_size` square).
pub fn augment_view<T: Scalar, R: Rng + ?Sized>(
    image: &Array2<T>,
    cfg: &AugmentationConfig,
    rng: &mut R,
) -> Result<Array2<T>> {
    let (h, w) = image.dim();
    let (top, left, ch, cw) = crop_window(h, w, cfg, rng);
    let crop = image.slice(s![top..top + ch, left..left + cw]).to_owned();
    let mut out = resize_bilinear(&crop, cfg.output_size, cfg.output_size)?;
    if rng.random::<f64>() < cfg.flip_probability {
        out.invert_axis(ndarray::Axis(1));
        out = out.as_standard_layout().into_owned();
    }
    if rng.random::<f64>() < cfg.jitter_probability {
        jitter(&mut out, cfg, rng);
    }
    Ok(out)
}

/// Two independently sampled views of the same image.
pub fn augment_pair<T: Scalar, R: Rng + ?Sized>(
    image: &Array2<T>,
    cfg: &AugmentationConfig,
    rng: &mut R,
) -> Result<(Array2<T>, Array2<T>)> {
    cfg.validate()?;
    if image.dim() != (cfg.output_size, cfg.output_size) {
        return Err(Error::InvalidInput(format!(
            "image {:?} is not {}x{}",
            image.dim(),
            cfg.output_size,
            cfg.output_size
        )));
    }
    let a = augment_view(image, cfg, rng)?;
    let b = augment_view(image, cfg, rng)?;
    Ok((a, b))
}

/// [`augment_pair`] with the frame's temporal metadata attached to both views.
pub fn augment_frame<T: Scalar, R: Rng + ?Sized>(
    image: &Array2<T>,
    video_id: &str,
    frame_index: u64,
    cfg: &AugmentationConfig,
    rng: &mut R,
) -> Result<(AugmentedView<T>, AugmentedView<T>)> {
    let (a, b) = augment_pair(image, cfg, rng)?;
    let wrap = |image| AugmentedView {
        image,
        video_id: video_id.to_string(),
        frame_index,
    };
    Ok((wrap(a), wrap(b)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn image(n: usize) -> Array2<f32> {
        Array2::from_shape_fn((n, n), |(y, x)| ((y * 31 + x * 17) % 97) as f32 / 96.0)
    }

    #[test]
    fn degenerate_config_is_identity() {
        let cfg = AugmentationConfig {
            crop_scale_min: 1.0,
            crop_scale_max: 1.0,
            aspect_min: 1.0,
            aspect_max: 1.0,
            flip_probability: 0.0,
            jitter_probability: 0.0,
            output_size: 32,
            ..Default::default()
        };
        let img = image(32);
        let (a, b) = augment_pair(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a, img);
        assert_eq!(b, img);
    }

    #[test]
    fn deterministic_given_seed() {
        let cfg = AugmentationConfig::with_output_size(32);
        let img = image(32);
        let x = augment_pair(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let y = augment_pair(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn default_views_almost_always_differ_from_input() {
        let cfg = AugmentationConfig::with_output_size(32);
        let img = image(32);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let differing = (0..100)
            .filter(|_| {
                let (a, b) = augment_pair(&img, &cfg, &mut rng).unwrap();
                a != img && b != img
            })
            .count();
        assert!(differing >= 99, "{differing}");
    }

    #[test]
    fn views_keep_shape_range_and_metadata() {
        let cfg = AugmentationConfig::with_output_size(24);
        let img = image(24);
        let (a, b) = augment_frame(&img, "vid", 7, &cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        for v in [&a, &b] {
            assert_eq!(v.image.dim(), (24, 24));
            assert!(v.image.iter().all(|p| (0.0..=1.0).contains(p)));
            assert_eq!((v.video_id.as_str(), v.frame_index), ("vid", 7));
        }
    }

    #[test]
    fn rejects_invalid_config_and_size() {
        let img = image(16);
        let bad = AugmentationConfig {
            crop_scale_min: 0.9,
            crop_scale_max: 0.5,
            output_size: 16,
            ..Default::default()
        };
        assert!(augment_pair(&img, &bad, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
        let cfg = AugmentationConfig::with_output_size(32);
        assert!(augment_pair(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }
}
