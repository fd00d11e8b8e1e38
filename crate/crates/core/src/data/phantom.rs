//! Synthetic two-domain ultrasound-like phantom.
//!
//! Each video shows a bright curved band (bone surface) with an acoustic
//! shadow beneath it and a few fascia lines above, drifting in depth from
//! frame to frame. The target profile differs from the source mainly in its
//! fascia, which are nearly as bright as the band, so a source-trained model
//! tends to over-segment there; only the shadow tells the two apart. Intensities are multiplied by gamma-distributed
//! speckle (exponential intensity at unit variance), optionally blurred and
//! scaled by a slowly oscillating gain. The label mask is the hard band
//! template before any degradation.

use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use super::image::{write_gray_png, write_mask_png};
use super::manifest::{Domain, FrameRecord};
use crate::error::{Error, Result};
use crate::seed::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DomainProfile {
    #[serde(rename = "A_source")]
    ASource,
    #[serde(rename = "B_target")]
    BTarget,
}

impl DomainProfile {
    pub fn domain(self) -> Domain {
        match self {
            DomainProfile::ASource => Domain::Source,
            DomainProfile::BTarget => Domain::Target,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomConfig {
    pub domain_profile: DomainProfile,
    pub patients: usize,
    pub videos_per_patient: usize,
    pub frames_per_video: usize,
    pub image_size: usize,
    pub band_intensity: f64,
    pub tissue_intensity: f64,
    pub shadow_intensity: f64,
    pub speckle_variance: f64,
    pub blur_sigma: f64,
    /// Relative amplitude of the per-frame gain oscillation.
    pub gain_drift: f64,
    /// Depth motion of the band in pixels per frame.
    pub drift_rate: f64,
    /// Fascia lines per video.
    pub distractors: usize,
    /// Upper end of a fascia line's intensity as a fraction of the way from
    /// tissue to band; each line draws from `[0.6, 1.0]` times this.
    pub distractor_intensity: f64,
    /// Typical half thickness of the band in pixels (drawn within +/- 25%).
    pub band_half_thickness: f64,
    /// Write a label for every `label_stride`-th frame; 0 writes none.
    pub label_stride: usize,
    pub rng_seed: u64,
}

impl PhantomConfig {
    pub fn profile(profile: DomainProfile, rng_seed: u64) -> Self {
        match profile {
            DomainProfile::ASource => Self {
                domain_profile: profile,
                patients: 12,
                videos_per_patient: 2,
                frames_per_video: 12,
                image_size: 64,
                band_intensity: 0.85,
                tissue_intensity: 0.35,
                shadow_intensity: 0.10,
                speckle_variance: 0.10,
                blur_sigma: 0.0,
                gain_drift: 0.0,
                drift_rate: 0.5,
                distractors: 2,
                distractor_intensity: 0.6,
                band_half_thickness: 3.0,
                label_stride: 1,
                rng_seed,
            },
            DomainProfile::BTarget => Self {
                domain_profile: profile,
                patients: 24,
                videos_per_patient: 1,
                frames_per_video: 24,
                image_size: 64,
                band_intensity: 0.80,
                tissue_intensity: 0.40,
                shadow_intensity: 0.15,
                speckle_variance: 0.30,
                blur_sigma: 0.8,
                gain_drift: 0.15,
                drift_rate: 0.5,
                distractors: 2,
                distractor_intensity: 0.95,
                band_half_thickness: 3.0,
                label_stride: 2,
                rng_seed,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames_per_video == 0 || self.patients == 0 || self.videos_per_patient == 0 {
            return Err(Error::Config(
                "phantom needs at least one patient, video and frame".into(),
            ));
        }
        if self.image_size < 8 {
            return Err(Error::Config("phantom image size must be at least 8".into()));
        }
        if !(self.band_half_thickness > 0.0) || !(0.0..=1.0).contains(&self.distractor_intensity) {
            return Err(Error::Config(
                "band half thickness must be positive and distractor intensity in [0, 1]".into(),
            ));
        }
        if !(self.speckle_variance >= 0.0) || !(self.blur_sigma >= 0.0) {
            return Err(Error::Config(
                "speckle variance and blur sigma must be non-negative".into(),
            ));
        }
        Ok(())
    }

    fn prefix(&self) -> &'static str {
        match self.domain_profile {
            DomainProfile::ASource => "A",
            DomainProfile::BTarget => "B",
        }
    }
}

/// Geometry of one video, fixed across its frames.
#[derive(Debug, Clone)]
pub struct VideoGeometry {
    pub depth: f64,
    pub curvature: f64,
    pub ripple_amp: f64,
    pub ripple_len: f64,
    pub ripple_phase: f64,
    pub half_thickness: f64,
    pub x_start: f64,
    pub x_end: f64,
    pub drift_sign: f64,
    pub gain_phase: f64,
    /// `(depth above band, half thickness, relative intensity)`.
    pub fascia: Vec<(f64, f64, f64)>,
}

impl VideoGeometry {
    pub fn sample<R: Rng + ?Sized>(cfg: &PhantomConfig, rng: &mut R) -> Self {
        let size = cfg.image_size;
        let s = size as f64;
        let mut u = |lo: f64, hi: f64| lo + (hi - lo) * rng.random::<f64>();
        let depth = u(0.45, 0.62) * s;
        let curvature = u(-0.6, 0.6);
        let ripple_amp = u(0.5, 2.5);
        let ripple_len = u(0.6, 1.4) * s;
        let ripple_phase = u(0.0, std::f64::consts::TAU);
        let half_thickness = cfg.band_half_thickness * u(0.75, 1.25);
        let x_start = u(0.0, 0.2) * s;
        let x_end = u(0.8, 1.0) * s;
        let drift_sign = if u(0.0, 1.0) < 0.5 { -1.0 } else { 1.0 };
        let gain_phase = u(0.0, std::f64::consts::TAU);
        let fascia = (0..cfg.distractors)
            .map(|_| (u(0.12, 0.3) * s, u(0.5, 1.0), u(0.6, 1.0) * cfg.distractor_intensity))
            .collect();
        Self {
            depth,
            curvature,
            ripple_amp,
            ripple_len,
            ripple_phase,
            half_thickness,
            x_start,
            x_end,
            drift_sign,
            gain_phase,
            fascia,
        }
    }

    /// Depth offset at frame `t`: constant-speed motion reflected inside
    /// a window of +/- 12% of the image.
    pub fn offset(&self, t: usize, drift_rate: f64, size: usize) -> f64 {
        let bound = 0.12 * size as f64;
        if bound <= 0.0 || drift_rate == 0.0 {
            return 0.0;
        }
        let travel = drift_rate * t as f64;
        let period = 4.0 * bound;
        let phase = travel.rem_euclid(period);
        let tri = if phase < bound {
            phase
        } else if phase < 3.0 * bound {
            2.0 * bound - phase
        } else {
            phase - 4.0 * bound
        };
        self.drift_sign * tri
    }

    pub fn band_center(&self, x: f64, offset: f64, size: usize) -> f64 {
        let s = size as f64;
        let rel = (x - 0.5 * s) / s;
        self.depth
            + offset
            + self.curvature * rel * rel * s
            + self.ripple_amp * (std::f64::consts::TAU * x / self.ripple_len + self.ripple_phase).sin()
    }
}

/// Noise-free template of frame `t` and its band mask.
pub fn render_template(cfg: &PhantomConfig, geo: &VideoGeometry, t: usize) -> (Array2<f64>, Array2<bool>) {
    let n = cfg.image_size;
    let offset = geo.offset(t, cfg.drift_rate, n);
    let mut img = Array2::zeros((n, n));
    let mut mask = Array2::from_elem((n, n), false);
    for x in 0..n {
        let xc = x as f64 + 0.5;
        let inside = xc >= geo.x_start && xc <= geo.x_end;
        let center = geo.band_center(xc, offset, n);
        for y in 0..n {
            let yc = y as f64 + 0.5;
            // Mild depth attenuation of the soft tissue.
            let mut v = cfg.tissue_intensity * (1.0 - 0.25 * yc / n as f64);
            for &(above, half, rel) in &geo.fascia {
                if (yc - (center - above)).abs() <= half {
                    v = cfg.tissue_intensity + rel * (cfg.band_intensity - cfg.tissue_intensity);
                }
            }
            let d = yc - center;
            if inside && d.abs() <= geo.half_thickness {
                v = cfg.band_intensity;
                mask[[y, x]] = true;
            } else if inside && d > geo.half_thickness {
                v = cfg.shadow_intensity;
            }
            img[[y, x]] = v;
        }
    }
    (img, mask)
}

fn gaussian_blur(img: &Array2<f64>, sigma: f64) -> Array2<f64> {
    if sigma <= 0.0 {
        return img.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.into_iter().map(|k| k / norm).collect();
    let (h, w) = img.dim();
    let clampi = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            tmp[[y, x]] = kernel
                .iter()
                .enumerate()
                .map(|(k, kv)| kv * img[[y, clampi(x as isize + k as isize - radius, w)]])
                .sum();
        }
    }
    let mut out = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            out[[y, x]] = kernel
                .iter()
                .enumerate()
                .map(|(k, kv)| kv * tmp[[clampi(y as isize + k as isize - radius, h), x]])
                .sum();
        }
    }
    out
}

/// Degraded frame `t`: speckle, blur, gain; values in `[0, 1]`.
pub fn render_frame(cfg: &PhantomConfig, geo: &VideoGeometry, t: usize, noise_seed: u64) -> (Array2<f64>, Array2<bool>) {
    let (template, mask) = render_template(cfg, geo, t);
    let mut img = template;
    if cfg.speckle_variance > 0.0 {
        let shape = 1.0 / cfg.speckle_variance;
        let gamma = Gamma::new(shape, cfg.speckle_variance).expect("positive gamma parameters");
        let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
        img.mapv_inplace(|v| v * gamma.sample(&mut rng));
    }
    let mut img = gaussian_blur(&img, cfg.blur_sigma);
    let gain = 1.0
        + cfg.gain_drift * (std::f64::consts::TAU * t as f64 / 24.0 + geo.gain_phase).sin();
    img.mapv_inplace(|v| (v * gain).clamp(0.0, 1.0));
    (img, mask)
}

/// Writes every frame of the configured domain under `out_dir/<rel_dir>` and
/// returns manifest records whose paths are relative to `out_dir`.
pub fn generate_phantom(cfg: &PhantomConfig, out_dir: &Path, rel_dir: &str) -> Result<Vec<FrameRecord>> {
    cfg.validate()?;
    let prefix = cfg.prefix();
    let mut records = Vec::new();
    for p in 0..cfg.patients {
        let patient_id = format!("{prefix}_p{p:03}");
        for v in 0..cfg.videos_per_patient {
            let video_id = format!("{patient_id}_v{v}");
            let mut geo_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.rng_seed, &video_id));
            let geo = VideoGeometry::sample(cfg, &mut geo_rng);
            for t in 0..cfg.frames_per_video {
                let image_id = format!("{video_id}_f{t:03}");
                let noise_seed = derive_seed(cfg.rng_seed, &image_id);
                let (img, mask) = render_frame(cfg, &geo, t, noise_seed);
                let image_rel = format!("{rel_dir}/images/{image_id}.png");
                write_gray_png(&out_dir.join(&image_rel), &img)?;
                let labelled = cfg.label_stride > 0 && t % cfg.label_stride == 0;
                let mask_rel = if labelled {
                    let rel = format!("{rel_dir}/masks/{image_id}.png");
                    write_mask_png(&out_dir.join(&rel), &mask)?;
                    Some(rel)
                } else {
                    None
                };
                records.push(FrameRecord {
                    patient_id: patient_id.clone(),
                    video_id: video_id.clone(),
                    frame_index: t as u64,
                    domain: cfg.domain_profile.domain(),
                    image_path: image_rel,
                    mask_path: mask_rel,
                    split: None,
                });
            }
        }
    }
    Ok(records)
}
