//! Worked examples for the data and model modules that need more than one
//! component to check.

use ndarray::{Array2, Array4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use xdssl::data::phantom::{render_frame, VideoGeometry};
use xdssl::data::{DomainProfile, PhantomConfig};
use xdssl::losses::{masked_mae_grad, masked_mae_loss, MaskedBatch};
use xdssl::model::{Backbone, BackboneConfig, PixelHead};

/// Energy of the 2-D DFT outside the central low-frequency square
/// `|u|, |v| < n/4`, as a fraction of the total (DC excluded). Plain
/// O(n^4) transform, independent of any library FFT.
fn high_frequency_fraction(img: &Array2<f64>) -> f64 {
    let (h, w) = img.dim();
    let mean = img.mean().unwrap();
    let tau = std::f64::consts::TAU;
    let (mut high, mut total) = (0.0, 0.0);
    for u in 0..h {
        for v in 0..w {
            if u == 0 && v == 0 {
                continue;
            }
            let (mut re, mut im) = (0.0, 0.0);
            for y in 0..h {
                for x in 0..w {
                    let a = -tau * (u as f64 * y as f64 / h as f64 + v as f64 * x as f64 / w as f64);
                    let d = img[[y, x]] - mean;
                    re += d * a.cos();
                    im += d * a.sin();
                }
            }
            let e = re * re + im * im;
            let fu = u.min(h - u);
            let fv = v.min(w - v);
            if fu >= h / 4 || fv >= w / 4 {
                high += e;
            }
            total += e;
        }
    }
    high / total
}

#[test]
fn target_profile_has_less_high_frequency_energy() {
    for seed in 0..3u64 {
        let mut frames = Vec::new();
        for profile in [DomainProfile::ASource, DomainProfile::BTarget] {
            let mut cfg = PhantomConfig::profile(profile, seed);
            cfg.image_size = 32;
            let geo = VideoGeometry::sample(&cfg, &mut ChaCha8Rng::seed_from_u64(seed));
            frames.push(render_frame(&cfg, &geo, 0, seed).0);
        }
        let diff = (&frames[0] - &frames[1]).mapv(f64::abs).mean().unwrap();
        assert!(diff > 0.0);
        let (a, b) = (high_frequency_fraction(&frames[0]), high_frequency_fraction(&frames[1]));
        assert!(b < a, "seed {seed}: A {a:.4}, B {b:.4}");
    }
}

fn model() -> Backbone<f64> {
    Backbone::new(BackboneConfig::tiny(), 4).unwrap()
}

fn noise(n: usize, seed: u64) -> Array4<f64> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array4::from_shape_fn((n, 1, 64, 64), |_| rng.random::<f64>())
}

#[test]
fn zero_input_gives_finite_outputs_and_inference_is_pure() {
    let m = model();
    let zeros = Array4::<f64>::zeros((2, 1, 64, 64));
    for out in [m.forward_segment(&zeros).unwrap(), m.forward_reconstruct(&zeros).unwrap()] {
        assert_eq!(out.dim(), (2, 1, 64, 64));
        assert!(out.iter().all(|v| v.is_finite()));
    }
    let x = noise(2, 1);
    assert_eq!(m.forward_segment(&x).unwrap(), m.forward_segment(&x).unwrap());
    assert_eq!(m.forward_embed(&x).unwrap(), m.forward_embed(&x).unwrap());
}

#[test]
fn duplicate_inputs_embed_identically_distinct_ones_do_not() {
    let m = model();
    let one = noise(1, 2);
    let mut x = Array4::zeros((3, 1, 64, 64));
    x.slice_mut(ndarray::s![0..1, .., .., ..]).assign(&one);
    x.slice_mut(ndarray::s![1..2, .., .., ..]).assign(&one);
    x.slice_mut(ndarray::s![2..3, .., .., ..]).assign(&noise(1, 3));
    let z = m.forward_embed(&x).unwrap();
    assert_eq!(z.row(0), z.row(1));
    assert!(z.row(0).dot(&z.row(2)) < 1.0 - 1e-6);
}

#[test]
fn masked_mae_reaches_the_reconstruction_head() {
    let mut m = model();
    let images = noise(2, 5);
    let batch = MaskedBatch::sample(images, 8, 0.6, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    let loss = |m: &Backbone<f64>| {
        let r = m.forward_reconstruct(&batch.masked_images).unwrap();
        masked_mae_loss(&batch, r.view()).unwrap()
    };

    let (recon, cache) = m.pixel_forward(&batch.masked_images, PixelHead::Reconstruct).unwrap();
    let grad = masked_mae_grad(&batch, recon.view()).unwrap();
    m.zero_grad();
    m.pixel_backward(&cache, &grad);
    let analytic: Vec<(String, f64)> = m
        .params()
        .into_iter()
        .filter(|(n, _, _)| n.starts_with("head.recon."))
        .map(|(n, _, p)| (n, p.grad.iter().map(|g| g.abs()).sum::<f64>()))
        .collect();
    assert!(!analytic.is_empty());
    assert!(analytic.iter().all(|(_, g)| *g > 0.0), "{analytic:?}");

    // Finite-difference probe on the head bias.
    let h = 1e-5;
    let name = "head.recon.bias";
    let bump = |m: &mut Backbone<f64>, d: f64| {
        for (n, _, p) in m.params_mut() {
            if n == name {
                p.value[[0, 0]] += d;
            }
        }
    };
    bump(&mut m, h);
    let up = loss(&m);
    bump(&mut m, -2.0 * h);
    let down = loss(&m);
    bump(&mut m, h);
    assert!(((up - down) / (2.0 * h)).abs() > 1e-6);
}
