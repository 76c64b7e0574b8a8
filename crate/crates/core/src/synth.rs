//! Deterministic synthetic chest-CT phantoms with exact reference masks.
//!
//! Each phantom is a grayscale slice built from four layers: a dim noisy
//! background, one or two rotated mid-intensity ellipses (the "lungs"),
//! up to three bright blobs seeded inside the lungs (the "infection"),
//! and up to two equally bright distractor blobs painted strictly outside
//! the lung region. Distractors appear only in the image — never in a
//! mask — so an infection segmenter that cannot tell inside from outside
//! the lungs is penalised, which is exactly the failure mode the cascaded
//! architecture is built to remove.
//!
//! Masks are exact by construction: the lung mask is the ellipse union,
//! the infection mask is the union of blob-and-lung intersections, so
//! containment of infection within lung is always total. Every sample is
//! generated from its own counter-derived RNG stream, making the corpus
//! bit-reproducible and order-independent.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{CoreError, Result};
use crate::math::{clamp, cos, sin};
use crate::rng;
use crate::tensor::{Real, Shape, Tensor};

/// One image with its aligned reference masks.
#[derive(Clone)]
pub struct SegmentationSample {
    pub id: String,
    /// Grayscale image in `[0,1]`.
    pub image: Tensor,
    /// Strictly binary lung mask.
    pub lung_mask: Tensor,
    /// Strictly binary infection mask (may be all-zero).
    pub infection_mask: Tensor,
}

/// Generator parameters.
#[derive(Clone, Debug)]
pub struct SynthConfig {
    pub n: usize,
    pub size: usize,
    pub seed: u64,
    /// P(k infection blobs) for k = 0..=3.
    pub blob_count_probs: [Real; 4],
    /// P(k distractor blobs outside the lungs) for k = 0..=2.
    pub distractor_probs: [Real; 3],
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n: 200,
            size: 64,
            seed: 0,
            blob_count_probs: [0.2, 0.35, 0.3, 0.15],
            distractor_probs: [0.3, 0.45, 0.25],
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(CoreError::config("synthetic corpus size must be positive"));
        }
        if self.size < 16 {
            return Err(CoreError::config(format!(
                "synthetic image size must be >= 16, got {}",
                self.size
            )));
        }
        for probs in [&self.blob_count_probs[..], &self.distractor_probs[..]] {
            let sum: Real = probs.iter().sum();
            if probs.iter().any(|p| *p < 0.0) || crate::math::abs(sum - 1.0) > 1e-9 {
                return Err(CoreError::config(
                    "blob count probabilities must be nonnegative and sum to 1",
                ));
            }
        }
        Ok(())
    }

    /// Mean and variance of the infection blob count distribution.
    pub fn blob_count_moments(&self) -> (Real, Real) {
        let mut mean = 0.0;
        let mut second = 0.0;
        for (k, p) in self.blob_count_probs.iter().enumerate() {
            mean += k as Real * p;
            second += (k * k) as Real * p;
        }
        (mean, second - mean * mean)
    }
}

struct Ellipse {
    cx: Real,
    cy: Real,
    rx: Real,
    ry: Real,
    cos_t: Real,
    sin_t: Real,
}

impl Ellipse {
    fn new(cx: Real, cy: Real, rx: Real, ry: Real, theta: Real) -> Self {
        Ellipse {
            cx,
            cy,
            rx,
            ry,
            cos_t: cos(theta),
            sin_t: sin(theta),
        }
    }

    fn contains(&self, x: Real, y: Real) -> bool {
        let dx = x - self.cx;
        let dy = y - self.cy;
        let u = dx * self.cos_t + dy * self.sin_t;
        let v = -dx * self.sin_t + dy * self.cos_t;
        let a = u / self.rx;
        let b = v / self.ry;
        a * a + b * b <= 1.0
    }
}

fn categorical(rng: &mut ChaCha8Rng, probs: &[Real]) -> usize {
    let u: Real = rng.random();
    let mut cum = 0.0;
    for (k, p) in probs.iter().enumerate() {
        cum += p;
        if u < cum {
            return k;
        }
    }
    probs.len() - 1
}

fn uniform_in(rng: &mut ChaCha8Rng, lo: Real, hi: Real) -> Real {
    let u: Real = rng.random();
    lo + u * (hi - lo)
}

fn normal(rng: &mut ChaCha8Rng) -> Real {
    rng.sample(StandardNormal)
}

/// Generate phantom `index` of the corpus described by `cfg`.
///
/// Each index draws from its own derived stream, so samples can be
/// produced in any order (or in parallel) with identical results.
pub fn synth_sample(cfg: &SynthConfig, index: usize) -> Result<SegmentationSample> {
    cfg.validate()?;
    let s = cfg.size;
    let sf = s as Real;
    let mut r = rng::stream(cfg.seed, rng::tag::SYNTH, index as u64);

    // Layer 1: dim noisy background.
    let mut image = Vec::with_capacity(s * s);
    for _ in 0..s * s {
        image.push(clamp(0.08 + 0.03 * normal(&mut r), 0.0, 1.0));
    }

    // Layer 2: lungs — two ellipses usually, occasionally one.
    let n_lungs = if r.random::<Real>() < 0.8 { 2 } else { 1 };
    let mut lungs = Vec::with_capacity(n_lungs);
    let centers: &[Real] = if n_lungs == 2 { &[0.30, 0.70] } else { &[0.5] };
    for &cx_frac in centers {
        let cx = (cx_frac + uniform_in(&mut r, -0.03, 0.03)) * sf;
        let cy = (0.5 + uniform_in(&mut r, -0.05, 0.05)) * sf;
        let rx = uniform_in(&mut r, 0.13, 0.18) * sf;
        let ry = uniform_in(&mut r, 0.24, 0.33) * sf;
        let theta = uniform_in(&mut r, -0.25, 0.25);
        lungs.push(Ellipse::new(cx, cy, rx, ry, theta));
    }
    let mut lung_mask = alloc::vec![0.0; s * s];
    for y in 0..s {
        for x in 0..s {
            let inside = lungs.iter().any(|e| e.contains(x as Real + 0.5, y as Real + 0.5));
            if inside {
                lung_mask[y * s + x] = 1.0;
                image[y * s + x] = clamp(0.50 + 0.04 * normal(&mut r), 0.0, 1.0);
            }
        }
    }
    let lung_pixels: Vec<usize> = (0..s * s).filter(|i| lung_mask[*i] == 1.0).collect();
    let outside_pixels: Vec<usize> = (0..s * s).filter(|i| lung_mask[*i] == 0.0).collect();

    // Layer 3: bright infection blobs seeded inside the lungs; the mask
    // is the exact blob-and-lung intersection.
    let mut infection_mask = alloc::vec![0.0; s * s];
    let n_blobs = categorical(&mut r, &cfg.blob_count_probs);
    for _ in 0..n_blobs {
        let center = lung_pixels[r.random_range(0..lung_pixels.len())];
        let (cx, cy) = ((center % s) as Real + 0.5, (center / s) as Real + 0.5);
        let rad = uniform_in(&mut r, 0.05, 0.11) * sf;
        let ecc = uniform_in(&mut r, 0.7, 1.0);
        let theta = uniform_in(&mut r, -0.8, 0.8);
        let blob = Ellipse::new(cx, cy, rad, rad * ecc, theta);
        for y in 0..s {
            for x in 0..s {
                let i = y * s + x;
                if lung_mask[i] == 1.0 && blob.contains(x as Real + 0.5, y as Real + 0.5) {
                    infection_mask[i] = 1.0;
                    image[i] = clamp(0.85 + 0.04 * normal(&mut r), 0.0, 1.0);
                }
            }
        }
    }

    // Layer 4: distractor blobs with the same brightness, painted only
    // where the lung mask is zero — visible in the image, absent from
    // both masks.
    let n_distract = categorical(&mut r, &cfg.distractor_probs);
    for _ in 0..n_distract {
        let center = outside_pixels[r.random_range(0..outside_pixels.len())];
        let (cx, cy) = ((center % s) as Real + 0.5, (center / s) as Real + 0.5);
        let rad = uniform_in(&mut r, 0.05, 0.11) * sf;
        let blob = Ellipse::new(cx, cy, rad, rad, 0.0);
        for y in 0..s {
            for x in 0..s {
                let i = y * s + x;
                if lung_mask[i] == 0.0 && blob.contains(x as Real + 0.5, y as Real + 0.5) {
                    image[i] = clamp(0.85 + 0.04 * normal(&mut r), 0.0, 1.0);
                }
            }
        }
    }

    let shape = Shape::d3(s, s, 1);
    Ok(SegmentationSample {
        id: format!("synth-{index:04}"),
        image: Tensor::new(shape.clone(), image)?,
        lung_mask: Tensor::new(shape.clone(), lung_mask)?,
        infection_mask: Tensor::new(shape, infection_mask)?,
    })
}

/// Generate the whole corpus.
pub fn synth_dataset(cfg: &SynthConfig) -> Result<Vec<SegmentationSample>> {
    (0..cfg.n).map(|i| synth_sample(cfg, i)).collect()
}

/// Fraction of infection pixels that lie inside the lung mask; defined
/// as 1 when the infection mask is empty.
pub fn containment_ratio(sample: &SegmentationSample) -> Real {
    let mut inside = 0usize;
    let mut total = 0usize;
    for (m, l) in sample
        .infection_mask
        .data()
        .iter()
        .zip(sample.lung_mask.data())
    {
        if *m == 1.0 {
            total += 1;
            if *l == 1.0 {
                inside += 1;
            }
        }
    }
    if total == 0 {
        1.0
    } else {
        inside as Real / total as Real
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_bit_reproducible_and_order_independent() {
        let cfg = SynthConfig {
            n: 6,
            size: 32,
            seed: 9,
            ..SynthConfig::default()
        };
        let all = synth_dataset(&cfg).unwrap();
        let fourth = synth_sample(&cfg, 3).unwrap();
        assert_eq!(all[3].image.data(), fourth.image.data());
        assert_eq!(all[3].infection_mask.data(), fourth.infection_mask.data());
        let again = synth_dataset(&cfg).unwrap();
        for (a, b) in all.iter().zip(&again) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.image.data(), b.image.data());
            assert_eq!(a.lung_mask.data(), b.lung_mask.data());
            assert_eq!(a.infection_mask.data(), b.infection_mask.data());
        }
    }

    #[test]
    fn masks_are_binary_and_contained() {
        let cfg = SynthConfig {
            n: 12,
            size: 32,
            seed: 4,
            ..SynthConfig::default()
        };
        for sample in synth_dataset(&cfg).unwrap() {
            for v in sample.lung_mask.data().iter().chain(sample.infection_mask.data()) {
                assert!(*v == 0.0 || *v == 1.0);
            }
            assert_eq!(containment_ratio(&sample), 1.0);
            assert!(sample.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(sample.lung_mask.data().iter().any(|v| *v == 1.0));
        }
    }

    #[test]
    fn distractors_put_bright_pixels_outside_the_lungs() {
        let cfg = SynthConfig {
            n: 20,
            size: 32,
            seed: 11,
            ..SynthConfig::default()
        };
        let mut found = false;
        for sample in synth_dataset(&cfg).unwrap() {
            for (i, v) in sample.image.data().iter().enumerate() {
                if *v > 0.7 && sample.lung_mask.data()[i] == 0.0 {
                    found = true;
                    assert_eq!(sample.infection_mask.data()[i], 0.0);
                }
            }
        }
        assert!(found, "no distractor pixels in 20 samples");
    }

    #[test]
    fn blob_count_moments_match_hand_sum() {
        let cfg = SynthConfig::default();
        let (mean, var) = cfg.blob_count_moments();
        assert!((mean - 1.4).abs() < 1e-12);
        // E[k^2] = 0.35 + 4*0.3 + 9*0.15 = 2.9; var = 2.9 - 1.96.
        assert!((var - 0.94).abs() < 1e-12);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = SynthConfig::default();
        cfg.blob_count_probs = [0.5, 0.5, 0.5, 0.5];
        assert!(cfg.validate().is_err());
        cfg = SynthConfig::default();
        cfg.size = 8;
        assert!(cfg.validate().is_err());
    }
}
