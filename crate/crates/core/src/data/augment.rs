//! Training-time augmentation: flips, blur, JPEG-style compression and additive noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::perturb::{add_noise, gaussian_blur, jpeg_compress};
use super::synth::Sample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-transform probabilities and strength ranges.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub p_hflip: f64,
    pub p_vflip: f64,
    pub p_blur: f64,
    pub p_jpeg: f64,
    pub p_noise: f64,
    pub blur_sigma: (f64, f64),
    pub jpeg_quality: (f64, f64),
    pub noise_sigma: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            p_hflip: 0.5,
            p_vflip: 0.5,
            p_blur: 0.3,
            p_jpeg: 0.3,
            p_noise: 0.3,
            blur_sigma: (0.3, 1.5),
            jpeg_quality: (60.0, 95.0),
            noise_sigma: (0.0, 0.02),
        }
    }
}

impl AugmentConfig {
    /// Every probability zero: `augment` returns its input.
    pub fn disabled() -> Self {
        Self {
            p_hflip: 0.0,
            p_vflip: 0.0,
            p_blur: 0.0,
            p_jpeg: 0.0,
            p_noise: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ps = [self.p_hflip, self.p_vflip, self.p_blur, self.p_jpeg, self.p_noise];
        if ps.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Usage("augmentation probabilities must lie in [0, 1]".into()));
        }
        let ranges = [self.blur_sigma, self.jpeg_quality, self.noise_sigma];
        if ranges.iter().any(|(lo, hi)| !(lo <= hi) || *lo < 0.0) {
            return Err(Error::Usage("augmentation ranges must be non-negative and ordered".into()));
        }
        Ok(())
    }
}

/// Reverses the last axis of `[..., W]`.
pub fn hflip(t: &Tensor) -> Tensor {
    let w = t.last_dim();
    Tensor::from_fn(t.shape(), |i| {
        let j = i % w;
        t.data()[i - j + (w - 1 - j)]
    })
}

/// Reverses the second-to-last axis of `[..., H, W]`.
pub fn vflip(t: &Tensor) -> Tensor {
    let s = t.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    Tensor::from_fn(s, |i| {
        let (plane, r) = (i / (h * w), i % (h * w));
        let (y, x) = (r / w, r % w);
        t.data()[plane * h * w + (h - 1 - y) * w + x]
    })
}

fn uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

/// Applies each transform independently with its probability. All random draws happen
/// in a fixed order whatever is selected, so the seed alone determines the result.
/// Only flips touch the mask, and they move it exactly as they move the image.
pub fn augment(sample: &Sample, seed: u64, cfg: &AugmentConfig) -> Result<Sample> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draws: [f64; 5] = std::array::from_fn(|_| rng.random::<f64>());
    let blur = uniform(&mut rng, cfg.blur_sigma);
    let quality = uniform(&mut rng, cfg.jpeg_quality);
    let sigma = uniform(&mut rng, cfg.noise_sigma);

    let mut image = sample.image.clone();
    let mut mask = sample.mask.clone();
    if draws[0] < cfg.p_hflip {
        image = hflip(&image);
        mask = hflip(&mask);
    }
    if draws[1] < cfg.p_vflip {
        image = vflip(&image);
        mask = vflip(&mask);
    }
    if draws[2] < cfg.p_blur {
        image = gaussian_blur(&image, blur)?;
    }
    if draws[3] < cfg.p_jpeg {
        image = jpeg_compress(&image, quality)?;
    }
    if draws[4] < cfg.p_noise {
        image = add_noise(&image, sigma, &mut rng);
    }
    Ok(Sample {
        image,
        mask,
        kind: sample.kind,
        seed: sample.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flips_on_a_small_grid() {
        let t = Tensor::from_fn(&[1, 2, 3], |i| i as f64);
        assert_eq!(hflip(&t).data(), &[2.0, 1.0, 0.0, 5.0, 4.0, 3.0]);
        assert_eq!(vflip(&t).data(), &[3.0, 4.0, 5.0, 0.0, 1.0, 2.0]);
    }

    #[test]
    fn rejects_bad_probability() {
        let cfg = AugmentConfig { p_blur: 1.5, ..AugmentConfig::default() };
        assert!(cfg.validate().is_err());
    }
}
