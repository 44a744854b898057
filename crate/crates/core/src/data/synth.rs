//! Procedural tampered images.
//!
//! Backgrounds are a color gradient plus band-limited texture and per-image sensor
//! noise. A splice pastes a polygon cut from an independently generated image (with
//! its own texture and noise level); a copy-move pastes a rotated, translated copy of
//! another region of the same image.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::bilinear_resize;
use crate::tensor::Tensor;

/// Smallest tampered region the generator accepts, in pixels.
pub const MIN_REGION_PX: usize = 16;
/// Accepted tampered-area fraction of the image.
pub const AREA_RANGE: (f64, f64) = (0.01, 0.30);

const MAX_ATTEMPTS: usize = 10_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TamperKind {
    Splice,
    CopyMove,
    Authentic,
}

impl TamperKind {
    pub const TAMPERED: [TamperKind; 2] = [TamperKind::Splice, TamperKind::CopyMove];

    pub fn name(self) -> &'static str {
        match self {
            TamperKind::Splice => "splice",
            TamperKind::CopyMove => "copy-move",
            TamperKind::Authentic => "authentic",
        }
    }
}

impl fmt::Display for TamperKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TamperKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "splice" => Ok(TamperKind::Splice),
            "copy-move" | "copy_move" => Ok(TamperKind::CopyMove),
            "authentic" => Ok(TamperKind::Authentic),
            _ => Err(Error::Usage(format!("unknown tamper kind {s:?}"))),
        }
    }
}

/// One generated image with its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[3, H, W]` in `[0, 1]`.
    pub image: Tensor,
    /// `[H, W]`, 1 on tampered pixels.
    pub mask: Tensor,
    pub kind: TamperKind,
    pub seed: u64,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.mask.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.mask.shape()[1]
    }

    /// Fraction of pixels marked tampered.
    pub fn tampered_fraction(&self) -> f64 {
        self.mask.sum() / self.mask.len() as f64
    }
}

/// Mixes a base seed with an index into an independent 64-bit seed (SplitMix64 finalizer).
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generates one sample. The seed fully determines the result.
pub fn synth_tamper(seed: u64, h: usize, w: usize, kind: TamperKind) -> Result<Sample> {
    if h < 16 || w < 16 {
        return Err(Error::domain("synth_tamper", format!("image {h}x{w} is smaller than 16x16")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sigma = rng.random_range(0.004..0.012);
    let mut image = background(&mut rng, h, w, sigma)?;
    let mut mask = vec![0.0; h * w];
    match kind {
        TamperKind::Authentic => {}
        TamperKind::Splice => {
            let region = draw_region(&mut rng, h, w)?;
            // the donor comes from a different "camera": its noise level differs by 2.5-4x
            let factor = rng.random_range(2.5..4.0);
            let donor_sigma = if rng.random_bool(0.5) { sigma * factor } else { sigma / factor };
            let donor = background(&mut rng, h, w, donor_sigma)?;
            for (p, &inside) in region.iter().enumerate() {
                if inside {
                    mask[p] = 1.0;
                    for c in 0..3 {
                        image[c * h * w + p] = donor[c * h * w + p];
                    }
                }
            }
        }
        TamperKind::CopyMove => {
            let (region, src) = draw_copy_move(&mut rng, h, w)?;
            let orig = image.clone();
            for (p, &inside) in region.iter().enumerate() {
                if inside {
                    mask[p] = 1.0;
                    let q = src[p];
                    for c in 0..3 {
                        image[c * h * w + p] = orig[c * h * w + q];
                    }
                }
            }
        }
    }
    Ok(Sample {
        image: Tensor::new(&[3, h, w], image)?,
        mask: Tensor::new(&[h, w], mask)?,
        kind,
        seed,
    })
}

/// `n` samples whose kinds cycle through `kinds`; sample `i` uses `derive_seed(seed, i)`.
pub fn synth_set(seed: u64, n: usize, h: usize, w: usize, kinds: &[TamperKind]) -> Result<Vec<Sample>> {
    if kinds.is_empty() {
        return Err(Error::Usage("no tamper kinds given".into()));
    }
    (0..n)
        .map(|i| synth_tamper(derive_seed(seed, i as u64), h, w, kinds[i % kinds.len()]))
        .collect()
}

/// Gradient, low-frequency texture, sinusoidal patterns and Gaussian sensor noise, clamped
/// to `[0, 1]`. Layout `[3, H, W]`.
fn background(rng: &mut impl Rng, h: usize, w: usize, sigma: f64) -> Result<Vec<f64>> {
    let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.25..0.75));
    let amp: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.25..0.25));
    let theta = rng.random_range(0.0..2.0 * PI);
    let (ct, st) = (theta.cos(), theta.sin());

    let (gh, gw) = ((h / 8).max(2), (w / 8).max(2));
    let coarse = Tensor::from_fn(&[3, gh, gw], |_| rng.random_range(-0.08..0.08));
    let coarse = bilinear_resize(&coarse, h, w)?;

    let waves: Vec<([f64; 3], f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            let mix = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
            let f = rng.random_range(1.0..6.0) * 2.0 * PI;
            let o = rng.random_range(0.0..PI);
            let ph = rng.random_range(0.0..2.0 * PI);
            let a = rng.random_range(0.01..0.05);
            (mix, f * o.cos(), f * o.sin(), ph, a)
        })
        .collect();

    let mut out = vec![0.0; 3 * h * w];
    for i in 0..h {
        let y = (i as f64 + 0.5) / h as f64 - 0.5;
        for j in 0..w {
            let x = (j as f64 + 0.5) / w as f64 - 0.5;
            let ramp = ct * x + st * y;
            for c in 0..3 {
                let mut v = base[c] + amp[c] * ramp + coarse.data()[(c * h + i) * w + j];
                for (mix, fx, fy, ph, a) in &waves {
                    v += a * mix[c] * (fx * x + fy * y + ph).sin();
                }
                out[(c * h + i) * w + j] = v;
            }
        }
    }
    for v in &mut out {
        let n: f64 = rng.sample(StandardNormal);
        *v = (*v + sigma * n).clamp(0.0, 1.0);
    }
    Ok(out)
}

/// Star-shaped polygon around `(cy, cx)`, vertices in angular order.
fn draw_polygon(rng: &mut impl Rng, cy: f64, cx: f64, radius: f64) -> Vec<(f64, f64)> {
    let k = rng.random_range(5..=9);
    let step = 2.0 * PI / k as f64;
    let phase = rng.random_range(0.0..step);
    (0..k)
        .map(|i| {
            let a = phase + i as f64 * step + rng.random_range(-0.3..0.3) * step;
            let r = radius * rng.random_range(0.6..1.0);
            (cy + r * a.sin(), cx + r * a.cos())
        })
        .collect()
}

/// Even-odd rule at pixel centers.
fn rasterize(poly: &[(f64, f64)], h: usize, w: usize) -> Vec<bool> {
    let mut inside = vec![false; h * w];
    for i in 0..h {
        let py = i as f64 + 0.5;
        for j in 0..w {
            let px = j as f64 + 0.5;
            let mut odd = false;
            let mut prev = poly[poly.len() - 1];
            for &cur in poly {
                let ((y0, x0), (y1, x1)) = (prev, cur);
                if (y0 > py) != (y1 > py) && px < x0 + (py - y0) / (y1 - y0) * (x1 - x0) {
                    odd = !odd;
                }
                prev = cur;
            }
            inside[i * w + j] = odd;
        }
    }
    inside
}

fn area_ok(region: &[bool]) -> bool {
    let n = region.iter().filter(|&&b| b).count();
    let frac = n as f64 / region.len() as f64;
    n >= MIN_REGION_PX && (AREA_RANGE.0..=AREA_RANGE.1).contains(&frac)
}

/// Draws `(center, radius)` and the rasterized region until its area is acceptable.
fn draw_region_with(rng: &mut impl Rng, h: usize, w: usize) -> Result<(Vec<bool>, (f64, f64), f64)> {
    let (hf, wf) = (h as f64, w as f64);
    for _ in 0..MAX_ATTEMPTS {
        let frac = rng.random_range(0.03..0.2);
        // a star polygon with radii in [0.6, 1] r covers roughly 0.45·π·r²
        let radius = (frac * hf * wf / (0.45 * PI)).sqrt();
        let cy = rng.random_range(0.15 * hf..0.85 * hf);
        let cx = rng.random_range(0.15 * wf..0.85 * wf);
        let poly = draw_polygon(rng, cy, cx, radius);
        let region = rasterize(&poly, h, w);
        if area_ok(&region) {
            return Ok((region, (cy, cx), radius));
        }
    }
    Err(Error::domain("synth_tamper", format!("no admissible region in a {h}x{w} image")))
}

fn draw_region(rng: &mut impl Rng, h: usize, w: usize) -> Result<Vec<bool>> {
    Ok(draw_region_with(rng, h, w)?.0)
}

/// Target region plus, for every target pixel, the flat index of its source pixel.
fn draw_copy_move(rng: &mut impl Rng, h: usize, w: usize) -> Result<(Vec<bool>, Vec<usize>)> {
    for _ in 0..MAX_ATTEMPTS {
        let (region, (cy, cx), radius) = draw_region_with(rng, h, w)?;
        let angle = rng.random_range(-PI / 6.0..PI / 6.0);
        let dist = rng.random_range(1.2 * radius..2.5 * radius);
        let dir = rng.random_range(0.0..2.0 * PI);
        let (sy, sx) = (cy + dist * dir.sin(), cx + dist * dir.cos());
        let (sa, ca) = (angle.sin(), angle.cos());
        let mut src = vec![0; h * w];
        let mut valid = true;
        for (p, &inside) in region.iter().enumerate() {
            if !inside {
                continue;
            }
            let (dy, dx) = ((p / w) as f64 + 0.5 - cy, (p % w) as f64 + 0.5 - cx);
            let y = sy + ca * dy - sa * dx;
            let x = sx + sa * dy + ca * dx;
            if !(0.0..h as f64).contains(&y) || !(0.0..w as f64).contains(&x) {
                valid = false;
                break;
            }
            src[p] = y as usize * w + x as usize;
        }
        if valid {
            return Ok((region, src));
        }
    }
    Err(Error::domain("synth_tamper", format!("no admissible copy-move in a {h}x{w} image")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_seeds_differ() {
        let s: std::collections::HashSet<u64> = (0..1000).map(|i| derive_seed(7, i)).collect();
        assert_eq!(s.len(), 1000);
    }

    #[test]
    fn square_rasterizes_to_its_area() {
        let poly = [(2.0, 2.0), (2.0, 6.0), (6.0, 6.0), (6.0, 2.0)];
        let r = rasterize(&poly, 8, 8);
        assert_eq!(r.iter().filter(|&&b| b).count(), 16);
        assert!(r[2 * 8 + 2] && !r[8 + 2] && !r[6 * 8 + 6]);
    }

    #[test]
    fn kind_names_round_trip() {
        for k in [TamperKind::Splice, TamperKind::CopyMove, TamperKind::Authentic] {
            assert_eq!(k.name().parse::<TamperKind>().unwrap(), k);
        }
    }

    #[test]
    fn copy_move_sources_differ_from_targets() {
        let s = synth_tamper(3, 64, 64, TamperKind::CopyMove).unwrap();
        assert!(s.tampered_fraction() > 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (region, src) = draw_copy_move(&mut rng, 64, 64).unwrap();
        let moved = region.iter().enumerate().filter(|(p, &b)| b && src[*p] != *p).count();
        assert_eq!(moved, region.iter().filter(|&&b| b).count());
    }
}
