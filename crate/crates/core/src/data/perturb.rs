//! Post-processing perturbations used by the robustness sweep and by augmentation.

use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::bilinear_resize;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbKind {
    JpegQuality,
    GaussianBlur,
    GaussianNoise,
    Resize,
}

impl PerturbKind {
    pub const ALL: [PerturbKind; 4] = [
        PerturbKind::JpegQuality,
        PerturbKind::GaussianBlur,
        PerturbKind::GaussianNoise,
        PerturbKind::Resize,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PerturbKind::JpegQuality => "jpeg_quality",
            PerturbKind::GaussianBlur => "gaussian_blur",
            PerturbKind::GaussianNoise => "gaussian_noise",
            PerturbKind::Resize => "resize",
        }
    }

    /// Inclusive range of admissible strengths.
    pub fn range(self) -> (f64, f64) {
        match self {
            PerturbKind::JpegQuality => (30.0, 100.0),
            PerturbKind::GaussianBlur => (0.0, 5.0),
            PerturbKind::GaussianNoise => (0.0, 0.1),
            PerturbKind::Resize => (0.25, 2.0),
        }
    }

    /// Strength that leaves the image unchanged, if the kind has one.
    pub fn identity(self) -> Option<f64> {
        match self {
            PerturbKind::JpegQuality => None,
            PerturbKind::GaussianBlur | PerturbKind::GaussianNoise => Some(0.0),
            PerturbKind::Resize => Some(1.0),
        }
    }
}

impl fmt::Display for PerturbKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PerturbKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Usage(format!("unknown perturbation {s:?}")))
    }
}

/// A perturbation kind with a validated strength.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Perturbation {
    pub kind: PerturbKind,
    pub strength: f64,
}

impl Perturbation {
    pub fn new(kind: PerturbKind, strength: f64) -> Result<Self> {
        let p = Self { kind, strength };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.kind.range();
        if !(lo..=hi).contains(&self.strength) {
            return Err(Error::domain(
                "perturb",
                format!("{} strength {} outside [{lo}, {hi}]", self.kind, self.strength),
            ));
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        self.kind.identity() == Some(self.strength)
    }
}

/// Applies `p` to `image: [3, H, W]`. Shape and the `[0, 1]` range are preserved.
pub fn perturb(image: &Tensor, p: Perturbation, rng: &mut impl Rng) -> Result<Tensor> {
    p.validate()?;
    check_image(image)?;
    match p.kind {
        PerturbKind::JpegQuality => jpeg_compress(image, p.strength),
        PerturbKind::GaussianBlur => gaussian_blur(image, p.strength),
        PerturbKind::GaussianNoise => Ok(add_noise(image, p.strength, rng)),
        PerturbKind::Resize => resample(image, p.strength),
    }
}

fn check_image(image: &Tensor) -> Result<()> {
    if image.rank() != 3 {
        return Err(Error::dim("perturb", image.shape(), &[3, 0, 0]));
    }
    Ok(())
}

const LUMA_TABLE: [f64; 64] = [
    16., 11., 10., 16., 24., 40., 51., 61., //
    12., 12., 14., 19., 26., 58., 60., 55., //
    14., 13., 16., 24., 40., 57., 69., 56., //
    14., 17., 22., 29., 51., 87., 80., 62., //
    18., 22., 37., 56., 68., 109., 103., 77., //
    24., 35., 55., 64., 81., 104., 113., 92., //
    49., 64., 78., 87., 103., 121., 120., 101., //
    72., 92., 95., 98., 112., 100., 103., 99.,
];

/// Standard luminance quantization table scaled to `quality` (libjpeg convention).
pub fn quant_table(quality: f64) -> [f64; 64] {
    let q = quality.clamp(1.0, 100.0);
    let scale = if q < 50.0 { 5000.0 / q } else { 200.0 - 2.0 * q };
    LUMA_TABLE.map(|t| ((t * scale + 50.0) / 100.0).floor().clamp(1.0, 255.0))
}

/// Orthonormal 8-point DCT-II matrix, `m[u][x]`.
fn dct_matrix() -> &'static [[f64; 8]; 8] {
    static M: OnceLock<[[f64; 8]; 8]> = OnceLock::new();
    M.get_or_init(|| {
        std::array::from_fn(|u| {
            let a = if u == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
            std::array::from_fn(|x| {
                a * (((2 * x + 1) * u) as f64 * std::f64::consts::PI / 16.0).cos()
            })
        })
    })
}

/// JPEG-style compression restricted to luma: 8×8 block DCT of `Y` on the 0-255 scale,
/// quantize and dequantize with the scaled table, inverse DCT. Chroma is left untouched,
/// so the luma change is added equally to R, G and B. Partial edge blocks are padded by
/// edge replication.
pub fn jpeg_compress(image: &Tensor, quality: f64) -> Result<Tensor> {
    check_image(image)?;
    let s = image.shape();
    if s[0] != 3 {
        return Err(Error::dim("jpeg_compress", s, &[3, 0, 0]));
    }
    let (h, w) = (s[1], s[2]);
    let plane = h * w;
    let d = image.data();
    let luma: Vec<f64> = (0..plane)
        .map(|p| 255.0 * (0.299 * d[p] + 0.587 * d[plane + p] + 0.114 * d[2 * plane + p]))
        .collect();
    let table = quant_table(quality);
    let m = dct_matrix();
    let mut delta = vec![0.0; plane];
    for bi in (0..h).step_by(8) {
        for bj in (0..w).step_by(8) {
            let mut block = [[0.0; 8]; 8];
            for (y, row) in block.iter_mut().enumerate() {
                for (x, v) in row.iter_mut().enumerate() {
                    let (i, j) = ((bi + y).min(h - 1), (bj + x).min(w - 1));
                    *v = luma[i * w + j] - 128.0;
                }
            }
            let mut coef = [[0.0; 8]; 8];
            for u in 0..8 {
                for v in 0..8 {
                    let mut acc = 0.0;
                    for y in 0..8 {
                        for x in 0..8 {
                            acc += m[u][y] * block[y][x] * m[v][x];
                        }
                    }
                    let q = table[u * 8 + v];
                    coef[u][v] = (acc / q).round() * q;
                }
            }
            for y in 0..8 {
                for x in 0..8 {
                    let (i, j) = (bi + y, bj + x);
                    if i >= h || j >= w {
                        continue;
                    }
                    let mut acc = 0.0;
                    for u in 0..8 {
                        for v in 0..8 {
                            acc += m[u][y] * coef[u][v] * m[v][x];
                        }
                    }
                    delta[i * w + j] = (acc - block[y][x]) / 255.0;
                }
            }
        }
    }
    Ok(Tensor::from_fn(s, |i| (d[i] + delta[i % plane]).clamp(0.0, 1.0)))
}

/// Separable Gaussian blur with radius `⌈3σ⌉` and clamped borders; `σ = 0` is the identity.
pub fn gaussian_blur(image: &Tensor, sigma: f64) -> Result<Tensor> {
    check_image(image)?;
    if sigma < 0.0 {
        return Err(Error::domain("gaussian_blur", format!("negative sigma {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(image.clone());
    }
    let r = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-r..=r).map(|t| (-(t * t) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);

    let s = image.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let src = image.data();
    let mut tmp = vec![0.0; src.len()];
    for ch in 0..c {
        for i in 0..h {
            let row = &src[(ch * h + i) * w..(ch * h + i + 1) * w];
            for j in 0..w {
                tmp[(ch * h + i) * w + j] = k
                    .iter()
                    .enumerate()
                    .map(|(t, kv)| kv * row[(j as isize + t as isize - r).clamp(0, w as isize - 1) as usize])
                    .sum();
            }
        }
    }
    let mut out = vec![0.0; src.len()];
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                out[(ch * h + i) * w + j] = k
                    .iter()
                    .enumerate()
                    .map(|(t, kv)| {
                        let ii = (i as isize + t as isize - r).clamp(0, h as isize - 1) as usize;
                        kv * tmp[(ch * h + ii) * w + j]
                    })
                    .sum();
            }
        }
    }
    Tensor::new(s, out)
}

/// Additive `N(0, σ²)` noise, clamped to `[0, 1]`.
pub fn add_noise(image: &Tensor, sigma: f64, rng: &mut impl Rng) -> Tensor {
    let mut out = image.clone();
    for v in out.data_mut() {
        let n: f64 = rng.sample(StandardNormal);
        *v = (*v + sigma * n).clamp(0.0, 1.0);
    }
    out
}

/// Bilinear resize by `factor` and back to the original size; factor 1 is the identity.
pub fn resample(image: &Tensor, factor: f64) -> Result<Tensor> {
    check_image(image)?;
    let s = image.shape();
    let scaled = |n: usize| ((n as f64 * factor).round() as usize).max(1);
    let (ho, wo) = (scaled(s[1]), scaled(s[2]));
    if (ho, wo) == (s[1], s[2]) {
        return Ok(image.clone());
    }
    let small = bilinear_resize(image, ho, wo)?;
    let back = bilinear_resize(&small, s[1], s[2])?;
    Ok(back.map(|v| v.clamp(0.0, 1.0)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quality_fifty_is_the_base_table() {
        assert_eq!(quant_table(50.0), LUMA_TABLE);
        assert!(quant_table(100.0).iter().all(|&q| q == 1.0));
    }

    #[test]
    fn dct_is_orthonormal() {
        let m = dct_matrix();
        for a in 0..8 {
            for b in 0..8 {
                let dot: f64 = (0..8).map(|x| m[a][x] * m[b][x]).sum();
                assert!((dot - if a == b { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn strength_ranges() {
        assert!(Perturbation::new(PerturbKind::JpegQuality, 29.0).is_err());
        assert!(Perturbation::new(PerturbKind::GaussianBlur, 5.5).is_err());
        assert!(Perturbation::new(PerturbKind::GaussianNoise, -0.1).is_err());
        assert!(Perturbation::new(PerturbKind::Resize, 0.2).is_err());
        assert!(Perturbation::new(PerturbKind::Resize, 2.0).is_ok());
        assert!(Perturbation::new(PerturbKind::Resize, 1.0).unwrap().is_identity());
    }

    #[test]
    fn constant_image_survives_blur_and_jpeg() {
        let x = Tensor::full(&[3, 12, 12], 0.5);
        assert!(gaussian_blur(&x, 2.0).unwrap().max_abs_diff(&x) < 1e-12);
        assert!(jpeg_compress(&x, 30.0).unwrap().max_abs_diff(&x) < 1.0 / 255.0);
    }
}
