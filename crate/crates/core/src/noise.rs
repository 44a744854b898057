//! Auxiliary forensic stream: fixed SRM high-pass filters, constrained Bayar
//! convolution and a learned residual stream, fused into the quarter-resolution
//! feature `F_mod`.

use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, ParamId, Var};
use crate::layers::{Conv, Norm, INIT_STD};
use crate::params::{ParamKind, ParamStore};
use crate::tensor::Tensor;

/// The three SRM kernels, each listed with its normalizer already applied:
/// the 3×3 second-order square (÷4) embedded in a 5×5 window, the 5×5 square
/// (÷12), and the horizontal 1-D second-order difference (÷2).
pub const SRM_KERNELS: [[[f64; 5]; 5]; 3] = [
    [
        [0.0, 0.0, 0.0, 0.0, 0.0],
        [0.0, -0.25, 0.5, -0.25, 0.0],
        [0.0, 0.5, -1.0, 0.5, 0.0],
        [0.0, -0.25, 0.5, -0.25, 0.0],
        [0.0, 0.0, 0.0, 0.0, 0.0],
    ],
    [
        [-1.0 / 12.0, 2.0 / 12.0, -2.0 / 12.0, 2.0 / 12.0, -1.0 / 12.0],
        [2.0 / 12.0, -6.0 / 12.0, 8.0 / 12.0, -6.0 / 12.0, 2.0 / 12.0],
        [-2.0 / 12.0, 8.0 / 12.0, -12.0 / 12.0, 8.0 / 12.0, -2.0 / 12.0],
        [2.0 / 12.0, -6.0 / 12.0, 8.0 / 12.0, -6.0 / 12.0, 2.0 / 12.0],
        [-1.0 / 12.0, 2.0 / 12.0, -2.0 / 12.0, 2.0 / 12.0, -1.0 / 12.0],
    ],
    [
        [0.0, 0.0, 0.0, 0.0, 0.0],
        [0.0, 0.0, 0.0, 0.0, 0.0],
        [0.0, 0.5, -1.0, 0.5, 0.0],
        [0.0, 0.0, 0.0, 0.0, 0.0],
        [0.0, 0.0, 0.0, 0.0, 0.0],
    ],
];

/// Output channels of the SRM bank: every kernel on every RGB channel.
pub const SRM_CHANNELS: usize = 9;

/// Depthwise kernel bank `[9, 5, 5]`: channel `3k + c` is kernel `k` on color `c`.
pub fn srm_bank() -> Tensor {
    Tensor::from_fn(&[SRM_CHANNELS, 5, 5], |i| {
        let (ch, rest) = (i / 25, i % 25);
        SRM_KERNELS[ch / 3][rest / 5][rest % 5]
    })
}

/// Records the SRM filtering of `image: [3, H, W]` as `[9, H, W]`.
pub fn srm_recorded(g: &mut Graph, image: Var) -> Result<Var> {
    let s = g.shape(image).to_vec();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::dim("srm_apply", &s, &[3, 0, 0]));
    }
    let index: Arc<[usize]> = (0..SRM_CHANNELS).map(|ch| ch % 3).collect();
    let rep = g.gather(image, index, s[1] * s[2], &[SRM_CHANNELS, s[1], s[2]])?;
    let k = g.constant(srm_bank());
    g.dwconv(rep, k, None)
}

/// `[3, H, W]` → `[9, H, W]` with the fixed SRM bank and zero "same" padding.
pub fn srm_apply(image: &Tensor) -> Result<Tensor> {
    let mut g = Graph::inference();
    let x = g.constant(image.clone());
    let y = srm_recorded(&mut g, x)?;
    Ok(g.value(y).clone())
}

/// Projects every 5×5 slice of `weights: [K, C, 5, 5]` onto the Bayar constraint:
/// center `-1`, off-center coefficients scaled to sum to `1`. A slice whose off-center
/// sum vanishes (or is not finite) is re-drawn from `rng` first.
pub fn bayar_project(weights: &mut Tensor, rng: &mut impl Rng) -> Result<()> {
    let s = weights.shape();
    if s.len() != 4 || s[2] != s[3] || s[2] % 2 == 0 {
        return Err(Error::dim("bayar_project", s, &[0, 0, 5, 5]));
    }
    let k = s[2];
    let center = (k / 2) * k + k / 2;
    for slice in weights.data_mut().chunks_mut(k * k) {
        let mut total: f64 = off_center_sum(slice, center);
        while !(total.is_finite() && total.abs() > 1e-12) {
            for (i, v) in slice.iter_mut().enumerate() {
                if i != center {
                    *v = rng.random_range(0.0..1.0);
                }
            }
            total = off_center_sum(slice, center);
        }
        for (i, v) in slice.iter_mut().enumerate() {
            *v = if i == center { -1.0 } else { *v / total };
        }
    }
    Ok(())
}

fn off_center_sum(slice: &[f64], center: usize) -> f64 {
    slice
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != center)
        .map(|(_, v)| v)
        .sum()
}

/// Magic bytes of a noise-map file.
pub const NOISE_MAP_MAGIC: &[u8; 4] = b"NMAP";

/// Writes `map: [C, H, W]` as `NMAP`, three little-endian `u32` extents and then
/// little-endian `f32` values in row-major order.
pub fn save_noise_map(path: &Path, map: &Tensor) -> Result<()> {
    let s = map.shape();
    if s.len() != 3 {
        return Err(Error::dim("save_noise_map", s, &[0, 0, 0]));
    }
    let mut buf = Vec::with_capacity(16 + 4 * map.len());
    buf.extend_from_slice(NOISE_MAP_MAGIC);
    for &e in s {
        let e = u32::try_from(e).map_err(|_| Error::format(path, "extent exceeds u32"))?;
        buf.extend_from_slice(&e.to_le_bytes());
    }
    for &v in map.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// Reads a noise map and checks it against the expected `[C, H, W]`.
pub fn load_noise_map(path: &Path, expect: [usize; 3]) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || &bytes[..4] != NOISE_MAP_MAGIC {
        return Err(Error::format(path, "missing NMAP header"));
    }
    let dim = |i: usize| {
        u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize
    };
    let shape = [dim(0), dim(1), dim(2)];
    if shape != expect {
        return Err(Error::dim("load_noise_map", &expect, &shape));
    }
    let n: usize = shape.iter().product();
    let body = &bytes[16..];
    if body.len() != 4 * n {
        return Err(Error::format(
            path,
            format!("expected {} data bytes, found {}", 4 * n, body.len()),
        ));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Tensor::new(&shape, data)
}

/// Parameter ids of the noise extractor.
#[derive(Clone, Debug)]
pub struct NoiseExtractor {
    pub bayar: ParamId,
    pub resid: [Conv; 3],
    pub fuse1: Conv,
    pub fuse2: Conv,
    pub norm: Norm,
    pub bayar_kernels: usize,
    pub resid_channels: usize,
    pub mod_channels: usize,
}

impl NoiseExtractor {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        bayar_kernels: usize,
        resid_channels: usize,
        mod_channels: usize,
    ) -> Self {
        let mut w = Tensor::trunc_normal(&[bayar_kernels, 3, 5, 5], INIT_STD, rng);
        bayar_project(&mut w, rng).expect("5x5 kernels");
        let bayar = store.add("noise.bayar.w", ParamKind::Bayar, w);
        let cr = resid_channels;
        let resid = [
            Conv::new(store, rng, "noise.resid.0", 3, cr, 3, 1, 1),
            Conv::new(store, rng, "noise.resid.1", cr, cr, 3, 1, 1),
            Conv::new(store, rng, "noise.resid.2", cr, cr, 3, 1, 1),
        ];
        let cin = SRM_CHANNELS + bayar_kernels + cr;
        let fuse1 = Conv::new(store, rng, "noise.fuse.0", cin, mod_channels / 2, 3, 2, 1);
        let fuse2 = Conv::new(store, rng, "noise.fuse.1", mod_channels / 2, mod_channels, 3, 2, 1);
        let norm = Norm::new(store, "noise.fuse.norm", mod_channels);
        Self {
            bayar,
            resid,
            fuse1,
            fuse2,
            norm,
            bayar_kernels,
            resid_channels,
            mod_channels,
        }
    }

    /// Constrained convolution `[3, H, W]` → `[K, H, W]`.
    pub fn bayar_forward(&self, g: &mut Graph, store: &ParamStore, image: Var) -> Result<Var> {
        let w = store.bind(g, self.bayar);
        g.conv2d(image, w, None, 1, 2)
    }

    /// Learned stand-in for an external noise-print extractor, `[3, H, W]` → `[C_r, H, W]`.
    pub fn residual_forward(&self, g: &mut Graph, store: &ParamStore, image: Var) -> Result<Var> {
        let mut x = self.resid[0].forward(g, store, image)?;
        x = g.silu(x);
        x = self.resid[1].forward(g, store, x)?;
        x = g.silu(x);
        self.resid[2].forward(g, store, x)
    }

    /// Concatenates the three streams and reduces them to `F_mod: [H/4, W/4, C_mod]`.
    pub fn fuse_forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        srm: Var,
        bayar: Var,
        resid: Var,
    ) -> Result<Var> {
        let hw = |g: &Graph, v: Var| g.shape(v)[1..].to_vec();
        if hw(g, srm) != hw(g, bayar) || hw(g, srm) != hw(g, resid) {
            return Err(Error::dim("noise_fuse", g.shape(srm), g.shape(resid)));
        }
        let x = g.concat(&[srm, bayar, resid], 0)?;
        let mut y = self.fuse1.forward(g, store, x)?;
        y = g.silu(y);
        y = self.fuse2.forward(g, store, y)?;
        let y = g.chw_to_hwc(y)?;
        self.norm.forward(g, store, y)
    }

    /// Full stream. `noise_map`, when given, replaces the learned residual stream.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        image: Var,
        noise_map: Option<&Tensor>,
    ) -> Result<Var> {
        let srm = srm_recorded(g, image)?;
        let bayar = self.bayar_forward(g, store, image)?;
        let resid = match noise_map {
            Some(m) => {
                let s = g.shape(image);
                let want = [self.resid_channels, s[1], s[2]];
                if m.shape() != want {
                    return Err(Error::dim("noise_map", &want, m.shape()));
                }
                g.constant(m.detached())
            }
            None => self.residual_forward(g, store, image)?,
        };
        self.fuse_forward(g, store, srm, bayar, resid)
    }

    /// Re-applies the Bayar constraint to the stored kernels.
    pub fn project(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        bayar_project(store.get_mut(self.bayar), rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn srm_kernels_are_high_pass() {
        for k in &SRM_KERNELS {
            let s: f64 = k.iter().flatten().sum();
            assert!(s.abs() < 1e-15);
        }
    }

    #[test]
    fn bayar_equal_off_center() {
        let mut w = Tensor::full(&[1, 1, 5, 5], 0.3);
        bayar_project(&mut w, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for (i, &v) in w.data().iter().enumerate() {
            let want = if i == 12 { -1.0 } else { 1.0 / 24.0 };
            assert!((v - want).abs() < 1e-15);
        }
    }

    #[test]
    fn bayar_zero_sum_is_redrawn() {
        let mut w = Tensor::zeros(&[2, 3, 5, 5]);
        bayar_project(&mut w, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        for s in w.data().chunks(25) {
            assert_eq!(s[12], -1.0);
            assert!((off_center_sum(s, 12) - 1.0).abs() < 1e-12);
        }
    }
}
