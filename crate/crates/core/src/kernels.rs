//! Slice-level numeric kernels shared by the functional ops and the recorded graph.
//!
//! Layout conventions: convolutions take channel-first `[C, H, W]`, everything
//! positionwise (linear, layer norm) works on the contiguous last axis.

use crate::error::{Error, Result};

/// `c = beta * c + op(a) * op(b)` with `op(a)` of shape `[m, k]` and `op(b)` of shape `[k, n]`.
///
/// `a_t` means `a` is stored as `[k, m]`; `b_t` means `b` is stored as `[n, k]`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above guarantee every strided access stays inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// ln(1 + e^x), returning x itself above 20 where the correction is below f64 resolution.
pub fn softplus(x: f64) -> f64 {
    if x > 20.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s + x * s * (1.0 - s)
}

/// Geometry of a 2-D cross-correlation over a `[C, H, W]` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], kernel: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if x.len() != 3 || kernel.len() != 4 {
            return Err(Error::dim("conv2d", x, kernel));
        }
        let (c, h, w) = (x[0], x[1], x[2]);
        let (k, kc, kh, kw) = (kernel[0], kernel[1], kernel[2], kernel[3]);
        if kc != c {
            return Err(Error::dim("conv2d", x, kernel));
        }
        if stride == 0 {
            return Err(Error::domain("conv2d", "stride must be positive"));
        }
        if kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(Error::dim("conv2d", x, kernel));
        }
        Ok(Self {
            c,
            h,
            w,
            k,
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (w + 2 * pad - kw) / stride + 1,
        })
    }

    pub fn out_shape(&self) -> [usize; 3] {
        [self.k, self.ho, self.wo]
    }

    pub fn macs(&self) -> u64 {
        (self.k * self.c * self.kh * self.kw * self.ho * self.wo) as u64
    }

    fn patch_len(&self) -> usize {
        self.c * self.kh * self.kw
    }

    /// Input coordinate for output row/col `o` and kernel tap `t`, or `None` in the zero padding.
    #[inline]
    fn src(o: usize, t: usize, stride: usize, pad: usize, extent: usize) -> Option<usize> {
        let p = (o * stride + t) as isize - pad as isize;
        (p >= 0 && (p as usize) < extent).then_some(p as usize)
    }
}

fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let npos = g.ho * g.wo;
    let mut cols = vec![0.0; g.patch_len() * npos];
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * npos..(row + 1) * npos];
                for oh in 0..g.ho {
                    let Some(ih) = ConvGeom::src(oh, ki, g.stride, g.pad, g.h) else {
                        continue;
                    };
                    let xrow = &x[(c * g.h + ih) * g.w..(c * g.h + ih + 1) * g.w];
                    for ow in 0..g.wo {
                        if let Some(iw) = ConvGeom::src(ow, kj, g.stride, g.pad, g.w) {
                            dst[oh * g.wo + ow] = xrow[iw];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add(cols: &[f64], g: &ConvGeom, gx: &mut [f64]) {
    let npos = g.ho * g.wo;
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * npos..(row + 1) * npos];
                for oh in 0..g.ho {
                    let Some(ih) = ConvGeom::src(oh, ki, g.stride, g.pad, g.h) else {
                        continue;
                    };
                    let base = (c * g.h + ih) * g.w;
                    for ow in 0..g.wo {
                        if let Some(iw) = ConvGeom::src(ow, kj, g.stride, g.pad, g.w) {
                            gx[base + iw] += src[oh * g.wo + ow];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation, output `[K, Ho, Wo]` flattened.
pub fn conv2d_forward(x: &[f64], w: &[f64], b: Option<&[f64]>, g: &ConvGeom) -> Vec<f64> {
    let npos = g.ho * g.wo;
    let mut out = vec![0.0; g.k * npos];
    if let Some(b) = b {
        for (k, row) in out.chunks_mut(npos).enumerate() {
            row.fill(b[k]);
        }
    }
    let cols = im2col(x, g);
    gemm(g.k, g.patch_len(), npos, w, false, &cols, false, &mut out, 1.0);
    out
}

pub fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    gout: &[f64],
    g: &ConvGeom,
    gx: Option<&mut [f64]>,
    gw: Option<&mut [f64]>,
    gb: Option<&mut [f64]>,
) {
    let npos = g.ho * g.wo;
    if let Some(gb) = gb {
        for (k, row) in gout.chunks(npos).enumerate() {
            gb[k] += row.iter().sum::<f64>();
        }
    }
    if let Some(gw) = gw {
        let cols = im2col(x, g);
        gemm(g.k, npos, g.patch_len(), gout, false, &cols, true, gw, 1.0);
    }
    if let Some(gx) = gx {
        let mut gcols = vec![0.0; g.patch_len() * npos];
        gemm(g.patch_len(), g.k, npos, w, true, gout, false, &mut gcols, 0.0);
        col2im_add(&gcols, g, gx);
    }
}

/// Depthwise "same" convolution of `[C, H, W]` with per-channel `[C, kh, kw]` kernels.
pub fn dwconv_forward(
    x: &[f64],
    w: &[f64],
    b: Option<&[f64]>,
    c: usize,
    h: usize,
    wd: usize,
    kh: usize,
    kw: usize,
) -> Vec<f64> {
    let (ph, pw) = (kh / 2, kw / 2);
    let mut out = vec![0.0; c * h * wd];
    for ch in 0..c {
        let xs = &x[ch * h * wd..(ch + 1) * h * wd];
        let ks = &w[ch * kh * kw..(ch + 1) * kh * kw];
        let os = &mut out[ch * h * wd..(ch + 1) * h * wd];
        let bias = b.map_or(0.0, |b| b[ch]);
        for i in 0..h {
            for j in 0..wd {
                let mut acc = bias;
                for ki in 0..kh {
                    let ii = i as isize + ki as isize - ph as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let xrow = &xs[ii as usize * wd..(ii as usize + 1) * wd];
                    for kj in 0..kw {
                        let jj = j as isize + kj as isize - pw as isize;
                        if jj >= 0 && jj < wd as isize {
                            acc += ks[ki * kw + kj] * xrow[jj as usize];
                        }
                    }
                }
                os[i * wd + j] = acc;
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn dwconv_backward(
    x: &[f64],
    w: &[f64],
    gout: &[f64],
    c: usize,
    h: usize,
    wd: usize,
    kh: usize,
    kw: usize,
    mut gx: Option<&mut [f64]>,
    mut gw: Option<&mut [f64]>,
    gb: Option<&mut [f64]>,
) {
    let (ph, pw) = (kh / 2, kw / 2);
    if let Some(gb) = gb {
        for (ch, row) in gout.chunks(h * wd).enumerate() {
            gb[ch] += row.iter().sum::<f64>();
        }
    }
    for ch in 0..c {
        let base = ch * h * wd;
        for i in 0..h {
            for j in 0..wd {
                let go = gout[base + i * wd + j];
                if go == 0.0 {
                    continue;
                }
                for ki in 0..kh {
                    let ii = i as isize + ki as isize - ph as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for kj in 0..kw {
                        let jj = j as isize + kj as isize - pw as isize;
                        if jj < 0 || jj >= wd as isize {
                            continue;
                        }
                        let xi = base + ii as usize * wd + jj as usize;
                        let wi = (ch * kh + ki) * kw + kj;
                        if let Some(gx) = gx.as_deref_mut() {
                            gx[xi] += go * w[wi];
                        }
                        if let Some(gw) = gw.as_deref_mut() {
                            gw[wi] += go * x[xi];
                        }
                    }
                }
            }
        }
    }
}

/// Saved statistics of a layer-norm forward pass.
#[derive(Clone, Debug, Default)]
pub struct NormCache {
    pub xhat: Vec<f64>,
    pub rstd: Vec<f64>,
}

/// Normalizes each contiguous row of width `c`, then applies `gamma`/`beta`.
pub fn layer_norm_forward(
    x: &[f64],
    gamma: &[f64],
    beta: &[f64],
    c: usize,
    eps: f64,
    keep: bool,
) -> (Vec<f64>, NormCache) {
    let rows = x.len() / c;
    let mut out = vec![0.0; x.len()];
    let mut cache = NormCache::default();
    if keep {
        cache.xhat = vec![0.0; x.len()];
        cache.rstd = vec![0.0; rows];
    }
    for r in 0..rows {
        let xs = &x[r * c..(r + 1) * c];
        let mean = xs.iter().sum::<f64>() / c as f64;
        let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let rstd = 1.0 / (var + eps).sqrt();
        for i in 0..c {
            let xh = (xs[i] - mean) * rstd;
            out[r * c + i] = xh * gamma[i] + beta[i];
            if keep {
                cache.xhat[r * c + i] = xh;
            }
        }
        if keep {
            cache.rstd[r] = rstd;
        }
    }
    (out, cache)
}

pub fn layer_norm_backward(
    gout: &[f64],
    gamma: &[f64],
    cache: &NormCache,
    c: usize,
    mut gx: Option<&mut [f64]>,
    mut ggamma: Option<&mut [f64]>,
    mut gbeta: Option<&mut [f64]>,
) {
    let rows = gout.len() / c;
    let mut gxhat = vec![0.0; c];
    for r in 0..rows {
        let gy = &gout[r * c..(r + 1) * c];
        let xh = &cache.xhat[r * c..(r + 1) * c];
        if let Some(gg) = ggamma.as_deref_mut() {
            for i in 0..c {
                gg[i] += gy[i] * xh[i];
            }
        }
        if let Some(gbt) = gbeta.as_deref_mut() {
            for i in 0..c {
                gbt[i] += gy[i];
            }
        }
        if let Some(gx) = gx.as_deref_mut() {
            let mut m1 = 0.0;
            let mut m2 = 0.0;
            for i in 0..c {
                gxhat[i] = gy[i] * gamma[i];
                m1 += gxhat[i];
                m2 += gxhat[i] * xh[i];
            }
            m1 /= c as f64;
            m2 /= c as f64;
            let rstd = cache.rstd[r];
            for i in 0..c {
                gx[r * c + i] += rstd * (gxhat[i] - m1 - xh[i] * m2);
            }
        }
    }
}

/// Interpolation taps along one axis: for each output index, `(i0, i1, w1)` with weight
/// `1 - w1` on `i0` and `w1` on `i1`.
///
/// Half-pixel centers (align-corners = false): the output index `o` samples the input at
/// `src = (o + 0.5) * in / out - 0.5`, clamped to `[0, in - 1]`.
pub fn bilinear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Precomputed bilinear resampling of a `[C, H, W]` tensor to `[C, H', W']`.
#[derive(Clone, Debug)]
pub struct ResizePlan {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub ho: usize,
    pub wo: usize,
    rows: Vec<(usize, usize, f64)>,
    cols: Vec<(usize, usize, f64)>,
}

impl ResizePlan {
    pub fn new(c: usize, h: usize, w: usize, ho: usize, wo: usize) -> Self {
        Self {
            c,
            h,
            w,
            ho,
            wo,
            rows: bilinear_taps(h, ho),
            cols: bilinear_taps(w, wo),
        }
    }

    /// Four taps per output element.
    pub fn macs(&self) -> u64 {
        (4 * self.c * self.ho * self.wo) as u64
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.c * self.ho * self.wo];
        for ch in 0..self.c {
            let xs = &x[ch * self.h * self.w..(ch + 1) * self.h * self.w];
            for (oi, &(r0, r1, wr)) in self.rows.iter().enumerate() {
                for (oj, &(c0, c1, wc)) in self.cols.iter().enumerate() {
                    let top = xs[r0 * self.w + c0] * (1.0 - wc) + xs[r0 * self.w + c1] * wc;
                    let bot = xs[r1 * self.w + c0] * (1.0 - wc) + xs[r1 * self.w + c1] * wc;
                    out[(ch * self.ho + oi) * self.wo + oj] = top * (1.0 - wr) + bot * wr;
                }
            }
        }
        out
    }

    pub fn backward(&self, gout: &[f64], gx: &mut [f64]) {
        for ch in 0..self.c {
            let gs = &mut gx[ch * self.h * self.w..(ch + 1) * self.h * self.w];
            for (oi, &(r0, r1, wr)) in self.rows.iter().enumerate() {
                for (oj, &(c0, c1, wc)) in self.cols.iter().enumerate() {
                    let g = gout[(ch * self.ho + oi) * self.wo + oj];
                    gs[r0 * self.w + c0] += g * (1.0 - wr) * (1.0 - wc);
                    gs[r0 * self.w + c1] += g * (1.0 - wr) * wc;
                    gs[r1 * self.w + c0] += g * wr * (1.0 - wc);
                    gs[r1 * self.w + c1] += g * wr * wc;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, false, &b, false, &mut c, 0.0);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(2, 2, 2, &a, true, &b, false, &mut c, 0.0);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, &a, false, &b, true, &mut c, 0.0);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn softplus_branches() {
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(softplus(50.0), 50.0);
        assert!((softplus(20.0) - 20.0).abs() < 1e-8);
        assert!(softplus(-40.0) > 0.0);
    }

    #[test]
    fn taps_half_pixel() {
        let t = bilinear_taps(2, 4);
        assert_eq!(t[0], (0, 1, 0.0));
        assert_eq!(t[1], (0, 1, 0.25));
        assert_eq!(t[2], (0, 1, 0.75));
        assert_eq!(t[3], (1, 1, 0.0));
    }

    #[test]
    fn conv_geometry() {
        let g = ConvGeom::new(&[3, 64, 64], &[16, 3, 4, 4], 4, 0).unwrap();
        assert_eq!(g.out_shape(), [16, 16, 16]);
        let g = ConvGeom::new(&[8, 5, 5], &[8, 8, 3, 3], 2, 1).unwrap();
        assert_eq!((g.ho, g.wo), (3, 3));
        assert!(ConvGeom::new(&[1, 2, 2], &[1, 1, 5, 5], 1, 1).is_err());
    }
}
