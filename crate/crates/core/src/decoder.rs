//! Lightweight decoder: per-scale linear expansion, pixel shuffle to a quarter of the
//! input resolution, concatenation with the noise feature, linear fusion and a
//! two-class pixel head.

use std::sync::Arc;

use rand::Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::layers::Linear;
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Source index for every output element of a pixel shuffle of `[h, w, c·r²]` by `r`:
/// `out[h·r + a, w·r + b, c] = in[h, w, c·r² + a·r + b]`.
pub fn shuffle_index(h: usize, w: usize, c: usize, r: usize) -> Vec<usize> {
    let (ho, wo, cin) = (h * r, w * r, c * r * r);
    let mut idx = Vec::with_capacity(ho * wo * c);
    for oh in 0..ho {
        for ow in 0..wo {
            let (ih, a, iw, b) = (oh / r, oh % r, ow / r, ow % r);
            for ch in 0..c {
                idx.push((ih * w + iw) * cin + ch * r * r + a * r + b);
            }
        }
    }
    idx
}

fn shuffle_dims(s: &[usize], r: usize) -> Result<(usize, usize, usize)> {
    if s.len() != 3 || r == 0 || !s[2].is_multiple_of(r * r) {
        return Err(Error::dim("pixel_shuffle", s, &[0, 0, r * r]));
    }
    Ok((s[0], s[1], s[2] / (r * r)))
}

/// Records a pixel shuffle of `x: [h, w, c·r²]` into `[h·r, w·r, c]`.
pub fn shuffle_recorded(g: &mut Graph, x: Var, r: usize) -> Result<Var> {
    let (h, w, c) = shuffle_dims(g.shape(x), r)?;
    if r == 1 {
        return Ok(x);
    }
    let idx: Arc<[usize]> = shuffle_index(h, w, c, r).into();
    g.gather(x, idx, 1, &[h * r, w * r, c])
}

/// `[h, w, c·r²]` → `[h·r, w·r, c]`; see [`shuffle_index`].
pub fn pixel_shuffle(x: &Tensor, r: usize) -> Result<Tensor> {
    let (h, w, c) = shuffle_dims(x.shape(), r)?;
    let idx = shuffle_index(h, w, c, r);
    Tensor::new(&[h * r, w * r, c], idx.iter().map(|&i| x.data()[i]).collect())
}

/// Inverse of [`pixel_shuffle`]: `[h·r, w·r, c]` → `[h, w, c·r²]`.
pub fn pixel_unshuffle(x: &Tensor, r: usize) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 3 || r == 0 || s[0] % r != 0 || s[1] % r != 0 {
        return Err(Error::dim("pixel_unshuffle", s, &[r, r, 0]));
    }
    let (h, w, c) = (s[0] / r, s[1] / r, s[2]);
    let idx = shuffle_index(h, w, c, r);
    let mut out = vec![0.0; x.len()];
    for (o, &i) in idx.iter().enumerate() {
        out[i] = x.data()[o];
    }
    Tensor::new(&[h, w, c * r * r], out)
}

/// Decoder parameters.
#[derive(Clone, Debug)]
pub struct Decoder {
    /// `Linear(C_i, C·r_i²)`, or `Linear(C_i, C)` when the shuffle is ablated.
    pub expand: [Linear; 4],
    pub fuse: Linear,
    pub head: Linear,
    pub ratios: [usize; 4],
    pub embed_dim: usize,
    pub shuffle: bool,
}

/// Decoder output: quarter-resolution logits and the full-resolution probability map.
#[derive(Clone, Copy, Debug)]
pub struct LogitVars {
    /// `P: [H/4, W/4, 2]`.
    pub logits: Var,
    /// `[H, W]`, the tampered-class softmax probability.
    pub prob: Var,
}

impl Decoder {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, cfg: &ModelConfig) -> Self {
        let c = cfg.embed_dim;
        let shuffle = cfg.variant.uses_shuffle();
        let expand = [0, 1, 2, 3].map(|i| {
            let r = cfg.ratios[i];
            let out = if shuffle { c * r * r } else { c };
            Linear::new(
                store,
                rng,
                &format!("decoder.expand{i}"),
                cfg.stage_channels(i),
                out,
                true,
            )
        });
        let fuse_in = 4 * c + if cfg.variant.noise_in_decoder() { cfg.mod_channels } else { 0 };
        let fuse = Linear::new(store, rng, "decoder.fuse", fuse_in, c, true);
        let head = Linear::new(store, rng, "decoder.head", c, 2, true);
        Self {
            expand,
            fuse,
            head,
            ratios: cfg.ratios,
            embed_dim: c,
            shuffle,
        }
    }

    /// One branch: `F_i` → `F̂_i: [H/4, W/4, C]`.
    pub fn expand_scale(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        i: usize,
        f: Var,
    ) -> Result<Var> {
        let r = self.ratios[i];
        let e = self.expand[i].forward(g, store, f)?;
        if self.shuffle {
            return shuffle_recorded(g, e, r);
        }
        if r == 1 {
            return Ok(e);
        }
        let (h, w) = (g.shape(e)[0], g.shape(e)[1]);
        let chw = g.hwc_to_chw(e)?;
        let up = g.resize(chw, h * r, w * r)?;
        g.chw_to_hwc(up)
    }

    /// Pyramid (and `F_mod`) → logits at `H/4` and probabilities at `(H, W)`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        pyramid: &[Var; 4],
        f_mod: Option<Var>,
        out_size: (usize, usize),
    ) -> Result<LogitVars> {
        let mut parts = Vec::with_capacity(5);
        for (i, &f) in pyramid.iter().enumerate() {
            parts.push(self.expand_scale(g, store, i, f)?);
        }
        let q = g.shape(parts[0]).to_vec();
        for &p in &parts[1..] {
            if g.shape(p) != q.as_slice() {
                return Err(Error::dim("decoder", &q, g.shape(p)));
            }
        }
        if let Some(m) = f_mod {
            if g.shape(m)[..2] != q[..2] {
                return Err(Error::dim("decoder", &q, g.shape(m)));
            }
            parts.push(m);
        }
        let cat = g.concat(&parts, 2)?;
        let fused = self.fuse.forward(g, store, cat)?;
        let logits = self.head.forward(g, store, fused)?;
        let prob = probability(g, logits, out_size)?;
        Ok(LogitVars { logits, prob })
    }
}

/// `[h, w, 2]` logits → bilinear upsampling to `out_size` → softmax probability of
/// class 1, `σ(l₁ − l₀)`, as `[H, W]`.
pub fn probability(g: &mut Graph, logits: Var, out_size: (usize, usize)) -> Result<Var> {
    let chw = g.hwc_to_chw(logits)?;
    let up = g.resize(chw, out_size.0, out_size.1)?;
    let plane = out_size.0 * out_size.1;
    let l0 = g.gather(up, Arc::from([0usize]), plane, &[out_size.0, out_size.1])?;
    let l1 = g.gather(up, Arc::from([1usize]), plane, &[out_size.0, out_size.1])?;
    let diff = g.sub(l1, l0)?;
    Ok(g.sigmoid(diff))
}

/// Default decision threshold.
pub const DEFAULT_TAU: f64 = 0.5;

/// `prob ≥ τ` as a 0/1 mask; a tie counts as tampered.
pub fn predict_mask(prob: &Tensor, tau: f64) -> Tensor {
    prob.map(|p| if p >= tau { 1.0 } else { 0.0 })
}

/// Channel count entering the fusion layer for a given configuration.
pub fn fusion_channels(cfg: &ModelConfig) -> usize {
    4 * cfg.embed_dim
        + if cfg.variant.noise_in_decoder() {
            cfg.mod_channels
        } else {
            0
        }
}
