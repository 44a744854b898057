//! Hierarchical VSS backbone: patch embedding, four stages of VSS blocks, and strided
//! downsampling between stages.

use rand::Rng;

use crate::config::{check_input_size, ModelConfig};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::layers::{Conv, DwConv, Linear, Norm, Ssm};
use crate::params::ParamStore;
use crate::ss2d::ss2d_recorded;
use crate::tensor::Tensor;

/// 4×4 stride-4 convolution followed by layer norm: `[3, H, W]` → `[H/4, W/4, C]`.
#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub conv: Conv,
    pub norm: Norm,
}

impl PatchEmbed {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, c: usize) -> Self {
        Self {
            conv: Conv::new(store, rng, "encoder.stem.conv", 3, c, 4, 4, 0),
            norm: Norm::new(store, "encoder.stem.norm", c),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, image: Var) -> Result<Var> {
        let s = g.shape(image).to_vec();
        if s.len() != 3 || s[0] != 3 {
            return Err(Error::dim("patch_embed", &s, &[3, 0, 0]));
        }
        check_input_size(s[1], s[2])?;
        let y = self.conv.forward(g, store, image)?;
        let y = g.chw_to_hwc(y)?;
        self.norm.forward(g, store, y)
    }
}

/// Pre-norm residual block around a gated SS2D branch:
///
/// ```text
/// n = LN(x)
/// y = x + Proj_out( LN( SS2D( SiLU( DWConv( Proj_in(n) ) ) ) ) ⊙ SiLU( Proj_gate(n) ) )
/// ```
#[derive(Clone, Debug)]
pub struct VssBlock {
    pub norm: Norm,
    pub proj_in: Linear,
    pub proj_gate: Linear,
    pub dwconv: DwConv,
    pub ssm: [Ssm; 4],
    pub out_norm: Norm,
    pub proj_out: Linear,
}

impl VssBlock {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        c: usize,
        inner: usize,
        state: usize,
        kernel: usize,
    ) -> Self {
        let norm = Norm::new(store, &format!("{name}.norm"), c);
        let proj_in = Linear::new(store, rng, &format!("{name}.proj_in"), c, inner, true);
        let proj_gate = Linear::new(store, rng, &format!("{name}.proj_gate"), c, inner, true);
        let dwconv = DwConv::new(store, rng, &format!("{name}.dwconv"), inner, kernel);
        let ssm = [0, 1, 2, 3].map(|k| Ssm::new(store, rng, &format!("{name}.ssm{k}"), inner, state));
        let out_norm = Norm::new(store, &format!("{name}.out_norm"), inner);
        let proj_out = Linear::new(store, rng, &format!("{name}.proj_out"), inner, c, true);
        Self {
            norm,
            proj_in,
            proj_gate,
            dwconv,
            ssm,
            out_norm,
            proj_out,
        }
    }

    /// `x: [H, W, C]` → `[H, W, C]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let n = self.norm.forward(g, store, x)?;
        let a = self.proj_in.forward(g, store, n)?;
        let a = g.hwc_to_chw(a)?;
        let a = self.dwconv.forward(g, store, a)?;
        let a = g.chw_to_hwc(a)?;
        let a = g.silu(a);
        let dirs = self.ssm.map(|s| s.bind(g, store));
        let s = ss2d_recorded(g, a, &dirs)?;
        let s = self.out_norm.forward(g, store, s)?;
        let gate = self.proj_gate.forward(g, store, n)?;
        let gate = g.silu(gate);
        let m = g.mul(s, gate)?;
        let out = self.proj_out.forward(g, store, m)?;
        g.add(x, out)
    }
}

/// 2×2 stride-2 convolution followed by layer norm: `[H, W, C]` → `[H/2, W/2, 2C]`.
#[derive(Clone, Debug)]
pub struct Downsample {
    pub conv: Conv,
    pub norm: Norm,
}

impl Downsample {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, c: usize) -> Self {
        Self {
            conv: Conv::new(store, rng, &format!("{name}.conv"), c, 2 * c, 2, 2, 0),
            norm: Norm::new(store, &format!("{name}.norm"), 2 * c),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let y = g.hwc_to_chw(x)?;
        let y = self.conv.forward(g, store, y)?;
        let y = g.chw_to_hwc(y)?;
        self.norm.forward(g, store, y)
    }

    /// `2·2·C·2C` weights, `2C` biases, `2·2C` norm parameters.
    pub fn num_params(c: usize) -> usize {
        4 * c * 2 * c + 2 * c + 2 * 2 * c
    }
}

/// Backbone producing the four-level pyramid.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub stem: PatchEmbed,
    /// Joins `F_mod` to the stem output (`noise_into_encoder` variant only).
    pub noise_proj: Option<Linear>,
    pub stages: Vec<Vec<VssBlock>>,
    pub downsamples: Vec<Downsample>,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, cfg: &ModelConfig) -> Self {
        let c = cfg.embed_dim;
        let stem = PatchEmbed::new(store, rng, c);
        let noise_proj = (cfg.variant == crate::config::Variant::NoiseIntoEncoder).then(|| {
            Linear::new(store, rng, "encoder.noise_proj", c + cfg.mod_channels, c, true)
        });
        let mut stages = Vec::new();
        let mut downsamples = Vec::new();
        for i in 0..4 {
            let ci = cfg.stage_channels(i);
            let blocks = (0..cfg.depths[i])
                .map(|j| {
                    VssBlock::new(
                        store,
                        rng,
                        &format!("encoder.stage{i}.block{j}"),
                        ci,
                        cfg.inner_channels(i),
                        cfg.state_dim,
                        cfg.dwconv_kernel,
                    )
                })
                .collect();
            stages.push(blocks);
            if i < 3 {
                downsamples.push(Downsample::new(store, rng, &format!("encoder.down{i}"), ci));
            }
        }
        Self {
            stem,
            noise_proj,
            stages,
            downsamples,
        }
    }

    /// Number of VSS blocks in a full forward pass.
    pub fn num_blocks(&self) -> usize {
        self.stages.iter().map(Vec::len).sum()
    }

    /// `image: [3, H, W]` → `[F_1, F_2, F_3, F_4]` with `F_i: [H/2^{i+1}, W/2^{i+1}, C_i]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        image: Var,
        f_mod: Option<Var>,
    ) -> Result<[Var; 4]> {
        let mut x = self.stem.forward(g, store, image)?;
        if let (Some(proj), Some(f)) = (&self.noise_proj, f_mod) {
            let cat = g.concat(&[x, f], 2)?;
            x = proj.forward(g, store, cat)?;
        }
        let mut out = Vec::with_capacity(4);
        for (i, blocks) in self.stages.iter().enumerate() {
            if i > 0 {
                x = self.downsamples[i - 1].forward(g, store, x)?;
            }
            for b in blocks {
                x = b.forward(g, store, x)?;
            }
            out.push(x);
        }
        Ok([out[0], out[1], out[2], out[3]])
    }
}

/// The four encoder outputs and, when present, the noise feature.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    pub levels: [Tensor; 4],
    pub f_mod: Option<Tensor>,
}
