use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::decoder::{Decoder, LogitVars};
use crate::encoder::{Encoder, FeaturePyramid};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::noise::NoiseExtractor;
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// The whole network with its parameters.
#[derive(Clone, Debug)]
pub struct Forma {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub noise: Option<NoiseExtractor>,
    pub decoder: Decoder,
}

/// Graph handles produced by one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub pyramid: [Var; 4],
    pub f_mod: Option<Var>,
    pub out: LogitVars,
}

impl Forma {
    /// Builds and initializes a model; the same seed always yields the same weights.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = Encoder::new(&mut store, &mut rng, &cfg);
        let noise = cfg.variant.uses_noise().then(|| {
            NoiseExtractor::new(
                &mut store,
                &mut rng,
                cfg.bayar_kernels,
                cfg.resid_channels,
                cfg.mod_channels,
            )
        });
        let decoder = Decoder::new(&mut store, &mut rng, &cfg);
        Ok(Self {
            cfg,
            store,
            encoder,
            noise,
            decoder,
        })
    }

    /// Records the full forward pass of `image: [3, H, W]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        image: Var,
        noise_map: Option<&Tensor>,
    ) -> Result<ForwardVars> {
        let s = g.shape(image).to_vec();
        if s.len() != 3 {
            return Err(Error::dim("forma", &s, &[3, 0, 0]));
        }
        let f_mod = match &self.noise {
            Some(n) => Some(n.forward(g, &self.store, image, noise_map)?),
            None => None,
        };
        let enc_mod = f_mod.filter(|_| self.encoder.noise_proj.is_some());
        let pyramid = self.encoder.forward(g, &self.store, image, enc_mod)?;
        let dec_mod = f_mod.filter(|_| self.cfg.variant.noise_in_decoder());
        let out = self
            .decoder
            .forward(g, &self.store, &pyramid, dec_mod, (s[1], s[2]))?;
        Ok(ForwardVars {
            pyramid,
            f_mod,
            out,
        })
    }

    /// Tampering probability `[H, W]` for one image, without recording gradients.
    pub fn predict(&self, image: &Tensor, noise_map: Option<&Tensor>) -> Result<Tensor> {
        let mut g = Graph::inference();
        let x = g.constant(image.clone());
        let f = self.forward(&mut g, x, noise_map)?;
        let p = g.value(f.out.prob).clone();
        p.check_finite("probability map")?;
        Ok(p)
    }

    /// Encoder outputs and noise feature for one image.
    pub fn pyramid(&self, image: &Tensor) -> Result<FeaturePyramid> {
        let mut g = Graph::inference();
        let x = g.constant(image.clone());
        let f = self.forward(&mut g, x, None)?;
        Ok(FeaturePyramid {
            levels: f.pyramid.map(|v| g.value(v).clone()),
            f_mod: f.f_mod.map(|v| g.value(v).clone()),
        })
    }

    /// Re-imposes parameter constraints after an optimizer step.
    pub fn project_constraints(&mut self, rng: &mut impl rand::Rng) -> Result<()> {
        if let Some(n) = &self.noise {
            n.project(&mut self.store, rng)?;
        }
        Ok(())
    }
}
