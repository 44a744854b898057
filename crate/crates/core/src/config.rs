use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture and ablation variants.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Full,
    /// Decoder concatenates only the four shuffled scales.
    NoNoise,
    /// Bilinear interpolation replaces the pixel shuffle.
    NoShuffle,
    /// `F_mod` joins the patch-embedding output instead of the decoder.
    NoiseIntoEncoder,
    /// Focal loss only.
    NoDice,
    /// Dice loss only.
    NoFocal,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Full,
        Variant::NoNoise,
        Variant::NoShuffle,
        Variant::NoiseIntoEncoder,
        Variant::NoDice,
        Variant::NoFocal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoNoise => "no_noise",
            Variant::NoShuffle => "no_shuffle",
            Variant::NoiseIntoEncoder => "noise_into_encoder",
            Variant::NoDice => "no_dice",
            Variant::NoFocal => "no_focal",
        }
    }

    /// Whether the noise stream exists at all.
    pub fn uses_noise(self) -> bool {
        self != Variant::NoNoise
    }

    /// Whether `F_mod` is concatenated in the decoder.
    pub fn noise_in_decoder(self) -> bool {
        !matches!(self, Variant::NoNoise | Variant::NoiseIntoEncoder)
    }

    pub fn uses_shuffle(self) -> bool {
        self != Variant::NoShuffle
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Usage(format!("unknown variant {s}")))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    Paper,
    #[default]
    Toy,
}

impl FromStr for Scale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Scale::Paper),
            "toy" => Ok(Scale::Toy),
            other => Err(Error::Usage(format!("unknown scale {other}"))),
        }
    }
}

/// Every architecture hyperparameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Embedding width `C`; stage `i` has `C·2^i` channels.
    pub embed_dim: usize,
    pub depths: [usize; 4],
    /// State size `N` of every scan.
    pub state_dim: usize,
    /// Inner width of a VSS block is `round(C_i · ssm_ratio)`.
    pub ssm_ratio: f64,
    pub dwconv_kernel: usize,
    /// Number of Bayar kernels `K`.
    pub bayar_kernels: usize,
    /// Width `C_r` of the learned residual stream.
    pub resid_channels: usize,
    /// Width `C_mod` of the fused noise feature.
    pub mod_channels: usize,
    /// Per-scale upsampling factors `r_i`.
    pub ratios: [usize; 4],
    /// Network input size `(H, W)`.
    pub input_size: (usize, usize),
    pub variant: Variant,
}

impl ModelConfig {
    pub fn paper() -> Self {
        Self {
            embed_dim: 96,
            depths: [2, 2, 9, 2],
            state_dim: 16,
            ssm_ratio: 4.0 / 3.0,
            dwconv_kernel: 3,
            bayar_kernels: 3,
            resid_channels: 16,
            mod_channels: 96,
            ratios: [1, 2, 4, 8],
            input_size: (512, 512),
            variant: Variant::Full,
        }
    }

    pub fn toy() -> Self {
        Self {
            embed_dim: 16,
            depths: [1, 1, 2, 1],
            state_dim: 4,
            ssm_ratio: 2.0,
            dwconv_kernel: 3,
            bayar_kernels: 3,
            resid_channels: 8,
            mod_channels: 16,
            ratios: [1, 2, 4, 8],
            input_size: (64, 64),
            variant: Variant::Full,
        }
    }

    pub fn for_scale(scale: Scale) -> Self {
        match scale {
            Scale::Paper => Self::paper(),
            Scale::Toy => Self::toy(),
        }
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    /// `C_i` for stage `i` in `0..4`.
    pub fn stage_channels(&self, i: usize) -> usize {
        self.embed_dim << i
    }

    /// Inner width of a VSS block in stage `i`.
    pub fn inner_channels(&self, i: usize) -> usize {
        (self.stage_channels(i) as f64 * self.ssm_ratio).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Usage(format!("invalid model config: {m}")));
        if self.embed_dim == 0 || self.state_dim == 0 || self.mod_channels == 0 {
            return bad("zero width");
        }
        if self.depths.contains(&0) {
            return bad("every stage needs at least one block");
        }
        if self.dwconv_kernel.is_multiple_of(2) {
            return bad("depthwise kernel must be odd");
        }
        if self.ssm_ratio <= 0.0 || self.inner_channels(0) == 0 {
            return bad("ssm_ratio must be positive");
        }
        if self.mod_channels < 2 || !self.mod_channels.is_multiple_of(2) {
            return bad("mod_channels must be even");
        }
        for (i, &r) in self.ratios.iter().enumerate() {
            if r != 1 << i {
                return bad("every scale must land at a quarter of the input");
            }
        }
        check_input_size(self.input_size.0, self.input_size.1)
    }
}

/// Inputs must be divisible by 32 so every stage has an integral size.
pub fn check_input_size(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || !h.is_multiple_of(32) || !w.is_multiple_of(32) {
        return Err(Error::domain(
            "patch_embed",
            format!("input {h}x{w} is not divisible by 32; resize it first"),
        ));
    }
    Ok(())
}
