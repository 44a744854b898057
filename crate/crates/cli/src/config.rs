use std::path::{Path, PathBuf};

use anyhow::Context;
use forma_core::config::Scale;
use forma_core::decoder::DEFAULT_TAU;
use forma_core::Variant;
use serde::{Deserialize, Serialize};

/// Everything a command may need; loaded from `--config` and then overridden by flags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub scale: Scale,
    pub variant: Variant,
    pub seed: u64,
    /// Worker threads; `None` lets the pool decide.
    pub threads: Option<usize>,
    pub tau: f64,
    pub batch_size: usize,
    /// When set, overrides `steps` with `epochs × ⌈samples / batch_size⌉`.
    pub epochs: Option<usize>,
    pub steps: usize,
    pub samples: usize,
    pub lr: f64,
    pub augment: bool,
    pub checkpoint: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub out: PathBuf,
    pub flops_per_mac: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            scale: Scale::Toy,
            variant: Variant::Full,
            seed: 0,
            threads: None,
            tau: DEFAULT_TAU,
            batch_size: 8,
            epochs: None,
            steps: 500,
            samples: 16,
            lr: 1e-4,
            augment: true,
            checkpoint: None,
            manifest: None,
            out: PathBuf::from("forma-out"),
            flops_per_mac: forma_core::complexity::DEFAULT_FLOPS_PER_MAC,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| {
            anyhow::Error::new(forma_core::Error::Usage(format!(
                "config {}: {e}",
                path.display()
            )))
        })
    }

    pub fn total_steps(&self) -> usize {
        match self.epochs {
            Some(e) => e * self.samples.div_ceil(self.batch_size.max(1)),
            None => self.steps,
        }
    }
}
