//! Synthetic data, augmentation, perturbations and file I/O.

pub mod augment;
pub mod io;
pub mod manifest;
pub mod perturb;
pub mod synth;

pub use augment::{augment, AugmentConfig};
pub use io::{load_image, load_mask, load_prob_map, save_image, save_mask, save_prob_map};
pub use manifest::{read_manifest, write_manifest, ManifestEntry};
pub use perturb::{perturb, PerturbKind, Perturbation};
pub use synth::{derive_seed, synth_set, synth_tamper, Sample, TamperKind};
