//! ForMa: a vision state-space network for image tampering localization, at desk scale.
//!
//! The crate is organized bottom-up: dense tensors and a reverse-mode graph over a
//! closed set of primitives, the selective scan and its 2-D cross-scan, the encoder,
//! noise and decoder streams, losses and metrics, data generation, and the training,
//! inference and complexity drivers used by the `forma` binary.

pub mod checkpoint;
pub mod complexity;
pub mod config;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod graph;
pub mod infer;
pub mod kernels;
pub mod layers;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod noise;
pub mod ops;
pub mod optim;
pub mod params;
pub mod ss2d;
pub mod tensor;
pub mod train;

pub use config::{ModelConfig, Scale, Variant};
pub use error::{Error, Result};
pub use model::Forma;
pub use graph::{Graph, ParamId, Var};
pub use params::{ParamKind, ParamStore};
pub use tensor::{Real, Tensor};
