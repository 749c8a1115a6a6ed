//! Password modelling with an affine-coupling normalizing flow.
//!
//! The crate maps fixed-length password encodings onto a standard-normal latent
//! space through a stack of invertible coupling layers, trains the map by exact
//! maximum likelihood, and generates guesses by sampling the latent space:
//!
//! - [`encoding`]: charset, password ⇄ vector encoding, corpus loading.
//! - [`resnet`]: residual MLPs that produce the per-layer scale and shift, with
//!   hand-written reverse-mode gradients.
//! - [`flow`]: masks, coupling layers, the full flow and its log-density.
//! - [`training`]: negative log-likelihood, Adam and the epoch loop.
//! - [`checkpoint`]: the versioned, digest-protected model file.
//! - [`sampling`]: static, dynamic (mixture with penalization) and smoothed guessing.
//! - [`latent_ops`]: interpolation and neighbourhood sampling.
//! - [`harness`]: splitting, match accounting, synthetic corpora and ablations.

pub mod checkpoint;
pub mod encoding;
pub mod error;
pub mod flow;
pub mod harness;
pub mod latent_ops;
pub mod linalg;
pub mod resnet;
pub mod rng;
pub mod sampling;
pub mod training;

pub use encoding::{Charset, DataVector};
pub use error::{Error, ErrorKind, Result};
pub use flow::{FlowConfig, FlowModel, MaskKind};
pub use training::TrainConfig;
