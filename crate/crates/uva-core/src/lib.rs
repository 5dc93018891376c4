//! Disentangled variational age modeling on small images.
//!
//! A variational autoencoder whose latent space is split into an age-related
//! part regularized toward `N(y·1, I)` and an age-irrelevant part regularized
//! toward `N(0, I)`, trained with an introspective adversarial mechanism and
//! age-preserving regularization. One trained model serves three tasks:
//!
//! - **age translation** — re-render an input at a target age ([`infer::age_translate`]),
//! - **age generation** — sample new images at a target age ([`infer::age_generate_from_noise`],
//!   [`infer::age_generate_conditioned`]),
//! - **age estimation** — read the age off the inferred latent mean ([`infer::age_estimate`]).
//!
//! Everything runs on CPU with no ML framework: networks are plain convolution
//! stacks over a flat parameter arena with hand-written backward passes, so
//! training is bitwise reproducible from a seed.

pub mod data;
pub mod error;
pub mod infer;
pub mod latent;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Result, UvaError};
pub use latent::{DisentangledPosterior, GaussianDiag, LatentSample};
pub use losses::{LossReport, LossWeights};
pub use nn::{build_architecture, init_params, Architecture, ArchitectureConfig, ModelParams};
pub use tensor::{Scalar, Tensor};
pub use train::{Checkpoint, TrainConfig};
