//! Diffusion-based structural causal models at desk scale.
//!
//! The crate trains noise-prediction denoisers and time-conditioned anti-causal
//! classifiers on synthetic two-variable causal models (class -> observation),
//! abducts exogenous noise with deterministic DDIM inversion, generates
//! counterfactuals and interventional samples with classifier guidance, and scores
//! counterfactuals with latent-divergence (CLD) and autoencoder (IM1/IM2) metrics.
//!
//! The Gaussian-mixture family has closed-form scores and posteriors
//! ([`oracle`]), so every sampler can run against exact oracles as well as learned
//! networks.

pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod optim;
pub mod oracle;
pub mod sampler;
pub mod schedule;
pub mod scm;
pub mod tensor;

pub mod config;
pub mod io;
pub mod pipeline;

pub use error::{Error, Result};
pub use schedule::DiffusionSchedule;
pub use tensor::{ParamSet, TensorGrid};
