//! Sequential conditional VAE for diverse conditional sequence generation.
//!
//! A per-position latent space with a learnable intention prior, a
//! smoothing two-stage encoder with an auxiliary backward-representation
//! regression, ancestral sampling with latent-trajectory interpolation,
//! and the accompanying accuracy/diversity evaluation suite. Everything
//! runs on a small built-in reverse-mode autodiff core at desk scale.

pub mod autodiff;
pub mod blocks;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod rng;
pub mod sample;
pub mod train;

pub use error::{Error, Result};
