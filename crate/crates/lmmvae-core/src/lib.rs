//! Dimensionality reduction for correlated tabular data.
//!
//! The centerpiece is a variational autoencoder whose latent model is split
//! into a fixed part (the usual independent latent variables) and a random
//! part borrowed from linear mixed models: per-cluster, per-subject or
//! per-location additions that induce correlation between observations of
//! the same group. The crate ships the model itself, PCA and plain-VAE
//! baselines, design-matrix builders for categorical, longitudinal and
//! spatial covariance structures, simulation generators and the evaluation
//! metrics used to compare methods.
//!
//! The crate is `no_std`-compatible (requires `alloc`); the companion
//! `lmmvae-cli` crate carries file formats and the command-line runner.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod baselines;
pub mod design;
pub mod error;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod simgen;

pub use error::{Error, Result};
