//! The random-effect variational autoencoder.
//!
//! A fixed-effect encoder produces the usual latent head; a random-effect
//! encoder produces one head per covariance term. Sampled random effects
//! are aggregated per level within each mini-batch, multiplied through the
//! sparse design and added to the decoder output. The loss augments the
//! squared reconstruction error with closed-form KL terms for both head
//! families, and spatial scenarios impose between-location correlation by
//! left-multiplying the aggregated effects with a posterior Cholesky
//! factor computed once per run.

mod encoder;
mod loss;
mod nets;
mod train;

pub use encoder::{EncoderGrads, HeadPair, MultiHeadEncoder};
pub use loss::{kl_gaussian_prior_rows, kl_standard_normal_rows, lmmvae_loss};
pub use nets::{
    aggregate_re, BatchSpec, BatchTerm, EncoderStack, LmmvaeGrads, LmmvaeNets, NoiseDraws,
    SpatialOp,
};
pub use train::{train, BatchOutput, TrainedLmmvae};

use alloc::vec;
use alloc::vec::Vec;

use crate::design::REPrior;
use crate::error::{Error, Result};

/// Whether the fixed and random heads share one trunk (the "single encoder
/// with double output" variant) or use two separate encoders.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum EncoderVariant {
    TwoEncoders,
    SingleEncoder,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LmmvaeConfig {
    pub latent_dim: usize,
    /// Encoder trunk widths; the decoder mirrors them in reverse.
    pub hidden: Vec<usize>,
    /// Weight of the KL terms.
    pub beta: f64,
    /// Random-effect prior: per-term log variances, spatial kernel length
    /// scale and posterior noise variance.
    pub prior: REPrior,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub variant: EncoderVariant,
    /// Center features on the training mean before encoding and restore
    /// the mean at reconstruction.
    pub center: bool,
    /// Row-subsample cap for the spatial posterior computation.
    pub posterior_sample_rows: usize,
}

impl LmmvaeConfig {
    /// Defaults used by the large-scale experiments: hidden sizes
    /// (1000, 500), batch 1000, 200 epochs, beta 0.01 and a unit prior
    /// variance for every random-effect term.
    pub fn new(latent_dim: usize, num_terms: usize) -> Self {
        LmmvaeConfig {
            latent_dim,
            hidden: vec![1000, 500],
            beta: 0.01,
            prior: REPrior::standard(num_terms),
            epochs: 200,
            batch_size: 1000,
            learning_rate: 1e-3,
            seed: 0,
            variant: EncoderVariant::TwoEncoders,
            center: true,
            posterior_sample_rows: 10_000,
        }
    }

    pub fn validate(&self, num_terms: usize, n_rows: usize) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(Error::InvalidArgument("latent_dim must be >= 1".into()));
        }
        if self.hidden.is_empty() {
            return Err(Error::InvalidArgument(
                "need at least one hidden layer".into(),
            ));
        }
        if self.beta.is_nan() || self.beta < 0.0 {
            return Err(Error::InvalidArgument("beta must be nonnegative".into()));
        }
        if self.batch_size == 0 || self.batch_size > n_rows {
            return Err(Error::InvalidArgument(alloc::format!(
                "batch_size {} must be in 1..={n_rows}",
                self.batch_size
            )));
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(Error::InvalidArgument(
                "learning_rate must be positive".into(),
            ));
        }
        self.prior.validate(num_terms)
    }
}
