//! Comparison methods: PCA (ignore / one-hot variants) and the plain VAE
//! (ignore / one-hot / entity-embedding variants), sharing the network
//! substrate and KL code with the main model.

mod pca;
mod vae;

pub use pca::{
    pca_fit, pca_fit_ohe, pca_transform_reconstruct, PcaModel, PcaOheModel, MAX_OHE_COLUMNS,
};
pub use vae::{embedding_dim, vae_train, AuxHandling, TrainedVae, VaeConfig, VaeNets};
