//! Dense neural-network substrate: matrices, MLPs with hand-derived
//! gradients, the adaptive-moment optimizer, a seedable RNG and the
//! reparameterization trick.

mod adam;
mod matrix;
mod mlp;
mod rng;

pub use adam::{AdamState, Optimizer};
pub use matrix::Matrix;
pub(crate) use mlp::clamp_gamma;
pub use mlp::{
    reparameterize, reparameterize_with, Activation, GaussianHead, Layer, MlpCache, MlpGrads,
    MlpParams, GAMMA_CLAMP,
};
pub use rng::Rng;
