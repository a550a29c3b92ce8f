use alloc::vec::Vec;
#[allow(unused_imports)] // inherent f64 methods replace the trait in std builds
use num_traits::Float;

use crate::error::{Error, Result};
use crate::nn::{clamp_gamma, GaussianHead, Matrix};

/// Per-row KL divergence of `N(mu, exp(gamma))` from the standard normal,
/// summed over the head's dimensions:
/// `0.5 * sum_l (exp(gamma) + mu^2 - 1 - gamma)`.
pub fn kl_standard_normal_rows(head: &GaussianHead) -> Vec<f64> {
    let mut out = Vec::with_capacity(head.rows());
    for i in 0..head.rows() {
        let mut acc = 0.0;
        for (&mu, &g) in head.mu.row(i).iter().zip(head.gamma.row(i)) {
            let g = clamp_gamma(g);
            acc += g.exp() + mu * mu - 1.0 - g;
        }
        out.push(0.5 * acc);
    }
    out
}

/// Per-row KL divergence of `N(mu, exp(gamma))` from the zero-mean prior
/// with log-variance `delta`, summed over dimensions:
/// `0.5 * sum_k (exp(gamma - delta) + mu^2 exp(-delta) - 1 - (gamma - delta))`.
pub fn kl_gaussian_prior_rows(head: &GaussianHead, delta: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(head.rows());
    let inv_prior = (-delta).exp();
    for i in 0..head.rows() {
        let mut acc = 0.0;
        for (&mu, &g) in head.mu.row(i).iter().zip(head.gamma.row(i)) {
            let g = clamp_gamma(g);
            acc += (g - delta).exp() + mu * mu * inv_prior - 1.0 - (g - delta);
        }
        out.push(0.5 * acc);
    }
    out
}

/// The training objective for one batch: squared reconstruction error plus
/// `beta`-weighted KL terms for the fixed head and each random-effect head,
/// summed over the batch and averaged per observation.
pub fn lmmvae_loss(
    x: &Matrix,
    x_hat: &Matrix,
    u_head: &GaussianHead,
    b_heads: &[GaussianHead],
    beta: f64,
    delta_b: &[f64],
) -> Result<f64> {
    if (x.rows(), x.cols()) != (x_hat.rows(), x_hat.cols()) {
        return Err(Error::Shape("x and x_hat must have equal shapes".into()));
    }
    if u_head.rows() != x.rows() || b_heads.iter().any(|h| h.rows() != x.rows()) {
        return Err(Error::Shape("head batch sizes must match x".into()));
    }
    if delta_b.len() != b_heads.len() {
        return Err(Error::Shape(
            "one delta_b entry per random-effect head".into(),
        ));
    }
    if !x.is_finite() || !x_hat.is_finite() {
        return Err(Error::InvalidArgument("non-finite inputs to loss".into()));
    }
    Ok(loss_unchecked(x, x_hat, u_head, b_heads, beta, delta_b))
}

/// Training-path loss without finiteness validation: a diverging run
/// produces a non-finite value here, which the training loop turns into a
/// divergence error with its epoch index.
pub(crate) fn loss_unchecked(
    x: &Matrix,
    x_hat: &Matrix,
    u_head: &GaussianHead,
    b_heads: &[GaussianHead],
    beta: f64,
    delta_b: &[f64],
) -> f64 {
    let m = x.rows() as f64;
    let mut recon = 0.0;
    for (a, b) in x.data().iter().zip(x_hat.data()) {
        let d = a - b;
        recon += d * d;
    }
    let kl_u: f64 = kl_standard_normal_rows(u_head).iter().sum();
    let mut kl_b = 0.0;
    for (head, &delta) in b_heads.iter().zip(delta_b) {
        kl_b += kl_gaussian_prior_rows(head, delta).iter().sum::<f64>();
    }
    (recon + beta * (kl_u + kl_b)) / m
}
