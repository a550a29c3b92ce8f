use alloc::vec::Vec;

use crate::error::Result;
use crate::nn::{Activation, GaussianHead, Layer, Matrix, MlpCache, MlpGrads, MlpParams, Rng};

/// Builds an all-ReLU trunk: every layer keeps its nonlinearity since the
/// last trunk layer is still a hidden layer feeding the output heads.
pub(crate) fn relu_trunk(dims: &[usize], rng: &mut Rng) -> MlpParams {
    assert!(dims.len() >= 2);
    MlpParams {
        layers: dims
            .windows(2)
            .map(|w| Layer::glorot(w[0], w[1], Activation::Relu, rng))
            .collect(),
    }
}

fn linear_head(in_dim: usize, out_dim: usize, rng: &mut Rng) -> MlpParams {
    MlpParams {
        layers: alloc::vec![Layer::glorot(in_dim, out_dim, Activation::Identity, rng)],
    }
}

/// A mean/log-variance output pair attached to a shared trunk.
#[derive(Debug, Clone)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct HeadPair {
    pub mu: MlpParams,
    pub gamma: MlpParams,
}

/// MLP trunk with any number of Gaussian head pairs. The fixed-effect
/// encoder has a single `latent_dim`-wide pair; the random-effect encoder
/// has one `p`-wide pair per term, sharing the trunk parameters.
#[derive(Debug, Clone)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MultiHeadEncoder {
    pub trunk: MlpParams,
    pub heads: Vec<HeadPair>,
}

pub struct EncoderCache {
    trunk: MlpCache,
    trunk_out: Matrix,
    heads: Vec<(MlpCache, MlpCache)>,
}

pub struct EncoderGrads {
    pub trunk: MlpGrads,
    pub heads: Vec<(MlpGrads, MlpGrads)>,
}

impl MultiHeadEncoder {
    /// `input_dim -> hidden... -> trunk_out`, then one (mu, gamma) linear
    /// head pair per entry of `head_dims`.
    pub fn new(input_dim: usize, hidden: &[usize], head_dims: &[usize], rng: &mut Rng) -> Self {
        assert!(
            !hidden.is_empty(),
            "encoder needs at least one hidden layer"
        );
        let mut dims = Vec::with_capacity(hidden.len() + 1);
        dims.push(input_dim);
        dims.extend_from_slice(hidden);
        let trunk = relu_trunk(&dims, rng);
        let trunk_out = *hidden.last().expect("non-empty");
        let heads = head_dims
            .iter()
            .map(|&d| HeadPair {
                mu: linear_head(trunk_out, d, rng),
                gamma: linear_head(trunk_out, d, rng),
            })
            .collect();
        MultiHeadEncoder { trunk, heads }
    }

    pub fn forward_cached(&self, x: &Matrix) -> Result<(Vec<GaussianHead>, EncoderCache)> {
        let (trunk_out, trunk_cache) = self.trunk.forward_cached(x)?;
        let mut heads = Vec::with_capacity(self.heads.len());
        let mut head_caches = Vec::with_capacity(self.heads.len());
        for pair in &self.heads {
            let (mu, mu_cache) = pair.mu.forward_cached(&trunk_out)?;
            let (gamma, gamma_cache) = pair.gamma.forward_cached(&trunk_out)?;
            heads.push(GaussianHead { mu, gamma });
            head_caches.push((mu_cache, gamma_cache));
        }
        Ok((
            heads,
            EncoderCache {
                trunk: trunk_cache,
                trunk_out,
                heads: head_caches,
            },
        ))
    }

    /// Heads only, no caches; used at inference time.
    pub fn forward(&self, x: &Matrix) -> Result<Vec<GaussianHead>> {
        let trunk_out = self.trunk.forward(x)?;
        self.heads
            .iter()
            .map(|pair| {
                Ok(GaussianHead {
                    mu: pair.mu.forward(&trunk_out)?,
                    gamma: pair.gamma.forward(&trunk_out)?,
                })
            })
            .collect()
    }

    /// Backpropagates per-head (d mu, d gamma) batch gradients through the
    /// heads and the shared trunk; also returns the gradient with respect
    /// to the encoder input (needed when embeddings feed the input).
    pub fn backward(
        &self,
        cache: &EncoderCache,
        head_grads: &[(Matrix, Matrix)],
    ) -> (EncoderGrads, Matrix) {
        assert_eq!(head_grads.len(), self.heads.len());
        let mut trunk_out_grad = Matrix::zeros(cache.trunk_out.rows(), cache.trunk_out.cols());
        let mut heads = Vec::with_capacity(self.heads.len());
        for (pair, ((mu_cache, gamma_cache), (dmu, dgamma))) in
            self.heads.iter().zip(cache.heads.iter().zip(head_grads))
        {
            let (mu_grads, into_trunk_mu) = pair.mu.backward_cached(mu_cache, dmu);
            let (gamma_grads, into_trunk_gamma) = pair.gamma.backward_cached(gamma_cache, dgamma);
            trunk_out_grad.axpy(1.0, &into_trunk_mu);
            trunk_out_grad.axpy(1.0, &into_trunk_gamma);
            heads.push((mu_grads, gamma_grads));
        }
        let (trunk, input_grad) = self.trunk.backward_cached(&cache.trunk, &trunk_out_grad);
        (EncoderGrads { trunk, heads }, input_grad)
    }

    pub fn param_slices(&self) -> Vec<&[f64]> {
        let mut out = self.trunk.param_slices();
        for pair in &self.heads {
            out.extend(pair.mu.param_slices());
            out.extend(pair.gamma.param_slices());
        }
        out
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self.trunk.param_slices_mut();
        for pair in &mut self.heads {
            out.extend(pair.mu.param_slices_mut());
            out.extend(pair.gamma.param_slices_mut());
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.trunk.is_finite()
            && self
                .heads
                .iter()
                .all(|p| p.mu.is_finite() && p.gamma.is_finite())
    }
}

impl EncoderGrads {
    pub fn tensor_slices(&self) -> Vec<&[f64]> {
        let mut out = self.trunk.param_slices();
        for (mu, gamma) in &self.heads {
            out.extend(mu.param_slices());
            out.extend(gamma.param_slices());
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn head_shapes_follow_spec() {
        let mut rng = Rng::new(3);
        let enc = MultiHeadEncoder::new(6, &[8, 4], &[2, 6, 6], &mut rng);
        let x = rng.normal_matrix(5, 6);
        let heads = enc.forward(&x).unwrap();
        assert_eq!(heads.len(), 3);
        assert_eq!((heads[0].mu.rows(), heads[0].mu.cols()), (5, 2));
        assert_eq!((heads[1].gamma.rows(), heads[1].gamma.cols()), (5, 6));
    }

    #[test]
    fn shared_trunk_gradient_matches_finite_differences() {
        let mut rng = Rng::new(29);
        let mut enc = MultiHeadEncoder::new(3, &[5], &[2, 4], &mut rng);
        let x = rng.normal_matrix(4, 3);
        // fixed linear functional of all head outputs
        let wmu0 = rng.normal_matrix(4, 2);
        let wga0 = rng.normal_matrix(4, 2);
        let wmu1 = rng.normal_matrix(4, 4);
        let wga1 = rng.normal_matrix(4, 4);

        let loss = |e: &MultiHeadEncoder| -> f64 {
            let heads = e.forward(&x).unwrap();
            let dot = |a: &Matrix, b: &Matrix| -> f64 {
                a.data().iter().zip(b.data()).map(|(p, q)| p * q).sum()
            };
            dot(&heads[0].mu, &wmu0)
                + dot(&heads[0].gamma, &wga0)
                + dot(&heads[1].mu, &wmu1)
                + dot(&heads[1].gamma, &wga1)
        };

        let (_, cache) = enc.forward_cached(&x).unwrap();
        let (grads, _) = enc.backward(
            &cache,
            &[(wmu0.clone(), wga0.clone()), (wmu1.clone(), wga1.clone())],
        );

        let h = 1e-5;
        let grad_slices: Vec<Vec<f64>> = grads.tensor_slices().iter().map(|s| s.to_vec()).collect();
        let mut tensor_idx = 0;
        loop {
            let n_tensors = enc.param_slices().len();
            if tensor_idx >= n_tensors {
                break;
            }
            let len = enc.param_slices()[tensor_idx].len();
            for k in 0..len {
                let orig = enc.param_slices()[tensor_idx][k];
                enc.param_slices_mut()[tensor_idx][k] = orig + h;
                let up = loss(&enc);
                enc.param_slices_mut()[tensor_idx][k] = orig - h;
                let down = loss(&enc);
                enc.param_slices_mut()[tensor_idx][k] = orig;
                let fd = (up - down) / (2.0 * h);
                let an = grad_slices[tensor_idx][k];
                let denom = an.abs().max(fd.abs()).max(1e-8);
                assert!(
                    ((an - fd) / denom).abs() < 1e-4 || (an.abs() < 1e-9 && fd.abs() < 1e-7),
                    "tensor {tensor_idx} [{k}]: analytic {an} vs fd {fd}"
                );
            }
            tensor_idx += 1;
        }
    }
}
