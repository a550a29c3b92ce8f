use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
#[allow(unused_imports)] // inherent f64 methods replace the trait in std builds
use num_traits::Float;

use crate::error::{Error, Result};
use crate::nn::{Matrix, Rng};

/// Log-variances are clamped to this magnitude before exponentiation.
pub const GAMMA_CLAMP: f64 = 15.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    #[inline]
    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// One dense layer `y = act(x W + b)` with `W` of shape `in_dim x out_dim`.
#[derive(Debug, Clone)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Layer {
    pub weights: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn new(weights: Matrix, bias: Vec<f64>, activation: Activation) -> Self {
        assert_eq!(weights.cols(), bias.len(), "bias length must equal out_dim");
        Layer {
            weights,
            bias,
            activation,
        }
    }

    pub fn glorot(in_dim: usize, out_dim: usize, activation: Activation, rng: &mut Rng) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let weights = Matrix::from_fn(in_dim, out_dim, |_, _| rng.uniform_range(-limit, limit));
        Layer {
            weights,
            bias: vec![0.0; out_dim],
            activation,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.cols()
    }
}

/// A multilayer perceptron as a plain list of dense layers.
#[derive(Debug, Clone)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MlpParams {
    pub layers: Vec<Layer>,
}

/// Per-layer gradients with the same shapes as [`MlpParams`].
#[derive(Debug, Clone)]
pub struct MlpGrads {
    pub layers: Vec<(Matrix, Vec<f64>)>,
}

impl MlpGrads {
    pub fn zeros_like(params: &MlpParams) -> Self {
        MlpGrads {
            layers: params
                .layers
                .iter()
                .map(|l| {
                    (
                        Matrix::zeros(l.in_dim(), l.out_dim()),
                        vec![0.0; l.out_dim()],
                    )
                })
                .collect(),
        }
    }

    pub fn param_slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for (w, b) in &self.layers {
            out.push(w.data());
            out.push(b.as_slice());
        }
        out
    }
}

/// Intermediate activations kept for the backward pass.
pub struct MlpCache {
    /// Input to each layer; `inputs[0]` is the network input.
    inputs: Vec<Matrix>,
    /// Pre-activation values of each layer.
    pre: Vec<Matrix>,
}

impl MlpParams {
    /// Glorot-initialized network with ReLU hidden layers and a linear
    /// output layer; `dims` chains input, hidden and output sizes.
    pub fn glorot(dims: &[usize], rng: &mut Rng) -> Self {
        assert!(dims.len() >= 2, "need at least input and output dims");
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let act = if i + 2 == dims.len() {
                    Activation::Identity
                } else {
                    Activation::Relu
                };
                Layer::glorot(w[0], w[1], act, rng)
            })
            .collect();
        MlpParams { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").out_dim()
    }

    fn check_chain(&self) -> Result<()> {
        for pair in self.layers.windows(2) {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::Shape(format!(
                    "layer output dim {} does not chain into next input dim {}",
                    pair[0].out_dim(),
                    pair[1].in_dim()
                )));
            }
        }
        Ok(())
    }

    /// Batch forward pass; rows of `input` are observations.
    pub fn forward(&self, input: &Matrix) -> Result<Matrix> {
        Ok(self.forward_cached(input)?.0)
    }

    pub fn forward_cached(&self, input: &Matrix) -> Result<(Matrix, MlpCache)> {
        self.check_chain()?;
        if input.cols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "input has {} columns, network expects {}",
                input.cols(),
                self.input_dim()
            )));
        }
        let mut cache = MlpCache {
            inputs: Vec::with_capacity(self.layers.len()),
            pre: Vec::new(),
        };
        let mut current = input.clone();
        for layer in &self.layers {
            let mut pre = current.matmul(&layer.weights);
            for i in 0..pre.rows() {
                for (v, &b) in pre.row_mut(i).iter_mut().zip(&layer.bias) {
                    *v += b;
                }
            }
            let out = pre.map(|v| layer.activation.apply(v));
            cache.inputs.push(current);
            cache.pre.push(pre);
            current = out;
        }
        Ok((current, cache))
    }

    /// Gradients of a scalar loss with respect to all parameters and the
    /// input, given `d loss / d output`. Recomputes the forward caches.
    pub fn backward(&self, input: &Matrix, output_grad: &Matrix) -> Result<(MlpGrads, Matrix)> {
        let (out, cache) = self.forward_cached(input)?;
        if (output_grad.rows(), output_grad.cols()) != (out.rows(), out.cols()) {
            return Err(Error::Shape(format!(
                "output_grad is {}x{}, forward output is {}x{}",
                output_grad.rows(),
                output_grad.cols(),
                out.rows(),
                out.cols()
            )));
        }
        Ok(self.backward_cached(&cache, output_grad))
    }

    /// Backward pass reusing the caches of a prior `forward_cached` call.
    pub fn backward_cached(&self, cache: &MlpCache, output_grad: &Matrix) -> (MlpGrads, Matrix) {
        let mut grads = MlpGrads::zeros_like(self);
        let mut delta = output_grad.clone();
        for (idx, layer) in self.layers.iter().enumerate().rev() {
            let pre = &cache.pre[idx];
            // delta <- delta ⊙ act'(pre)
            for i in 0..delta.rows() {
                let p = pre.row(i);
                for (d, &z) in delta.row_mut(i).iter_mut().zip(p) {
                    *d *= layer.activation.derivative(z);
                }
            }
            let input = &cache.inputs[idx];
            grads.layers[idx].0 = input.transpose_matmul(&delta);
            let bias_grad = &mut grads.layers[idx].1;
            for i in 0..delta.rows() {
                for (g, &d) in bias_grad.iter_mut().zip(delta.row(i)) {
                    *g += d;
                }
            }
            delta = delta.matmul_transpose(&layer.weights);
        }
        (grads, delta)
    }

    /// Accumulate `alpha * other` into the parameters (used by tests and
    /// simple updates; Adam goes through `param_slices_mut`).
    pub fn axpy_grads(&mut self, alpha: f64, grads: &MlpGrads) {
        for (layer, (gw, gb)) in self.layers.iter_mut().zip(&grads.layers) {
            layer.weights.axpy(alpha, gw);
            for (b, &g) in layer.bias.iter_mut().zip(gb) {
                *b += alpha * g;
            }
        }
    }

    /// Flat views over every trainable tensor, weights then bias per layer.
    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for layer in &mut self.layers {
            let Layer { weights, bias, .. } = layer;
            out.push(weights.data_mut());
            out.push(bias.as_mut_slice());
        }
        out
    }

    pub fn param_slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for layer in &self.layers {
            out.push(layer.weights.data());
            out.push(layer.bias.as_slice());
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_slices().iter().map(|s| s.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.is_finite() && l.bias.iter().all(|b| b.is_finite()))
    }
}

/// Mean and log-variance emitted by an encoder for a batch of observations
/// (rows). Variances are `exp(gamma)`, so positivity holds by construction.
#[derive(Debug, Clone)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GaussianHead {
    pub mu: Matrix,
    pub gamma: Matrix,
}

impl GaussianHead {
    pub fn new(mu: Matrix, gamma: Matrix) -> Result<Self> {
        if (mu.rows(), mu.cols()) != (gamma.rows(), gamma.cols()) {
            return Err(Error::Shape(format!(
                "mu is {}x{}, gamma is {}x{}",
                mu.rows(),
                mu.cols(),
                gamma.rows(),
                gamma.cols()
            )));
        }
        if !gamma.is_finite() {
            return Err(Error::InvalidArgument("gamma must be finite".into()));
        }
        Ok(GaussianHead { mu, gamma })
    }

    pub fn rows(&self) -> usize {
        self.mu.rows()
    }

    pub fn dim(&self) -> usize {
        self.mu.cols()
    }
}

#[inline]
pub(crate) fn clamp_gamma(g: f64) -> f64 {
    g.clamp(-GAMMA_CLAMP, GAMMA_CLAMP)
}

/// Draws `mu + exp(gamma/2) ⊙ eps` with fresh standard-normal noise.
pub fn reparameterize(head: &GaussianHead, rng: &mut Rng) -> Matrix {
    let eps = rng.normal_matrix(head.mu.rows(), head.mu.cols());
    reparameterize_with(head, &eps)
}

/// Deterministic reparameterization given externally supplied noise, so
/// gradient checks can hold the noise fixed.
pub fn reparameterize_with(head: &GaussianHead, eps: &Matrix) -> Matrix {
    assert_eq!((eps.rows(), eps.cols()), (head.mu.rows(), head.mu.cols()));
    let mut out = head.mu.clone();
    for i in 0..out.rows() {
        let g = head.gamma.row(i);
        let e = eps.row(i);
        for (k, v) in out.row_mut(i).iter_mut().enumerate() {
            *v += (clamp_gamma(g[k]) / 2.0).exp() * e[k];
        }
    }
    out
}
