use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
#[allow(unused_imports)] // inherent f64 methods replace the trait in std builds
use num_traits::Float;

use crate::baselines::pca::MAX_OHE_COLUMNS;
use crate::design::REScenario;
use crate::error::{Error, Result};
use crate::model::{kl_standard_normal_rows, MultiHeadEncoder};
use crate::nn::{
    reparameterize_with, GaussianHead, Matrix, MlpParams, Optimizer, Rng, GAMMA_CLAMP,
};

/// How the plain VAE consumes grouping features, if at all.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum AuxHandling {
    /// Drop grouping features entirely.
    Ignore,
    /// Append one-hot indicator columns to the encoder input.
    OneHot,
    /// Append learned embedding vectors to the encoder input.
    Embed,
}

/// Embedding width for a feature of cardinality `q`.
pub fn embedding_dim(q: usize) -> usize {
    ((q as f64).powf(0.25).ceil() as usize).clamp(1, 50)
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct VaeConfig {
    pub latent_dim: usize,
    pub hidden: Vec<usize>,
    pub beta: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub center: bool,
    pub handling: AuxHandling,
}

impl VaeConfig {
    pub fn new(latent_dim: usize) -> Self {
        VaeConfig {
            latent_dim,
            hidden: vec![1000, 500],
            beta: 0.01,
            epochs: 200,
            batch_size: 1000,
            learning_rate: 1e-3,
            seed: 0,
            center: true,
            handling: AuxHandling::Ignore,
        }
    }

    fn validate(&self, n_rows: usize) -> Result<()> {
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
            return Err(Error::InvalidArgument(format!(
                "batch_size {} must be in 1..={n_rows}",
                self.batch_size
            )));
        }
        Ok(())
    }
}

/// The trainable pieces of the VAE; embeddings are empty except in the
/// `Embed` handling.
#[derive(Debug, Clone)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct VaeNets {
    pub encoder: MultiHeadEncoder,
    pub decoder: MlpParams,
    pub embeddings: Vec<Matrix>,
}

impl VaeNets {
    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self.encoder.param_slices_mut();
        out.extend(self.decoder.param_slices_mut());
        out.extend(self.embeddings.iter_mut().map(|e| e.data_mut()));
        out
    }

    pub fn param_slices(&self) -> Vec<&[f64]> {
        let mut out = self.encoder.param_slices();
        out.extend(self.decoder.param_slices());
        out.extend(self.embeddings.iter().map(|e| e.data()));
        out
    }

    fn tensor_lens(&self) -> Vec<usize> {
        self.param_slices().iter().map(|s| s.len()).collect()
    }

    fn is_finite(&self) -> bool {
        self.encoder.is_finite()
            && self.decoder.is_finite()
            && self.embeddings.iter().all(|e| e.is_finite())
    }
}

/// A fitted plain VAE.
#[derive(Debug, Clone)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainedVae {
    pub nets: VaeNets,
    pub aux_cardinalities: Vec<usize>,
    pub feature_means: Vec<f64>,
    pub config: VaeConfig,
    pub epoch_losses: Vec<f64>,
}

/// Per-batch grouping levels for the auxiliary features.
type AuxLevels = Vec<(usize, Vec<Option<usize>>)>;

fn centered(x: &Matrix, means: &[f64]) -> Matrix {
    let mut out = x.clone();
    for i in 0..out.rows() {
        for (v, &m) in out.row_mut(i).iter_mut().zip(means) {
            *v -= m;
        }
    }
    out
}

/// Builds the encoder input: centered features, plus one-hot columns or
/// embedding rows depending on the handling.
fn assemble_input(
    x_centered: &Matrix,
    aux: &AuxLevels,
    handling: AuxHandling,
    embeddings: &[Matrix],
) -> Matrix {
    let p = x_centered.cols();
    match handling {
        AuxHandling::Ignore => x_centered.clone(),
        AuxHandling::OneHot => {
            let extra: usize = aux.iter().map(|(q, _)| q).sum();
            let mut out = Matrix::zeros(x_centered.rows(), p + extra);
            for i in 0..x_centered.rows() {
                out.row_mut(i)[..p].copy_from_slice(x_centered.row(i));
                let mut offset = p;
                for (q, levels) in aux {
                    if let Some(j) = levels[i] {
                        out[(i, offset + j)] = 1.0;
                    }
                    offset += q;
                }
            }
            out
        }
        AuxHandling::Embed => {
            let extra: usize = embeddings.iter().map(|e| e.cols()).sum();
            let mut out = Matrix::zeros(x_centered.rows(), p + extra);
            for i in 0..x_centered.rows() {
                out.row_mut(i)[..p].copy_from_slice(x_centered.row(i));
                let mut offset = p;
                for ((_, levels), table) in aux.iter().zip(embeddings) {
                    if let Some(j) = levels[i] {
                        out.row_mut(i)[offset..offset + table.cols()].copy_from_slice(table.row(j));
                    }
                    offset += table.cols();
                }
            }
            out
        }
    }
}

impl VaeNets {
    /// Loss (per-observation average) and gradients for one batch under
    /// fixed reparameterization noise.
    pub fn loss_and_grads(
        &self,
        x_centered: &Matrix,
        aux: &AuxLevels,
        handling: AuxHandling,
        beta: f64,
        eps: &Matrix,
    ) -> Result<(f64, Vec<Vec<f64>>)> {
        let m = x_centered.rows();
        let mf = m as f64;
        let p = x_centered.cols();
        let x_in = assemble_input(x_centered, aux, handling, &self.embeddings);
        let (mut heads, cache) = self.encoder.forward_cached(&x_in)?;
        let u_head = heads.remove(0);
        let u = reparameterize_with(&u_head, eps);
        let (x_hat, dec_cache) = self.decoder.forward_cached(&u)?;

        let mut recon = 0.0;
        for (a, b) in x_centered.data().iter().zip(x_hat.data()) {
            let d = a - b;
            recon += d * d;
        }
        let kl: f64 = kl_standard_normal_rows(&u_head).iter().sum();
        let loss = (recon + beta * kl) / mf;

        let mut d_xhat = x_hat;
        d_xhat.axpy(-1.0, x_centered);
        d_xhat.scale(2.0 / mf);
        let (dec_grads, d_u) = self.decoder.backward_cached(&dec_cache, &d_xhat);

        let kl_scale = beta / mf;
        let mut du_mu = d_u.clone();
        du_mu.axpy(kl_scale, &u_head.mu);
        let du_gamma = Matrix::from_fn(m, u_head.dim(), |i, l| {
            let g = u_head.gamma[(i, l)];
            if g.abs() >= GAMMA_CLAMP {
                return 0.0;
            }
            d_u[(i, l)] * eps[(i, l)] * (g / 2.0).exp() * 0.5 + kl_scale * 0.5 * (g.exp() - 1.0)
        });
        let (enc_grads, d_input) = self.encoder.backward(&cache, &[(du_mu, du_gamma)]);

        // embedding tables receive the input gradient of their columns
        let mut table_grads: Vec<Matrix> = self
            .embeddings
            .iter()
            .map(|e| Matrix::zeros(e.rows(), e.cols()))
            .collect();
        if handling == AuxHandling::Embed {
            for i in 0..m {
                let mut offset = p;
                for ((_, levels), grad) in aux.iter().zip(table_grads.iter_mut()) {
                    let e_dim = grad.cols();
                    if let Some(j) = levels[i] {
                        let src = &d_input.row(i)[offset..offset + e_dim];
                        for (g, &v) in grad.row_mut(j).iter_mut().zip(src) {
                            *g += v;
                        }
                    }
                    offset += e_dim;
                }
            }
        }

        let mut grads: Vec<Vec<f64>> = Vec::new();
        for s in enc_grads.tensor_slices() {
            grads.push(s.to_vec());
        }
        for s in dec_grads.param_slices() {
            grads.push(s.to_vec());
        }
        for g in &table_grads {
            grads.push(g.data().to_vec());
        }
        Ok((loss, grads))
    }
}

fn gather_aux(scenario: Option<&REScenario>, handling: AuxHandling) -> Result<AuxLevels> {
    match handling {
        AuxHandling::Ignore => Ok(Vec::new()),
        _ => {
            let sc = scenario.ok_or_else(|| {
                Error::InvalidArgument("one-hot/embedding handling needs grouping features".into())
            })?;
            Ok(sc.aux_terms())
        }
    }
}

fn subset_aux(aux: &AuxLevels, idx: &[usize]) -> AuxLevels {
    aux.iter()
        .map(|(q, levels)| (*q, idx.iter().map(|&i| levels[i]).collect()))
        .collect()
}

/// Trains the plain VAE. Grouping features are dropped, one-hot encoded
/// into the encoder input, or embedded, according to the config; the
/// decoder always reconstructs the `p` fixed features only.
pub fn vae_train(
    x: &Matrix,
    scenario: Option<&REScenario>,
    config: &VaeConfig,
    rng: &mut Rng,
) -> Result<TrainedVae> {
    let n = x.rows();
    let p = x.cols();
    config.validate(n)?;
    if !x.is_finite() {
        return Err(Error::InvalidArgument(
            "x contains non-finite values".into(),
        ));
    }
    if let Some(sc) = scenario {
        sc.validate()?;
        if sc.n_rows() != n {
            return Err(Error::Shape("scenario row count must match x".into()));
        }
    }
    let aux = gather_aux(scenario, config.handling)?;
    let aux_cardinalities: Vec<usize> = aux.iter().map(|(q, _)| *q).collect();

    let extra = match config.handling {
        AuxHandling::Ignore => 0,
        AuxHandling::OneHot => {
            let total: usize = aux_cardinalities.iter().sum();
            if total > MAX_OHE_COLUMNS {
                return Err(Error::InvalidArgument(format!(
                    "one-hot design would add {total} columns (limit {MAX_OHE_COLUMNS})"
                )));
            }
            total
        }
        AuxHandling::Embed => aux_cardinalities.iter().map(|&q| embedding_dim(q)).sum(),
    };

    let feature_means = if config.center {
        x.col_means()
    } else {
        vec![0.0; p]
    };
    let x_c = centered(x, &feature_means);

    let encoder = MultiHeadEncoder::new(p + extra, &config.hidden, &[config.latent_dim], rng);
    let mut dec_dims: Vec<usize> = vec![config.latent_dim];
    dec_dims.extend(config.hidden.iter().rev());
    dec_dims.push(p);
    let decoder = MlpParams::glorot(&dec_dims, rng);
    let embeddings = match config.handling {
        AuxHandling::Embed => aux_cardinalities
            .iter()
            .map(|&q| Matrix::from_fn(q, embedding_dim(q), |_, _| rng.uniform_range(-0.05, 0.05)))
            .collect(),
        _ => Vec::new(),
    };
    let mut nets = VaeNets {
        encoder,
        decoder,
        embeddings,
    };
    let mut optimizer = Optimizer::for_tensors(&nets.tensor_lens(), config.learning_rate);

    let mut perm: Vec<usize> = (0..n).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        rng.shuffle(&mut perm);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        let mut start = 0;
        while start < n {
            let end = (start + config.batch_size).min(n);
            let idx = &perm[start..end];
            let xb = x_c.gather_rows(idx);
            let aux_b = subset_aux(&aux, idx);
            let eps = rng.normal_matrix(idx.len(), config.latent_dim);
            let (loss, grads) =
                nets.loss_and_grads(&xb, &aux_b, config.handling, config.beta, &eps)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            let grad_slices: Vec<&[f64]> = grads.iter().map(|g| g.as_slice()).collect();
            let mut params = nets.param_slices_mut();
            optimizer.step(&mut params, &grad_slices);
            epoch_loss += loss;
            batches += 1;
            start = end;
        }
        epoch_losses.push(epoch_loss / batches as f64);
    }
    if !nets.is_finite() {
        return Err(Error::Diverged {
            epoch: config.epochs,
        });
    }

    Ok(TrainedVae {
        nets,
        aux_cardinalities,
        feature_means,
        config: config.clone(),
        epoch_losses,
    })
}

impl TrainedVae {
    fn check_aux(&self, scenario: Option<&REScenario>) -> Result<AuxLevels> {
        let aux = gather_aux(scenario, self.config.handling)?;
        let cards: Vec<usize> = aux.iter().map(|(q, _)| *q).collect();
        if cards != self.aux_cardinalities {
            return Err(Error::Shape(format!(
                "grouping features {cards:?} do not match the trained design {:?}",
                self.aux_cardinalities
            )));
        }
        Ok(aux)
    }

    /// Deterministic latent head for a batch.
    pub fn encode(&self, x: &Matrix, scenario: Option<&REScenario>) -> Result<GaussianHead> {
        if x.cols() != self.feature_means.len() {
            return Err(Error::Shape("feature width changed since fit".into()));
        }
        let aux = self.check_aux(scenario)?;
        let x_in = assemble_input(
            &centered(x, &self.feature_means),
            &aux,
            self.config.handling,
            &self.nets.embeddings,
        );
        let mut heads = self.nets.encoder.forward(&x_in)?;
        Ok(heads.remove(0))
    }

    /// Deterministic reconstruction `(U, X_hat)`; `X_hat` covers the fixed
    /// features only.
    pub fn reconstruct(
        &self,
        x: &Matrix,
        scenario: Option<&REScenario>,
    ) -> Result<(Matrix, Matrix)> {
        let u = self.encode(x, scenario)?.mu;
        let mut x_hat = self.nets.decoder.forward(&u)?;
        for i in 0..x_hat.rows() {
            for (v, &m) in x_hat.row_mut(i).iter_mut().zip(&self.feature_means) {
                *v += m;
            }
        }
        Ok((u, x_hat))
    }
}
