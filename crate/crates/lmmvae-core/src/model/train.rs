use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::design::{
    build_categorical_z, rbf_kernel, spatial_posterior_chol, REScenario, TermDesign,
};
use crate::error::{Error, Result};
use crate::model::nets::{
    aggregate_re_with_counts, BatchSpec, BatchTerm, LmmvaeNets, NoiseDraws, SpatialOp,
};
use crate::model::LmmvaeConfig;
use crate::nn::{reparameterize_with, GaussianHead, Matrix, Optimizer, Rng};

/// Outputs of one forward pass: reconstruction, both head families and the
/// per-term aggregated random-effect matrices (posterior factor applied
/// where configured).
pub struct BatchOutput {
    pub x_hat: Matrix,
    pub u_head: GaussianHead,
    pub b_heads: Vec<GaussianHead>,
    pub b_agg: Vec<Matrix>,
}

/// A fitted model: networks, the extracted random-effect matrix and
/// everything reconstruction on unseen data needs.
#[derive(Debug, Clone)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainedLmmvae {
    pub nets: LmmvaeNets,
    /// Q x p stacked random-effect estimates; rows of levels never seen in
    /// training are zero.
    pub b_hat: Matrix,
    pub term_cardinalities: Vec<usize>,
    pub feature_means: Vec<f64>,
    pub spatial_factor: Option<Matrix>,
    pub config: LmmvaeConfig,
    /// Mean per-observation training loss per epoch.
    pub epoch_losses: Vec<f64>,
}

fn centered(x: &Matrix, means: &[f64]) -> Matrix {
    let mut out = x.clone();
    for i in 0..out.rows() {
        for (v, &m) in out.row_mut(i).iter_mut().zip(means) {
            *v -= m;
        }
    }
    out
}

fn gather_batch_terms(terms: &[TermDesign], idx: &[usize]) -> Vec<BatchTerm> {
    terms
        .iter()
        .map(|t| BatchTerm {
            q: t.cardinality,
            levels: idx.iter().map(|&i| t.levels[i]).collect(),
            weights: idx.iter().map(|&i| t.weights[i]).collect(),
        })
        .collect()
}

/// Fits the model: `epochs * ceil(n / batch_size)` optimizer steps over
/// shuffled mini-batches, then extracts the stacked random-effect matrix
/// from the trained encoder.
pub fn train(
    x: &Matrix,
    scenario: &REScenario,
    config: &LmmvaeConfig,
    rng: &mut Rng,
) -> Result<TrainedLmmvae> {
    scenario.validate()?;
    let n = x.rows();
    let p = x.cols();
    if scenario.n_rows() != n {
        return Err(Error::Shape(format!(
            "x has {n} rows, scenario describes {}",
            scenario.n_rows()
        )));
    }
    let num_terms = scenario.num_terms();
    config.validate(num_terms, n)?;
    if !x.is_finite() {
        return Err(Error::InvalidArgument(
            "x contains non-finite values".into(),
        ));
    }

    let feature_means = if config.center {
        x.col_means()
    } else {
        vec![0.0; p]
    };
    let x_c = centered(x, &feature_means);
    let terms = scenario.term_designs();

    // the spatial posterior factor is computed once per run
    let spatial_term = scenario.spatial_term();
    let spatial_factor = match spatial_term {
        Some(t) => {
            let locations = scenario
                .locations()
                .expect("spatial scenario carries locations");
            let kernel = rbf_kernel(locations, config.prior.length_scale_sq)?;
            let z_sp = build_categorical_z(
                core::slice::from_ref(&terms[t].levels),
                &[terms[t].cardinality],
            )?;
            Some(spatial_posterior_chol(
                &kernel,
                &z_sp,
                config.prior.noise_var,
                config.posterior_sample_rows,
                rng,
            )?)
        }
        None => None,
    };

    let mut nets = LmmvaeNets::init(
        p,
        config.latent_dim,
        &config.hidden,
        num_terms,
        config.variant,
        rng,
    );
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
            let batch_terms = gather_batch_terms(&terms, idx);
            let noise = NoiseDraws::draw(rng, idx.len(), config.latent_dim, p, num_terms);
            let spec = BatchSpec {
                x: &xb,
                terms: &batch_terms,
                delta_b: &config.prior.delta_b,
                beta: config.beta,
                spatial: spatial_factor.as_ref().map(|f| SpatialOp {
                    factor: f,
                    term: spatial_term.expect("set"),
                }),
            };
            let (loss, grads) = nets.loss_and_grads(&spec, &noise)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            let grad_slices = grads.tensor_slices();
            let mut params = nets.param_slices_mut();
            optimizer.step(&mut params, &grad_slices);
            epoch_loss += loss;
            batches += 1;
            start = end;
        }
        epoch_losses.push(epoch_loss / batches as f64);
    }

    let b_hat = extract_b_hat_from(&nets, &x_c, &terms, spatial_factor.as_ref(), spatial_term)?;
    Ok(TrainedLmmvae {
        nets,
        b_hat,
        term_cardinalities: terms.iter().map(|t| t.cardinality).collect(),
        feature_means,
        spatial_factor,
        config: config.clone(),
        epoch_losses,
    })
}

/// Runs the random-effect encoder means over all training rows in chunks,
/// group-averages per level per term, applies the spatial factor where
/// configured and stacks the per-term blocks into Q x p. Rows of levels
/// without training observations are zero.
fn extract_b_hat_from(
    nets: &LmmvaeNets,
    x_centered: &Matrix,
    terms: &[TermDesign],
    spatial_factor: Option<&Matrix>,
    spatial_term: Option<usize>,
) -> Result<Matrix> {
    let n = x_centered.rows();
    let p = x_centered.cols();
    let mut sums: Vec<Matrix> = terms
        .iter()
        .map(|t| Matrix::zeros(t.cardinality, p))
        .collect();
    let mut counts: Vec<Vec<f64>> = terms.iter().map(|t| vec![0.0; t.cardinality]).collect();

    let chunk = 4096;
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let xb = x_centered.gather_rows(&idx);
        let (_, b_heads) = nets.stack.forward(&xb)?;
        for (k, term) in terms.iter().enumerate() {
            let mu = &b_heads[k].mu;
            for (local, &global) in idx.iter().enumerate() {
                if let Some(j) = term.levels[global] {
                    counts[k][j] += 1.0;
                    for (s, &v) in sums[k].row_mut(j).iter_mut().zip(mu.row(local)) {
                        *s += v;
                    }
                }
            }
        }
        start = end;
    }

    let total_q: usize = terms.iter().map(|t| t.cardinality).sum();
    let mut b_hat = Matrix::zeros(total_q, p);
    let mut offset = 0;
    for (k, term) in terms.iter().enumerate() {
        let mut block = core::mem::replace(&mut sums[k], Matrix::zeros(0, 0));
        for (j, &c) in counts[k].iter().enumerate() {
            if c > 0.0 {
                let inv = 1.0 / c;
                for v in block.row_mut(j) {
                    *v *= inv;
                }
            }
        }
        if spatial_term == Some(k) {
            let factor = spatial_factor.ok_or_else(|| {
                Error::InvalidArgument("spatial mode without posterior factor".into())
            })?;
            // unobserved levels enter the multiply at the prior mean
            // (zero) and come out with posterior-correlated estimates
            // spread from nearby observed locations
            block = factor.matmul(&block);
        }
        for j in 0..term.cardinality {
            b_hat.row_mut(offset + j).copy_from_slice(block.row(j));
        }
        offset += term.cardinality;
    }
    Ok(b_hat)
}

impl TrainedLmmvae {
    fn check_scenario(&self, scenario: &REScenario) -> Result<()> {
        scenario.validate()?;
        let cards: Vec<usize> = scenario
            .term_designs()
            .iter()
            .map(|t| t.cardinality)
            .collect();
        if cards != self.term_cardinalities {
            return Err(Error::Shape(format!(
                "scenario terms {cards:?} do not match the trained design {:?}",
                self.term_cardinalities
            )));
        }
        if scenario.spatial_term().is_some() && self.spatial_factor.is_none() {
            return Err(Error::InvalidArgument(
                "spatial scenario but model has no posterior factor".into(),
            ));
        }
        Ok(())
    }

    fn check_width(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.feature_means.len() {
            return Err(Error::Shape(format!(
                "x has {} columns, model expects {}",
                x.cols(),
                self.feature_means.len()
            )));
        }
        Ok(())
    }

    /// Deterministic encoder heads for a batch (input centered on the
    /// training means).
    pub fn encode(&self, x: &Matrix) -> Result<(GaussianHead, Vec<GaussianHead>)> {
        self.check_width(x)?;
        self.nets.stack.forward(&centered(x, &self.feature_means))
    }

    /// The fixed-part reconstruction `f(u)` mapped back to data space.
    pub fn decode_fixed(&self, u: &Matrix) -> Result<Matrix> {
        let mut out = self.nets.decoder.forward(u)?;
        for i in 0..out.rows() {
            for (v, &m) in out.row_mut(i).iter_mut().zip(&self.feature_means) {
                *v += m;
            }
        }
        Ok(out)
    }

    /// Deterministic reconstruction on (unseen) data: latent means from the
    /// fixed encoder plus the design-weighted extracted random effects.
    /// Returns `(U, X_hat)`.
    pub fn reconstruct(&self, x: &Matrix, scenario: &REScenario) -> Result<(Matrix, Matrix)> {
        self.check_width(x)?;
        self.check_scenario(scenario)?;
        if scenario.n_rows() != x.rows() {
            return Err(Error::Shape("scenario row count must match x".into()));
        }
        let (u_head, _) = self.encode(x)?;
        let u = u_head.mu;
        let mut x_hat = self.decode_fixed(&u)?;
        let z = scenario.build_z()?;
        let zb = z.matmul_dense(&self.b_hat);
        x_hat.axpy(1.0, &zb);
        Ok((u, x_hat))
    }

    /// One stochastic forward pass exposing all intermediate pieces.
    pub fn forward(&self, x: &Matrix, scenario: &REScenario, rng: &mut Rng) -> Result<BatchOutput> {
        self.check_width(x)?;
        self.check_scenario(scenario)?;
        if scenario.n_rows() != x.rows() {
            return Err(Error::Shape("scenario row count must match x".into()));
        }
        let terms = scenario.term_designs();
        let (u_head, b_heads) = self.encode(x)?;
        let noise = NoiseDraws::draw(rng, x.rows(), self.config.latent_dim, x.cols(), terms.len());
        let u = reparameterize_with(&u_head, &noise.eps_u);
        let mut x_hat = self.decode_fixed(&u)?;
        let mut b_aggs = Vec::with_capacity(terms.len());
        for (k, term) in terms.iter().enumerate() {
            let b_k = reparameterize_with(&b_heads[k], &noise.eps_b[k]);
            let (mut b_agg, _) = aggregate_re_with_counts(&b_k, &term.levels, term.cardinality);
            if scenario.spatial_term() == Some(k) {
                let factor = self.spatial_factor.as_ref().expect("checked");
                b_agg = factor.matmul(&b_agg);
            }
            for (i, level) in term.levels.iter().enumerate() {
                if let Some(j) = level {
                    let w = term.weights[i];
                    for (o, &v) in x_hat.row_mut(i).iter_mut().zip(b_agg.row(*j)) {
                        *o += w * v;
                    }
                }
            }
            b_aggs.push(b_agg);
        }
        Ok(BatchOutput {
            x_hat,
            u_head,
            b_heads,
            b_agg: b_aggs,
        })
    }

    /// Re-runs random-effect extraction on a (training) dataset.
    pub fn extract_b_hat(&self, x: &Matrix, scenario: &REScenario) -> Result<Matrix> {
        self.check_width(x)?;
        self.check_scenario(scenario)?;
        let terms = scenario.term_designs();
        extract_b_hat_from(
            &self.nets,
            &centered(x, &self.feature_means),
            &terms,
            self.spatial_factor.as_ref(),
            scenario.spatial_term(),
        )
    }
}
