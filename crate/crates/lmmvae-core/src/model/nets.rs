use alloc::vec;
use alloc::vec::Vec;
#[allow(unused_imports)] // inherent f64 methods replace the trait in std builds
use num_traits::Float;

use crate::error::{Error, Result};
use crate::model::encoder::{EncoderGrads, MultiHeadEncoder};
use crate::model::loss::loss_unchecked;
use crate::model::EncoderVariant;
use crate::nn::{reparameterize_with, GaussianHead, Matrix, MlpGrads, MlpParams, Rng, GAMMA_CLAMP};

/// Averages the sampled effect rows of each level present in the batch into
/// one row per level; levels absent from the batch stay zero. Averaging
/// (rather than summing) keeps gradients flowing at batch-size-independent
/// scale.
pub fn aggregate_re(b_samples: &Matrix, levels: &[Option<usize>], q: usize) -> Matrix {
    aggregate_re_with_counts(b_samples, levels, q).0
}

pub(crate) fn aggregate_re_with_counts(
    b_samples: &Matrix,
    levels: &[Option<usize>],
    q: usize,
) -> (Matrix, Vec<f64>) {
    assert_eq!(b_samples.rows(), levels.len(), "one level per sample row");
    let mut agg = Matrix::zeros(q, b_samples.cols());
    let mut counts = vec![0.0f64; q];
    for (i, level) in levels.iter().enumerate() {
        if let Some(j) = level {
            assert!(*j < q, "level {j} out of range (q = {q})");
            counts[*j] += 1.0;
            for (a, &v) in agg.row_mut(*j).iter_mut().zip(b_samples.row(i)) {
                *a += v;
            }
        }
    }
    for (j, &c) in counts.iter().enumerate() {
        if c > 0.0 {
            let inv = 1.0 / c;
            for a in agg.row_mut(j) {
                *a *= inv;
            }
        }
    }
    (agg, counts)
}

/// The encoder networks, either two separate ones or a single shared trunk
/// emitting the fixed head and all random-effect heads together.
#[derive(Debug, Clone)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum EncoderStack {
    Two {
        fe: MultiHeadEncoder,
        re: MultiHeadEncoder,
    },
    Single {
        shared: MultiHeadEncoder,
    },
}

pub enum StackCache {
    Two {
        fe: crate::model::encoder::EncoderCache,
        re: crate::model::encoder::EncoderCache,
    },
    Single {
        shared: crate::model::encoder::EncoderCache,
    },
}

pub enum StackGrads {
    Two { fe: EncoderGrads, re: EncoderGrads },
    Single { shared: EncoderGrads },
}

impl EncoderStack {
    fn init(
        feature_dim: usize,
        latent_dim: usize,
        hidden: &[usize],
        num_terms: usize,
        variant: EncoderVariant,
        rng: &mut Rng,
    ) -> Self {
        let re_dims = vec![feature_dim; num_terms];
        match variant {
            EncoderVariant::TwoEncoders => EncoderStack::Two {
                fe: MultiHeadEncoder::new(feature_dim, hidden, &[latent_dim], rng),
                re: MultiHeadEncoder::new(feature_dim, hidden, &re_dims, rng),
            },
            EncoderVariant::SingleEncoder => {
                let mut dims = vec![latent_dim];
                dims.extend(re_dims);
                EncoderStack::Single {
                    shared: MultiHeadEncoder::new(feature_dim, hidden, &dims, rng),
                }
            }
        }
    }

    /// `(fixed head, random-effect heads)` for a batch.
    pub fn forward(&self, x: &Matrix) -> Result<(GaussianHead, Vec<GaussianHead>)> {
        match self {
            EncoderStack::Two { fe, re } => {
                let mut u = fe.forward(x)?;
                Ok((u.remove(0), re.forward(x)?))
            }
            EncoderStack::Single { shared } => {
                let mut heads = shared.forward(x)?;
                let u = heads.remove(0);
                Ok((u, heads))
            }
        }
    }

    fn forward_cached(
        &self,
        x: &Matrix,
    ) -> Result<((GaussianHead, Vec<GaussianHead>), StackCache)> {
        match self {
            EncoderStack::Two { fe, re } => {
                let (mut u, fe_cache) = fe.forward_cached(x)?;
                let (b, re_cache) = re.forward_cached(x)?;
                Ok((
                    (u.remove(0), b),
                    StackCache::Two {
                        fe: fe_cache,
                        re: re_cache,
                    },
                ))
            }
            EncoderStack::Single { shared } => {
                let (mut heads, cache) = shared.forward_cached(x)?;
                let u = heads.remove(0);
                Ok(((u, heads), StackCache::Single { shared: cache }))
            }
        }
    }

    fn backward(
        &self,
        cache: &StackCache,
        u_grad: (Matrix, Matrix),
        b_grads: Vec<(Matrix, Matrix)>,
    ) -> StackGrads {
        match (self, cache) {
            (EncoderStack::Two { fe, re }, StackCache::Two { fe: fc, re: rc }) => StackGrads::Two {
                fe: fe.backward(fc, &[u_grad]).0,
                re: re.backward(rc, &b_grads).0,
            },
            (EncoderStack::Single { shared }, StackCache::Single { shared: sc }) => {
                let mut all = vec![u_grad];
                all.extend(b_grads);
                StackGrads::Single {
                    shared: shared.backward(sc, &all).0,
                }
            }
            _ => unreachable!("cache variant mismatch"),
        }
    }

    pub fn param_slices(&self) -> Vec<&[f64]> {
        match self {
            EncoderStack::Two { fe, re } => {
                let mut out = fe.param_slices();
                out.extend(re.param_slices());
                out
            }
            EncoderStack::Single { shared } => shared.param_slices(),
        }
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            EncoderStack::Two { fe, re } => {
                let mut out = fe.param_slices_mut();
                out.extend(re.param_slices_mut());
                out
            }
            EncoderStack::Single { shared } => shared.param_slices_mut(),
        }
    }

    fn is_finite(&self) -> bool {
        match self {
            EncoderStack::Two { fe, re } => fe.is_finite() && re.is_finite(),
            EncoderStack::Single { shared } => shared.is_finite(),
        }
    }
}

impl StackGrads {
    fn tensor_slices(&self) -> Vec<&[f64]> {
        match self {
            StackGrads::Two { fe, re } => {
                let mut out = fe.tensor_slices();
                out.extend(re.tensor_slices());
                out
            }
            StackGrads::Single { shared } => shared.tensor_slices(),
        }
    }
}

/// All trainable networks of the model.
#[derive(Debug, Clone)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LmmvaeNets {
    pub stack: EncoderStack,
    pub decoder: MlpParams,
}

pub struct LmmvaeGrads {
    pub stack: StackGrads,
    pub decoder: MlpGrads,
}

impl LmmvaeGrads {
    pub fn tensor_slices(&self) -> Vec<&[f64]> {
        let mut out = self.stack.tensor_slices();
        out.extend(self.decoder.param_slices());
        out
    }
}

/// One random-effect term of a batch: level and design weight per row.
#[derive(Debug, Clone)]
pub struct BatchTerm {
    pub q: usize,
    pub levels: Vec<Option<usize>>,
    pub weights: Vec<f64>,
}

/// Spatial posterior factor and the term it applies to.
pub struct SpatialOp<'a> {
    pub factor: &'a Matrix,
    pub term: usize,
}

/// Everything `loss_and_grads` needs for one mini-batch; `x` is already
/// centered when centering is enabled.
pub struct BatchSpec<'a> {
    pub x: &'a Matrix,
    pub terms: &'a [BatchTerm],
    pub delta_b: &'a [f64],
    pub beta: f64,
    pub spatial: Option<SpatialOp<'a>>,
}

/// Externally drawn reparameterization noise, held fixed during gradient
/// checks.
pub struct NoiseDraws {
    pub eps_u: Matrix,
    pub eps_b: Vec<Matrix>,
}

impl NoiseDraws {
    pub fn draw(
        rng: &mut Rng,
        batch: usize,
        latent_dim: usize,
        feature_dim: usize,
        num_terms: usize,
    ) -> Self {
        NoiseDraws {
            eps_u: rng.normal_matrix(batch, latent_dim),
            eps_b: (0..num_terms)
                .map(|_| rng.normal_matrix(batch, feature_dim))
                .collect(),
        }
    }
}

/// Sorted distinct levels present in a batch.
fn active_levels(levels: &[Option<usize>]) -> Vec<usize> {
    let mut active: Vec<usize> = levels.iter().flatten().copied().collect();
    active.sort_unstable();
    active.dedup();
    active
}

/// Rows `factor[j, l]` restricted to active rows and columns: computes
/// `factor * b` exactly when `b` is zero outside the active rows and only
/// active output rows are read downstream.
fn apply_factor_active(factor: &Matrix, b: &Matrix, active: &[usize], transpose: bool) -> Matrix {
    let mut out = Matrix::zeros(b.rows(), b.cols());
    for &j in active {
        let out_row = out.row_mut(j);
        for &l in active {
            let f = if transpose {
                factor[(l, j)]
            } else {
                factor[(j, l)]
            };
            if f != 0.0 {
                for (o, &v) in out_row.iter_mut().zip(b.row(l)) {
                    *o += f * v;
                }
            }
        }
    }
    out
}

impl LmmvaeNets {
    pub fn init(
        feature_dim: usize,
        latent_dim: usize,
        hidden: &[usize],
        num_terms: usize,
        variant: EncoderVariant,
        rng: &mut Rng,
    ) -> Self {
        let stack = EncoderStack::init(feature_dim, latent_dim, hidden, num_terms, variant, rng);
        let mut dec_dims: Vec<usize> = vec![latent_dim];
        dec_dims.extend(hidden.iter().rev());
        dec_dims.push(feature_dim);
        let decoder = MlpParams::glorot(&dec_dims, rng);
        LmmvaeNets { stack, decoder }
    }

    pub fn param_slices(&self) -> Vec<&[f64]> {
        let mut out = self.stack.param_slices();
        out.extend(self.decoder.param_slices());
        out
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self.stack.param_slices_mut();
        out.extend(self.decoder.param_slices_mut());
        out
    }

    pub fn tensor_lens(&self) -> Vec<usize> {
        self.param_slices().iter().map(|s| s.len()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.stack.is_finite() && self.decoder.is_finite()
    }

    /// Loss of one batch under fixed noise; used by gradient checks.
    pub fn loss_value(&self, batch: &BatchSpec, noise: &NoiseDraws) -> Result<f64> {
        Ok(self.loss_and_grads(batch, noise)?.0)
    }

    /// Forward and backward pass for one mini-batch. Returns the batch loss
    /// (per-observation average) and gradients for every tensor in
    /// `param_slices` order.
    pub fn loss_and_grads(
        &self,
        batch: &BatchSpec,
        noise: &NoiseDraws,
    ) -> Result<(f64, LmmvaeGrads)> {
        let x = batch.x;
        let m = x.rows();
        let mf = m as f64;
        if batch.terms.len() != batch.delta_b.len() {
            return Err(Error::Shape("one delta_b entry per term".into()));
        }
        if let Some(sp) = &batch.spatial {
            if sp.term >= batch.terms.len() {
                return Err(Error::Shape("spatial term index out of range".into()));
            }
        }

        // encode, sample, decode
        let ((u_head, b_heads), enc_cache) = self.stack.forward_cached(x)?;
        let u = reparameterize_with(&u_head, &noise.eps_u);
        let (f_out, dec_cache) = self.decoder.forward_cached(&u)?;

        // random-effect path per term
        let mut x_hat = f_out;
        let mut term_state = Vec::with_capacity(batch.terms.len());
        for (k, term) in batch.terms.iter().enumerate() {
            let b_k = reparameterize_with(&b_heads[k], &noise.eps_b[k]);
            let (mut b_agg, counts) = aggregate_re_with_counts(&b_k, &term.levels, term.q);
            let active = active_levels(&term.levels);
            if let Some(sp) = &batch.spatial {
                if sp.term == k {
                    b_agg = apply_factor_active(sp.factor, &b_agg, &active, false);
                }
            }
            for (i, level) in term.levels.iter().enumerate() {
                if let Some(j) = level {
                    let w = term.weights[i];
                    for (o, &v) in x_hat.row_mut(i).iter_mut().zip(b_agg.row(*j)) {
                        *o += w * v;
                    }
                }
            }
            term_state.push((counts, active));
        }

        if batch.terms.len() != b_heads.len() {
            return Err(Error::Shape("one head per random-effect term".into()));
        }
        let loss = loss_unchecked(x, &x_hat, &u_head, &b_heads, batch.beta, batch.delta_b);

        // d loss / d x_hat = 2 (x_hat - x) / m
        let mut d_xhat = x_hat;
        d_xhat.axpy(-1.0, x);
        d_xhat.scale(2.0 / mf);

        // decoder and fixed-head path
        let (dec_grads, d_u) = self.decoder.backward_cached(&dec_cache, &d_xhat);
        let kl_scale = batch.beta / mf;
        let mut du_mu = d_u.clone();
        du_mu.axpy(kl_scale, &u_head.mu);
        let du_gamma = Matrix::from_fn(m, u_head.dim(), |i, l| {
            let g = u_head.gamma[(i, l)];
            if g.abs() >= GAMMA_CLAMP {
                return 0.0;
            }
            let reparam = d_u[(i, l)] * noise.eps_u[(i, l)] * (g / 2.0).exp() * 0.5;
            reparam + kl_scale * 0.5 * (g.exp() - 1.0)
        });

        // random-effect paths
        let mut b_grads = Vec::with_capacity(batch.terms.len());
        for (k, term) in batch.terms.iter().enumerate() {
            let (counts, active) = &term_state[k];
            let p = x.cols();
            // d loss / d b_agg_final = Z^T d_xhat
            let mut d_b_final = Matrix::zeros(term.q, p);
            for (i, level) in term.levels.iter().enumerate() {
                if let Some(j) = level {
                    let w = term.weights[i];
                    for (o, &v) in d_b_final.row_mut(*j).iter_mut().zip(d_xhat.row(i)) {
                        *o += w * v;
                    }
                }
            }
            let d_b_agg = match &batch.spatial {
                Some(sp) if sp.term == k => {
                    apply_factor_active(sp.factor, &d_b_final, active, true)
                }
                _ => d_b_final,
            };
            // back through the per-level mean
            let mut d_b = Matrix::zeros(m, p);
            for (i, level) in term.levels.iter().enumerate() {
                if let Some(j) = level {
                    let inv = 1.0 / counts[*j];
                    for (o, &v) in d_b.row_mut(i).iter_mut().zip(d_b_agg.row(*j)) {
                        *o = v * inv;
                    }
                }
            }
            // reparameterization and KL contributions
            let head = &b_heads[k];
            let delta = batch.delta_b[k];
            let inv_prior = (-delta).exp();
            let mut db_mu = d_b.clone();
            db_mu.axpy(kl_scale * inv_prior, &head.mu);
            let db_gamma = Matrix::from_fn(m, p, |i, j| {
                let g = head.gamma[(i, j)];
                if g.abs() >= GAMMA_CLAMP {
                    return 0.0;
                }
                let reparam = d_b[(i, j)] * noise.eps_b[k][(i, j)] * (g / 2.0).exp() * 0.5;
                reparam + kl_scale * 0.5 * ((g - delta).exp() - 1.0)
            });
            b_grads.push((db_mu, db_gamma));
        }

        let stack_grads = self.stack.backward(&enc_cache, (du_mu, du_gamma), b_grads);
        Ok((
            loss,
            LmmvaeGrads {
                stack: stack_grads,
                decoder: dec_grads,
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aggregate_means_per_level() {
        let b = Matrix::from_vec(2, 2, vec![1.0, 3.0, 3.0, 5.0]);
        let agg = aggregate_re(&b, &[Some(0), Some(0)], 4);
        assert_eq!(agg.row(0), &[2.0, 4.0]);
        for j in 1..4 {
            assert_eq!(agg.row(j), &[0.0, 0.0]);
        }
    }

    #[test]
    fn aggregate_single_row_per_level_is_permutation() {
        let b = Matrix::from_vec(3, 1, vec![10.0, 20.0, 30.0]);
        let agg = aggregate_re(&b, &[Some(2), Some(0), Some(1)], 3);
        assert_eq!(agg.col(0), vec![20.0, 30.0, 10.0]);
    }

    #[test]
    fn aggregate_matches_loop_oracle() {
        let mut rng = Rng::new(44);
        let (m, q, p) = (50usize, 7usize, 3usize);
        let b = rng.normal_matrix(m, p);
        let levels: Vec<Option<usize>> = (0..m).map(|_| Some(rng.index(q))).collect();
        let agg = aggregate_re(&b, &levels, q);

        let mut oracle = Matrix::zeros(q, p);
        for j in 0..q {
            let rows: Vec<usize> = (0..m).filter(|&i| levels[i] == Some(j)).collect();
            if rows.is_empty() {
                continue;
            }
            for &i in &rows {
                for c in 0..p {
                    oracle[(j, c)] += b[(i, c)] / rows.len() as f64;
                }
            }
        }
        assert!(agg.max_abs_diff(&oracle) < 1e-12);
    }

    #[test]
    fn aggregate_is_permutation_invariant() {
        let mut rng = Rng::new(9);
        let (m, q, p) = (20usize, 5usize, 2usize);
        let b = rng.normal_matrix(m, p);
        let levels: Vec<Option<usize>> = (0..m).map(|_| Some(rng.index(q))).collect();
        let agg = aggregate_re(&b, &levels, q);

        let mut perm: Vec<usize> = (0..m).collect();
        rng.shuffle(&mut perm);
        let b_perm = b.gather_rows(&perm);
        let levels_perm: Vec<Option<usize>> = perm.iter().map(|&i| levels[i]).collect();
        let agg_perm = aggregate_re(&b_perm, &levels_perm, q);
        assert!(agg.max_abs_diff(&agg_perm) < 1e-12);
    }
}
