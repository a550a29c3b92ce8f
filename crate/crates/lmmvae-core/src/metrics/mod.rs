//! Evaluation metrics: test reconstruction error, the negative-likelihood
//! objective on held-out data, k-NN micro-average AUC on latent
//! representations and a paired t-test for replicate comparisons.

mod special;

pub use special::{ln_gamma, regularized_incomplete_beta, student_t_cdf};

use alloc::format;
use alloc::vec::Vec;
#[allow(unused_imports)] // inherent f64 methods replace the trait in std builds
use num_traits::Float;

use crate::baselines::TrainedVae;
use crate::design::REScenario;
use crate::error::{Error, Result};
use crate::model::{kl_gaussian_prior_rows, kl_standard_normal_rows, TrainedLmmvae};
use crate::nn::Matrix;

/// Mean squared error per element over all `n x p` entries.
pub fn recon_mse(x: &Matrix, x_hat: &Matrix) -> Result<f64> {
    if (x.rows(), x.cols()) != (x_hat.rows(), x_hat.cols()) {
        return Err(Error::Shape(format!(
            "x is {}x{}, x_hat is {}x{}",
            x.rows(),
            x.cols(),
            x_hat.rows(),
            x_hat.cols()
        )));
    }
    let mut acc = 0.0;
    for (a, b) in x.data().iter().zip(x_hat.data()) {
        let d = a - b;
        acc += d * d;
    }
    Ok(acc / (x.rows() * x.cols()) as f64)
}

/// Mean per observation of `sum_j (x - x_hat)^2 + beta * kl_row`; with
/// `beta = 0` this is exactly `p * recon_mse`.
pub fn nll_from_parts(x: &Matrix, x_hat: &Matrix, kl_rows: &[f64], beta: f64) -> Result<f64> {
    if (x.rows(), x.cols()) != (x_hat.rows(), x_hat.cols()) {
        return Err(Error::Shape("x and x_hat must have equal shapes".into()));
    }
    if kl_rows.len() != x.rows() {
        return Err(Error::Shape("one KL value per observation".into()));
    }
    let mut acc = 0.0;
    for (i, &kl) in kl_rows.iter().enumerate() {
        let mut recon = 0.0;
        for (a, b) in x.row(i).iter().zip(x_hat.row(i)) {
            let d = a - b;
            recon += d * d;
        }
        acc += recon + beta * kl;
    }
    Ok(acc / x.rows() as f64)
}

/// Test objective of a fitted model: deterministic heads, the extracted
/// random effects for reconstruction, and the training `beta` and priors
/// weighting the KL terms.
pub fn nll_lmmvae(model: &TrainedLmmvae, x: &Matrix, scenario: &REScenario) -> Result<f64> {
    let (u_head, b_heads) = model.encode(x)?;
    let (_, x_hat) = model.reconstruct(x, scenario)?;
    let mut kl_rows = kl_standard_normal_rows(&u_head);
    for (head, &delta) in b_heads.iter().zip(&model.config.prior.delta_b) {
        for (acc, v) in kl_rows.iter_mut().zip(kl_gaussian_prior_rows(head, delta)) {
            *acc += v;
        }
    }
    nll_from_parts(x, &x_hat, &kl_rows, model.config.beta)
}

/// Same objective for the plain VAE (no random-effect term).
pub fn nll_vae(model: &TrainedVae, x: &Matrix, scenario: Option<&REScenario>) -> Result<f64> {
    let u_head = model.encode(x, scenario)?;
    let (_, x_hat) = model.reconstruct(x, scenario)?;
    let kl_rows = kl_standard_normal_rows(&u_head);
    nll_from_parts(x, &x_hat, &kl_rows, model.config.beta)
}

/// Class-frequency scores of a k-nearest-neighbor classifier in latent
/// space (Euclidean distance, distance ties broken by training row index).
pub fn knn_class_scores(
    u_train: &Matrix,
    y_train: &[usize],
    u_test: &Matrix,
    k: usize,
    n_classes: usize,
) -> Result<Matrix> {
    let n_tr = u_train.rows();
    if y_train.len() != n_tr {
        return Err(Error::Shape("one label per training row".into()));
    }
    if k == 0 || k > n_tr {
        return Err(Error::InvalidArgument(format!(
            "k = {k} must be in 1..={n_tr}"
        )));
    }
    if u_test.cols() != u_train.cols() {
        return Err(Error::Shape("latent dimensions must agree".into()));
    }
    if let Some(&bad) = y_train.iter().find(|&&y| y >= n_classes) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} >= n_classes {n_classes}"
        )));
    }

    let mut scores = Matrix::zeros(u_test.rows(), n_classes);
    let mut dist: Vec<(f64, usize)> = Vec::with_capacity(n_tr);
    for i in 0..u_test.rows() {
        dist.clear();
        let te = u_test.row(i);
        for j in 0..n_tr {
            let mut d = 0.0;
            for (&a, &b) in te.iter().zip(u_train.row(j)) {
                let diff = a - b;
                d += diff * diff;
            }
            dist.push((d, j));
        }
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        dist.select_nth_unstable_by(k - 1, cmp);
        let mut neighbors: Vec<(f64, usize)> = dist[..k].to_vec();
        neighbors.sort_by(cmp);
        let row = scores.row_mut(i);
        for &(_, j) in &neighbors {
            row[y_train[j]] += 1.0;
        }
        for v in row {
            *v /= k as f64;
        }
    }
    Ok(scores)
}

/// Rank-based (Mann-Whitney) AUC over flattened one-vs-rest pairs: every
/// `(test example, class)` combination contributes one scored instance
/// whose positive label means the example belongs to that class.
pub fn micro_average_auc(scores: &Matrix, y_test: &[usize]) -> Result<f64> {
    if y_test.len() != scores.rows() {
        return Err(Error::Shape("one label per test row".into()));
    }
    let n_classes = scores.cols();
    if let Some(&bad) = y_test.iter().find(|&&y| y >= n_classes) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} >= n_classes {n_classes}"
        )));
    }
    let mut pairs: Vec<(f64, bool)> = Vec::with_capacity(scores.rows() * n_classes);
    for (i, &y) in y_test.iter().enumerate() {
        for (c, &s) in scores.row(i).iter().enumerate() {
            pairs.push((s, c == y));
        }
    }
    binary_auc(&mut pairs)
}

/// AUC with average ranks for score ties.
fn binary_auc(pairs: &mut [(f64, bool)]) -> Result<f64> {
    let n_pos = pairs.iter().filter(|(_, y)| *y).count();
    let n_neg = pairs.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::InvalidArgument(
            "AUC needs both positive and negative instances".into(),
        ));
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < pairs.len() {
        let mut j = i;
        while j < pairs.len() && pairs[j].0 == pairs[i].0 {
            j += 1;
        }
        // average rank of the tie group, 1-based
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        for pair in &pairs[i..j] {
            if pair.1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// k-NN micro-average AUC of latent representations.
pub fn knn_auc(
    u_train: &Matrix,
    y_train: &[usize],
    u_test: &Matrix,
    y_test: &[usize],
    k: usize,
) -> Result<f64> {
    let n_classes = y_train
        .iter()
        .chain(y_test)
        .max()
        .map(|&m| m + 1)
        .ok_or_else(|| Error::InvalidArgument("empty labels".into()))?;
    if n_classes < 2 {
        return Err(Error::InvalidArgument("need at least two classes".into()));
    }
    let scores = knn_class_scores(u_train, y_train, u_test, k, n_classes)?;
    micro_average_auc(&scores, y_test)
}

/// Result of a one-sided paired t-test between two replicate vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedTTest {
    /// `mean(a - b) / (sd / sqrt(n))`; infinite when differences have zero
    /// variance but nonzero mean.
    pub t: f64,
    /// P-value for the alternative `mean(a) < mean(b)`.
    pub p_less: f64,
    /// P-value for the alternative `mean(a) > mean(b)`.
    pub p_greater: f64,
    /// All paired differences are exactly zero.
    pub tie: bool,
}

pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<PairedTTest> {
    if a.len() != b.len() {
        return Err(Error::Shape("paired vectors must have equal length".into()));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::InvalidArgument("need at least two pairs".into()));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = diffs.iter().sum::<f64>() / n as f64;
    let var = diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (n as f64 - 1.0);
    if var == 0.0 {
        return Ok(if mean == 0.0 {
            PairedTTest {
                t: 0.0,
                p_less: 0.5,
                p_greater: 0.5,
                tie: true,
            }
        } else if mean < 0.0 {
            PairedTTest {
                t: f64::NEG_INFINITY,
                p_less: 0.0,
                p_greater: 1.0,
                tie: false,
            }
        } else {
            PairedTTest {
                t: f64::INFINITY,
                p_less: 1.0,
                p_greater: 0.0,
                tie: false,
            }
        });
    }
    let t = mean / (var.sqrt() / (n as f64).sqrt());
    let p_less = student_t_cdf(t, (n - 1) as f64);
    Ok(PairedTTest {
        t,
        p_less,
        p_greater: 1.0 - p_less,
        tie: false,
    })
}
