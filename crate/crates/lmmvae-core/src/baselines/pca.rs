use alloc::format;
use alloc::vec::Vec;

use crate::design::REScenario;
use crate::error::{Error, Result};
use crate::linalg::symmetric_eigen;
use crate::nn::Matrix;

/// One-hot designs beyond this many columns make the dense covariance
/// eigendecomposition impractical; callers get a clear error instead.
pub const MAX_OHE_COLUMNS: usize = 5000;

/// Principal components fitted by eigendecomposition of the feature
/// covariance.
#[derive(Debug, Clone)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// p x d loadings with orthonormal columns; the sign of each column is
    /// fixed so its largest-magnitude entry is positive.
    pub loadings: Matrix,
    /// All eigenvalues of the covariance, descending.
    pub eigenvalues: Vec<f64>,
}

/// Fits the top `d` principal components of `x`.
pub fn pca_fit(x: &Matrix, d: usize) -> Result<PcaModel> {
    let (n, p) = (x.rows(), x.cols());
    if d == 0 || d > p {
        return Err(Error::InvalidArgument(format!(
            "d = {d} must be in 1..={p}"
        )));
    }
    if n < 2 {
        return Err(Error::InvalidArgument(
            "need at least two observations".into(),
        ));
    }
    let mean = x.col_means();
    let mut centered = x.clone();
    for i in 0..n {
        for (v, &m) in centered.row_mut(i).iter_mut().zip(&mean) {
            *v -= m;
        }
    }
    let mut cov = centered.transpose_matmul(&centered);
    cov.scale(1.0 / n as f64);
    let (eigenvalues, vectors) = symmetric_eigen(&cov);

    let mut loadings = Matrix::zeros(p, d);
    for j in 0..d {
        let mut best = 0usize;
        for i in 1..p {
            if vectors[(i, j)].abs() > vectors[(best, j)].abs() {
                best = i;
            }
        }
        let sign = if vectors[(best, j)] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..p {
            loadings[(i, j)] = sign * vectors[(i, j)];
        }
    }
    Ok(PcaModel {
        mean,
        loadings,
        eigenvalues,
    })
}

/// Scores and reconstructions: `U = (X - mean) W`, `X_hat = U W^T + mean`.
pub fn pca_transform_reconstruct(model: &PcaModel, x: &Matrix) -> Result<(Matrix, Matrix)> {
    if x.cols() != model.mean.len() {
        return Err(Error::Shape(format!(
            "x has {} columns, model expects {}",
            x.cols(),
            model.mean.len()
        )));
    }
    let mut centered = x.clone();
    for i in 0..x.rows() {
        for (v, &m) in centered.row_mut(i).iter_mut().zip(&model.mean) {
            *v -= m;
        }
    }
    let u = centered.matmul(&model.loadings);
    let mut x_hat = u.matmul_transpose(&model.loadings);
    for i in 0..x.rows() {
        for (v, &m) in x_hat.row_mut(i).iter_mut().zip(&model.mean) {
            *v += m;
        }
    }
    Ok((u, x_hat))
}

/// PCA over `[X | one-hot(aux)]`. Only the `p` fixed features are
/// reconstructed; the indicator columns exist solely to inform the fit.
#[derive(Debug, Clone)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PcaOheModel {
    pub pca: PcaModel,
    pub feature_dim: usize,
}

pub fn pca_fit_ohe(x: &Matrix, scenario: &REScenario, d: usize) -> Result<PcaOheModel> {
    let augmented = augment_with_ohe(x, scenario)?;
    Ok(PcaOheModel {
        pca: pca_fit(&augmented, d)?,
        feature_dim: x.cols(),
    })
}

impl PcaOheModel {
    /// Returns `(U, X_hat)` where `X_hat` covers the fixed features only.
    pub fn transform_reconstruct(
        &self,
        x: &Matrix,
        scenario: &REScenario,
    ) -> Result<(Matrix, Matrix)> {
        if x.cols() != self.feature_dim {
            return Err(Error::Shape("feature width changed since fit".into()));
        }
        let augmented = augment_with_ohe(x, scenario)?;
        let (u, full_hat) = pca_transform_reconstruct(&self.pca, &augmented)?;
        let x_hat = Matrix::from_fn(x.rows(), self.feature_dim, |i, j| full_hat[(i, j)]);
        Ok((u, x_hat))
    }
}

pub(crate) fn augment_with_ohe(x: &Matrix, scenario: &REScenario) -> Result<Matrix> {
    if scenario.n_rows() != x.rows() {
        return Err(Error::Shape("scenario row count must match x".into()));
    }
    let z = scenario.ohe_design()?;
    if z.q() > MAX_OHE_COLUMNS {
        return Err(Error::InvalidArgument(format!(
            "one-hot design would add {} columns (limit {MAX_OHE_COLUMNS}); \
             use an ignore/embedding variant instead",
            z.q()
        )));
    }
    let p = x.cols();
    let mut out = Matrix::zeros(x.rows(), p + z.q());
    for i in 0..x.rows() {
        out.row_mut(i)[..p].copy_from_slice(x.row(i));
        for &(col, val) in z.row(i) {
            out[(i, p + col)] = val;
        }
    }
    Ok(out)
}
