use alloc::format;
#[allow(unused_imports)] // inherent f64 methods replace the trait in std builds
use num_traits::Float;

use crate::design::SparseIndicator;
use crate::error::{Error, Result};
use crate::linalg::{cholesky_jittered, lu_solve};
use crate::nn::{Matrix, Rng};

/// Radial basis function kernel over rows of `locations`:
/// `k(s, s') = exp(-||s - s'||^2 / (2 l^2))`.
pub fn rbf_kernel(locations: &Matrix, length_scale_sq: f64) -> Result<Matrix> {
    if length_scale_sq <= 0.0 || !length_scale_sq.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "length scale squared must be positive, got {length_scale_sq}"
        )));
    }
    let q = locations.rows();
    let mut k = Matrix::zeros(q, q);
    for i in 0..q {
        k[(i, i)] = 1.0;
        for j in 0..i {
            let mut dist_sq = 0.0;
            for (&a, &b) in locations.row(i).iter().zip(locations.row(j)) {
                let d = a - b;
                dist_sq += d * d;
            }
            let v = (-dist_sq / (2.0 * length_scale_sq)).exp();
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    Ok(k)
}

/// Lower Cholesky factor of the posterior covariance of spatial random
/// effects given the data design:
///
/// `Psi = K - K Z^T V^{-1} Z K`, with `V = Z K Z^T + noise_var I`.
///
/// At most `n_samp` rows of `z` are used, sampled uniformly without
/// replacement; the factor is computed once per training run. Internally
/// the n x n inverse is avoided through the push-through identity
/// `Z^T V^{-1} Z = A (K A + noise_var I)^{-1}` with `A = Z^T Z`, which is
/// algebraically exact for any design.
pub fn spatial_posterior_chol(
    kernel: &Matrix,
    z: &SparseIndicator,
    noise_var: f64,
    n_samp: usize,
    rng: &mut Rng,
) -> Result<Matrix> {
    if noise_var <= 0.0 || !noise_var.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "noise variance must be positive, got {noise_var}"
        )));
    }
    let q = kernel.rows();
    if kernel.cols() != q || z.q() != q {
        return Err(Error::Shape(format!(
            "kernel is {}x{}, design has {} columns",
            kernel.rows(),
            kernel.cols(),
            z.q()
        )));
    }
    let a = if n_samp >= z.n() {
        z.gram()
    } else {
        z.gather_rows(&rng.sample_indices(z.n(), n_samp)).gram()
    };

    // Psi = K - (K A) (K A + noise_var I)^{-1} K
    let ka = kernel.matmul(&a);
    let mut m = ka.clone();
    for i in 0..q {
        m[(i, i)] += noise_var;
    }
    let x = lu_solve(&m, kernel)?;
    let correction = ka.matmul(&x);
    let mut psi = kernel.clone();
    psi.axpy(-1.0, &correction);
    for i in 0..q {
        for j in 0..i {
            let avg = 0.5 * (psi[(i, j)] + psi[(j, i)]);
            psi[(i, j)] = avg;
            psi[(j, i)] = avg;
        }
    }
    cholesky_jittered(&psi, 1e-10, 1e-6)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use alloc::vec::Vec;

    #[test]
    fn rbf_zero_distance_is_one() {
        let locs = Matrix::from_vec(2, 2, vec![0.3, -0.7, 0.3, -0.7]);
        let k = rbf_kernel(&locs, 2.0).unwrap();
        assert_eq!(k[(0, 1)], 1.0);
        assert_eq!(k[(0, 0)], 1.0);
    }

    #[test]
    fn rbf_scalar_formula_value() {
        // squared distance 2 with l^2 = 1 gives exp(-1)
        let locs = Matrix::from_vec(2, 2, vec![0.0, 0.0, 1.0, 1.0]);
        let k = rbf_kernel(&locs, 1.0).unwrap();
        assert!((k[(0, 1)] - (-1.0f64).exp()).abs() < 1e-12);
        assert!((k[(0, 1)] - 0.367879441).abs() < 1e-8);
    }

    #[test]
    fn rbf_is_exactly_symmetric() {
        let mut rng = Rng::new(4);
        let locs = rng.normal_matrix(12, 2);
        let k = rbf_kernel(&locs, 0.5).unwrap();
        assert!(k.max_abs_diff(&k.transpose()) == 0.0);
    }

    #[test]
    fn rbf_rejects_nonpositive_length_scale() {
        let locs = Matrix::zeros(2, 2);
        assert!(rbf_kernel(&locs, 0.0).is_err());
        assert!(rbf_kernel(&locs, -1.0).is_err());
    }

    #[test]
    fn posterior_identity_case_is_half_identity() {
        // K = I, Z = I (one observation per location), noise 1:
        // V = 2I, Psi = I - I/2 = I/2, L = I/sqrt(2)
        let q = 4;
        let k = Matrix::identity(q);
        let ids: Vec<Option<usize>> = (0..q).map(Some).collect();
        let z = crate::design::build_categorical_z(&[ids], &[q]).unwrap();
        let mut rng = Rng::new(0);
        let l = spatial_posterior_chol(&k, &z, 1.0, q, &mut rng).unwrap();
        let expected = Matrix::from_fn(q, q, |i, j| {
            if i == j {
                core::f64::consts::FRAC_1_SQRT_2
            } else {
                0.0
            }
        });
        assert!(l.max_abs_diff(&expected) < 1e-9);
    }

    /// Dense-formula oracle: materializes the n x n marginal covariance
    /// and inverts it directly.
    fn dense_psi_oracle(kernel: &Matrix, z: &SparseIndicator, noise_var: f64) -> Matrix {
        let zd = z.to_dense();
        let zk = zd.matmul(kernel);
        let mut v = zk.matmul_transpose(&zd);
        for i in 0..z.n() {
            v[(i, i)] += noise_var;
        }
        let v_inv = lu_solve(&v, &Matrix::identity(z.n())).unwrap();
        let kzt = kernel.matmul_transpose(&zd);
        let correction = kzt.matmul(&v_inv).matmul(&zk);
        let mut psi = kernel.clone();
        psi.axpy(-1.0, &correction);
        psi
    }

    fn random_spatial_case(rng: &mut Rng, q: usize, n: usize) -> (Matrix, SparseIndicator) {
        let locs = Matrix::from_fn(q, 2, |_, _| rng.uniform_range(-1.0, 1.0));
        let k = rbf_kernel(&locs, 0.8).unwrap();
        let ids: Vec<Option<usize>> = (0..n).map(|_| Some(rng.index(q))).collect();
        let z = crate::design::build_categorical_z(&[ids], &[q]).unwrap();
        (k, z)
    }

    #[test]
    fn posterior_matches_dense_inverse_oracle() {
        let mut rng = Rng::new(22);
        let (k, z) = random_spatial_case(&mut rng, 8, 20);
        let l = spatial_posterior_chol(&k, &z, 0.7, 20, &mut rng).unwrap();
        let psi = l.matmul_transpose(&l);
        let oracle = dense_psi_oracle(&k, &z, 0.7);
        assert!(psi.max_abs_diff(&oracle) < 1e-8);
    }

    #[test]
    fn unobserved_location_keeps_prior_row() {
        // q = 3 but location 2 has no observations; with K = I the
        // posterior row/col 2 must equal the prior's (no shrinkage), as
        // the direct matrix formula shows: Psi = I - A (A + I)^{-1} with
        // A = diag(counts) = diag(2, 1, 0).
        let mut rng = Rng::new(5);
        let k = Matrix::identity(3);
        let ids = vec![Some(0), Some(1), Some(0)];
        let z = crate::design::build_categorical_z(&[ids], &[3]).unwrap();
        let l = spatial_posterior_chol(&k, &z, 1.0, 3, &mut rng).unwrap();
        let psi = l.matmul_transpose(&l);
        let oracle = dense_psi_oracle(&k, &z, 1.0);
        assert!(psi.max_abs_diff(&oracle) < 1e-8);
        assert!((psi[(2, 2)] - 1.0).abs() < 1e-9);
        assert!(psi[(2, 0)].abs() < 1e-9);
        assert!(psi[(2, 1)].abs() < 1e-9);
        assert!((psi[(0, 0)] - 1.0 / 3.0).abs() < 1e-9);
        assert!((psi[(1, 1)] - 0.5).abs() < 1e-9);
    }

    #[test]
    fn posterior_never_exceeds_prior() {
        // eigenvalues of K - Psi are nonnegative: conditioning cannot
        // inflate prior variance
        let mut rng = Rng::new(77);
        for _ in 0..5 {
            let (k, z) = random_spatial_case(&mut rng, 6, 15);
            let l = spatial_posterior_chol(&k, &z, 0.5, 15, &mut rng).unwrap();
            let psi = l.matmul_transpose(&l);
            let mut diff = k.clone();
            diff.axpy(-1.0, &psi);
            let (eigs, _) = crate::linalg::symmetric_eigen(&diff);
            assert!(eigs.iter().all(|&e| e >= -1e-8), "eigs {eigs:?}");
        }
    }

    #[test]
    fn subsampling_uses_requested_row_count() {
        let mut rng = Rng::new(9);
        let (k, z) = random_spatial_case(&mut rng, 5, 40);
        // with n_samp = 0 rows, A = 0 and Psi = K: factor reconstructs K
        let l = spatial_posterior_chol(&k, &z, 1.0, 0, &mut rng).unwrap();
        let psi = l.matmul_transpose(&l);
        assert!(psi.max_abs_diff(&k) < 1e-6);
    }
}
