#[allow(unused_imports)] // inherent f64 methods replace the trait in std builds
use num_traits::Float;

use crate::nn::{Matrix, Rng};

/// Draws a q x p matrix from a matrix-normal distribution with row
/// covariance `L L^T` and column covariance `diag(col_vars)`:
/// `B = L G diag(sqrt(col_vars))` with `G` i.i.d. standard normal.
/// `row_factor = None` means identity row covariance.
pub fn sample_matrix_normal(
    rng: &mut Rng,
    q: usize,
    row_factor: Option<&Matrix>,
    col_vars: &[f64],
) -> Matrix {
    assert!(
        col_vars.iter().all(|&v| v > 0.0),
        "column variances must be positive"
    );
    if let Some(l) = row_factor {
        assert_eq!(l.rows(), q, "row factor must be q x q");
        assert_eq!(l.cols(), q, "row factor must be q x q");
    }
    let g = rng.normal_matrix(q, col_vars.len());
    let mut b = match row_factor {
        Some(l) => l.matmul(&g),
        None => g,
    };
    for i in 0..q {
        for (v, &var) in b.row_mut(i).iter_mut().zip(col_vars) {
            *v *= var.sqrt();
        }
    }
    b
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn identity_factor_unit_vars_gives_iid_standard_normal() {
        let mut rng = Rng::new(101);
        let draws = 100_000;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..draws {
            let b = sample_matrix_normal(&mut rng, 2, None, &[1.0, 1.0]);
            for &v in b.data() {
                sum += v;
                sumsq += v * v;
            }
        }
        let n = (draws * 4) as f64;
        let mean = sum / n;
        let var = sumsq / n - mean * mean;
        assert!(mean.abs() < 3.0 / n.sqrt() * 1.0 + 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }

    #[test]
    fn vanishing_column_variance_gives_near_zero_matrix() {
        let mut rng = Rng::new(8);
        let b = sample_matrix_normal(&mut rng, 5, None, &[1e-12, 1e-12, 1e-12]);
        assert!(b.data().iter().all(|&v| v.abs() < 1e-4));
    }

    #[test]
    fn row_covariance_matches_factor_product() {
        // L from a 2x2 kernel with off-diagonal 0.5
        let k = Matrix::from_vec(2, 2, vec![1.0, 0.5, 0.5, 1.0]);
        let l = crate::linalg::cholesky(&k).unwrap();
        let mut rng = Rng::new(55);
        let draws = 100_000;
        let mut cov = [0.0f64; 3]; // c00, c01, c11 of the first column
        for _ in 0..draws {
            let b = sample_matrix_normal(&mut rng, 2, Some(&l), &[1.0]);
            let (x, y) = (b[(0, 0)], b[(1, 0)]);
            cov[0] += x * x;
            cov[1] += x * y;
            cov[2] += y * y;
        }
        for c in &mut cov {
            *c /= draws as f64;
        }
        // the entries of LL^T are (1, 0.5, 1); 3 standard errors of a
        // second-moment estimate at this sample size is about 0.014
        let tol = 3.0 * (2.0f64 / draws as f64).sqrt();
        assert!((cov[0] - 1.0).abs() < tol, "c00 {}", cov[0]);
        assert!((cov[1] - 0.5).abs() < tol, "c01 {}", cov[1]);
        assert!((cov[2] - 1.0).abs() < tol, "c11 {}", cov[2]);
    }
}
