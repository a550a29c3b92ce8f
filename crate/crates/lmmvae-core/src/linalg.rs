//! Small dense factorizations shared by the design, baseline and simulation
//! modules: Cholesky, LU with partial pivoting and a cyclic Jacobi
//! eigensolver for symmetric matrices. Sizes stay in the low thousands.

use alloc::format;
use alloc::vec::Vec;
#[allow(unused_imports)] // inherent f64 methods replace the trait in std builds
use num_traits::Float;

use crate::error::{Error, Result};
use crate::nn::Matrix;

/// Lower-triangular `L` with `L L^T = a`. Fails if `a` is not positive definite.
pub fn cholesky(a: &Matrix) -> Result<Matrix> {
    assert_eq!(a.rows(), a.cols(), "cholesky: matrix must be square");
    let n = a.rows();
    let mut l = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[(i, j)];
            for k in 0..j {
                sum -= l[(i, k)] * l[(j, k)];
            }
            if i == j {
                if sum <= 0.0 || !sum.is_finite() {
                    return Err(Error::Singular(format!(
                        "cholesky pivot {sum:.3e} at index {i}"
                    )));
                }
                l[(i, j)] = sum.sqrt();
            } else {
                l[(i, j)] = sum / l[(j, j)];
            }
        }
    }
    Ok(l)
}

/// Cholesky with a jitter ladder: retries with `jitter * I` added to the
/// diagonal, growing from `start` to `end` by factors of 10.
pub fn cholesky_jittered(a: &Matrix, start: f64, end: f64) -> Result<Matrix> {
    if let Ok(l) = cholesky(a) {
        return Ok(l);
    }
    let n = a.rows();
    let mut jitter = start;
    while jitter <= end * (1.0 + 1e-12) {
        let mut aj = a.clone();
        for i in 0..n {
            aj[(i, i)] += jitter;
        }
        if let Ok(l) = cholesky(&aj) {
            return Ok(l);
        }
        jitter *= 10.0;
    }
    Err(Error::Singular(format!(
        "cholesky failed after jitter ladder up to {end:.1e}"
    )))
}

/// Solves `a x = b` for square `a` via LU with partial pivoting.
pub fn lu_solve(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    assert_eq!(a.rows(), a.cols(), "lu_solve: matrix must be square");
    assert_eq!(a.rows(), b.rows(), "lu_solve: rhs row count must match");
    let n = a.rows();
    let m = b.cols();
    let mut lu = a.clone();
    let mut x = b.clone();
    let mut perm: Vec<usize> = (0..n).collect();

    for k in 0..n {
        let mut pivot = k;
        let mut best = lu[(k, k)].abs();
        for i in k + 1..n {
            let v = lu[(i, k)].abs();
            if v > best {
                best = v;
                pivot = i;
            }
        }
        if best == 0.0 || !best.is_finite() {
            return Err(Error::Singular(format!(
                "lu pivot {best:.3e} at column {k}"
            )));
        }
        if pivot != k {
            perm.swap(k, pivot);
            for j in 0..n {
                let t = lu[(k, j)];
                lu[(k, j)] = lu[(pivot, j)];
                lu[(pivot, j)] = t;
            }
            for j in 0..m {
                let t = x[(k, j)];
                x[(k, j)] = x[(pivot, j)];
                x[(pivot, j)] = t;
            }
        }
        let inv = 1.0 / lu[(k, k)];
        for i in k + 1..n {
            let f = lu[(i, k)] * inv;
            lu[(i, k)] = f;
            if f != 0.0 {
                for j in k + 1..n {
                    lu[(i, j)] -= f * lu[(k, j)];
                }
                for j in 0..m {
                    x[(i, j)] -= f * x[(k, j)];
                }
            }
        }
    }
    // back substitution
    for j in 0..m {
        for i in (0..n).rev() {
            let mut sum = x[(i, j)];
            for k in i + 1..n {
                sum -= lu[(i, k)] * x[(k, j)];
            }
            x[(i, j)] = sum / lu[(i, i)];
        }
    }
    Ok(x)
}

/// Solves `l l^T x = b` given the lower Cholesky factor `l`.
pub fn cholesky_solve(l: &Matrix, b: &Matrix) -> Matrix {
    let n = l.rows();
    let m = b.cols();
    let mut x = b.clone();
    for j in 0..m {
        for i in 0..n {
            let mut sum = x[(i, j)];
            for k in 0..i {
                sum -= l[(i, k)] * x[(k, j)];
            }
            x[(i, j)] = sum / l[(i, i)];
        }
        for i in (0..n).rev() {
            let mut sum = x[(i, j)];
            for k in i + 1..n {
                sum -= l[(k, i)] * x[(k, j)];
            }
            x[(i, j)] = sum / l[(i, i)];
        }
    }
    x
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Returns `(eigenvalues, eigenvectors)` sorted by descending eigenvalue,
/// eigenvectors as columns.
pub fn symmetric_eigen(a: &Matrix) -> (Vec<f64>, Matrix) {
    assert_eq!(a.rows(), a.cols(), "symmetric_eigen: matrix must be square");
    let n = a.rows();
    let mut m = a.clone();
    let mut v = Matrix::identity(n);

    let scale: f64 = m
        .data()
        .iter()
        .map(|x| x.abs())
        .fold(0.0, f64::max)
        .max(1e-300);
    let tol = 1e-14 * scale;

    for _sweep in 0..100 {
        let mut off = 0.0f64;
        for i in 0..n {
            for j in i + 1..n {
                off = off.max(m[(i, j)].abs());
            }
        }
        if off <= tol {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[(p, q)];
                if apq.abs() <= tol * 1e-2 {
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (theta * theta + 1.0).sqrt())
                } else {
                    -1.0 / (-theta + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;

                for k in 0..n {
                    let mkp = m[(k, p)];
                    let mkq = m[(k, q)];
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[(p, k)];
                    let mqk = m[(q, k)];
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[(j, j)].total_cmp(&m[(i, i)]));
    let values: Vec<f64> = order.iter().map(|&i| m[(i, i)]).collect();
    let vectors = Matrix::from_fn(n, n, |i, j| v[(i, order[j])]);
    (values, vectors)
}

/// Projects a symmetric matrix to the nearest positive semi-definite matrix
/// by clipping negative eigenvalues at zero.
pub fn clip_to_psd(a: &Matrix) -> Matrix {
    let (values, vectors) = symmetric_eigen(a);
    let n = a.rows();
    let mut out = Matrix::zeros(n, n);
    for (k, &lambda) in values.iter().enumerate() {
        let lam = lambda.max(0.0);
        if lam == 0.0 {
            continue;
        }
        for i in 0..n {
            let vik = vectors[(i, k)] * lam;
            for j in 0..n {
                out[(i, j)] += vik * vectors[(j, k)];
            }
        }
    }
    // exact symmetry despite accumulated roundoff
    for i in 0..n {
        for j in 0..i {
            let avg = 0.5 * (out[(i, j)] + out[(j, i)]);
            out[(i, j)] = avg;
            out[(j, i)] = avg;
        }
    }
    out
}

/// Symmetric square root `V diag(sqrt(max(lambda,0))) V^T`.
pub fn psd_sqrt(a: &Matrix) -> Matrix {
    let (values, vectors) = symmetric_eigen(a);
    let n = a.rows();
    let mut out = Matrix::zeros(n, n);
    for (k, &lambda) in values.iter().enumerate() {
        let lam = lambda.max(0.0).sqrt();
        if lam == 0.0 {
            continue;
        }
        for i in 0..n {
            let vik = vectors[(i, k)] * lam;
            for j in 0..n {
                out[(i, j)] += vik * vectors[(j, k)];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spd_test_matrix(n: usize) -> Matrix {
        // G G^T + n I is symmetric positive definite
        let g = Matrix::from_fn(n, n, |i, j| ((i * 31 + j * 17) % 13) as f64 / 13.0 - 0.4);
        let mut a = g.matmul_transpose(&g);
        for i in 0..n {
            a[(i, i)] += n as f64;
        }
        a
    }

    #[test]
    fn cholesky_reconstructs() {
        let a = spd_test_matrix(6);
        let l = cholesky(&a).unwrap();
        let back = l.matmul_transpose(&l);
        assert!(back.max_abs_diff(&a) < 1e-10);
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let a = Matrix::from_vec(2, 2, vec![1.0, 2.0, 2.0, 1.0]);
        assert!(cholesky(&a).is_err());
    }

    #[test]
    fn lu_solve_recovers_known_solution() {
        let a = Matrix::from_vec(3, 3, vec![2.0, 1.0, -1.0, -3.0, -1.0, 2.0, -2.0, 1.0, 2.0]);
        let x_true = Matrix::from_vec(3, 2, vec![2.0, 1.0, 3.0, -1.0, -1.0, 0.5]);
        let b = a.matmul(&x_true);
        let x = lu_solve(&a, &b).unwrap();
        assert!(x.max_abs_diff(&x_true) < 1e-12);
    }

    #[test]
    fn cholesky_solve_matches_lu() {
        let a = spd_test_matrix(5);
        let b = Matrix::from_fn(5, 3, |i, j| (i + j) as f64 * 0.3 - 1.0);
        let l = cholesky(&a).unwrap();
        let x1 = cholesky_solve(&l, &b);
        let x2 = lu_solve(&a, &b).unwrap();
        assert!(x1.max_abs_diff(&x2) < 1e-9);
    }

    #[test]
    fn jacobi_eigen_diagonalizes() {
        let a = spd_test_matrix(7);
        let (values, vectors) = symmetric_eigen(&a);
        // A V = V diag(values)
        let av = a.matmul(&vectors);
        let vd = Matrix::from_fn(7, 7, |i, j| vectors[(i, j)] * values[j]);
        assert!(av.max_abs_diff(&vd) < 1e-9);
        // columns orthonormal
        let vtv = vectors.transpose_matmul(&vectors);
        assert!(vtv.max_abs_diff(&Matrix::identity(7)) < 1e-10);
        // descending order
        for w in values.windows(2) {
            assert!(w[0] >= w[1] - 1e-12);
        }
    }

    #[test]
    fn clip_to_psd_fixes_indefinite_matrix() {
        let a = Matrix::from_vec(2, 2, vec![1.0, 2.0, 2.0, 1.0]);
        let p = clip_to_psd(&a);
        let (values, _) = symmetric_eigen(&p);
        assert!(values.iter().all(|&v| v >= -1e-12));
        // eigenvalues of a are 3 and -1; clipping keeps the 3-eigenspace
        assert!((values[0] - 3.0).abs() < 1e-10);
        assert!(values[1].abs() < 1e-10);
    }

    #[test]
    fn psd_sqrt_squares_back() {
        let a = spd_test_matrix(4);
        let r = psd_sqrt(&a);
        assert!(r.matmul(&r).max_abs_diff(&a) < 1e-9);
    }
}
