use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
#[allow(unused_imports)] // inherent f64 methods replace the trait in std builds
use num_traits::Float;

use crate::error::{Error, Result};
use crate::nn::Matrix;

/// Sparse n x Q design matrix stored as per-row `(column, value)` entries.
///
/// Categorical blocks hold exactly one unit entry per row; longitudinal
/// blocks hold powers of the measurement time. Rows may be empty for
/// observations whose level is outside the training universe, which makes
/// their random-effect contribution exactly zero.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SparseIndicator {
    n: usize,
    q: usize,
    rows: Vec<Vec<(usize, f64)>>,
}

impl SparseIndicator {
    pub fn from_rows(q: usize, rows: Vec<Vec<(usize, f64)>>) -> Result<Self> {
        for (i, row) in rows.iter().enumerate() {
            for &(col, _) in row {
                if col >= q {
                    return Err(Error::InvalidArgument(format!(
                        "row {i} references column {col}, but Q = {q}"
                    )));
                }
            }
        }
        Ok(SparseIndicator {
            n: rows.len(),
            q,
            rows,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn row(&self, i: usize) -> &[(usize, f64)] {
        &self.rows[i]
    }

    /// `Z * dense`, where `dense` is Q x p.
    pub fn matmul_dense(&self, dense: &Matrix) -> Matrix {
        assert_eq!(dense.rows(), self.q, "sparse matmul: Q mismatch");
        let mut out = Matrix::zeros(self.n, dense.cols());
        for (i, row) in self.rows.iter().enumerate() {
            let out_row = out.row_mut(i);
            for &(col, val) in row {
                for (o, &d) in out_row.iter_mut().zip(dense.row(col)) {
                    *o += val * d;
                }
            }
        }
        out
    }

    /// `Z^T * dense`, where `dense` is n x p; the result is Q x p.
    pub fn transpose_matmul_dense(&self, dense: &Matrix) -> Matrix {
        assert_eq!(
            dense.rows(),
            self.n,
            "sparse transpose matmul: row mismatch"
        );
        let mut out = Matrix::zeros(self.q, dense.cols());
        for (i, row) in self.rows.iter().enumerate() {
            let d_row = dense.row(i);
            for &(col, val) in row {
                for (o, &d) in out.row_mut(col).iter_mut().zip(d_row) {
                    *o += val * d;
                }
            }
        }
        out
    }

    /// `Z^T * Z` as a dense Q x Q matrix.
    pub fn gram(&self) -> Matrix {
        let mut out = Matrix::zeros(self.q, self.q);
        for row in &self.rows {
            for &(ci, vi) in row {
                for &(cj, vj) in row {
                    out[(ci, cj)] += vi * vj;
                }
            }
        }
        out
    }

    pub fn to_dense(&self) -> Matrix {
        let mut out = Matrix::zeros(self.n, self.q);
        for (i, row) in self.rows.iter().enumerate() {
            for &(col, val) in row {
                out[(i, col)] += val;
            }
        }
        out
    }

    /// Rows selected by `indices`, in order.
    pub fn gather_rows(&self, indices: &[usize]) -> SparseIndicator {
        let rows = indices.iter().map(|&i| self.rows[i].clone()).collect();
        SparseIndicator {
            n: indices.len(),
            q: self.q,
            rows,
        }
    }

    /// Horizontal stacking: columns of `other` appended after `self`'s.
    pub fn hstack(&self, other: &SparseIndicator) -> SparseIndicator {
        assert_eq!(self.n, other.n, "hstack: row counts must agree");
        let rows = self
            .rows
            .iter()
            .zip(&other.rows)
            .map(|(a, b)| {
                let mut row = a.clone();
                row.extend(b.iter().map(|&(c, v)| (c + self.q, v)));
                row
            })
            .collect();
        SparseIndicator {
            n: self.n,
            q: self.q + other.q,
            rows,
        }
    }
}

fn indicator_from_levels(levels: &[Option<usize>], q: usize) -> Result<SparseIndicator> {
    let mut rows = Vec::with_capacity(levels.len());
    for (i, level) in levels.iter().enumerate() {
        match level {
            Some(j) if *j >= q => {
                return Err(Error::InvalidArgument(format!(
                    "row {i} has level {j}, but cardinality is {q}"
                )))
            }
            Some(j) => rows.push(vec![(*j, 1.0)]),
            None => rows.push(Vec::new()),
        }
    }
    Ok(SparseIndicator {
        n: levels.len(),
        q,
        rows,
    })
}

/// Indicator design for categorical features: one block per feature,
/// horizontally stacked, each row holding a single 1 per block at its
/// level's offset column. `None` levels contribute an empty row slot.
pub fn build_categorical_z(
    level_ids: &[Vec<Option<usize>>],
    cardinalities: &[usize],
) -> Result<SparseIndicator> {
    assert_eq!(
        level_ids.len(),
        cardinalities.len(),
        "one id vector per feature"
    );
    assert!(
        !level_ids.is_empty(),
        "need at least one categorical feature"
    );
    let mut z = indicator_from_levels(&level_ids[0], cardinalities[0])?;
    for (ids, &q) in level_ids.iter().zip(cardinalities).skip(1) {
        if ids.len() != level_ids[0].len() {
            return Err(Error::Shape("all id vectors must have equal length".into()));
        }
        z = z.hstack(&indicator_from_levels(ids, q)?);
    }
    Ok(z)
}

/// Longitudinal design: `poly_terms` horizontally stacked blocks of `q`
/// subject columns, where block k carries `t^k` at the subject's column
/// (block 0 is the plain indicator).
pub fn build_longitudinal_z(
    subject_ids: &[Option<usize>],
    times: &[f64],
    q: usize,
    poly_terms: usize,
) -> Result<SparseIndicator> {
    if poly_terms == 0 {
        return Err(Error::InvalidArgument(
            "poly_terms must be at least 1".into(),
        ));
    }
    if subject_ids.len() != times.len() {
        return Err(Error::Shape(
            "subject_ids and times must have equal length".into(),
        ));
    }
    let mut rows = Vec::with_capacity(subject_ids.len());
    for (i, (level, &t)) in subject_ids.iter().zip(times).enumerate() {
        if !t.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "time at row {i} is not finite"
            )));
        }
        match level {
            Some(j) if *j >= q => {
                return Err(Error::InvalidArgument(format!(
                    "row {i} has subject {j}, but q = {q}"
                )))
            }
            Some(j) => {
                let mut row = Vec::with_capacity(poly_terms);
                for k in 0..poly_terms {
                    let w = if k == 0 { 1.0 } else { t.powi(k as i32) };
                    if w != 0.0 {
                        row.push((k * q + j, w));
                    }
                }
                rows.push(row);
            }
            None => rows.push(Vec::new()),
        }
    }
    Ok(SparseIndicator {
        n: subject_ids.len(),
        q: q * poly_terms,
        rows,
    })
}
