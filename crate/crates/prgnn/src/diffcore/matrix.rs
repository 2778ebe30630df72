use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major matrix of f64. The universal carrier for node features,
/// adjacency, scores and parameters.
///
/// Invariant: `values.len() == rows * cols` and every entry is finite.
/// Constructors that take caller data enforce both.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix2D {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl Matrix2D {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "{}x{} matrix needs {} values, got {}",
                rows,
                cols,
                rows * cols,
                values.len()
            )));
        }
        let m = Matrix2D { rows, cols, values };
        m.check_finite()?;
        Ok(m)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix2D {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, v: f64) -> Self {
        Matrix2D {
            rows,
            cols,
            values: vec![v; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix2D::zeros(n, n);
        for i in 0..n {
            m.values[i * n + i] = 1.0;
        }
        m
    }

    pub fn scalar(v: f64) -> Self {
        Matrix2D {
            rows: 1,
            cols: 1,
            values: vec![v],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n_rows = rows.len();
        let n_cols = rows.first().map_or(0, Vec::len);
        let mut values = Vec::with_capacity(n_rows * n_cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != n_cols {
                return Err(Error::Dimension(format!(
                    "row {} has {} entries, expected {}",
                    i,
                    r.len(),
                    n_cols
                )));
            }
            values.extend_from_slice(r);
        }
        Matrix2D::new(n_rows, n_cols, values)
    }

    /// Column vector from a slice.
    pub fn column(values: &[f64]) -> Result<Self> {
        Matrix2D::new(values.len(), 1, values.to_vec())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        debug_assert!(r < self.rows && c < self.cols);
        self.values[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        debug_assert!(r < self.rows && c < self.cols);
        self.values[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.values[r * self.cols..(r + 1) * self.cols]
    }

    /// The single entry of a 1x1 matrix.
    pub fn scalar_value(&self) -> Result<f64> {
        if self.rows == 1 && self.cols == 1 {
            Ok(self.values[0])
        } else {
            Err(Error::Dimension(format!(
                "expected 1x1 scalar, got {}x{}",
                self.rows, self.cols
            )))
        }
    }

    pub fn transposed(&self) -> Matrix2D {
        let mut out = Matrix2D::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.values[c * self.rows + r] = self.values[r * self.cols + c];
            }
        }
        out
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.values.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::Numeric(format!(
                "non-finite entry {} at ({}, {}) in {}x{} matrix",
                self.values[i],
                i / self.cols.max(1),
                i % self.cols.max(1),
                self.rows,
                self.cols
            ))),
        }
    }

    pub fn max_abs_diff(&self, other: &Matrix2D) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// c += a * b, all row-major. The loop order keeps the inner loop over
/// contiguous rows of b and c so it vectorizes.
pub(crate) fn matmul_acc(a: &Matrix2D, b: &Matrix2D, c: &mut Matrix2D) {
    let (m, k) = a.shape();
    let n = b.cols();
    debug_assert_eq!(b.rows(), k);
    debug_assert_eq!(c.shape(), (m, n));
    for i in 0..m {
        let a_row = a.row(i);
        let c_row = c.row_mut(i);
        for (p, &aip) in a_row.iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let b_row = &b.values[p * n..(p + 1) * n];
            for j in 0..n {
                c_row[j] += aip * b_row[j];
            }
        }
    }
}

/// c += a * b^T.
pub(crate) fn matmul_nt_acc(a: &Matrix2D, b: &Matrix2D, c: &mut Matrix2D) {
    let (m, k) = a.shape();
    let n = b.rows();
    debug_assert_eq!(b.cols(), k);
    debug_assert_eq!(c.shape(), (m, n));
    for i in 0..m {
        let a_row = a.row(i);
        let c_row = c.row_mut(i);
        for j in 0..n {
            let b_row = b.row(j);
            let mut s = 0.0;
            for p in 0..k {
                s += a_row[p] * b_row[p];
            }
            c_row[j] += s;
        }
    }
}

/// c += a^T * b.
pub(crate) fn matmul_tn_acc(a: &Matrix2D, b: &Matrix2D, c: &mut Matrix2D) {
    let (k, m) = a.shape();
    let n = b.cols();
    debug_assert_eq!(b.rows(), k);
    debug_assert_eq!(c.shape(), (m, n));
    for p in 0..k {
        let a_row = a.row(p);
        let b_row = b.row(p);
        for (i, &api) in a_row.iter().enumerate() {
            if api == 0.0 {
                continue;
            }
            let c_row = c.row_mut(i);
            for j in 0..n {
                c_row[j] += api * b_row[j];
            }
        }
    }
}

pub(crate) fn matmul_new(a: &Matrix2D, b: &Matrix2D) -> Matrix2D {
    let mut c = Matrix2D::zeros(a.rows(), b.cols());
    matmul_acc(a, b, &mut c);
    c
}
