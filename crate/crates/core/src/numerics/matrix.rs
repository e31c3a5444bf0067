//! Dense row-major `f64` matrices.
//!
//! Only the handful of products the dense-network code needs are provided.
//! Every loop runs in a fixed index order so results are bit-reproducible.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Builds a matrix from row-major data, rejecting bad lengths and
    /// non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::non_finite(format!(
                "matrix entry ({}, {}) is {}",
                pos / cols.max(1),
                pos % cols.max(1),
                data[pos]
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    /// Skips the finiteness check; used for intermediate results whose
    /// finiteness is checked by callers (loss evaluation).
    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Returns a new matrix made of the given rows, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &r in idx {
            data.extend_from_slice(self.row(r));
        }
        Self::from_raw(idx.len(), self.cols, data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_raw(
            self.rows,
            self.cols,
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }

    /// `self · rhs`, where `rhs` is given as a `(inner, cols)` row-major slice.
    pub(crate) fn matmul_slice(&self, rhs: &[f64], rhs_cols: usize) -> Self {
        let inner = self.cols;
        debug_assert_eq!(rhs.len(), inner * rhs_cols);
        let mut out = vec![0.0; self.rows * rhs_cols];
        for i in 0..self.rows {
            let out_row = &mut out[i * rhs_cols..(i + 1) * rhs_cols];
            for k in 0..inner {
                let a = self.data[i * inner + k];
                let rhs_row = &rhs[k * rhs_cols..(k + 1) * rhs_cols];
                for (o, &b) in out_row.iter_mut().zip(rhs_row) {
                    *o += a * b;
                }
            }
        }
        Self::from_raw(self.rows, rhs_cols, out)
    }

    /// `selfᵀ · rhs`, flattened row-major into a `(self.cols, rhs.cols)` buffer.
    pub(crate) fn t_matmul(&self, rhs: &Matrix) -> Vec<f64> {
        debug_assert_eq!(self.rows, rhs.rows);
        let mut out = vec![0.0; self.cols * rhs.cols];
        for r in 0..self.rows {
            let a_row = self.row(r);
            let b_row = rhs.row(r);
            for (i, &a) in a_row.iter().enumerate() {
                let out_row = &mut out[i * rhs.cols..(i + 1) * rhs.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `self · rhsᵀ`, where `rhs` is a `(rhs_rows, self.cols)` row-major slice.
    pub(crate) fn matmul_t_slice(&self, rhs: &[f64], rhs_rows: usize) -> Self {
        let inner = self.cols;
        debug_assert_eq!(rhs.len(), rhs_rows * inner);
        let mut out = vec![0.0; self.rows * rhs_rows];
        for i in 0..self.rows {
            let a_row = self.row(i);
            for j in 0..rhs_rows {
                let b_row = &rhs[j * inner..(j + 1) * inner];
                out[i * rhs_rows + j] = a_row.iter().zip(b_row).map(|(a, b)| a * b).sum();
            }
        }
        Self::from_raw(self.rows, rhs_rows, out)
    }

    /// Column sums, used for bias gradients.
    pub(crate) fn col_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (o, v) in out.iter_mut().zip(self.row(r)) {
                *o += v;
            }
        }
        out
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
}
