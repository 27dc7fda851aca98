//! Dense row-major matrices and the f64 reference linear algebra.
//!
//! Every quantized path in the crate is checked against these routines, so
//! they use a fixed summation order: output element `(i, j)` is accumulated
//! left to right over the inner index starting from `0.0`.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, domain_err, Result};

/// Row-major matrix of finite `f64` values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatF {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl MatF {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(dim_err(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(domain_err(format!("non-finite value at flat index {pos}")));
        }
        Ok(Self { rows, cols, data })
    }

    /// Construction for values produced by arithmetic on finite inputs.
    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::from_raw(rows, cols, vec![0.0; rows * cols])
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(dim_err("ragged rows"));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self::from_raw(rows, cols, data)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn col(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_raw(self.rows, self.cols, self.data.iter().map(|&v| f(v)).collect())
    }

    /// Rows `start..end` as a new matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Self {
        Self::from_raw(
            end - start,
            self.cols,
            self.data[start * self.cols..end * self.cols].to_vec(),
        )
    }

    /// Columns `start..end` as a new matrix.
    pub fn slice_cols(&self, start: usize, end: usize) -> Self {
        Self::from_fn(self.rows, end - start, |r, c| self.get(r, start + c))
    }

    pub fn vstack(parts: &[MatF]) -> Result<Self> {
        let cols = parts.first().map_or(0, MatF::cols);
        if parts.iter().any(|p| p.cols != cols) {
            return Err(dim_err("vstack: column counts differ"));
        }
        let rows = parts.iter().map(MatF::rows).sum();
        let data = parts.iter().flat_map(|p| p.data.iter().copied()).collect();
        Ok(Self::from_raw(rows, cols, data))
    }

    pub fn hstack(parts: &[MatF]) -> Result<Self> {
        let rows = parts.first().map_or(0, MatF::rows);
        if parts.iter().any(|p| p.rows != rows) {
            return Err(dim_err("hstack: row counts differ"));
        }
        let cols = parts.iter().map(MatF::cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(p.row(r));
            }
        }
        Ok(Self::from_raw(rows, cols, data))
    }

    pub fn add(&self, other: &MatF) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &MatF) -> Result<Self> {
        self.zip_with(other, |a, b| a - b)
    }

    fn zip_with(&self, other: &MatF, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape() != other.shape() {
            return Err(dim_err(format!(
                "elementwise op on {:?} and {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Self::from_raw(self.rows, self.cols, data))
    }

    /// Adds `v[c]` to every element of column `c`.
    pub fn add_row_vector(&self, v: &[f64]) -> Result<Self> {
        if v.len() != self.cols {
            return Err(dim_err(format!(
                "row vector of length {} for {} columns",
                v.len(),
                self.cols
            )));
        }
        let mut out = self.clone();
        for r in 0..self.rows {
            for (x, b) in out.row_mut(r).iter_mut().zip(v) {
                *x += b;
            }
        }
        Ok(out)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Rounds every entry through `f32`, the storage precision of a
    /// production-style output buffer.
    pub fn round_to_f32(&self) -> Self {
        self.map(|v| v as f32 as f64)
    }
}

/// `||a - b||_F / ||b||_F`, with `b` the reference. Returns the absolute error
/// when the reference is identically zero.
pub fn rel_frobenius_error(a: &MatF, reference: &MatF) -> Result<f64> {
    let diff = a.sub(reference)?.frobenius_norm();
    let denom = reference.frobenius_norm();
    Ok(if denom == 0.0 { diff } else { diff / denom })
}

/// Row-major integer matrix. `MatI8` carries quantized codes, `MatI32` raw
/// accumulators.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MatI<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

pub type MatI8 = MatI<i8>;
pub type MatI32 = MatI<i32>;

impl<T: Copy> MatI<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(dim_err(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// Reference product `a · b`.
pub fn matmul_f64(a: &MatF, b: &MatF) -> Result<MatF> {
    if a.cols != b.rows {
        return Err(dim_err(format!(
            "matmul {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let (m, n, p) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0; m * p];
    for i in 0..m {
        let acc = &mut out[i * p..(i + 1) * p];
        for k in 0..n {
            let aik = a.data[i * n + k];
            let brow = &b.data[k * p..(k + 1) * p];
            for (o, &bkj) in acc.iter_mut().zip(brow) {
                *o += aik * bkj;
            }
        }
    }
    Ok(MatF::from_raw(m, p, out))
}

/// Reference product `a · bᵀ`, the layout used by linear layers whose weight
/// is stored `out × in`.
pub fn matmul_nt(a: &MatF, b: &MatF) -> Result<MatF> {
    if a.cols != b.cols {
        return Err(dim_err(format!(
            "matmul_nt {}x{} by ({}x{})^T",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let (m, n, p) = (a.rows, a.cols, b.rows);
    let mut out = Vec::with_capacity(m * p);
    for i in 0..m {
        let arow = a.row(i);
        for j in 0..p {
            let brow = b.row(j);
            let mut acc = 0.0;
            for k in 0..n {
                acc += arow[k] * brow[k];
            }
            out.push(acc);
        }
    }
    Ok(MatF::from_raw(m, p, out))
}

/// Per-column minimum and maximum over all rows.
pub fn col_minmax(x: &MatF) -> Result<(Vec<f64>, Vec<f64>)> {
    if x.rows == 0 || x.cols == 0 {
        return Err(domain_err("col_minmax of an empty matrix"));
    }
    let mut mins = x.row(0).to_vec();
    let mut maxs = mins.clone();
    for r in 1..x.rows {
        for (c, &v) in x.row(r).iter().enumerate() {
            mins[c] = mins[c].min(v);
            maxs[c] = maxs[c].max(v);
        }
    }
    Ok((mins, maxs))
}
