//! Dense row-major `f64` matrices and the handful of operations the
//! attention code needs.
//!
//! Entries are finite except in additive masks, which may hold `-inf`.
//! Arithmetic entry points ([`matmul`], [`truncated_svd`], ...) reject
//! non-finite operands; [`row_softmax`] is the one consumer of masks.

mod svd;

pub use svd::{truncated_svd, Svd, SVD_MAX_SWEEPS, SVD_TOLERANCE};

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MatrixRepr", into = "MatrixRepr")]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

/// On-disk form: explicit shape plus row-major values.
#[derive(Serialize, Deserialize)]
struct MatrixRepr {
    shape: [usize; 2],
    data: Vec<f64>,
}

impl TryFrom<MatrixRepr> for Matrix {
    type Error = Error;

    fn try_from(r: MatrixRepr) -> Result<Self> {
        Matrix::new(r.shape[0], r.shape[1], r.data)
    }
}

impl From<Matrix> for MatrixRepr {
    fn from(m: Matrix) -> Self {
        MatrixRepr {
            shape: [m.rows, m.cols],
            data: m.data,
        }
    }
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            writeln!(f, "  {:?}", self.row(r))?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    /// Builds a matrix from row-major data. All entries must be finite.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(shape_err(
                "Matrix::new",
                format!("{rows}x{cols}"),
                format!("{} values", data.len()),
            ));
        }
        let m = Matrix { rows, cols, data };
        m.ensure_finite("Matrix::new")?;
        Ok(m)
    }

    /// Builds an additive mask: entries are `0` or `-inf`.
    pub fn additive_mask(rows: usize, cols: usize, allowed: impl Fn(usize, usize) -> bool) -> Self {
        Self::from_fn(rows, cols, |i, j| {
            if allowed(i, j) {
                0.0
            } else {
                f64::NEG_INFINITY
            }
        })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        Self::from_fn(n, n, |i, j| if i == j { values[i] } else { 0.0 })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
    }

    /// Builds a matrix from nested rows. An empty outer list yields `0x0`.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(shape_err(
                    "Matrix::from_rows",
                    format!("row 0 has {cols} columns"),
                    format!("row {i} has {}", r.len()),
                ));
            }
            data.extend_from_slice(r);
        }
        Matrix::new(rows.len(), cols, data)
    }

    /// A single-row matrix.
    pub fn row_vector(values: &[f64]) -> Result<Self> {
        Matrix::new(1, values.len(), values.to_vec())
    }

    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Matrix { rows, cols, data }
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

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|r| self.row(r).to_vec()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn ensure_finite(&self, op: &'static str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(idx) => Err(Error::NonFinite {
                op,
                row: idx / self.cols.max(1),
                col: idx % self.cols.max(1),
            }),
        }
    }

    pub fn shape_str(&self) -> String {
        format!("{}x{}", self.rows, self.cols)
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix::from_raw(
            self.rows,
            self.cols,
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }

    pub fn scale(&self, c: f64) -> Matrix {
        self.map(|v| v * c)
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with("add", other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with("sub", other, |a, b| a - b)
    }

    /// Entry-wise (Hadamard) product.
    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with("hadamard", other, |a, b| a * b)
    }

    fn zip_with(
        &self,
        op: &'static str,
        other: &Matrix,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(shape_err(op, self.shape_str(), other.shape_str()));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Matrix::from_raw(self.rows, self.cols, data))
    }

    /// Adds `bias` to every row.
    pub fn add_row_vector(&self, bias: &[f64]) -> Result<Matrix> {
        if bias.len() != self.cols {
            return Err(shape_err(
                "add_row_vector",
                self.shape_str(),
                format!("bias of length {}", bias.len()),
            ));
        }
        let mut out = self.clone();
        for r in 0..self.rows {
            for (v, b) in out.data[r * self.cols..(r + 1) * self.cols]
                .iter_mut()
                .zip(bias)
            {
                *v += b;
            }
        }
        Ok(out)
    }

    /// Applies `f` to each row independently.
    pub fn map_rows(&self, mut f: impl FnMut(&[f64]) -> Vec<f64>) -> Result<Matrix> {
        let mut data = Vec::with_capacity(self.data.len());
        let mut cols = None;
        for r in 0..self.rows {
            let out = f(self.row(r));
            match cols {
                None => cols = Some(out.len()),
                Some(c) if c != out.len() => {
                    return Err(shape_err(
                        "map_rows",
                        format!("{c} columns"),
                        format!("{} columns", out.len()),
                    ));
                }
                _ => {}
            }
            data.extend(out);
        }
        Ok(Matrix::from_raw(self.rows, cols.unwrap_or(self.cols), data))
    }

    /// Rows `start..end` as a new matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Matrix {
        assert!(
            start <= end && end <= self.rows,
            "row range {start}..{end} out of bounds"
        );
        Matrix::from_raw(
            end - start,
            self.cols,
            self.data[start * self.cols..end * self.cols].to_vec(),
        )
    }

    /// Columns `start..end` as a new matrix.
    pub fn slice_cols(&self, start: usize, end: usize) -> Matrix {
        assert!(
            start <= end && end <= self.cols,
            "column range {start}..{end} out of bounds"
        );
        Matrix::from_fn(self.rows, end - start, |i, j| self.get(i, start + j))
    }

    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix::from_raw(indices.len(), self.cols, data)
    }

    /// Appends the rows of `other` in place. Existing rows are left untouched;
    /// storage grows geometrically through `Vec`.
    pub fn append_rows(&mut self, other: &Matrix) -> Result<()> {
        if self.rows == 0 && self.data.is_empty() && self.cols == 0 {
            self.cols = other.cols;
        }
        if other.cols != self.cols {
            return Err(shape_err(
                "append_rows",
                self.shape_str(),
                other.shape_str(),
            ));
        }
        self.data.extend_from_slice(&other.data);
        self.rows += other.rows;
        Ok(())
    }

    /// Stacks matrices vertically.
    pub fn vstack(blocks: &[Matrix]) -> Result<Matrix> {
        let cols = blocks.first().map_or(0, |b| b.cols);
        let mut out = Matrix::zeros(0, cols);
        for b in blocks {
            out.append_rows(b)?;
        }
        Ok(out)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Largest entry-wise absolute difference. Shapes must agree.
    pub fn max_abs_diff(&self, other: &Matrix) -> Result<f64> {
        if self.shape() != other.shape() {
            return Err(shape_err(
                "max_abs_diff",
                self.shape_str(),
                other.shape_str(),
            ));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        matmul(self, other)
    }
}

/// Dense matrix product. Each output entry accumulates over the shared
/// dimension in index order, independently of how many rows `a` has.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(shape_err("matmul", a.shape_str(), b.shape_str()));
    }
    a.ensure_finite("matmul")?;
    b.ensure_finite("matmul")?;
    let (n, k, m) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let out_row = &mut out[i * m..(i + 1) * m];
        for (p, &aip) in a.row(i).iter().enumerate().take(k) {
            let b_row = b.row(p);
            for (o, &bpj) in out_row.iter_mut().zip(b_row) {
                *o += aip * bpj;
            }
        }
    }
    Ok(Matrix::from_raw(n, m, out))
}

/// `a · bᵀ` without materializing the transpose.
pub fn matmul_transpose_b(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(shape_err(
            "matmul_transpose_b",
            a.shape_str(),
            b.shape_str(),
        ));
    }
    a.ensure_finite("matmul_transpose_b")?;
    b.ensure_finite("matmul_transpose_b")?;
    Ok(Matrix::from_fn(a.rows, b.rows, |i, j| {
        dot(a.row(i), b.row(j))
    }))
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Softmax of every row, with the row maximum subtracted first.
///
/// `-inf` entries map to exactly zero. A row with no finite entry is a
/// fully masked query and is rejected.
pub fn row_softmax(m: &Matrix) -> Result<Matrix> {
    let mut data = Vec::with_capacity(m.data.len());
    for r in 0..m.rows {
        let row = m.row(r);
        if let Some(c) = row.iter().position(|v| v.is_nan() || *v == f64::INFINITY) {
            return Err(Error::NonFinite {
                op: "row_softmax",
                row: r,
                col: c,
            });
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(Error::DegenerateRow {
                row: r,
                reason: "every entry is -inf".into(),
            });
        }
        let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        data.extend(exps.into_iter().map(|e| e / sum));
    }
    Ok(Matrix::from_raw(m.rows, m.cols, data))
}

/// Column-wise concatenation `(B_1 ⋯ B_n)`.
pub fn concat_cols(blocks: &[Matrix]) -> Result<Matrix> {
    let Some(first) = blocks.first() else {
        return Err(Error::Argument(
            "concat_cols needs at least one block".into(),
        ));
    };
    let rows = first.rows;
    if let Some(bad) = blocks.iter().find(|b| b.rows != rows) {
        return Err(shape_err("concat_cols", first.shape_str(), bad.shape_str()));
    }
    let cols: usize = blocks.iter().map(|b| b.cols).sum();
    let mut data = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for b in blocks {
            data.extend_from_slice(b.row(r));
        }
    }
    Ok(Matrix::from_raw(rows, cols, data))
}

/// Inverse of [`concat_cols`]: splits `m` into consecutive column blocks.
pub fn split_cols(m: &Matrix, widths: &[usize]) -> Result<Vec<Matrix>> {
    let total: usize = widths.iter().sum();
    if total != m.cols {
        return Err(shape_err(
            "split_cols",
            m.shape_str(),
            format!("widths summing to {total}"),
        ));
    }
    let mut start = 0;
    Ok(widths
        .iter()
        .map(|&w| {
            let block = m.slice_cols(start, start + w);
            start += w;
            block
        })
        .collect())
}

/// Block-diagonal assembly with zeros off the blocks.
pub fn block_diag(blocks: &[Matrix]) -> Result<Matrix> {
    if blocks.is_empty() {
        return Err(Error::Argument(
            "block_diag needs at least one block".into(),
        ));
    }
    let rows: usize = blocks.iter().map(|b| b.rows).sum();
    let cols: usize = blocks.iter().map(|b| b.cols).sum();
    let mut out = Matrix::zeros(rows, cols);
    let (mut r0, mut c0) = (0, 0);
    for b in blocks {
        for i in 0..b.rows {
            let dst = (r0 + i) * cols + c0;
            out.data[dst..dst + b.cols].copy_from_slice(b.row(i));
        }
        r0 += b.rows;
        c0 += b.cols;
    }
    Ok(out)
}
