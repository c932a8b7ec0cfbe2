//! Dense and Chord-sparse matrix containers plus the chain algebra.
//!
//! The canonical product order of a chain is `W1 * W2 * ... * WM`; applied
//! to a dense right operand the chain folds right-to-left.

use std::sync::Arc;

use crate::chord::SparsityPattern;
use crate::error::{Result, SfError};

/// Row-major dense matrix of f64.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(SfError::ShapeMismatch(format!(
                "expected {} values for {rows}x{cols}, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// Dense product, cache-friendly i-k-j loop order.
    pub fn matmul(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        if self.cols != other.rows {
            return Err(SfError::ShapeMismatch(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = DenseMatrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }
}

/// A sparsity pattern plus a flat value array in row-major sorted-column
/// order. Stored entries may hold explicit zeros.
#[derive(Debug, Clone)]
pub struct SparseSquareMatrix {
    pattern: Arc<SparsityPattern>,
    values: Vec<f64>,
}

impl SparseSquareMatrix {
    pub fn new(pattern: Arc<SparsityPattern>, values: Vec<f64>) -> Result<Self> {
        if values.len() != pattern.nnz() {
            return Err(SfError::ShapeMismatch(format!(
                "expected {} stored values, got {}",
                pattern.nnz(),
                values.len()
            )));
        }
        Ok(Self { pattern, values })
    }

    /// Chord matrix with ones on the diagonal and explicit zeros elsewhere.
    pub fn identity_valued(pattern: Arc<SparsityPattern>) -> Self {
        let mut values = vec![0.0; pattern.nnz()];
        for i in 0..pattern.n() {
            values[pattern.value_index(i, i).unwrap()] = 1.0;
        }
        Self { pattern, values }
    }

    pub fn pattern(&self) -> &Arc<SparsityPattern> {
        &self.pattern
    }

    pub fn n(&self) -> usize {
        self.pattern.n()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn to_dense(&self) -> DenseMatrix {
        let n = self.n();
        let mut out = DenseMatrix::zeros(n, n);
        for i in 0..n {
            let base = self.pattern.row_start(i);
            for (p, &j) in self.pattern.row(i).iter().enumerate() {
                out.set(i, j, self.values[base + p]);
            }
        }
        out
    }
}

/// Sparse-times-dense product `w * d`, cost O(nnz(w) * d.cols).
pub fn spmm_dense(w: &SparseSquareMatrix, d: &DenseMatrix) -> Result<DenseMatrix> {
    let n = w.n();
    if d.rows() != n {
        return Err(SfError::ShapeMismatch(format!(
            "spmm {n}x{n} by {}x{}",
            d.rows(),
            d.cols()
        )));
    }
    let cols = d.cols();
    let mut out = DenseMatrix::zeros(n, cols);
    let pattern = w.pattern.as_ref();
    for i in 0..n {
        let base = pattern.row_start(i);
        let out_row = out.row_mut(i);
        for (p, &j) in pattern.row(i).iter().enumerate() {
            let v = w.values[base + p];
            if v == 0.0 {
                continue;
            }
            let d_row = d.row(j);
            for (o, &x) in out_row.iter_mut().zip(d_row) {
                *o += v * x;
            }
        }
    }
    Ok(out)
}

/// Dense-times-sparse product `d * w`, cost O(nnz(w) * d.rows).
pub fn dense_spmm(d: &DenseMatrix, w: &SparseSquareMatrix) -> Result<DenseMatrix> {
    let n = w.n();
    if d.cols() != n {
        return Err(SfError::ShapeMismatch(format!(
            "matmul {}x{} by sparse {n}x{n}",
            d.rows(),
            d.cols()
        )));
    }
    let mut out = DenseMatrix::zeros(d.rows(), n);
    let pattern = w.pattern.as_ref();
    for r in 0..d.rows() {
        let d_row = d.row(r);
        let out_row = out.row_mut(r);
        for k in 0..n {
            let a = d_row[k];
            if a == 0.0 {
                continue;
            }
            let base = pattern.row_start(k);
            for (p, &j) in pattern.row(k).iter().enumerate() {
                out_row[j] += a * w.values[base + p];
            }
        }
    }
    Ok(out)
}

/// Transposed-sparse-times-dense product `w^T * d`, cost O(nnz(w) * d.cols).
pub fn spmm_transpose_dense(w: &SparseSquareMatrix, d: &DenseMatrix) -> Result<DenseMatrix> {
    let n = w.n();
    if d.rows() != n {
        return Err(SfError::ShapeMismatch(format!(
            "spmm_t {n}x{n} by {}x{}",
            d.rows(),
            d.cols()
        )));
    }
    let cols = d.cols();
    let mut out = DenseMatrix::zeros(n, cols);
    let pattern = w.pattern.as_ref();
    for i in 0..n {
        let base = pattern.row_start(i);
        for (p, &j) in pattern.row(i).iter().enumerate() {
            let v = w.values[base + p];
            if v == 0.0 {
                continue;
            }
            let d_row = d.row(i);
            let out_row = out.row_mut(j);
            for (o, &x) in out_row.iter_mut().zip(d_row) {
                *o += v * x;
            }
        }
    }
    Ok(out)
}

/// Ordered list of same-pattern sparse square factors; the chain's product
/// is `W1 * W2 * ... * WM`.
#[derive(Debug, Clone)]
pub struct FactorChain {
    factors: Vec<SparseSquareMatrix>,
}

impl FactorChain {
    pub fn new(factors: Vec<SparseSquareMatrix>) -> Result<Self> {
        if factors.is_empty() {
            return Err(SfError::InvalidInput("a chain needs at least one factor".into()));
        }
        let first = factors[0].pattern().clone();
        for f in &factors[1..] {
            if !Arc::ptr_eq(f.pattern(), &first) && f.pattern().as_ref() != first.as_ref() {
                return Err(SfError::InvalidInput(
                    "all chain factors must share one pattern".into(),
                ));
            }
        }
        Ok(Self { factors })
    }

    pub fn m(&self) -> usize {
        self.factors.len()
    }

    pub fn n(&self) -> usize {
        self.factors[0].n()
    }

    pub fn pattern(&self) -> &Arc<SparsityPattern> {
        self.factors[0].pattern()
    }

    pub fn factors(&self) -> &[SparseSquareMatrix] {
        &self.factors
    }

    pub fn factors_mut(&mut self) -> &mut [SparseSquareMatrix] {
        &mut self.factors
    }

    pub fn nnz_total(&self) -> usize {
        self.m() * self.pattern().nnz()
    }

    pub fn is_finite(&self) -> bool {
        self.factors.iter().all(|f| f.is_finite())
    }

    /// Apply the chain to a dense right operand: `W1 * (W2 * (... * (WM * d)))`.
    pub fn apply(&self, d: &DenseMatrix) -> Result<DenseMatrix> {
        let mut acc = spmm_dense(self.factors.last().unwrap(), d)?;
        for w in self.factors.iter().rev().skip(1) {
            acc = spmm_dense(w, &acc)?;
        }
        Ok(acc)
    }
}

/// Materialize the chain product as a dense matrix.
pub fn chain_materialize(chain: &FactorChain) -> DenseMatrix {
    if chain.m() == 1 {
        return chain.factors[0].to_dense();
    }
    chain.apply(&DenseMatrix::identity(chain.n())).expect("square chain applies to identity")
}

/// Frobenius-norm error `sqrt(sum (x - xhat)^2)`. Not squared.
pub fn fro_err(x: &DenseMatrix, xhat: &DenseMatrix) -> Result<f64> {
    if x.rows() != xhat.rows() || x.cols() != xhat.cols() {
        return Err(SfError::ShapeMismatch(format!(
            "fro_err {}x{} vs {}x{}",
            x.rows(),
            x.cols(),
            xhat.rows(),
            xhat.cols()
        )));
    }
    let sum: f64 = x
        .data()
        .iter()
        .zip(xhat.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sum.sqrt())
}

/// Frobenius norm of a single matrix.
pub fn fro_norm(x: &DenseMatrix) -> f64 {
    x.data().iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Row `i` of the chain product without materializing it:
/// start from the sparse row of `W1` and push through `W2..WM`,
/// O(M * nnz-per-row-chain).
pub fn row_of_product(chain: &FactorChain, i: usize) -> Result<Vec<f64>> {
    let n = chain.n();
    if i >= n {
        return Err(SfError::IndexOutOfRange { index: i, size: n });
    }
    let pattern = chain.pattern().as_ref();
    let mut v = vec![0.0; n];
    let first = &chain.factors[0];
    let base = pattern.row_start(i);
    for (p, &j) in pattern.row(i).iter().enumerate() {
        v[j] += first.values()[base + p];
    }
    for w in &chain.factors[1..] {
        let mut next = vec![0.0; n];
        for (k, &a) in v.iter().enumerate() {
            if a == 0.0 {
                continue;
            }
            let base = pattern.row_start(k);
            for (p, &j) in pattern.row(k).iter().enumerate() {
                next[j] += a * w.values()[base + p];
            }
        }
        v = next;
    }
    Ok(v)
}
