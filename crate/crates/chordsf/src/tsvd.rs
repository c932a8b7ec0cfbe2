//! Truncated SVD baseline and the equal-budget rank rule.
//!
//! The decomposition runs a cyclic Jacobi eigensolver on the Gram matrix
//! X^T X, which is deterministic and dependency-free. Left singular vectors
//! come from U_i = X v_i / sigma_i, with a Gram-Schmidt fill for a
//! numerically zero tail.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SfError};
use crate::matrix::DenseMatrix;

/// Top-r singular triplets of a square matrix.
#[derive(Debug, Clone)]
pub struct TsvdResult {
    pub u: DenseMatrix,
    pub singular_values: Vec<f64>,
    pub v: DenseMatrix,
    pub r: usize,
}

/// Stored-entry count of a rank-r two-factor approximation: `U` is N x r and
/// `H = diag(sigma) V^T` is r x N plus the r scales, so `2Nr + r`.
pub fn tsvd_nnz(n: usize, r: usize) -> usize {
    2 * n * r + r
}

/// Smallest rank whose stored-entry count `r(2n+1)` is at least
/// `nnz_budget`, capped at n.
pub fn rank_for_budget(n: usize, nnz_budget: usize) -> Result<usize> {
    let per_rank = 2 * n + 1;
    if nnz_budget < per_rank {
        return Err(SfError::InvalidInput(format!(
            "budget {nnz_budget} is below the cost {per_rank} of a single rank"
        )));
    }
    Ok(nnz_budget.div_ceil(per_rank).min(n))
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
/// Returns (eigenvalues, eigenvectors-as-columns), unsorted.
fn jacobi_eigh(sym: &DenseMatrix) -> (Vec<f64>, DenseMatrix) {
    let n = sym.rows();
    let mut a = sym.clone();
    let mut v = DenseMatrix::identity(n);
    let fro: f64 = a.data().iter().map(|x| x * x).sum::<f64>().sqrt();
    let tol = 1e-12 * fro.max(1e-300);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += a.get(p, q) * a.get(p, q);
            }
        }
        if (2.0 * off).sqrt() <= tol {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a.get(p, q);
                if apq.abs() <= tol / (n as f64) {
                    continue;
                }
                let app = a.get(p, p);
                let aqq = a.get(q, q);
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    -1.0 / (-theta + (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a.get(k, p);
                    let akq = a.get(k, q);
                    a.set(k, p, c * akp - s * akq);
                    a.set(k, q, s * akp + c * akq);
                }
                for k in 0..n {
                    let apk = a.get(p, k);
                    let aqk = a.get(q, k);
                    a.set(p, k, c * apk - s * aqk);
                    a.set(q, k, s * apk + c * aqk);
                }
                for k in 0..n {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }
    let eig = (0..n).map(|i| a.get(i, i)).collect();
    (eig, v)
}

/// Top-r singular triplets of a square matrix, F-norm optimal by
/// Eckart-Young. Sign convention: each right singular vector's
/// largest-magnitude entry is non-negative.
pub fn tsvd(x: &DenseMatrix, r: usize) -> Result<TsvdResult> {
    let n = x.rows();
    if x.cols() != n {
        return Err(SfError::InvalidDimension(format!(
            "tsvd needs a square matrix, got {}x{}",
            x.rows(),
            x.cols()
        )));
    }
    if r < 1 || r > n {
        return Err(SfError::InvalidInput(format!("rank {r} out of range 1..={n}")));
    }
    if !x.is_finite() {
        return Err(SfError::NumericFault("non-finite input to tsvd".into()));
    }
    let gram = x.transpose().matmul(x)?;
    let (eig, vecs) = jacobi_eigh(&gram);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig[b].partial_cmp(&eig[a]).unwrap());

    let mut u = DenseMatrix::zeros(n, r);
    let mut v = DenseMatrix::zeros(n, r);
    let mut sigma = Vec::with_capacity(r);
    let sigma_max = eig[order[0]].max(0.0).sqrt();
    for (col, &idx) in order.iter().take(r).enumerate() {
        let s = eig[idx].max(0.0).sqrt();
        sigma.push(s);
        let mut vcol: Vec<f64> = (0..n).map(|k| vecs.get(k, idx)).collect();
        // sign convention on v
        let mut best = 0;
        for (k, val) in vcol.iter().enumerate() {
            if val.abs() > vcol[best].abs() {
                best = k;
            }
        }
        if vcol[best] < 0.0 {
            for val in &mut vcol {
                *val = -*val;
            }
        }
        let ucol: Vec<f64> = if s > sigma_max * 1e-12 && s > 0.0 {
            (0..n)
                .map(|i| (0..n).map(|k| x.get(i, k) * vcol[k]).sum::<f64>() / s)
                .collect()
        } else {
            // null direction: fill with a unit vector orthogonal to the
            // columns already placed
            gram_schmidt_fill(&u, col, n)
        };
        for k in 0..n {
            v.set(k, col, vcol[k]);
            u.set(k, col, ucol[k]);
        }
    }
    Ok(TsvdResult { u, singular_values: sigma, v, r })
}

fn gram_schmidt_fill(u: &DenseMatrix, placed: usize, n: usize) -> Vec<f64> {
    for seed in 0..n {
        let mut cand = vec![0.0; n];
        cand[seed] = 1.0;
        for c in 0..placed {
            let dot: f64 = (0..n).map(|k| cand[k] * u.get(k, c)).sum();
            for k in 0..n {
                cand[k] -= dot * u.get(k, c);
            }
        }
        let norm: f64 = cand.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            for x in &mut cand {
                *x /= norm;
            }
            return cand;
        }
    }
    unreachable!("cannot complete an orthonormal basis")
}

/// `U * diag(sigma) * V^T`.
pub fn reconstruct(t: &TsvdResult) -> DenseMatrix {
    let n = t.u.rows();
    let mut out = DenseMatrix::zeros(n, n);
    for c in 0..t.r {
        let s = t.singular_values[c];
        if s == 0.0 {
            continue;
        }
        for i in 0..n {
            let us = t.u.get(i, c) * s;
            if us == 0.0 {
                continue;
            }
            let row = out.row_mut(i);
            for (j, slot) in row.iter_mut().enumerate() {
                *slot += us * t.v.get(j, c);
            }
        }
    }
    out
}

/// JSON manifest persisted next to the binary arrays.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TsvdManifest {
    pub n: usize,
    pub r: usize,
    pub singular_values: Vec<f64>,
}
