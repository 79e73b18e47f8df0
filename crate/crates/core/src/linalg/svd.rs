//! Truncated SVD by one-sided (Hestenes) Jacobi rotations.

use super::{dot, Matrix};
use crate::error::{Error, Result};

/// Sweep cap before reporting non-convergence.
pub const SVD_MAX_SWEEPS: usize = 100;
/// Relative off-diagonal tolerance `|<a_p, a_q>| / (|a_p| |a_q|)`.
pub const SVD_TOLERANCE: f64 = 1e-12;

/// Thin factorization `u · diag(singular_values) · vt`.
#[derive(Debug, Clone, PartialEq)]
pub struct Svd {
    /// `rows x rank`, orthonormal columns.
    pub u: Matrix,
    /// Nonincreasing, nonnegative.
    pub singular_values: Vec<f64>,
    /// `rank x cols`, orthonormal rows.
    pub vt: Matrix,
}

impl Svd {
    pub fn rank(&self) -> usize {
        self.singular_values.len()
    }

    pub fn reconstruct(&self) -> Matrix {
        let us = Matrix::from_fn(self.u.rows(), self.rank(), |i, j| {
            self.u.get(i, j) * self.singular_values[j]
        });
        super::matmul(&us, &self.vt).expect("svd factors are conformant")
    }

    /// `diag(singular_values) · vt`.
    pub fn scaled_vt(&self) -> Matrix {
        Matrix::from_fn(self.rank(), self.vt.cols(), |i, j| {
            self.singular_values[i] * self.vt.get(i, j)
        })
    }
}

/// Best rank-`rank` approximation of `m` in Frobenius norm.
pub fn truncated_svd(m: &Matrix, rank: usize) -> Result<Svd> {
    let min_dim = m.rows().min(m.cols());
    if rank == 0 || rank > min_dim {
        return Err(Error::Argument(format!(
            "rank {rank} out of range 1..={min_dim} for {} matrix",
            m.shape_str()
        )));
    }
    m.ensure_finite("truncated_svd")?;

    if m.rows() >= m.cols() {
        let full = jacobi_tall(m)?;
        Ok(truncate(full, rank))
    } else {
        // m = (mᵀ)ᵀ = (U S Vᵀ)ᵀ = V S Uᵀ
        let t = jacobi_tall(&m.transpose())?;
        let swapped = Svd {
            u: t.vt.transpose(),
            singular_values: t.singular_values,
            vt: t.u.transpose(),
        };
        Ok(truncate(swapped, rank))
    }
}

fn truncate(svd: Svd, rank: usize) -> Svd {
    Svd {
        u: svd.u.slice_cols(0, rank),
        singular_values: svd.singular_values[..rank].to_vec(),
        vt: svd.vt.slice_rows(0, rank),
    }
}

/// Full thin SVD of a matrix with `rows >= cols`.
fn jacobi_tall(m: &Matrix) -> Result<Svd> {
    let (rows, cols) = m.shape();
    // column-major working copies
    let mut a: Vec<Vec<f64>> = (0..cols).map(|j| m.column(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..cols)
        .map(|j| (0..cols).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    let mut converged = false;
    let mut residual = 0.0;
    for _ in 0..SVD_MAX_SWEEPS {
        residual = 0.0_f64;
        for p in 0..cols {
            for q in p + 1..cols {
                let alpha = dot(&a[p], &a[p]);
                let beta = dot(&a[q], &a[q]);
                let gamma = dot(&a[p], &a[q]);
                if alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                let rel = gamma.abs() / (alpha * beta).sqrt();
                residual = residual.max(rel);
                if rel <= SVD_TOLERANCE {
                    continue;
                }
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut a, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if residual <= SVD_TOLERANCE {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Convergence {
            sweeps: SVD_MAX_SWEEPS,
            residual,
        });
    }

    let mut order: Vec<(f64, usize)> = a
        .iter()
        .enumerate()
        .map(|(j, col)| (dot(col, col).sqrt(), j))
        .collect();
    order.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));

    let sigma_max = order.first().map_or(0.0, |o| o.0);
    let cutoff = sigma_max * f64::EPSILON * rows as f64;

    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(cols);
    let mut singular_values = Vec::with_capacity(cols);
    let mut pending = Vec::new();
    for (slot, &(sigma, j)) in order.iter().enumerate() {
        if sigma > cutoff && sigma > 0.0 {
            u_cols.push(a[j].iter().map(|x| x / sigma).collect());
            singular_values.push(sigma);
        } else {
            // numerically zero: fill the slot with an orthonormal completion later
            u_cols.push(vec![0.0; rows]);
            singular_values.push(0.0);
            pending.push(slot);
        }
    }
    for slot in pending {
        u_cols[slot] = orthonormal_completion(&u_cols, slot, rows);
    }

    let u = Matrix::from_fn(rows, cols, |i, k| u_cols[k][i]);
    let vt = Matrix::from_fn(cols, cols, |k, i| v[order[k].1][i]);
    Ok(Svd {
        u,
        singular_values,
        vt,
    })
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    let (cp, cq) = (&mut lo[p], &mut hi[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (xp, xq) = (*x, *y);
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

/// A unit vector orthogonal to every other filled column, by Gram-Schmidt
/// over the standard basis.
fn orthonormal_completion(cols: &[Vec<f64>], slot: usize, rows: usize) -> Vec<f64> {
    let mut best = vec![0.0; rows];
    let mut best_norm = 0.0;
    for e in 0..rows {
        let mut cand = vec![0.0; rows];
        cand[e] = 1.0;
        // two passes of modified Gram-Schmidt for stability
        for _ in 0..2 {
            for (k, col) in cols.iter().enumerate() {
                if k == slot || col.iter().all(|&x| x == 0.0) {
                    continue;
                }
                let proj = dot(&cand, col);
                for (c, x) in cand.iter_mut().zip(col) {
                    *c -= proj * x;
                }
            }
        }
        let norm = dot(&cand, &cand).sqrt();
        if norm > best_norm {
            best_norm = norm;
            best = cand;
        }
        if norm > 0.5 {
            break;
        }
    }
    best.iter().map(|x| x / best_norm).collect()
}
