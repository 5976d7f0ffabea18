//! One-sided Jacobi SVD.
//!
//! Works on the thin factorization `m = u * diag(sigma) * v^T` with
//! singular values sorted descending. Matrices wider than tall are
//! transposed internally. Accuracy target is desk scale (dimensions up to
//! a couple thousand), where plane rotations are simple and accurate.

use super::Matrix;
use crate::error::{Result, SmolaError};

/// Sweep budget before giving up.
const MAX_SWEEPS: usize = 60;

/// Stop once the off-diagonal Frobenius mass of the implicit Gram matrix
/// drops below this fraction of its total Frobenius norm.
const CONVERGENCE_REL: f64 = 1e-12;

/// Per-pair rotation threshold, relative to the geometric mean of the two
/// column norms. Pairs below this are already orthogonal to working
/// precision and rotating them would only churn.
const ROTATION_REL: f64 = 1e-15;

/// Columns whose singular value falls below this fraction of the largest
/// carry no reliable direction; they are rebuilt by basis completion.
const DEGENERATE_REL: f64 = 1e-13;

/// Result of [`jacobi_svd`]: `singular_values` descending, `u` of shape
/// `(m.rows, k)` and `v` of shape `(m.cols, k)` with `k = min(rows, cols)`,
/// both with orthonormal columns.
#[derive(Debug, Clone)]
pub struct Svd {
    pub singular_values: Vec<f64>,
    pub u: Matrix,
    pub v: Matrix,
}

/// Computes the thin SVD of `m` by one-sided Jacobi rotations.
pub fn jacobi_svd(m: &Matrix) -> Result<Svd> {
    jacobi_svd_with_sweeps(m, MAX_SWEEPS)
}

pub(crate) fn jacobi_svd_with_sweeps(m: &Matrix, max_sweeps: usize) -> Result<Svd> {
    if m.rows() == 0 || m.cols() == 0 {
        return Err(SmolaError::EmptyInput { context: "jacobi_svd" });
    }
    let transposed = m.rows() < m.cols();
    let work = if transposed { m.transpose() } else { m.clone() };
    let (_, k) = work.shape();

    let mut u = work;
    let mut v = Matrix::identity(k);

    let mut converged = false;
    let mut last_off = 0.0;
    for _ in 0..max_sweeps {
        let mut col_norm_sq: Vec<f64> = (0..k).map(|j| column_dot(&u, j, j)).collect();
        let diag_sq: f64 = col_norm_sq.iter().map(|a| a * a).sum();
        let mut off_sq = 0.0;
        let mut rotated = false;

        for p in 0..k.saturating_sub(1) {
            for q in (p + 1)..k {
                let alpha = col_norm_sq[p];
                let beta = col_norm_sq[q];
                let gamma = column_dot(&u, p, q);
                off_sq += 2.0 * gamma * gamma;

                let threshold = ROTATION_REL * (alpha * beta).sqrt();
                if gamma.abs() <= threshold || gamma == 0.0 {
                    continue;
                }

                // Plane rotation annihilating the (p, q) Gram entry.
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_columns(&mut u, p, q, c, s);
                rotate_columns(&mut v, p, q, c, s);
                col_norm_sq[p] = alpha - t * gamma;
                col_norm_sq[q] = beta + t * gamma;
                rotated = true;
            }
        }

        last_off = off_sq.sqrt();
        let total = (diag_sq + off_sq).sqrt();
        converged = last_off <= CONVERGENCE_REL * total;
        if converged && !rotated {
            break;
        }
    }
    if !converged {
        return Err(SmolaError::SvdNonConvergence {
            off_diagonal: last_off,
        });
    }

    // Extract singular values, sort descending, normalize directions.
    let mut sigma: Vec<f64> = (0..k).map(|j| column_dot(&u, j, j).sqrt()).collect();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| sigma[b].partial_cmp(&sigma[a]).unwrap());
    u = permute_columns(&u, &order);
    v = permute_columns(&v, &order);
    sigma = order.iter().map(|&j| sigma[j]).collect();

    let sigma_max = sigma.first().copied().unwrap_or(0.0);
    let cutoff = sigma_max * DEGENERATE_REL;
    let mut degenerate = Vec::new();
    for (j, &s) in sigma.iter().enumerate() {
        if s > cutoff && s > 0.0 {
            scale_column(&mut u, j, 1.0 / s);
        } else {
            degenerate.push(j);
        }
    }
    // Numerically-zero columns carry no direction; rebuild them so u keeps
    // orthonormal columns even for rank-deficient input.
    for &j in &degenerate {
        complete_column(&mut u, j, &degenerate);
    }

    if transposed {
        Ok(Svd {
            singular_values: sigma,
            u: v,
            v: u,
        })
    } else {
        Ok(Svd {
            singular_values: sigma,
            u,
            v,
        })
    }
}

fn column_dot(m: &Matrix, a: usize, b: usize) -> f64 {
    let cols = m.cols();
    let data = m.data();
    let mut acc = 0.0;
    for r in 0..m.rows() {
        acc += data[r * cols + a] * data[r * cols + b];
    }
    acc
}

fn rotate_columns(m: &mut Matrix, p: usize, q: usize, c: f64, s: f64) {
    let cols = m.cols();
    let rows = m.rows();
    let data = m.data_mut();
    for r in 0..rows {
        let vp = data[r * cols + p];
        let vq = data[r * cols + q];
        data[r * cols + p] = c * vp - s * vq;
        data[r * cols + q] = s * vp + c * vq;
    }
}

fn scale_column(m: &mut Matrix, j: usize, factor: f64) {
    let cols = m.cols();
    let rows = m.rows();
    let data = m.data_mut();
    for r in 0..rows {
        data[r * cols + j] *= factor;
    }
}

fn permute_columns(m: &Matrix, order: &[usize]) -> Matrix {
    Matrix::from_fn(m.rows(), order.len(), |r, c| m.get(r, order[c]))
}

/// Replaces column `j` with a unit vector orthogonal to every column that is
/// not itself pending replacement. Candidates are canonical basis vectors;
/// the one with the largest residual after projection wins.
fn complete_column(u: &mut Matrix, j: usize, pending: &[usize]) {
    let rows = u.rows();
    let k = u.cols();
    let mut best: Option<(f64, Vec<f64>)> = None;
    for cand in 0..rows {
        let mut w = vec![0.0; rows];
        w[cand] = 1.0;
        // Two Gram-Schmidt passes for numerical orthogonality.
        for _ in 0..2 {
            for col in 0..k {
                if col != j && (!pending.contains(&col) || col < j) {
                    let mut dot = 0.0;
                    for r in 0..rows {
                        dot += w[r] * u.get(r, col);
                    }
                    for r in 0..rows {
                        w[r] -= dot * u.get(r, col);
                    }
                }
            }
        }
        let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
        if best.as_ref().is_none_or(|(b, _)| norm > *b) {
            best = Some((norm, w));
        }
        if norm > 0.9 {
            break;
        }
    }
    let (norm, w) = best.expect("at least one candidate basis vector");
    for r in 0..rows {
        u.set(r, j, w[r] / norm);
    }
}
