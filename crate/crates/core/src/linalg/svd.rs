//! One-sided (Hestenes) Jacobi SVD for small dense matrices.

use super::Matrix;
use crate::error::{MlaError, Result};

const MAX_SWEEPS: usize = 80;

/// Top singular triplets of a matrix: `m ≈ u · diag(s) · vᵀ`.
#[derive(Debug, Clone)]
pub struct SvdFactors {
    /// `rows × k`, orthonormal columns.
    pub u: Matrix,
    /// `k` singular values, non-negative and non-increasing.
    pub s: Vec<f64>,
    /// `cols × k`, orthonormal columns.
    pub v: Matrix,
}

impl SvdFactors {
    pub fn rank(&self) -> usize {
        self.s.len()
    }

    /// `u · diag(s) · vᵀ`
    pub fn reconstruct(&self) -> Matrix {
        let mut us = self.u.clone();
        for r in 0..us.rows() {
            for (x, s) in us.row_mut(r).iter_mut().zip(&self.s) {
                *x *= s;
            }
        }
        us.matmul_t(&self.v)
    }
}

/// Best rank-`rank` approximation factors of `m` in the Frobenius norm.
///
/// The sign of each singular pair is fixed so that the largest-magnitude
/// entry of every `u` column is positive (first such entry on ties).
pub fn truncated_svd(m: &Matrix, rank: usize) -> Result<SvdFactors> {
    let (rows, cols) = m.shape();
    let full = rows.min(cols);
    if rank == 0 || rank > full {
        return Err(MlaError::arg(format!(
            "svd rank {rank} out of range 1..={full} for a {rows}x{cols} matrix"
        )));
    }
    if !m.is_finite() {
        return Err(MlaError::arg("svd input has non-finite entries"));
    }
    let mut f = if rows >= cols {
        jacobi_tall(m)?
    } else {
        let t = jacobi_tall(&m.transpose())?;
        SvdFactors {
            u: t.v,
            s: t.s,
            v: t.u,
        }
    };
    fix_signs(&mut f);
    f.u = f.u.column_range(0, rank);
    f.v = f.v.column_range(0, rank);
    f.s.truncate(rank);
    Ok(f)
}

/// Full thin SVD of a matrix with `rows >= cols`.
fn jacobi_tall(m: &Matrix) -> Result<SvdFactors> {
    let (rows, n) = m.shape();
    // Work column-major: a[j] is column j of the evolving matrix A·V.
    let mut a: Vec<Vec<f64>> = (0..n).map(|j| (0..rows).map(|i| m[(i, j)]).collect()).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    let tol = f64::EPSILON * (rows as f64);
    // Columns below this squared norm are numerically null and left alone.
    let null = (f64::EPSILON * m.frobenius_norm()).powi(2);
    let mut converged = false;
    let mut worst = 0.0;
    for _ in 0..MAX_SWEEPS {
        worst = 0.0f64;
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = dot(&a[p], &a[p]);
                let beta = dot(&a[q], &a[q]);
                let gamma = dot(&a[p], &a[q]);
                if gamma == 0.0 || alpha <= null || beta <= null {
                    continue;
                }
                let off = gamma.abs() / (alpha * beta).sqrt();
                if !off.is_finite() || off <= tol {
                    continue;
                }
                worst = worst.max(off);
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut a, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(MlaError::Numerical {
            message: format!("jacobi svd did not converge in {MAX_SWEEPS} sweeps"),
            residual: worst,
        });
    }

    let norms: Vec<f64> = a.iter().map(|c| dot(c, c).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]).then(i.cmp(&j)));

    let s: Vec<f64> = order.iter().map(|&j| norms[j]).collect();
    let smax = s.first().copied().unwrap_or(0.0);
    let floor = smax * f64::EPSILON * (rows.max(n) as f64);

    // Left vectors from normalized columns; numerically null columns are
    // completed below so the basis stays orthonormal.
    let mut u_cols: Vec<Option<Vec<f64>>> = order
        .iter()
        .map(|&j| {
            (norms[j] > floor && norms[j] > 0.0)
                .then(|| a[j].iter().map(|x| x / norms[j]).collect())
        })
        .collect();
    orthonormalize(&mut u_cols, rows);

    let u = Matrix::from_fn(rows, n, |i, k| u_cols[k].as_ref().expect("completed")[i]);
    let vm = Matrix::from_fn(n, n, |i, k| v[order[k]][i]);
    Ok(SvdFactors { u, s, v: vm })
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

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Two passes of modified Gram-Schmidt over the present columns, then fills
/// missing columns from the standard basis.
fn orthonormalize(cols: &mut [Option<Vec<f64>>], dim: usize) {
    for k in 0..cols.len() {
        let Some(mut c) = cols[k].take() else { continue };
        for _ in 0..2 {
            for prev in cols[..k].iter().flatten() {
                let d = dot(prev, &c);
                c.iter_mut().zip(prev).for_each(|(x, p)| *x -= d * p);
            }
        }
        let n = dot(&c, &c).sqrt();
        if n > 0.5 {
            c.iter_mut().for_each(|x| *x /= n);
            cols[k] = Some(c);
        }
    }
    let mut basis = 0;
    for k in 0..cols.len() {
        while cols[k].is_none() {
            debug_assert!(basis < dim);
            let mut c = vec![0.0; dim];
            c[basis] = 1.0;
            basis += 1;
            for _ in 0..2 {
                for prev in cols.iter().flatten() {
                    let d = dot(prev, &c);
                    c.iter_mut().zip(prev).for_each(|(x, p)| *x -= d * p);
                }
            }
            let n = dot(&c, &c).sqrt();
            if n > 1e-3 {
                c.iter_mut().for_each(|x| *x /= n);
                cols[k] = Some(c);
            }
        }
    }
}

fn fix_signs(f: &mut SvdFactors) {
    for k in 0..f.s.len() {
        let mut best = 0.0f64;
        let mut sign = 1.0;
        for i in 0..f.u.rows() {
            let x = f.u[(i, k)];
            if x.abs() > best {
                best = x.abs();
                sign = x.signum();
            }
        }
        if sign < 0.0 {
            for i in 0..f.u.rows() {
                f.u[(i, k)] = -f.u[(i, k)];
            }
            for i in 0..f.v.rows() {
                f.v[(i, k)] = -f.v[(i, k)];
            }
        }
    }
}
