use serde::{Deserialize, Serialize};

use super::matrix::{dot, norm2};
use super::Matrix;
use crate::error::{Error, Result};

const MAX_SWEEPS: usize = 80;

/// Thin SVD `W ≈ U diag(σ) Vᵀ` truncated to a maximal rank.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SvdFactors {
    pub u: Matrix,
    #[serde(with = "super::blob")]
    pub sigma: Vec<f64>,
    pub v: Matrix,
}

impl SvdFactors {
    pub fn rank(&self) -> usize {
        self.sigma.len()
    }

    /// `U_{:,1:k} diag(σ_{1:k}) V_{:,1:k}ᵀ`.
    pub fn reconstruct(&self, k: usize) -> Matrix {
        let k = k.min(self.rank());
        let (m, n) = (self.u.rows(), self.v.rows());
        let mut out = Matrix::zeros(m, n);
        let data = out.data_mut();
        for j in 0..k {
            let s = self.sigma[j];
            if s == 0.0 {
                continue;
            }
            for i in 0..m {
                let a = self.u.get(i, j) * s;
                if a == 0.0 {
                    continue;
                }
                let row = &mut data[i * n..(i + 1) * n];
                for (c, r) in row.iter_mut().enumerate() {
                    *r += a * self.v.get(c, j);
                }
            }
        }
        out
    }
}

/// Thin SVD keeping the top `k_max` singular triplets.
///
/// One-sided (Hestenes) cyclic Jacobi: columns of the working copy are rotated
/// until pairwise orthogonal, which is the Jacobi eigen-iteration on the Gram
/// matrix `WᵀW` carried out without forming it. Singular values come back
/// sorted non-increasing with ties kept in column order.
pub fn svd_full(w: &Matrix, k_max: usize) -> Result<SvdFactors> {
    let (m, n) = w.shape();
    if k_max > m.min(n) {
        return Err(Error::RankTooLarge { rank: k_max, max: m.min(n) });
    }
    if !w.is_finite() {
        return Err(Error::NonFinite("svd input".into()));
    }
    if m < n {
        let t = svd_full(&w.transpose(), k_max)?;
        return Ok(SvdFactors { u: t.v, sigma: t.sigma, v: t.u });
    }

    // Column-major working storage.
    let mut a: Vec<Vec<f64>> = (0..n).map(|j| w.col(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();

    let tol = m as f64 * f64::EPSILON;
    // Columns below this squared norm are numerically null.
    let floor = {
        let fro2: f64 = a.iter().map(|c| dot(c, c)).sum();
        fro2 * f64::EPSILON * f64::EPSILON
    };
    let mut converged = n < 2;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n.saturating_sub(1) {
            for q in p + 1..n {
                let alpha = dot(&a[p], &a[p]);
                let beta = dot(&a[q], &a[q]);
                let gamma = dot(&a[p], &a[q]);
                if gamma == 0.0 || alpha <= floor || beta <= floor || gamma.abs() <= tol * alpha.sqrt() * beta.sqrt() {
                    continue;
                }
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
        return Err(Error::NoConvergence { routine: "svd_full", iterations: MAX_SWEEPS });
    }

    let norms: Vec<f64> = a.iter().map(|c| norm2(c)).collect();
    let mut order: Vec<usize> = (0..n).collect();
    // Stable sort: equal singular values keep column order.
    order.sort_by(|&i, &j| norms[j].partial_cmp(&norms[i]).expect("finite norms"));
    let order = &order[..k_max];

    let sigma: Vec<f64> = order.iter().map(|&j| norms[j]).collect();
    let scale = sigma.first().copied().unwrap_or(0.0);
    let tiny = scale * (m.max(n) as f64) * f64::EPSILON;

    let mut u_cols: Vec<Option<Vec<f64>>> = order
        .iter()
        .map(|&j| {
            if norms[j] > tiny && norms[j] > 0.0 {
                Some(a[j].iter().map(|x| x / norms[j]).collect())
            } else {
                None
            }
        })
        .collect();
    complete_basis(m, &mut u_cols);
    let u_cols: Vec<Vec<f64>> = u_cols.into_iter().map(|c| c.expect("completed")).collect();
    let v_cols: Vec<Vec<f64>> = order.iter().map(|&j| v[j].clone()).collect();

    Ok(SvdFactors {
        u: Matrix::from_columns(m, &u_cols),
        sigma,
        v: Matrix::from_columns(n, &v_cols),
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

/// Fills `None` slots with unit vectors orthogonal to every other column
/// (modified Gram–Schmidt against the standard basis, in index order).
fn complete_basis(m: usize, cols: &mut [Option<Vec<f64>>]) {
    let mut candidate = 0usize;
    for slot in 0..cols.len() {
        if cols[slot].is_some() {
            continue;
        }
        while candidate < m {
            let mut e = vec![0.0; m];
            e[candidate] = 1.0;
            candidate += 1;
            for _ in 0..2 {
                for c in cols.iter().flatten() {
                    let d = dot(&e, c);
                    for (x, y) in e.iter_mut().zip(c) {
                        *x -= d * y;
                    }
                }
            }
            let nrm = norm2(&e);
            if nrm > 1e-8 {
                cols[slot] = Some(e.into_iter().map(|x| x / nrm).collect());
                break;
            }
        }
    }
}

/// Largest singular value computed exactly through [`svd_full`].
pub fn spectral_norm_exact(w: &Matrix) -> Result<f64> {
    if w.rows() == 0 || w.cols() == 0 {
        return Ok(0.0);
    }
    Ok(svd_full(w, 1)?.sigma[0])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_has_unit_spectrum() {
        let f = svd_full(&Matrix::identity(3), 3).unwrap();
        assert_eq!(f.sigma, vec![1.0, 1.0, 1.0]);
        assert!(f.reconstruct(3).max_abs_diff(&Matrix::identity(3)) < 1e-10);
    }

    #[test]
    fn diagonal_truncation() {
        let w = Matrix::from_diag(&[5.0, 3.0, 1.0]);
        let f = svd_full(&w, 2).unwrap();
        assert!((f.sigma[0] - 5.0).abs() < 1e-12 && (f.sigma[1] - 3.0).abs() < 1e-12);
        let resid = w.sub(&f.reconstruct(2)).unwrap();
        assert!((spectral_norm_exact(&resid).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn wide_and_rank_deficient_inputs() {
        let w = Matrix::from_fn(2, 5, |i, j| (i + 1) as f64 * (j as f64 - 2.0));
        let f = svd_full(&w, 2).unwrap();
        assert!(f.sigma[1].abs() < 1e-12);
        assert!(f.u.orthonormality_defect() < 1e-12);
        assert!(f.v.orthonormality_defect() < 1e-12);
        assert!(f.reconstruct(2).max_abs_diff(&w) < 1e-12);
    }

    #[test]
    fn rank_above_min_dimension_is_rejected() {
        assert!(matches!(
            svd_full(&Matrix::zeros(3, 2), 3),
            Err(Error::RankTooLarge { .. })
        ));
    }

    #[test]
    fn zero_matrix_gets_orthonormal_basis() {
        let f = svd_full(&Matrix::zeros(4, 3), 3).unwrap();
        assert_eq!(f.sigma, vec![0.0; 3]);
        assert!(f.u.orthonormality_defect() < 1e-12);
    }
}
