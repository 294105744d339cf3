//! Small dense solvers: Cholesky for SPD systems and Householder QR least
//! squares.

use super::Matrix;
use crate::error::{Error, Result};

/// Solves `A X = B` for symmetric positive (semi)definite `A`, adding a ridge
/// of `ridge · trace(A)/n` to the diagonal.
pub fn solve_spd(a: &Matrix, b: &Matrix, ridge: f64) -> Result<Matrix> {
    let n = a.rows();
    if a.cols() != n || b.rows() != n {
        return Err(Error::dims("solve_spd shapes"));
    }
    let trace: f64 = (0..n).map(|i| a.get(i, i)).sum();
    let shift = ridge * (trace / n.max(1) as f64).max(f64::MIN_POSITIVE);
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a.get(i, j);
            if i == j {
                s += shift;
            }
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if s <= 0.0 {
                    return Err(Error::invalid("matrix is not positive definite"));
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    let p = b.cols();
    let mut x = b.clone();
    for c in 0..p {
        // forward
        for i in 0..n {
            let mut s = x.get(i, c);
            for k in 0..i {
                s -= l[i * n + k] * x.get(k, c);
            }
            x.set(i, c, s / l[i * n + i]);
        }
        // backward
        for i in (0..n).rev() {
            let mut s = x.get(i, c);
            for k in i + 1..n {
                s -= l[k * n + i] * x.get(k, c);
            }
            x.set(i, c, s / l[i * n + i]);
        }
    }
    Ok(x)
}

/// Least-squares solution of `min ‖A x − b‖₂` via Householder QR.
/// Requires `rows ≥ cols` and full column rank.
pub fn lstsq(a: &Matrix, b: &[f64]) -> Result<Vec<f64>> {
    let (m, n) = a.shape();
    if b.len() != m {
        return Err(Error::dims("lstsq rhs length"));
    }
    if m < n {
        return Err(Error::Underdetermined { observations: m, unknowns: n });
    }
    let mut r = a.clone();
    let mut y = b.to_vec();
    for k in 0..n {
        let norm: f64 = (k..m).map(|i| r.get(i, k).powi(2)).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::invalid("rank-deficient least-squares system"));
        }
        let alpha = if r.get(k, k) > 0.0 { -norm } else { norm };
        let mut v: Vec<f64> = (k..m).map(|i| r.get(i, k)).collect();
        v[0] -= alpha;
        let vnorm2: f64 = v.iter().map(|x| x * x).sum();
        if vnorm2 == 0.0 {
            continue;
        }
        for j in k..n {
            let d: f64 = (k..m).map(|i| v[i - k] * r.get(i, j)).sum::<f64>() * 2.0 / vnorm2;
            for i in k..m {
                r.set(i, j, r.get(i, j) - d * v[i - k]);
            }
        }
        let d: f64 = (k..m).map(|i| v[i - k] * y[i]).sum::<f64>() * 2.0 / vnorm2;
        for i in k..m {
            y[i] -= d * v[i - k];
        }
    }
    let scale = (0..n).map(|i| r.get(i, i).abs()).fold(0.0, f64::max);
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let diag = r.get(i, i);
        if diag.abs() <= scale * 1e-13 {
            return Err(Error::invalid("rank-deficient least-squares system"));
        }
        let s: f64 = (i + 1..n).map(|j| r.get(i, j) * x[j]).sum();
        x[i] = (y[i] - s) / diag;
    }
    Ok(x)
}
