use super::{lstsq, solve_spd, Matrix};
use crate::error::{Error, Result};

const MAX_OUTER: usize = 500;

fn residual_grad(a: &Matrix, b: &[f64], x: &[f64]) -> Result<Vec<f64>> {
    let ax = a.matvec(x)?;
    let r: Vec<f64> = b.iter().zip(&ax).map(|(b, y)| b - y).collect();
    a.t_matvec(&r)
}

fn solve_subset(a: &Matrix, b: &[f64], set: &[usize]) -> Result<Vec<f64>> {
    let sub = Matrix::from_fn(a.rows(), set.len(), |i, j| a.get(i, set[j]));
    match lstsq(&sub, b) {
        Ok(s) => Ok(s),
        Err(Error::InvalidArgument(_)) => {
            let gram = sub.t_matmul(&sub)?;
            let rhs = Matrix::column_vector(&sub.t_matvec(b)?);
            Ok(solve_spd(&gram, &rhs, 1e-12)?.into_data())
        }
        Err(e) => Err(e),
    }
}

/// `min ‖A x − b‖₂` subject to `x ≥ 0` (Lawson–Hanson active set).
pub fn nnls(a: &Matrix, b: &[f64]) -> Result<Vec<f64>> {
    let (m, n) = a.shape();
    if b.len() != m {
        return Err(Error::dims("nnls rhs length"));
    }
    let scale = a.max_abs().max(f64::MIN_POSITIVE) * b.iter().fold(0.0f64, |s, v| s.max(v.abs())).max(1.0);
    let tol = 1e-12 * scale * m.max(n) as f64;
    let mut x = vec![0.0; n];
    let mut passive = vec![false; n];
    let mut w = residual_grad(a, b, &x)?;
    for _ in 0..MAX_OUTER {
        let cand = (0..n).filter(|&j| !passive[j] && w[j] > tol).max_by(|&i, &j| w[i].total_cmp(&w[j]));
        let Some(j) = cand else { return Ok(x) };
        passive[j] = true;
        loop {
            let set: Vec<usize> = (0..n).filter(|&i| passive[i]).collect();
            let s_p = solve_subset(a, b, &set)?;
            let mut s = vec![0.0; n];
            for (&i, v) in set.iter().zip(&s_p) {
                s[i] = *v;
            }
            if set.iter().all(|&i| s[i] > 0.0) {
                x = s;
                break;
            }
            let alpha = set
                .iter()
                .filter(|&&i| s[i] <= 0.0)
                .map(|&i| x[i] / (x[i] - s[i]))
                .fold(f64::INFINITY, f64::min);
            for i in 0..n {
                x[i] += alpha * (s[i] - x[i]);
            }
            let xmax = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            for i in 0..n {
                if passive[i] && x[i] <= 1e-14 * xmax {
                    passive[i] = false;
                    x[i] = 0.0;
                }
            }
            if !passive.iter().any(|&p| p) {
                break;
            }
        }
        w = residual_grad(a, b, &x)?;
    }
    Err(Error::NoConvergence { routine: "nnls", iterations: MAX_OUTER })
}
