use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::matrix::norm2;
use super::solve::solve_spd;
use super::Matrix;
use crate::error::{Error, Result};

/// Initialization seed; fitting is a pure function of its inputs.
const CP_INIT_SEED: u64 = 0x5eed_c0de;

/// Rank-`r` CP factors of a matrix: `W ≈ Σ_j λ_j a1_j a2_jᵀ`.
///
/// Columns of `a1`/`a2` have unit ℓ2 norm and components are sorted by
/// non-increasing `lambda`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CpFactors {
    pub a1: Matrix,
    pub a2: Matrix,
    #[serde(with = "super::blob")]
    pub lambda: Vec<f64>,
}

impl CpFactors {
    pub fn rank(&self) -> usize {
        self.lambda.len()
    }

    /// Sum of the leading `k` components.
    pub fn reconstruct(&self, k: usize) -> Matrix {
        let k = k.min(self.rank());
        self.a1
            .leading_columns(k)
            .scale_columns(&self.lambda[..k])
            .matmul_t(&self.a2.leading_columns(k))
            .expect("factor shapes are consistent")
    }
}

/// Alternating least squares from a seeded Gaussian start.
pub fn cp_fit(w: &Matrix, r: usize, sweeps: usize) -> Result<CpFactors> {
    Ok(cp_fit_trace(w, r, sweeps)?.0)
}

/// Like [`cp_fit`], also returning the relative Frobenius error after each sweep.
pub fn cp_fit_trace(w: &Matrix, r: usize, sweeps: usize) -> Result<(CpFactors, Vec<f64>)> {
    let (d1, d2) = w.shape();
    if r == 0 || r > d1.min(d2) {
        return Err(Error::RankTooLarge { rank: r, max: d1.min(d2) });
    }
    if !w.is_finite() {
        return Err(Error::NonFinite("cp input".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(CP_INIT_SEED);
    let mut b = Matrix::from_fn(d2, r, |_, _| StandardNormal.sample(&mut rng));
    let mut a = Matrix::zeros(d1, r);
    let norm = w.frobenius_norm().max(f64::MIN_POSITIVE);
    let mut errors = Vec::with_capacity(sweeps);

    for _ in 0..sweeps.max(1) {
        // A = W B (BᵀB)⁻¹, then B = Wᵀ A (AᵀA)⁻¹.
        let gram = b.t_matmul(&b)?;
        a = solve_spd(&gram, &w.matmul(&b)?.transpose(), 1e-14)?.transpose();
        let gram = a.t_matmul(&a)?;
        b = solve_spd(&gram, &w.t_matmul(&a)?.transpose(), 1e-14)?.transpose();
        let approx = a.matmul_t(&b)?;
        errors.push(w.sub(&approx)?.frobenius_norm() / norm);
    }
    Ok((normalize(&a, &b), errors))
}

/// Moves all scale into `lambda` and sorts components by it.
fn normalize(a: &Matrix, b: &Matrix) -> CpFactors {
    let r = a.cols();
    let mut comps: Vec<(f64, Vec<f64>, Vec<f64>)> = (0..r)
        .map(|j| {
            let (ca, cb) = (a.col(j), b.col(j));
            let (na, nb) = (norm2(&ca), norm2(&cb));
            let unit = |c: Vec<f64>, n: f64| {
                if n > 0.0 {
                    c.into_iter().map(|x| x / n).collect()
                } else {
                    let mut e = vec![0.0; c.len()];
                    e[0] = 1.0;
                    e
                }
            };
            (na * nb, unit(ca, na), unit(cb, nb))
        })
        .collect();
    comps.sort_by(|x, y| y.0.partial_cmp(&x.0).expect("finite"));
    let a1 = Matrix::from_columns(a.rows(), &comps.iter().map(|c| c.1.clone()).collect::<Vec<_>>());
    let a2 = Matrix::from_columns(b.rows(), &comps.iter().map(|c| c.2.clone()).collect::<Vec<_>>());
    CpFactors { a1, a2, lambda: comps.into_iter().map(|c| c.0).collect() }
}
