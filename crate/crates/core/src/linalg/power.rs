use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::matrix::norm2;
use super::Matrix;
use crate::error::{Error, Result};

/// Relative change at which power iteration stops early.
pub const POWER_TOL: f64 = 1e-9;
/// Default iteration cap for converged (certification-grade) estimates.
pub const DEFAULT_POWER_ITERS: usize = 100;
/// Step count used for cheap training-time proxies.
pub const TRAINING_POWER_STEPS: usize = 5;

/// Power-iteration estimate of `σ_max(w)`, deterministic given `seed`.
pub fn spectral_norm(w: &Matrix, iters: usize, seed: u64) -> Result<f64> {
    if iters == 0 {
        return Err(Error::invalid("power iteration needs at least one step"));
    }
    if w.data().iter().all(|&v| v == 0.0) {
        return Ok(0.0);
    }
    let start = random_unit(w.cols(), seed);
    let est = power_iterate(
        |x| w.matvec(x).expect("shape"),
        |y| w.t_matvec(y).expect("shape"),
        start,
        iters,
    );
    Ok(est.value)
}

#[derive(Clone, Debug)]
pub struct PowerEstimate {
    pub value: f64,
    /// Final right singular vector estimate, reusable as a warm start.
    pub vector: Vec<f64>,
    pub iterations: usize,
}

/// Power iteration on `AᵀA` for an operator given by its action and adjoint.
pub fn power_iterate(
    apply: impl Fn(&[f64]) -> Vec<f64>,
    apply_t: impl Fn(&[f64]) -> Vec<f64>,
    start: Vec<f64>,
    iters: usize,
) -> PowerEstimate {
    let mut v = start;
    let n0 = norm2(&v);
    if n0 == 0.0 {
        return PowerEstimate { value: 0.0, vector: v, iterations: 0 };
    }
    v.iter_mut().for_each(|x| *x /= n0);
    let mut value = norm2(&apply(&v));
    let mut done = 0;
    for it in 0..iters {
        let y = apply(&v);
        let mut z = apply_t(&y);
        let nz = norm2(&z);
        done = it + 1;
        if nz == 0.0 {
            value = 0.0;
            break;
        }
        z.iter_mut().for_each(|x| *x /= nz);
        v = z;
        let next = norm2(&apply(&v));
        let rel = (next - value).abs() / next.max(f64::MIN_POSITIVE);
        value = next;
        if rel < POWER_TOL {
            break;
        }
    }
    PowerEstimate { value, vector: v, iterations: done }
}

pub fn random_unit(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    let nv = norm2(&v);
    v.iter_mut().for_each(|x| *x /= nv);
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_case() {
        let w = Matrix::from_diag(&[4.0, 2.0]);
        assert!((spectral_norm(&w, 50, 7).unwrap() - 4.0).abs() < 1e-6);
    }

    #[test]
    fn zero_matrix_is_zero() {
        assert_eq!(spectral_norm(&Matrix::zeros(5, 5), 10, 1).unwrap(), 0.0);
    }

    #[test]
    fn zero_iterations_rejected() {
        assert!(spectral_norm(&Matrix::identity(2), 0, 1).is_err());
    }

    #[test]
    fn deterministic_given_seed() {
        let w = Matrix::from_fn(6, 4, |i, j| ((i * 7 + j * 3) % 5) as f64 - 2.0);
        let a = spectral_norm(&w, 3, 11).unwrap();
        let b = spectral_norm(&w, 3, 11).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }
}
