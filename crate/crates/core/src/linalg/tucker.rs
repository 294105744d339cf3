use serde::{Deserialize, Serialize};

use super::{svd_full, Matrix, Tensor4};
use crate::error::{Error, Result};

/// Channel-only Tucker-2 factors: `W ≈ core ×_out U_out ×_in U_in`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tucker2Factors {
    pub u_out: Matrix,
    pub core: Tensor4,
    pub u_in: Matrix,
}

impl Tucker2Factors {
    pub fn ranks(&self) -> (usize, usize) {
        (self.u_out.cols(), self.u_in.cols())
    }

    /// Leading `(r_o, r_i)` block of the decomposition.
    pub fn truncated(&self, r_o: usize, r_i: usize) -> Tucker2Factors {
        let (ro_max, ri_max) = self.ranks();
        let (r_o, r_i) = (r_o.min(ro_max), r_i.min(ri_max));
        let c = &self.core;
        let core = Tensor4::from_fn(r_o, r_i, c.h, c.w, |a, b, y, x| c.get(a, b, y, x));
        Tucker2Factors {
            u_out: self.u_out.leading_columns(r_o),
            core,
            u_in: self.u_in.leading_columns(r_i),
        }
    }

    pub fn reconstruct(&self) -> Tensor4 {
        self.core
            .mode_out_product(&self.u_out)
            .and_then(|t| t.mode_in_product(&self.u_in))
            .expect("factor shapes are consistent")
    }
}

/// HOSVD initialization followed by `sweeps` rounds of alternating
/// orthogonal least squares (HOOI).
pub fn tucker2_fit(w: &Tensor4, r_o: usize, r_i: usize, sweeps: usize) -> Result<Tucker2Factors> {
    Ok(tucker2_fit_trace(w, r_o, r_i, sweeps)?.0)
}

/// Like [`tucker2_fit`] but also returns the relative Frobenius error after
/// initialization and after each sweep.
pub fn tucker2_fit_trace(
    w: &Tensor4,
    r_o: usize,
    r_i: usize,
    sweeps: usize,
) -> Result<(Tucker2Factors, Vec<f64>)> {
    let (max_o, max_i) = tucker2_max_ranks(w);
    if r_o == 0 || r_o > max_o {
        return Err(Error::RankTooLarge { rank: r_o, max: max_o });
    }
    if r_i == 0 || r_i > max_i {
        return Err(Error::RankTooLarge { rank: r_i, max: max_i });
    }
    let norm = w.frobenius_norm().max(f64::MIN_POSITIVE);

    let mut u_out = leading_left(&w.unfold_out(), r_o)?;
    let mut u_in = leading_left(&w.unfold_in(), r_i)?;
    let mut factors = assemble(w, &u_out, &u_in)?;
    let mut errors = vec![rel_error(w, &factors, norm)?];

    for _ in 0..sweeps {
        let partial = w.mode_in_product(&u_in.transpose())?;
        u_out = leading_left(&partial.unfold_out(), r_o)?;
        let partial = w.mode_out_product(&u_out.transpose())?;
        u_in = leading_left(&partial.unfold_in(), r_i)?;
        factors = assemble(w, &u_out, &u_in)?;
        errors.push(rel_error(w, &factors, norm)?);
    }
    Ok((factors, errors))
}

/// Largest `(r_o, r_i)`: the ranks of the two channel unfoldings can not
/// exceed `min(C_o, C_i·h·w)` and `min(C_i, C_o·h·w)`.
pub fn tucker2_max_ranks(w: &Tensor4) -> (usize, usize) {
    let hw = w.h * w.w;
    (w.c_out.min(w.c_in * hw), w.c_in.min(w.c_out * hw))
}

fn leading_left(x: &Matrix, r: usize) -> Result<Matrix> {
    Ok(svd_full(x, r)?.u)
}

fn assemble(w: &Tensor4, u_out: &Matrix, u_in: &Matrix) -> Result<Tucker2Factors> {
    let core = w.mode_out_product(&u_out.transpose())?.mode_in_product(&u_in.transpose())?;
    Ok(Tucker2Factors { u_out: u_out.clone(), core, u_in: u_in.clone() })
}

fn rel_error(w: &Tensor4, f: &Tucker2Factors, norm: f64) -> Result<f64> {
    Ok(w.sub(&f.reconstruct())?.frobenius_norm() / norm)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lcg_tensor(c_out: usize, c_in: usize, h: usize, w: usize, seed: u64) -> Tensor4 {
        let mut s = seed;
        Tensor4::from_fn(c_out, c_in, h, w, |_, _, _, _| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) - 0.5
        })
    }

    #[test]
    fn full_rank_is_exact() {
        let w = lcg_tensor(4, 3, 3, 3, 5);
        let (f, errs) = tucker2_fit_trace(&w, 4, 3, 2).unwrap();
        assert!(errs.iter().all(|&e| e <= 1e-8));
        assert!(f.u_out.orthonormality_defect() < 1e-10);
        assert!(f.u_in.orthonormality_defect() < 1e-10);
    }

    #[test]
    fn sweeps_do_not_increase_error() {
        let w = lcg_tensor(6, 5, 3, 3, 9);
        let (_, errs) = tucker2_fit_trace(&w, 2, 3, 5).unwrap();
        for pair in errs.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-12, "{errs:?}");
        }
    }

    #[test]
    fn rank_above_channels_rejected() {
        let w = lcg_tensor(2, 2, 1, 1, 1);
        assert!(tucker2_fit(&w, 3, 1, 0).is_err());
        assert!(tucker2_fit(&w, 1, 3, 0).is_err());
    }
}
