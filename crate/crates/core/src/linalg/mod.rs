//! Dense numerical kernels: matrices, rank-4 kernels, SVD, power iteration,
//! Tucker-2 and CP fitting.
//!
//! Everything here is a pure function of its inputs. Randomized routines take
//! an explicit seed.

pub(crate) mod blob;
mod conv;
mod cp;
mod matrix;
mod nnls;
mod power;
mod solve;
mod svd;
mod tensor;
mod tucker;

pub use conv::{
    conv2d, conv2d_kernel_grad, conv2d_transpose, conv_operator_matrix, conv_operator_norm,
    ConvGeometry,
};
pub use cp::{cp_fit, cp_fit_trace, CpFactors};
pub use matrix::{dot, norm2, Matrix};
pub use nnls::nnls;
pub use power::{
    power_iterate, spectral_norm, PowerEstimate, DEFAULT_POWER_ITERS, POWER_TOL,
    TRAINING_POWER_STEPS,
};
pub use power::random_unit;
pub use solve::{lstsq, solve_spd};
pub use svd::{spectral_norm_exact, svd_full, SvdFactors};
pub use tensor::Tensor4;
pub use tucker::{tucker2_fit, tucker2_fit_trace, tucker2_max_ranks, Tucker2Factors};

/// Spectral-gap hinge `Σ_i max(0, σ_i − σ_{i+1} − δ)`.
pub fn spectral_gap_penalty(sigma: &[f64], delta: f64) -> f64 {
    sigma.windows(2).map(|p| (p[0] - p[1] - delta).max(0.0)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gap_penalty_cases() {
        assert_eq!(spectral_gap_penalty(&[3.0, 3.0, 3.0], 0.1), 0.0);
        assert_eq!(spectral_gap_penalty(&[5.0, 1.0], 0.5), 3.5);
        assert_eq!(spectral_gap_penalty(&[2.0, 1.0, 0.0], 1.0), 0.0);
        assert_eq!(spectral_gap_penalty(&[], 1.0), 0.0);
    }
}
