//! Relative reconstruction error of SVD, CP and Tucker-2 factorizations
//! as the retained rank grows.
//!
//! `cargo run --example decompose`

use elastic_compress::linalg::{cp_fit, svd_full, tucker2_fit, tucker2_max_ranks, Matrix, Tensor4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn main() -> elastic_compress::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut normal = move || -> f64 { StandardNormal.sample(&mut rng) };

    let w = Matrix::from_fn(24, 16, |i, j| ((i as f64 * 0.3).sin() * (j as f64 * 0.2).cos()) + 0.05 * normal());
    let svd = svd_full(&w, 16)?;
    let cp = cp_fit(&w, 16, 50)?;
    // CP components are not nested: truncating a rank-16 fit differs from
    // fitting at the smaller rank directly.
    println!("dense 24x16");
    for k in [1, 2, 4, 8, 16] {
        let e_svd = svd.reconstruct(k).sub(&w)?.frobenius_norm() / w.frobenius_norm();
        let e_cp = cp.reconstruct(k).sub(&w)?.frobenius_norm() / w.frobenius_norm();
        let e_refit = cp_fit(&w, k, 50)?.reconstruct(k).sub(&w)?.frobenius_norm() / w.frobenius_norm();
        println!("  k {k:>2}: svd {e_svd:.4}  cp truncated {e_cp:.4}  cp refit {e_refit:.4}");
    }

    let t = Tensor4::from_fn(16, 8, 3, 3, |o, i, y, x| ((o + 2 * i) as f64 * 0.1).sin() * (1.0 + 0.2 * (y * x) as f64) + 0.05 * normal());
    let (ro_max, ri_max) = tucker2_max_ranks(&t);
    println!("conv 16x8x3x3 (max ranks {ro_max}, {ri_max})");
    for (ro, ri) in [(1, 1), (2, 2), (4, 4), (8, 8), (ro_max, ri_max)] {
        let f = tucker2_fit(&t, ro, ri, 20)?;
        let rec = f.reconstruct();
        let num: f64 = rec.data().iter().zip(t.data()).map(|(a, b)| (a - b) * (a - b)).sum();
        let den: f64 = t.data().iter().map(|v| v * v).sum();
        println!("  ranks ({ro:>2}, {ri}): {:.4}", (num / den).sqrt());
    }
    Ok(())
}
