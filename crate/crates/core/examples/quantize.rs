//! Reconstruction error and storage of a truncated, quantized SVD layer
//! across ranks and bit-widths.
//!
//! `cargo run --example quantize -- [rows] [cols]`

use elastic_compress::cost::bytes_of;
use elastic_compress::elastic::{compress, full_weight, ElasticLayer, FactorBits};
use elastic_compress::linalg::Matrix;
use elastic_compress::quant::ClipMode;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn main() -> elastic_compress::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let m: usize = args.first().map_or(48, |s| s.parse().expect("rows"));
    let n: usize = args.get(1).map_or(32, |s| s.parse().expect("cols"));
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    // Decaying spectrum: a product of two thin Gaussian matrices plus noise.
    let a = Matrix::from_fn(m, 8, |_, _| StandardNormal.sample(&mut rng));
    let b = Matrix::from_fn(8, n, |_, _| StandardNormal.sample(&mut rng));
    let noise = Matrix::from_fn(m, n, |_, _| 0.1 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng));
    let w = a.matmul(&b)?.add(&noise)?;
    let layer = ElasticLayer::dense_svd(&w, 1, m.min(n))?;
    let reference = full_weight(&layer);
    let norm = w.frobenius_norm();

    print!("{:>4}", "k");
    for q in [None, Some(8u8), Some(6), Some(4), Some(2)] {
        print!("  {:>16}", q.map_or("float".into(), |q| format!("q={q}")));
    }
    println!();
    for k in [1, 2, 4, 8, 16, m.min(n)] {
        print!("{k:>4}");
        for q in [None, Some(8u8), Some(6), Some(4), Some(2)] {
            let bits = q.map(FactorBits::uniform);
            let c = compress(&layer, k, bits, ClipMode::MaxRange)?;
            let err = c.form.effective().sub(&reference)?.values().iter().map(|v| v * v).sum::<f64>().sqrt() / norm;
            print!("  {err:>8.4} {:>6}B", bytes_of(&layer, k, bits)?);
        }
        println!();
    }
    Ok(())
}
