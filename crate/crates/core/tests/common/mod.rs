#![allow(dead_code)]

use elastic_compress::elastic::ElasticLayer;
use elastic_compress::export::Manifest;
use elastic_compress::linalg::Matrix;
use elastic_compress::network::{Activation, Block, Network};
use elastic_compress::profile::{LayerSetting, Profile};
use elastic_compress::cost::bytes_of;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn normal(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn gaussian(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| scale * normal(rng))
}

pub fn input(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| normal(rng)).collect()
}

/// ReLU/identity MLP with dense SVD layers, widths in `2..=max_width`.
pub fn random_pl_net(rng: &mut impl Rng, max_layers: usize, max_width: usize) -> Network {
    let depth = rng.random_range(1..=max_layers);
    let widths: Vec<usize> = (0..=depth).map(|_| rng.random_range(2..=max_width)).collect();
    let blocks = (0..depth)
        .map(|l| {
            let (n, m) = (widths[l], widths[l + 1]);
            let w = gaussian(rng, m, n, 1.0 / (n as f64).sqrt());
            let k_max = m.min(n);
            let bias = input(rng, m).into_iter().map(|b| 0.1 * b).collect();
            let layer = ElasticLayer::dense_svd(&w, 1, k_max).unwrap().with_bias(bias).unwrap();
            let act = if l + 1 == depth || rng.random_bool(0.25) { Activation::Identity } else { Activation::Relu };
            Block::new(layer, act)
        })
        .collect();
    Network::new(blocks).unwrap()
}

/// Random ranks with a mix of float and 2–8 bit factors.
pub fn random_profile(rng: &mut impl Rng, net: &Network) -> Profile {
    Profile::new(
        net.blocks
            .iter()
            .map(|b| {
                let k = rng.random_range(b.layer.k_min..=b.layer.k_max);
                if rng.random_bool(0.3) {
                    LayerSetting::float(k)
                } else {
                    LayerSetting::new(k, rng.random_range(2..=8))
                }
            })
            .collect(),
    )
}

/// Round-trip byte identity, payload sizes and ledger self-verification.
pub fn check_manifest_bytes(bytes: &[u8]) -> Result<(), String> {
    let m = Manifest::from_bytes(bytes).map_err(|e| e.to_string())?;
    let again = m.to_bytes().map_err(|e| e.to_string())?;
    if again != bytes {
        return Err("re-serialization is not byte-identical".into());
    }
    for p in &m.payloads {
        let net = m.network().map_err(|e| e.to_string())?;
        for lp in &p.layers {
            let layer = &net.blocks[lp.layer].layer;
            let expect = bytes_of(layer, lp.k, lp.q.map(|q| net.bitmap.factor_bits(q))).map_err(|e| e.to_string())?;
            if lp.bytes != expect {
                return Err(format!("payload {} layer {}: {} bytes, bytes_of says {expect}", p.profile_id, lp.layer, lp.bytes));
            }
        }
    }
    m.verify(1e-10).map_err(|e| e.to_string())?;
    Ok(())
}
