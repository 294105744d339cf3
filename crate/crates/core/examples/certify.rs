//! Compares the conservative and power-iteration certifiers on random
//! profiles of a briefly trained toy network.
//!
//! `cargo run --example certify -- [steps] [epsilon]`

use elastic_compress::certificate::{calibrate, diagnostics, Certifier, ProxyMode};
use elastic_compress::profile::{LayerSetting, Profile};
use elastic_compress::train::{synthetic_data, train_toy, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> elastic_compress::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let mut cfg = TrainConfig::default();
    cfg.steps = args.first().map_or(300, |s| s.parse().expect("steps"));
    let epsilon: f64 = args.get(1).map_or(0.5, |s| s.parse().expect("epsilon"));
    let (state, _) = train_toy(&cfg, cfg.seed)?;
    let net = &state.params.net;
    let (train, eval) = synthetic_data(&cfg.data, cfg.classes, cfg.seed);
    let stats = calibrate(net, &train.x[..512])?;

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let profiles: Vec<Profile> = (0..24)
        .map(|_| {
            Profile::new(
                net.blocks
                    .iter()
                    .map(|b| {
                        let k = rng.random_range(b.layer.k_min..=b.layer.k_max);
                        LayerSetting::new(k, net.bitmap.base(k))
                    })
                    .collect(),
            )
        })
        .collect();
    let probe = &eval.x[..400];
    let certifiers = [
        Certifier::conservative(net, &stats)?,
        Certifier::new(net, &stats, ProxyMode::power_iter(), &train.x[..128])?,
    ];
    for cert in &certifiers {
        let d = diagnostics(cert, &profiles, probe, epsilon)?;
        println!(
            "{:<12} coverage {:.1}%  pearson {}  dhat p95 {:.4}  bound p95 {:.4}  drift p95 {:.4}",
            cert.mode.name(),
            d.coverage_pct,
            d.correlation.map_or("n/a".into(), |c| format!("{c:.3}")),
            d.delta_hat_p95,
            d.pointwise_bound_p95,
            d.observed_drift_p95
        );
    }
    Ok(())
}
