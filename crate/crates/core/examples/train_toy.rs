//! Trains the toy model once per seed and prints the lattice evaluation.
//!
//! `cargo run --example train_toy -- [steps] [lambda_cert]`

use elastic_compress::train::{train_toy, TrainConfig, DEFAULT_SEEDS};

fn main() -> elastic_compress::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let mut cfg = TrainConfig::default();
    if let Some(s) = args.first() {
        cfg.steps = s.parse().expect("steps");
    }
    if let Some(l) = args.get(1) {
        cfg.weights.cert = l.parse().expect("lambda_cert");
    }
    for seed in DEFAULT_SEEDS {
        let start = std::time::Instant::now();
        let (_, rep) = train_toy(&cfg, seed)?;
        println!(
            "seed {seed}: loss {:.4} full acc {:.3} tiny viol {:.3} ({:.1}s)",
            rep.final_loss,
            rep.full_accuracy,
            rep.tiny_violation_rate,
            start.elapsed().as_secs_f64()
        );
        for p in &rep.lattice {
            println!(
                "  {:<5} {:<40} acc {:.3} lat {:.4} bytes {:>6} dhat {:.4} viol {:.3} drift {:.4}",
                p.name, p.profile_id, p.accuracy, p.latency_ms, p.bytes, p.delta_hat, p.violation_rate, p.mean_drift
            );
        }
        println!("  audit: {:?}", rep.audit);
    }
    Ok(())
}
