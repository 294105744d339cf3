//! Fits the non-negative latency and energy models on noisy synthetic
//! measurements and compares them with the planted coefficients.
//!
//! `cargo run --example cost_fit -- [rows] [noise_sigma]`

use elastic_compress::controller::{chain_menu, synthetic_device_table, Menu};
use elastic_compress::cost::{fit_cost_model, planted_model, Metric, SynthSpec};
use elastic_compress::train::{toy_network, TrainConfig};

fn main() -> elastic_compress::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let rows: usize = args.first().map_or(64, |s| s.parse().expect("rows"));
    let spec = SynthSpec { noise_sigma: args.get(1).map_or(0.03, |s| s.parse().expect("noise_sigma")), ..SynthSpec::default() };
    let net = toy_network(&TrainConfig::default())?;
    let menus: Vec<Menu> = net.blocks.iter().map(|b| chain_menu(&b.layer, &net.bitmap, 8)).collect();
    let table = synthetic_device_table(&net, &menus, "sim", rows, &spec)?;
    let planted = planted_model("sim", net.depth(), &spec);
    for (metric, truth) in [(Metric::LatencyMs, &planted.latency), (Metric::EnergyMj, &planted.energy)] {
        let fit = fit_cost_model(&net, &table, metric)?;
        println!("{metric:?}: {} rows, r2 {:.4}, mape {:.2}%", table.rows.len(), fit.r2, fit.mape);
        println!("  intercept {:.3e} (planted {:.3e})", fit.intercept, truth.intercept);
        for l in 0..net.depth() {
            println!(
                "  layer {l}: comp {:.3e} ({:.3e})  mem {:.3e} ({:.3e})",
                fit.comp[l], truth.comp[l], fit.mem[l], truth.mem[l]
            );
        }
    }
    Ok(())
}
