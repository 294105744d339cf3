//! Calibrate, certify, fit a latency model and build a three-profile lattice
//! for the toy network, then serve a range of budgets from it.
//!
//! `cargo run --example pipeline -- [epsilon]` (defaults to the middle
//! profile's Δ̂)

use elastic_compress::certificate::{calibrate, Certifier};
use elastic_compress::controller::{
    build_lattice, chain_menu, menu_terms, profile_metrics, select_runtime, synthetic_device_table, BudgetToken,
    CostModels, Menu,
};
use elastic_compress::cost::{fit_cost_model, Metric, SynthSpec};
use elastic_compress::profile::Profile;
use elastic_compress::train::{synthetic_data, toy_network, TrainConfig};

fn main() -> elastic_compress::Result<()> {
    let cfg = TrainConfig::default();
    let net = toy_network(&cfg)?;
    let (train, _) = synthetic_data(&cfg.data, cfg.classes, cfg.seed);
    let stats = calibrate(&net, &train.x[..256])?;
    let cert = Certifier::conservative(&net, &stats)?;

    let menus: Vec<Menu> = net.blocks.iter().map(|b| chain_menu(&b.layer, &net.bitmap, 6)).collect();
    let table = synthetic_device_table(&net, &menus, "cpu", 64, &SynthSpec::default())?;
    let latency = fit_cost_model(&net, &table, Metric::LatencyMs)?;
    println!("latency model r2 {:.4} mape {:.2}%", latency.r2, latency.mape);
    let models = CostModels { latency, energy: None };

    let lo = Profile::new(menus.iter().map(|m| m[0]).collect());
    let hi = Profile::new(menus.iter().map(|m| m[m.len() - 1]).collect());
    let (lo_ms, hi_ms) = (profile_metrics(&net, &models, &lo)?.latency_ms, profile_metrics(&net, &models, &hi)?.latency_ms);
    let budgets = [0.25, 0.5, 1.0]
        .iter()
        .map(|f| BudgetToken::latency(lo_ms + f * (hi_ms - lo_ms), "cpu"))
        .collect::<elastic_compress::Result<Vec<_>>>()?;
    let terms = menu_terms(&cert, &net.full_profile(), &menus)?;
    let built = build_lattice(&cert, &menus, &budgets, &models, &terms)?;
    for e in &built.lattice.entries {
        println!(
            "{:<5} {:<32} lat {:.4} ms  {:>6} B  dhat {:.4}",
            e.name,
            Profile::canonical_id(&e.profile.layers),
            e.predicted_latency_ms,
            e.bytes,
            e.delta_hat
        );
    }
    let mid = &built.lattice.entries[built.lattice.len() / 2];
    let epsilon: f64 = std::env::args().nth(1).map_or(mid.delta_hat, |s| s.parse().expect("epsilon"));
    println!("epsilon {epsilon:.4}");
    for i in 0..=8 {
        let ms = lo_ms * 0.8 + (hi_ms * 1.1 - lo_ms * 0.8) * i as f64 / 8.0;
        let sel = select_runtime(&built.lattice, &BudgetToken::latency(ms, "cpu")?, epsilon)?;
        println!("budget {ms:.4} ms -> {} ({:?})", built.lattice.entries[sel.index].name, sel.status);
    }
    Ok(())
}
