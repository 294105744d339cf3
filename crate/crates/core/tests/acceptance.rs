//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.

mod common;

use std::collections::HashMap;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use common::{check_manifest_bytes, gaussian, input, normal, random_pl_net, random_profile};
use elastic_compress::certificate::{calibrate, diagnostics, Certifier, ProxyMode, DEFAULT_EMA_DECAY};
use elastic_compress::controller::{
    audit_monotone, build_lattice, chain_menu, greedy_knapsack, lattice_audit_points, menu_terms, product_menu,
    profile_metrics, BudgetToken, CostModels, Menu,
};
use elastic_compress::cost::{
    fit_cost_model, flops_conv_tucker2, flops_dense_full, flops_dense_svd, planted_model, predict, profile_costs,
    synth_device, threshold_rank_dense, Metric, SynthSpec,
};
use elastic_compress::elastic::{compress, residual_norm, ElasticLayer};
use elastic_compress::export::{write_samples, Manifest, RawLayer, RawWeights, Samples};
use elastic_compress::linalg::{spectral_norm_exact, svd_full, ConvGeometry, Tensor4};
use elastic_compress::network::{apply_staged, logit_drift, Activation, Block, FlopCounter, Network};
use elastic_compress::profile::{LayerSetting, Profile};
use elastic_compress::quant::{dequantize, quantize, ClipMode, Granularity, QuantSpec, Rounding};
use elastic_compress::elastic::gumbel_noise;
use elastic_compress::train::{
    evaluate_accuracy_on, toy_network, total_loss_grad, train_toy, Batch, LossAux, LossWeights, StepSample, TrainConfig,
    TrainParams, TrainReport, TrainState, DEFAULT_SEEDS,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

type Outcome = Result<String, String>;

fn verdict(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn e<E: std::fmt::Display>(err: E) -> String {
    err.to_string()
}

// 1 and 2 share one sweep.
fn certificate_sweep() -> Result<(Outcome, Outcome), String> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let (mut pointwise_viol, mut checked) = (0usize, 0usize);
    let (mut expected_viol, mut profiles) = (0usize, 0usize);
    let mut tightest = f64::INFINITY;
    for _ in 0..100 {
        let net = random_pl_net(&mut rng, 4, 32);
        let inputs: Vec<Vec<f64>> = (0..100).map(|_| input(&mut rng, net.in_dim())).collect();
        let stats = calibrate(&net, &inputs).map_err(e)?;
        let cert = Certifier::conservative(&net, &stats).map_err(e)?;
        for _ in 0..10 {
            let p = random_profile(&mut rng, &net);
            let mut sq = 0.0;
            for x in &inputs {
                let drift = logit_drift(&net, x, &p).map_err(e)?;
                let bound = cert.pointwise_bound(&p, x).map_err(e)?;
                // Slack of a few ulps for the summation order.
                if drift > bound * (1.0 + 1e-12) + 1e-12 {
                    pointwise_viol += 1;
                }
                if drift > 0.0 {
                    tightest = tightest.min(bound / drift);
                }
                sq += drift * drift;
                checked += 1;
            }
            let rms = (sq / inputs.len() as f64).sqrt();
            let delta_hat = cert.expected_bound(&p).map_err(e)?;
            if rms > delta_hat * (1.0 + 1e-12) + 1e-12 {
                expected_viol += 1;
            }
            profiles += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let c1 = verdict(
        pointwise_viol == 0 && secs < 60.0,
        format!("{pointwise_viol}/{checked} pointwise violations, min bound/drift {tightest:.3}, {secs:.1}s"),
    );
    let c2 = verdict(expected_viol == 0, format!("{expected_viol}/{profiles} profiles with RMS drift above the expected bound"));
    Ok((c1, c2))
}

fn coverage(run: &(TrainState, TrainReport)) -> Result<Outcome, String> {
    let st = &run.0;
    let (train, eval) = st.datasets();
    let net = &st.params.net;
    let calib = &train.x[..st.config.calibration_samples.min(train.len())];
    let stats = calibrate(net, calib).map_err(e)?;
    let mode = ProxyMode::PowerIter { steps: st.config.power_steps, ema_decay: DEFAULT_EMA_DECAY };
    let cert = Certifier::new(net, &stats, mode, calib).map_err(e)?;
    let mut profiles: Vec<Profile> = Vec::new();
    for i in 0..5 {
        let p = Profile::new(st.menus.iter().map(|m| m[i.min(m.len() - 1)]).collect());
        if !profiles.iter().any(|q| q.layers == p.layers) {
            profiles.push(p);
        }
    }
    let mid = Profile::new(st.menus.iter().enumerate().map(|(l, m)| m[if l % 2 == 0 { m.len() - 1 } else { 0 }]).collect());
    if !profiles.iter().any(|q| q.layers == mid.layers) {
        profiles.push(mid);
    }
    let eps = diagnostics(&cert, &profiles, &eval.x, 0.0).map_err(e)?.pointwise_bound_p95;
    let d = diagnostics(&cert, &profiles, &eval.x, eps).map_err(e)?;
    let corr = d.correlation.unwrap_or(f64::NAN);
    Ok(verdict(
        profiles.len() >= 5 && d.coverage_pct >= 85.0 && corr >= 0.8,
        format!("coverage {:.1}% at eps {eps:.4}, pearson {corr:.3} over {} profiles", d.coverage_pct, profiles.len()),
    ))
}

fn stochastic_rounding() -> Result<Outcome, String> {
    let start = Instant::now();
    const N: usize = 100_000;
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut failures = 0;
    let mut worst_mean = 0.0f64;
    for i in 0..50 {
        let s: f64 = rng.random_range(0.01..2.0);
        let x = rng.random_range(-120.0..120.0) * s;
        let spec = QuantSpec {
            bits: 8,
            granularity: Granularity::PerTensor,
            scales: vec![s],
            rounding: Rounding::Stochastic { seed: 9000 + i },
            clip: ClipMode::MaxRange,
        };
        let q = quantize(&(vec![x; N], vec![N]), &spec).map_err(e)?;
        let err: Vec<f64> = dequantize(&q).map_err(e)?.iter().map(|v| v - x).collect();
        let mean = err.iter().sum::<f64>() / N as f64;
        let var = err.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / N as f64;
        let m4 = err.iter().map(|d| (d - mean).powi(4)).sum::<f64>() / N as f64;
        let mean_bound = 4.0 * (s / 2.0) / (N as f64).sqrt();
        let var_bound = s * s / 4.0 + 3.0 * ((m4 - var * var).max(0.0) / N as f64).sqrt();
        worst_mean = worst_mean.max(mean.abs() / mean_bound);
        if mean.abs() > mean_bound || var > var_bound {
            failures += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Ok(verdict(
        failures == 0 && secs < 5.0,
        format!("{failures}/50 scalars outside bounds, worst |mean|/bound {worst_mean:.3}, {secs:.2}s"),
    ))
}

fn eckart_young() -> Result<Outcome, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut worst = 0.0f64;
    let mut checks = 0;
    for i in 0..50 {
        let (m, n) = if i % 2 == 0 { (rng.random_range(2..=64), rng.random_range(2..=48)) } else { (rng.random_range(2..=48), rng.random_range(2..=64)) };
        let w = gaussian(&mut rng, m, n, 1.0);
        let r = m.min(n);
        let f = svd_full(&w, r).map_err(e)?;
        let layer = ElasticLayer::dense_svd(&w, 1, r).map_err(e)?;
        for k in 1..=r {
            let next = f.sigma.get(k).copied().unwrap_or(0.0);
            let explicit = spectral_norm_exact(&w.sub(&f.reconstruct(k)).map_err(e)?).map_err(e)?;
            let stored = residual_norm(&layer, k, None, ClipMode::MaxRange).map_err(e)?;
            worst = worst.max((explicit - next).abs()).max((stored - next).abs());
            checks += 1;
        }
    }
    Ok(verdict(worst <= 1e-7, format!("{checks} ranks on 50 matrices, max |residual - sigma_k+1| {worst:.2e}")))
}

fn flops_oracle() -> Result<Outcome, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let mut mismatches = Vec::new();
    for _ in 0..20 {
        let (m, n) = (rng.random_range(1..=40), rng.random_range(1..=40));
        let w = gaussian(&mut rng, m, n, 1.0);
        let layer = ElasticLayer::dense_svd(&w, 1, m.min(n)).map_err(e)?;
        let k = rng.random_range(1..=m.min(n));
        let form = compress(&layer, k, None, ClipMode::MaxRange).map_err(e)?.form;
        let mut c = FlopCounter::default();
        apply_staged(&form, &input(&mut rng, n), &mut c).map_err(e)?;
        let closed = flops_dense_svd(m as u64, n as u64, k as u64);
        if c.flops != closed {
            mismatches.push(format!("dense {m}x{n} k={k}: {} vs {closed}", c.flops));
        }
    }
    for _ in 0..20 {
        let (co, ci) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let kh = [1, 3, 5][rng.random_range(0..3)];
        let kw = [1, 3, 5][rng.random_range(0..3)];
        let geom = ConvGeometry { height: rng.random_range(1..=6), width: rng.random_range(1..=6) };
        let t = Tensor4::from_fn(co, ci, kh, kw, |_, _, _, _| StandardNormal.sample(&mut rng));
        let layer = ElasticLayer::conv_tucker2(&t, geom, 1, tucker_stored(&t), 5).map_err(e)?;
        let k_max = layer.k_max;
        let k = rng.random_range(1..=k_max);
        let (ro, ri) = layer.tucker_ranks(k).expect("tucker layer");
        let form = compress(&layer, k, None, ClipMode::MaxRange).map_err(e)?.form;
        let mut c = FlopCounter::default();
        apply_staged(&form, &input(&mut rng, ci * geom.pixels()), &mut c).map_err(e)?;
        let closed = flops_conv_tucker2(co as u64, ci as u64, kh as u64, kw as u64, geom.height as u64, geom.width as u64, ro as u64, ri as u64);
        if c.flops != closed {
            mismatches.push(format!("conv {co}x{ci}x{kh}x{kw} ranks ({ro},{ri}): {} vs {closed}", c.flops));
        }
    }
    Ok(verdict(mismatches.is_empty(), if mismatches.is_empty() { "20 dense + 20 Tucker-2 shapes exact".into() } else { mismatches.join("; ") }))
}

/// Full Tucker-2 rank of a kernel, from the unfolding ranks.
fn tucker_stored(t: &Tensor4) -> usize {
    let hw = t.h * t.w;
    t.c_out.min(t.c_in * hw).max(t.c_in.min(t.c_out * hw))
}

fn break_even() -> Outcome {
    let mut bad = Vec::new();
    for d in [8u64, 16, 32, 64] {
        for k in 1..=d {
            let cheaper = flops_dense_svd(d, d, k) < flops_dense_full(d, d);
            if (k < d / 2 && !cheaper) || (k >= d.div_ceil(2) && cheaper) {
                bad.push(format!("d={d} k={k}"));
            }
        }
        if threshold_rank_dense(d, d) != d / 2 {
            bad.push(format!("threshold d={d}"));
        }
    }
    verdict(bad.is_empty(), if bad.is_empty() { "exhaustive over k for d in {8,16,32,64}".into() } else { bad.join(", ") })
}

fn three_layer_net(rng: &mut impl Rng) -> Network {
    let dims = [24, 32, 16, 10];
    let blocks = dims
        .windows(2)
        .enumerate()
        .map(|(i, w)| {
            let m = gaussian(rng, w[1], w[0], 1.0 / (w[0] as f64).sqrt());
            let layer = ElasticLayer::dense_svd(&m, 1, w[0].min(w[1])).unwrap().with_bias(vec![0.0; w[1]]).unwrap();
            Block::new(layer, if i == 2 { Activation::Identity } else { Activation::Relu })
        })
        .collect();
    Network::new(blocks).unwrap()
}

fn all_profiles(menus: &[Menu]) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    for m in menus {
        out = out.into_iter().flat_map(|p| (0..m.len()).map(move |i| [p.clone(), vec![i]].concat())).collect();
    }
    out
}

fn at(menus: &[Menu], idx: &[usize]) -> Profile {
    Profile::new(menus.iter().zip(idx).map(|(m, &i)| m[i]).collect())
}

fn monotone_cost() -> Result<Outcome, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let net = three_layer_net(&mut rng);
    let menus: Vec<Menu> = net
        .blocks
        .iter()
        .map(|b| {
            let km = b.layer.k_max;
            let ranks: Vec<usize> = (0..5).map(|i| 1 + i * (km - 1) / 4).collect();
            product_menu(&ranks, &[4, 6, 8])
        })
        .collect();
    let spec = SynthSpec::default();
    let sample: Vec<Profile> = (0..96).map(|_| Profile::new(menus.iter().map(|m| m[rng.random_range(0..m.len())]).collect())).collect();
    let (table, planted) = synth_device(&net, "synthetic-cpu", &sample, &spec).map_err(e)?;
    let fitted = fit_cost_model(&net, &table, Metric::LatencyMs).map_err(e)?;
    let idx = all_profiles(&menus);
    let le: Vec<Vec<Vec<bool>>> = menus.iter().map(|m| m.iter().map(|a| m.iter().map(|b| a.le(b)).collect()).collect()).collect();
    let mut violations = 0usize;
    let mut pairs = 0usize;
    for model in [&fitted, &planted.latency] {
        let lat = idx
            .iter()
            .map(|i| predict(model, &profile_costs(&net, &at(&menus, i))?))
            .collect::<Result<Vec<f64>, _>>()
            .map_err(e)?;
        for (a, ia) in idx.iter().enumerate() {
            for (b, ib) in idx.iter().enumerate() {
                if a != b && (0..3).all(|l| le[l][ia[l]][ib[l]]) {
                    pairs += 1;
                    if lat[a] > lat[b] {
                        violations += 1;
                    }
                }
            }
        }
    }
    Ok(verdict(violations == 0, format!("{violations}/{pairs} ordered pairs non-monotone over {} profiles (fitted + planted)", idx.len())))
}

fn monotone_audit(runs: &[(TrainState, TrainReport)]) -> Result<Outcome, String> {
    let mut lines = Vec::new();
    let mut hard_ok = true;
    let mut acc_ok = 0;
    for (st, _) in runs {
        let (train, eval) = st.datasets();
        let net = &st.params.net;
        let calib = &train.x[..st.config.calibration_samples.min(train.len())];
        let stats = calibrate(net, calib).map_err(e)?;
        let mode = ProxyMode::PowerIter { steps: st.config.power_steps, ema_decay: DEFAULT_EMA_DECAY };
        let cert = Certifier::new(net, &stats, mode, &calib[..32.min(calib.len())]).map_err(e)?;
        let lo = Profile::new(st.menus.iter().map(|m| m[0]).collect());
        let hi = Profile::new(st.menus.iter().map(|m| m[m.len() - 1]).collect());
        let a = 0.9 * profile_metrics(net, &st.costs, &lo).map_err(e)?.latency_ms;
        let b = 1.1 * profile_metrics(net, &st.costs, &hi).map_err(e)?.latency_ms;
        let budgets = (0..=2000)
            .map(|i| BudgetToken::latency(a + (b - a) * i as f64 / 2000.0, st.config.device.clone()))
            .collect::<Result<Vec<_>, _>>()
            .map_err(e)?;
        let terms = menu_terms(&cert, &net.full_profile(), &st.menus).map_err(e)?;
        let built = build_lattice(&cert, &st.menus, &budgets, &st.costs, &terms).map_err(e)?;
        let acc = built
            .lattice
            .entries
            .iter()
            .map(|en| evaluate_accuracy_on(net, Some(&en.profile), &eval.x, &eval.y))
            .collect::<Result<Vec<_>, _>>()
            .map_err(e)?;
        let r = audit_monotone(&lattice_audit_points(&built.lattice, &built.assignment, Some(&acc)));
        hard_ok &= r.latency_events == 0 && r.delta_events == 0;
        if r.accuracy_events == 0 {
            acc_ok += 1;
        }
        let drop = acc.windows(2).map(|w| w[0] - w[1]).fold(0.0, f64::max);
        lines.push(format!(
            "seed {}: {} pairs, {} entries, latency {}/ delta {}/ accuracy {} events (largest drop {drop:.3})",
            st.config.seed,
            r.pairs,
            built.lattice.len(),
            r.latency_events,
            r.delta_events,
            r.accuracy_events
        ));
    }
    Ok(verdict(hard_ok && acc_ok >= 2, format!("{}; accuracy-monotone seeds {acc_ok}/3", lines.join("; "))))
}

fn cost_recovery() -> Result<Outcome, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(1010);
    let net = three_layer_net(&mut rng);
    let menus: Vec<Menu> = net.blocks.iter().map(|b| chain_menu(&b.layer, &net.bitmap, 8)).collect();
    let draw = |rng: &mut ChaCha8Rng| Profile::new(menus.iter().map(|m| m[rng.random_range(0..m.len())]).collect());
    let train: Vec<Profile> = (0..128).map(|_| draw(&mut rng)).collect();
    let spec = SynthSpec { seed: 77, noise_sigma: 0.03, ..SynthSpec::default() };
    let (table, _) = synth_device(&net, "synthetic-cpu", &train, &spec).map_err(e)?;
    let model = fit_cost_model(&net, &table, Metric::LatencyMs).map_err(e)?;
    let planted = planted_model("synthetic-cpu", net.depth(), &spec);
    let mut ape = Vec::new();
    for _ in 0..256 {
        let p = draw(&mut rng);
        let c = profile_costs(&net, &p).map_err(e)?;
        let z: f64 = StandardNormal.sample(&mut rng);
        let observed = predict(&planted.latency, &c).map_err(e)? * (0.03 * z).exp();
        ape.push((predict(&model, &c).map_err(e)? - observed).abs() / observed);
    }
    let mape = 100.0 * ape.iter().sum::<f64>() / ape.len() as f64;
    Ok(verdict(mape < 6.0, format!("held-out MAPE {mape:.2}% on 256 profiles (train fit r2 {:.4})", model.r2)))
}

fn knapsack_oracle() -> Result<Outcome, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(1111);
    let mut problems = Vec::new();
    let mut combos_total = 0;
    for inst in 0..10 {
        let net = random_pl_net(&mut rng, 4, 16);
        let menus: Vec<Menu> = net.blocks.iter().map(|b| chain_menu(&b.layer, &net.bitmap, rng.random_range(2..=5))).collect();
        let terms: Vec<Vec<f64>> = menus
            .iter()
            .map(|m| {
                let mut t = 1.0 + rng.random::<f64>();
                (0..m.len()).map(|_| { t *= rng.random_range(0.2..0.95); t }).collect()
            })
            .collect();
        let planted = planted_model("dev", net.depth(), &SynthSpec { seed: inst, ..SynthSpec::default() });
        let models = CostModels { latency: planted.latency, energy: Some(planted.energy) };
        let idx = all_profiles(&menus);
        combos_total += idx.len();
        let table: HashMap<Vec<usize>, _> = idx
            .iter()
            .map(|i| Ok((i.clone(), profile_metrics(&net, &models, &at(&menus, i))?)))
            .collect::<Result<_, elastic_compress::Error>>()
            .map_err(e)?;
        let lats: Vec<f64> = table.values().map(|m| m.latency_ms).collect();
        let (lo, hi) = lats.iter().fold((f64::INFINITY, 0.0f64), |(a, b), &v| (a.min(v), b.max(v)));
        let budget = if inst % 3 == 2 {
            let bytes: Vec<u64> = table.values().map(|m| m.bytes).collect();
            let (bl, bh) = (*bytes.iter().min().unwrap(), *bytes.iter().max().unwrap());
            BudgetToken::new(Some(rng.random_range(lo..hi)), Some(rng.random_range(bl..=bh)), None, "dev")
        } else {
            BudgetToken::latency(rng.random_range(0.95 * lo..1.05 * hi), "dev")
        }
        .map_err(e)?;

        let got = greedy_knapsack(&net, &menus, &budget, &models, &terms).map_err(e)?;
        let mut cur = vec![0usize; menus.len()];
        let feasible = budget.admits(&table[&cur]).unwrap();
        let mut trace = Vec::new();
        if feasible {
            loop {
                let cost = budget.normalized_cost(&table[&cur]).unwrap();
                let mut best: Option<(f64, usize)> = None;
                for l in 0..menus.len() {
                    if cur[l] + 1 >= menus[l].len() {
                        continue;
                    }
                    let mut next = cur.clone();
                    next[l] += 1;
                    if !budget.admits(&table[&next]).unwrap() {
                        continue;
                    }
                    let dc = budget.normalized_cost(&table[&next]).unwrap() - cost;
                    let gain = terms[l][cur[l]] - terms[l][cur[l] + 1];
                    let ratio = if dc > 0.0 { gain / dc } else { f64::INFINITY };
                    if best.is_none_or(|b| ratio > b.0) {
                        best = Some((ratio, l));
                    }
                }
                let Some((ratio, l)) = best else { break };
                cur[l] += 1;
                trace.push((vec![l], cur[l], ratio));
            }
        }
        let got_trace: Vec<(Vec<usize>, usize, f64)> = got.trace.iter().map(|s| (s.unit.clone(), s.to, s.ratio)).collect();
        if got.feasible != feasible || got_trace != trace || got.profile.layers != at(&menus, &cur).layers {
            problems.push(format!("instance {inst}: greedy differs from oracle"));
            continue;
        }
        if feasible {
            let maximal = (0..menus.len()).all(|l| {
                cur[l] + 1 >= menus[l].len() || {
                    let mut n = cur.clone();
                    n[l] += 1;
                    !budget.admits(&table[&n]).unwrap()
                }
            });
            if !maximal {
                problems.push(format!("instance {inst}: greedy stopped below the feasible frontier"));
            }
        }
    }
    Ok(verdict(
        problems.is_empty(),
        if problems.is_empty() { format!("10 instances, {combos_total} enumerated profiles, traces identical") } else { problems.join("; ") },
    ))
}

fn gradient_integrity() -> Result<Outcome, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(1212);
    let mut cfg = TrainConfig::default();
    cfg.hidden = vec![12, 8];
    let (mut done, mut excluded, mut worst) = (0usize, 0usize, 0.0f64);
    let mut setup = 0u64;
    while done < 200 && setup < 200 {
        cfg.seed = 9000 + setup;
        setup += 1;
        let net = toy_network(&cfg).map_err(e)?;
        let mut params = TrainParams::new(net).map_err(e)?;
        let mut flat = params.flatten();
        for v in flat.iter_mut() {
            *v += 0.01 * normal(&mut rng);
        }
        params.set_flat(&flat).map_err(e)?;
        let net = &params.net;
        let xs: Vec<Vec<f64>> = (0..6).map(|_| input(&mut rng, net.in_dim())).collect();
        let batch = Batch::new(&xs, (0..6).map(|_| rng.random_range(0..net.out_dim())).collect()).map_err(e)?;
        let profile = Profile::new(
            net.blocks
                .iter()
                .map(|b| {
                    let k = rng.random_range(1..=b.layer.k_max);
                    if rng.random_bool(0.5) { LayerSetting::new(k, rng.random_range(3..=8)) } else { LayerSetting::float(k) }
                })
                .collect(),
        );
        let sample = StepSample {
            profile,
            tau: rng.random_range(0.3..2.0),
            mask_noise: net.blocks.iter().map(|b| gumbel_noise(b.layer.k_max, &mut rng)).collect(),
            aug_noise: gaussian(&mut rng, batch.x.rows(), batch.x.cols(), 0.1),
            budget_ms: 1e-3,
        };
        let planted = planted_model("dev", net.depth(), &SynthSpec::default());
        let aux = LossAux {
            lhat: (0..net.depth()).map(|_| rng.random_range(0.5..2.0)).collect(),
            alpha: (0..net.depth()).map(|_| rng.random_range(0.5..2.0)).collect(),
            latency: planted.latency,
        };
        let w = LossWeights { epsilon: if setup % 2 == 0 { 0.0 } else { 1e3 }, ..LossWeights::default() };
        let (terms, grad, probe) = total_loss_grad(&params, &batch, &sample, &w, &aux).map_err(e)?;
        let base = probe.eval(&params, &batch, &sample, &w, &aux).map_err(e)?;
        if (base.terms.total - terms.total).abs() > 1e-12 * terms.total.abs().max(1.0) {
            return Ok(Err(format!("replayed loss {} differs from {}", base.terms.total, terms.total)));
        }
        let g = grad.flatten();
        for _ in 0..10 {
            let mut d: Vec<f64> = (0..flat.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
            d.iter_mut().for_each(|v| *v /= norm);
            let h = 1e-6;
            let eval_at = |s: f64| -> Result<_, String> {
                let shifted: Vec<f64> = flat.iter().zip(&d).map(|(p, dv)| p + s * h * dv).collect();
                let mut q = params.clone();
                q.set_flat(&shifted).map_err(e)?;
                probe.eval(&q, &batch, &sample, &w, &aux).map_err(e)
            };
            let (plus, minus) = (eval_at(1.0)?, eval_at(-1.0)?);
            if base.kink_margin < 1e-6 || plus.kink_signature != base.kink_signature || minus.kink_signature != base.kink_signature {
                excluded += 1;
                continue;
            }
            let fd = (plus.terms.total - minus.terms.total) / (2.0 * h);
            let ad: f64 = g.iter().zip(&d).map(|(a, b)| a * b).sum();
            let rel = (fd - ad).abs() / fd.abs().max(ad.abs()).max(1e-6);
            worst = worst.max(rel);
            done += 1;
            if done == 200 {
                break;
            }
        }
    }
    Ok(verdict(done == 200 && worst <= 1e-4, format!("{done} probes, {excluded} kink-adjacent excluded, max rel error {worst:.2e}")))
}

/// Full-model accuracy every ablation run must reach on the two-class toy.
const MIN_TRAINED_ACCURACY: f64 = 0.8;

fn ablation(with: &[(TrainState, TrainReport)], without: &[(TrainState, TrainReport)]) -> Outcome {
    let mean = |r: &[(TrainState, TrainReport)]| r.iter().map(|(_, rep)| rep.tiny_violation_rate).sum::<f64>() / r.len() as f64;
    let (a, b) = (mean(with), mean(without));
    let per: Vec<String> = with
        .iter()
        .zip(without)
        .map(|((_, x), (_, y))| format!("{}: {:.3} vs {:.3}", x.seed, x.tiny_violation_rate, y.tiny_violation_rate))
        .collect();
    // A collapsed model has no drift to violate; only trained runs count.
    let worst = with.iter().chain(without).map(|(_, r)| r.full_accuracy).fold(1.0, f64::min);
    verdict(
        a <= b && worst >= MIN_TRAINED_ACCURACY,
        format!("mean violation rate {a:.3} (cert 0.2) vs {b:.3} (cert 0); {}; worst full accuracy {worst:.3}", per.join(", ")),
    )
}

struct CliRun {
    transcript: Vec<(String, i32, Vec<u8>)>,
    manifests: Vec<(String, Vec<u8>)>,
}

fn ecomp(dir: &Path, args: &[&str], run: &mut CliRun, snapshot: Option<&str>) -> Result<i32, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_ecomp")).current_dir(dir).args(args).output().map_err(e)?;
    let code = out.status.code().unwrap_or(-1);
    run.transcript.push((args.join(" "), code, out.stdout));
    if let Some(path) = snapshot {
        let bytes = std::fs::read(dir.join(path)).map_err(e)?;
        run.manifests.push((format!("{} -> {path}", args[0]), bytes));
    }
    Ok(code)
}

fn raw_model() -> Manifest {
    let mut rng = ChaCha8Rng::seed_from_u64(1515);
    let geometry = ConvGeometry { height: 4, width: 4 };
    let conv = Tensor4::from_fn(4, 2, 3, 3, |_, _, _, _| 0.3 * normal(&mut rng));
    let dense = gaussian(&mut rng, 10, 64, 0.15);
    Manifest::from_raw(vec![
        RawLayer { weights: RawWeights::Conv { w: conv, geometry }, bias: Some(vec![0.05; 64]), activation: Activation::Relu },
        RawLayer { weights: RawWeights::Dense { w: dense }, bias: None, activation: Activation::Identity },
    ])
}

fn cli_pipeline(dir: &Path) -> Result<CliRun, String> {
    let mut run = CliRun { transcript: Vec::new(), manifests: Vec::new() };
    std::fs::write(dir.join("config.toml"), "steps = 80\nrefresh_every = 20\n").map_err(e)?;
    let raw = raw_model().to_bytes().map_err(e)?;
    std::fs::write(dir.join("raw.json"), &raw).map_err(e)?;
    run.manifests.push(("raw".into(), raw));
    let mut rng = ChaCha8Rng::seed_from_u64(1616);
    let calib = Samples { x: (0..64).map(|_| input(&mut rng, 32)).collect(), labels: None };
    let mut buf = Vec::new();
    write_samples(&mut buf, &calib).map_err(e)?;
    std::fs::write(dir.join("calib32.csv"), buf).map_err(e)?;

    let steps: Vec<(Vec<&str>, Option<&str>)> = vec![
        (vec!["train", "--config", "config.toml", "--seed", "3407", "--until", "40", "--out-dir", "run"], None),
        (vec!["train", "--resume", "run/checkpoint.json", "--out-dir", "run"], Some("run/model.json")),
        (vec!["certify", "--manifest", "run/model.json", "--calibration", "run/calibration.csv", "--mode", "poweriter"], Some("run/model.json")),
        (vec!["plan", "--manifest", "run/model.json", "--latency-ms", "0.02,0.03,0.05", "--epsilon", "0.5", "--seed", "11"], Some("run/model.json")),
        (vec!["select", "--manifest", "run/model.json", "--latency-ms", "0.03"], None),
        (vec!["select", "--manifest", "run/model.json", "--latency-ms", "0.001"], None),
        (vec!["report", "--manifest", "run/model.json", "--eval", "run/eval.csv", "--out-dir", "rep"], None),
        (vec!["audit", "--manifest", "run/model.json", "--eval", "run/eval.csv"], None),
        (vec!["decompose", "--input", "raw.json", "--output", "dec.json"], Some("dec.json")),
        (vec!["decompose", "--input", "raw.json", "--output", "dec_cp.json", "--kinds", "tucker2,cp", "--cp-rank", "6", "--k-max", "6"], Some("dec_cp.json")),
        (vec!["certify", "--manifest", "dec.json", "--calibration", "calib32.csv"], Some("dec.json")),
        (vec!["plan", "--manifest", "dec.json", "--bytes", "400,900,4000", "--menu-size", "4"], Some("dec.json")),
        (vec!["select", "--manifest", "dec.json", "--bytes", "1000"], None),
        (vec!["audit", "--manifest", "dec.json", "--scan", "200"], None),
    ];
    for (args, snap) in &steps {
        let code = ecomp(dir, args, &mut run, *snap)?;
        if code != 0 && !(args[0] == "select" || args[0] == "plan" || args[0] == "audit") {
            let (_, _, stdout) = run.transcript.last().unwrap();
            return Err(format!("`ecomp {}` exited {code}: {}", args.join(" "), String::from_utf8_lossy(stdout)));
        }
    }
    Ok(run)
}

fn tree(dir: &Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for ent in std::fs::read_dir(&d).map_err(e)? {
            let p = ent.map_err(e)?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&p).map_err(e)?));
            }
        }
    }
    out.sort();
    Ok(out)
}

fn determinism_and_manifests() -> Result<(Outcome, Outcome), String> {
    let (d1, d2) = (tempfile::tempdir().map_err(e)?, tempfile::tempdir().map_err(e)?);
    let r1 = cli_pipeline(d1.path())?;
    let r2 = cli_pipeline(d2.path())?;
    let mut diffs = Vec::new();
    for (a, b) in r1.transcript.iter().zip(&r2.transcript) {
        if a != b {
            diffs.push(format!("`{}` output differs", a.0));
        }
    }
    let (t1, t2) = (tree(d1.path())?, tree(d2.path())?);
    if t1.len() != t2.len() {
        diffs.push("different file sets".into());
    }
    for (a, b) in t1.iter().zip(&t2) {
        if a != b {
            diffs.push(format!("{} differs", a.0));
        }
    }
    let c15 = verdict(
        diffs.is_empty(),
        if diffs.is_empty() { format!("{} commands, {} files byte-identical across two runs", r1.transcript.len(), t1.len()) } else { diffs.join("; ") },
    );
    let mut bad = Vec::new();
    let mut payloads = 0;
    for (name, bytes) in r1.manifests.iter().chain(&r2.manifests) {
        payloads += Manifest::from_bytes(bytes).map(|m| m.payloads.len()).unwrap_or(0);
        if let Err(msg) = check_manifest_bytes(bytes) {
            bad.push(format!("{name}: {msg}"));
        }
    }
    let c14 = verdict(
        bad.is_empty(),
        if bad.is_empty() { format!("{} manifests ({payloads} payloads) round-trip and self-verify", r1.manifests.len() * 2) } else { bad.join("; ") },
    );
    Ok((c14, c15))
}

fn main() {
    let start = Instant::now();
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    let flat = |r: Result<Outcome, String>| r.unwrap_or_else(|err| Err(format!("error: {err}")));

    match certificate_sweep() {
        Ok((a, b)) => {
            results.push((1, "certificate soundness (conservative)", a));
            results.push((2, "expected-bound form", b));
        }
        Err(err) => {
            results.push((1, "certificate soundness (conservative)", Err(err.clone())));
            results.push((2, "expected-bound form", Err(err)));
        }
    }

    let cfg = TrainConfig::default();
    let mut no_cert = cfg.clone();
    no_cert.weights.cert = 0.0;
    let with: Result<Vec<_>, _> = DEFAULT_SEEDS.iter().map(|&s| train_toy(&cfg, s)).collect();
    let without: Result<Vec<_>, _> = DEFAULT_SEEDS.iter().map(|&s| train_toy(&no_cert, s)).collect();

    results.push((3, "coverage diagnostic (poweriter)", match &with {
        Ok(r) => flat(coverage(&r[0])),
        Err(err) => Err(format!("training failed: {err}")),
    }));
    results.push((4, "stochastic rounding lemma", flat(stochastic_rounding())));
    results.push((5, "residual identity", flat(eckart_young())));
    results.push((6, "flops oracle equivalence", flat(flops_oracle())));
    results.push((7, "break-even thresholds", break_even()));
    results.push((8, "monotone proxy cost", flat(monotone_cost())));
    results.push((9, "monotonicity audit (2000-pair scan)", match &with {
        Ok(r) => flat(monotone_audit(r)),
        Err(err) => Err(format!("training failed: {err}")),
    }));
    results.push((10, "cost-model recovery", flat(cost_recovery())));
    results.push((11, "greedy knapsack oracle", flat(knapsack_oracle())));
    results.push((12, "gradient integrity", flat(gradient_integrity())));
    results.push((13, "certificate-penalty ablation", match (&with, &without) {
        (Ok(a), Ok(b)) => ablation(a, b),
        (Err(err), _) | (_, Err(err)) => Err(format!("training failed: {err}")),
    }));
    match determinism_and_manifests() {
        Ok((a, b)) => {
            results.push((14, "manifest integrity", a));
            results.push((15, "cli determinism", b));
        }
        Err(err) => {
            results.push((14, "manifest integrity", Err(err.clone())));
            results.push((15, "cli determinism", Err(err)));
        }
    }

    results.sort_by_key(|r| r.0);
    let mut failed = 0;
    for (n, name, r) in &results {
        match r {
            Ok(d) => println!("[PASS] {n:>2} {name}: {d}"),
            Err(d) => {
                failed += 1;
                println!("[FAIL] {n:>2} {name}: {d}");
            }
        }
    }
    println!("{} passed, {failed} failed in {:.1}s", results.len() - failed, start.elapsed().as_secs_f64());
    if failed > 0 {
        std::process::exit(1);
    }
}
