mod common;

use elastic_compress::certificate::{calibrate, Certifier};
use elastic_compress::controller::{
    build_lattice, chain_menu, enforce_monotone, menu_terms, pava, select_runtime, BudgetToken, CostModels, Menu,
    SelectStatus,
};
use elastic_compress::cost::{bytes_of, flops_dense_svd, planted_model, SynthSpec};
use elastic_compress::elastic::{ElasticLayer, FactorBits};
use elastic_compress::export::{pack_codes, unpack_codes, Dec};
use elastic_compress::linalg::{svd_full, Matrix};
use elastic_compress::profile::{LayerSetting, Profile};
use elastic_compress::quant::{calibrate_scale, dequantize, grid_max, quantize, CalibrationRequest};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn matrix(max_rows: usize, max_cols: usize) -> impl Strategy<Value = Matrix> {
    (1..=max_rows, 1..=max_cols).prop_flat_map(|(r, c)| {
        prop::collection::vec(-3.0f64..3.0, r * c).prop_map(move |d| Matrix::new(r, c, d).unwrap())
    })
}

fn setting() -> impl Strategy<Value = LayerSetting> {
    (1usize..64, prop::option::of(2u8..=8)).prop_map(|(k, q)| match q {
        Some(q) => LayerSetting::new(k, q),
        None => LayerSetting::float(k),
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn svd_reconstructs_with_orthonormal_factors(w in matrix(12, 12)) {
        let r = w.rows().min(w.cols());
        let f = svd_full(&w, r).unwrap();
        prop_assert!(f.reconstruct(r).max_abs_diff(&w) < 1e-9);
        prop_assert!(f.u.orthonormality_defect() < 1e-9);
        prop_assert!(f.v.orthonormality_defect() < 1e-9);
        prop_assert!(f.sigma.windows(2).all(|p| p[0] >= p[1]));
        let fro2: f64 = f.sigma.iter().map(|s| s * s).sum();
        prop_assert!((fro2.sqrt() - w.frobenius_norm()).abs() < 1e-9 * (1.0 + w.frobenius_norm()));
    }

    #[test]
    fn nearest_rounding_error_is_half_a_step(values in prop::collection::vec(-10.0f64..10.0, 1..200), bits in 2u8..=8) {
        let t = (values.clone(), vec![values.len()]);
        let spec = calibrate_scale(&t, CalibrationRequest::per_tensor(bits)).unwrap();
        let q = quantize(&t, &spec).unwrap();
        let s = spec.scales[0];
        for (v, d) in values.iter().zip(dequantize(&q).unwrap()) {
            prop_assert!((v - d).abs() <= s / 2.0 + 1e-12);
        }
        prop_assert!(q.codes.iter().all(|c| (*c as i64).abs() <= grid_max(bits)));
    }

    #[test]
    fn packed_codes_round_trip(bits in 2u8..=16, raw in prop::collection::vec(any::<i32>(), 0..100)) {
        let g = grid_max(bits) as i32;
        let codes: Vec<i32> = raw.iter().map(|c| c.rem_euclid(2 * g + 1) - g).collect();
        let packed = pack_codes(&codes, bits).unwrap();
        prop_assert_eq!(packed.len(), (codes.len() * bits as usize).div_ceil(8));
        prop_assert_eq!(unpack_codes(&packed, bits, codes.len()).unwrap(), codes);
    }

    #[test]
    fn decimal_scalars_round_trip(v in any::<f64>().prop_filter("finite", |v| v.is_finite())) {
        let s = serde_json::to_string(&Dec(v)).unwrap();
        let back: Dec = serde_json::from_str(&s).unwrap();
        prop_assert_eq!(back.0.to_bits(), v.to_bits());
    }

    #[test]
    fn profile_ids_round_trip(layers in prop::collection::vec(setting(), 1..6)) {
        let id = Profile::canonical_id(&layers);
        prop_assert_eq!(Profile::parse_id(&id).unwrap(), layers);
    }

    #[test]
    fn pava_is_isotonic_and_mean_preserving(y in prop::collection::vec(-5.0f64..5.0, 1..40)) {
        let z = pava(&y);
        prop_assert!(z.windows(2).all(|w| w[0] <= w[1] + 1e-12));
        let (a, b): (f64, f64) = (y.iter().sum(), z.iter().sum());
        prop_assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn monotone_repair_orders_and_only_raises(seq in prop::collection::vec(prop::collection::vec(setting(), 3), 1..12)) {
        let profiles: Vec<Profile> = seq.into_iter().map(Profile::new).collect();
        let r = enforce_monotone(&profiles).unwrap();
        for w in r.assignments.windows(2) {
            prop_assert!(w[0].le(&w[1]));
        }
        for (i, (orig, fixed)) in profiles.iter().zip(&r.assignments).enumerate() {
            prop_assert!(orig.le(fixed) || r.pruned.contains(&i));
            prop_assert_eq!(orig.layers == fixed.layers, !r.pruned.contains(&i));
        }
    }

    #[test]
    fn costs_grow_with_rank_and_bits(m in 1u64..64, n in 1u64..64, k in 1u64..32) {
        prop_assert!(flops_dense_svd(m, n, k) < flops_dense_svd(m, n, k + 1));
        let w = Matrix::from_fn(m as usize, n as usize, |i, j| ((i * 7 + j * 3) % 5) as f64 - 2.0);
        let km = (m.min(n)) as usize;
        let layer = ElasticLayer::dense_svd(&w, 1, km).unwrap();
        let k = (k as usize).min(km);
        let b = |k, q: Option<u8>| bytes_of(&layer, k, q.map(FactorBits::uniform)).unwrap();
        for q in 2u8..8 {
            prop_assert!(b(k, Some(q)) <= b(k, Some(q + 1)));
        }
        prop_assert!(b(k, Some(8)) <= b(k, None));
        if k < km {
            prop_assert!(b(k, Some(4)) <= b(k + 1, Some(4)));
        }
    }

    #[test]
    fn built_lattices_are_chains_and_select_respects_budgets(seed in 0u64..1000, frac in 0.0f64..1.2) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = common::random_pl_net(&mut rng, 3, 12);
        let inputs: Vec<Vec<f64>> = (0..16).map(|_| common::input(&mut rng, net.in_dim())).collect();
        let stats = calibrate(&net, &inputs).unwrap();
        let cert = Certifier::conservative(&net, &stats).unwrap();
        let menus: Vec<Menu> = net.blocks.iter().map(|b| chain_menu(&b.layer, &net.bitmap, 4)).collect();
        let planted = planted_model("dev", net.depth(), &SynthSpec { seed, ..SynthSpec::default() });
        let models = CostModels { latency: planted.latency, energy: None };
        let terms = menu_terms(&cert, &net.full_profile(), &menus).unwrap();
        let hi = elastic_compress::controller::profile_metrics(
            &net, &models, &Profile::new(menus.iter().map(|m| m[m.len() - 1]).collect())).unwrap().latency_ms;
        let budgets: Vec<BudgetToken> = (1..=8).map(|i| BudgetToken::latency(hi * i as f64 / 8.0, "dev").unwrap()).collect();
        let built = build_lattice(&cert, &menus, &budgets, &models, &terms).unwrap();
        built.lattice.validate().unwrap();
        prop_assert!(built.assignment.windows(2).all(|w| w[0] <= w[1]));
        for w in built.lattice.entries.windows(2) {
            prop_assert!(w[0].predicted_latency_ms <= w[1].predicted_latency_ms);
            prop_assert!(w[0].delta_hat >= w[1].delta_hat);
        }
        let budget = BudgetToken::latency(hi * frac.max(1e-3), "dev").unwrap();
        let sel = select_runtime(&built.lattice, &budget, f64::INFINITY).unwrap();
        let chosen = &built.lattice.entries[sel.index];
        match sel.status {
            SelectStatus::Ok => prop_assert!(chosen.predicted_latency_ms <= budget.latency_ms.unwrap()),
            SelectStatus::CertWarning => prop_assert_eq!(sel.index, 0),
            SelectStatus::Infeasible => prop_assert!(false, "same device must be evaluable"),
        }
    }
}
