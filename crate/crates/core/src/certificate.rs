//! Logit-drift certificates: calibration statistics, post-layer Lipschitz
//! proxies, pointwise and expected bounds, the per-layer ledger and
//! coverage/correlation diagnostics.

use std::collections::HashMap;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::elastic::residual_norm;
use crate::error::{Error, Result};
use crate::linalg::{norm2, power_iterate, random_unit, DEFAULT_POWER_ITERS, TRAINING_POWER_STEPS};
use crate::network::{drift_between, full_weight_norms, postlayer_bound, ForwardTrace, Network};
use crate::profile::{LayerSetting, Profile};

/// Default EMA decay for power-iteration Lipschitz estimates.
pub const DEFAULT_EMA_DECAY: f64 = 0.99;
/// Default number of synthetic calibration samples.
pub const DEFAULT_CALIBRATION_SAMPLES: usize = 512;
const POWER_SEED: u64 = 0x11b5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationStats {
    /// `α_ℓ = (mean ‖a_{ℓ−1}‖²)^{1/2}`.
    pub alpha: Vec<f64>,
    pub running_max: Vec<f64>,
    pub count: usize,
    pub fingerprint: String,
}

/// Full-model activation statistics over a calibration set.
pub fn calibrate(net: &Network, inputs: &[Vec<f64>]) -> Result<CalibrationStats> {
    if inputs.is_empty() {
        return Err(Error::invalid("empty calibration set"));
    }
    let full = net.compile(None)?;
    let depth = net.depth();
    let mut sumsq = vec![0.0; depth];
    let mut max = vec![0.0f64; depth];
    for x in inputs {
        let trace = full.forward(x)?;
        for (l, a) in trace.inputs.iter().enumerate() {
            let n = norm2(a);
            sumsq[l] += n * n;
            max[l] = max[l].max(n);
        }
    }
    let count = inputs.len();
    Ok(CalibrationStats {
        alpha: sumsq.iter().map(|s| (s / count as f64).sqrt()).collect(),
        running_max: max,
        count,
        fingerprint: full.fingerprint,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum ProxyMode {
    /// Product-of-norms bound; certified.
    Conservative,
    /// EMA of warm-started power iteration on the tail Jacobian at
    /// calibration inputs; may undershoot.
    PowerIter { steps: usize, ema_decay: f64 },
}

impl ProxyMode {
    pub fn power_iter() -> Self {
        ProxyMode::PowerIter { steps: TRAINING_POWER_STEPS, ema_decay: DEFAULT_EMA_DECAY }
    }

    pub fn is_certified(&self) -> bool {
        matches!(self, ProxyMode::Conservative)
    }

    pub fn name(&self) -> &'static str {
        match self {
            ProxyMode::Conservative => "conservative",
            ProxyMode::PowerIter { .. } => "poweriter",
        }
    }
}

/// Jacobian-vector product of the full model's tail, from a perturbation of
/// layer `l`'s pre-activation to the logits, at the point `trace`.
pub fn tail_jvp(net: &Network, weights: &[crate::elastic::EffectiveWeight], trace: &ForwardTrace, l: usize, d: &[f64]) -> Vec<f64> {
    let local = |j: usize, v: &[f64]| -> Vec<f64> {
        let b = &net.blocks[j];
        v.iter()
            .enumerate()
            .map(|(i, &x)| {
                let g = b.norm.as_ref().map_or(1.0, |n| n.gamma[i]);
                let z = g * trace.pre[j][i] + b.norm.as_ref().map_or(0.0, |n| n.beta[i]);
                x * g * b.activation.derivative(z)
            })
            .collect()
    };
    let mut delta = local(l, d);
    for j in l + 1..net.depth() {
        let pre = weights[j].apply(&delta).expect("consistent shapes");
        let mut next = local(j, &pre);
        if net.blocks[j].residual {
            next.iter_mut().zip(&delta).for_each(|(n, d)| *n += d);
        }
        delta = next;
    }
    delta
}

/// Adjoint of [`tail_jvp`].
pub fn tail_vjp(net: &Network, weights: &[crate::elastic::EffectiveWeight], trace: &ForwardTrace, l: usize, y: &[f64]) -> Vec<f64> {
    let local = |j: usize, v: &[f64]| -> Vec<f64> {
        let b = &net.blocks[j];
        v.iter()
            .enumerate()
            .map(|(i, &x)| {
                let g = b.norm.as_ref().map_or(1.0, |n| n.gamma[i]);
                let z = g * trace.pre[j][i] + b.norm.as_ref().map_or(0.0, |n| n.beta[i]);
                x * g * b.activation.derivative(z)
            })
            .collect()
    };
    let mut g = y.to_vec();
    for j in (l + 1..net.depth()).rev() {
        let through = weights[j].apply_transpose(&local(j, &g)).expect("consistent shapes");
        g = if net.blocks[j].residual { through.iter().zip(&g).map(|(a, b)| a + b).collect() } else { through };
    }
    local(l, &g)
}

/// Post-layer Lipschitz proxy `L̂_l` of the full model.
pub fn lipschitz_proxy(net: &Network, l: usize, mode: ProxyMode, inputs: &[Vec<f64>]) -> Result<f64> {
    if l >= net.depth() {
        return Err(Error::invalid(format!("layer {l} out of range")));
    }
    match mode {
        ProxyMode::Conservative => Ok(postlayer_bound(net, l, &full_weight_norms(net)?)),
        ProxyMode::PowerIter { steps, ema_decay } => {
            if inputs.is_empty() {
                return Err(Error::invalid("power-iteration proxy needs calibration inputs"));
            }
            if steps == 0 {
                return Err(Error::invalid("power-iteration proxy needs at least one step"));
            }
            let full = net.compile(None)?;
            let width = net.blocks[l].layer.out_dim();
            let mut vector = random_unit(width, POWER_SEED ^ l as u64);
            let mut ema: Option<f64> = None;
            for (i, x) in inputs.iter().enumerate() {
                let trace = full.forward(x)?;
                let iters = if i == 0 { DEFAULT_POWER_ITERS } else { steps };
                let est = power_iterate(
                    |d| tail_jvp(net, &full.weights, &trace, l, d),
                    |y| tail_vjp(net, &full.weights, &trace, l, y),
                    vector.clone(),
                    iters,
                );
                if est.value > 0.0 {
                    vector = est.vector;
                }
                ema = Some(match ema {
                    None => est.value,
                    Some(e) => ema_decay * e + (1.0 - ema_decay) * est.value,
                });
            }
            Ok(ema.expect("non-empty inputs"))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub layer: usize,
    pub lipschitz: f64,
    pub residual_norm: f64,
    pub alpha: f64,
    /// `L̂_ℓ · ‖ΔW_ℓ‖₂ · α_ℓ`.
    pub term: f64,
}

/// 95th percentiles over a calibration set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantileSummary {
    pub samples: usize,
    pub pointwise_bound_p95: f64,
    pub observed_drift_p95: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CertificateLedger {
    pub profile_id: String,
    pub mode: ProxyMode,
    pub certified: bool,
    pub entries: Vec<LedgerEntry>,
    /// `Δ̂ = Σ_ℓ term_ℓ`.
    pub delta_hat: f64,
    pub quantiles: Option<QuantileSummary>,
}

impl CertificateLedger {
    /// Recomputes every term and the total from the stored factors.
    pub fn verify(&self, tol: f64) -> Result<()> {
        let mut total = 0.0;
        for e in &self.entries {
            let t = e.lipschitz * e.residual_norm * e.alpha;
            if (t - e.term).abs() > tol * t.abs().max(1.0) || e.term < 0.0 {
                return Err(Error::Format(format!("ledger term of layer {} does not recompute", e.layer)));
            }
            total += e.term;
        }
        if (total - self.delta_hat).abs() > tol * total.abs().max(1.0) {
            return Err(Error::Format("ledger total does not recompute".into()));
        }
        Ok(())
    }
}

/// Certificate evaluator for one network, calibration and proxy mode. Caches
/// residual norms per `(layer, setting)`.
#[derive(Debug)]
pub struct Certifier<'a> {
    pub net: &'a Network,
    pub stats: &'a CalibrationStats,
    pub mode: ProxyMode,
    full_norms: Vec<f64>,
    estimated: Option<Vec<f64>>,
    cache: Mutex<HashMap<(usize, LayerSetting), f64>>,
}

impl<'a> Certifier<'a> {
    /// `inputs` feed the power-iteration proxy and are ignored in
    /// conservative mode.
    pub fn new(net: &'a Network, stats: &'a CalibrationStats, mode: ProxyMode, inputs: &[Vec<f64>]) -> Result<Self> {
        if stats.fingerprint != net.fingerprint() || stats.alpha.len() != net.depth() {
            return Err(Error::Stale("calibration statistics belong to different parameters".into()));
        }
        let estimated = match mode {
            ProxyMode::Conservative => None,
            ProxyMode::PowerIter { .. } => {
                Some((0..net.depth()).map(|l| lipschitz_proxy(net, l, mode, inputs)).collect::<Result<Vec<_>>>()?)
            }
        };
        Ok(Certifier { net, stats, mode, full_norms: full_weight_norms(net)?, estimated, cache: Mutex::new(HashMap::new()) })
    }

    /// Power-iteration certifier over previously estimated `L̂_ℓ`.
    pub fn with_estimates(net: &'a Network, stats: &'a CalibrationStats, mode: ProxyMode, lipschitz: Vec<f64>) -> Result<Self> {
        if mode.is_certified() || lipschitz.len() != net.depth() {
            return Err(Error::invalid("stored estimates need a power-iteration mode and one value per layer"));
        }
        if stats.fingerprint != net.fingerprint() || stats.alpha.len() != net.depth() {
            return Err(Error::Stale("calibration statistics belong to different parameters".into()));
        }
        Ok(Certifier { net, stats, mode, full_norms: full_weight_norms(net)?, estimated: Some(lipschitz), cache: Mutex::new(HashMap::new()) })
    }

    /// The stored power-iteration estimates, if any.
    pub fn estimates(&self) -> Option<&[f64]> {
        self.estimated.as_deref()
    }

    pub fn conservative(net: &'a Network, stats: &'a CalibrationStats) -> Result<Self> {
        Self::new(net, stats, ProxyMode::Conservative, &[])
    }

    pub fn residual(&self, l: usize, s: LayerSetting) -> Result<f64> {
        if let Some(v) = self.cache.lock().expect("cache lock").get(&(l, s)) {
            return Ok(*v);
        }
        let bits = s.q.map(|q| self.net.bitmap.factor_bits(q));
        let v = residual_norm(&self.net.blocks[l].layer, s.k, bits, self.net.clip)?;
        self.cache.lock().expect("cache lock").insert((l, s), v);
        Ok(v)
    }

    pub fn residuals(&self, profile: &Profile) -> Result<Vec<f64>> {
        self.net.check_profile(profile)?;
        profile.layers.iter().enumerate().map(|(l, &s)| self.residual(l, s)).collect()
    }

    /// `L̂_ℓ` for every layer. In conservative mode the tail bound uses
    /// `‖W_j‖ + ‖ΔW_j‖` so that it also covers the compressed layers after
    /// `ℓ`.
    pub fn lipschitz(&self, residuals: &[f64]) -> Vec<f64> {
        match &self.estimated {
            Some(v) => v.clone(),
            None => {
                let norms: Vec<f64> = self.full_norms.iter().zip(residuals).map(|(a, b)| a + b).collect();
                (0..self.net.depth()).map(|l| postlayer_bound(self.net, l, &norms)).collect()
            }
        }
    }

    pub fn ledger(&self, profile: &Profile) -> Result<CertificateLedger> {
        let res = self.residuals(profile)?;
        let lips = self.lipschitz(&res);
        let entries: Vec<LedgerEntry> = (0..self.net.depth())
            .map(|l| LedgerEntry {
                layer: l,
                lipschitz: lips[l],
                residual_norm: res[l],
                alpha: self.stats.alpha[l],
                term: lips[l] * res[l] * self.stats.alpha[l],
            })
            .collect();
        let delta_hat = entries.iter().map(|e| e.term).sum();
        Ok(CertificateLedger {
            profile_id: profile.id.clone(),
            mode: self.mode,
            certified: self.mode.is_certified(),
            entries,
            delta_hat,
            quantiles: None,
        })
    }

    /// Ledger with 95th percentiles of the pointwise bound and of the
    /// observed drift over `inputs`.
    pub fn ledger_with_quantiles(&self, profile: &Profile, inputs: &[Vec<f64>]) -> Result<CertificateLedger> {
        let mut ledger = self.ledger(profile)?;
        if inputs.is_empty() {
            return Ok(ledger);
        }
        let full = self.net.compile(None)?;
        let comp = self.net.compile(Some(profile))?;
        let coef: Vec<f64> = ledger.entries.iter().map(|e| e.lipschitz * e.residual_norm).collect();
        let mut bounds = Vec::with_capacity(inputs.len());
        let mut drifts = Vec::with_capacity(inputs.len());
        for x in inputs {
            let t = full.forward(x)?;
            bounds.push(pointwise_from_trace(&coef, &t));
            drifts.push(drift_between(&t.logits, &comp.logits(x)?));
        }
        ledger.quantiles = Some(QuantileSummary {
            samples: inputs.len(),
            pointwise_bound_p95: percentile(&bounds, 95.0),
            observed_drift_p95: percentile(&drifts, 95.0),
        });
        Ok(ledger)
    }

    /// `Δ̂(k)`.
    pub fn expected_bound(&self, profile: &Profile) -> Result<f64> {
        Ok(self.ledger(profile)?.delta_hat)
    }

    /// `Σ_ℓ L̂_ℓ ‖ΔW_ℓ‖₂ ‖a_{ℓ−1}(x)‖₂` with full-model activations.
    pub fn pointwise_bound(&self, profile: &Profile, x: &[f64]) -> Result<f64> {
        let coef = self.coefficients(profile)?;
        let trace = self.net.compile(None)?.forward(x)?;
        Ok(pointwise_from_trace(&coef, &trace))
    }

    /// `L̂_ℓ ‖ΔW_ℓ‖₂` per layer.
    pub fn coefficients(&self, profile: &Profile) -> Result<Vec<f64>> {
        let res = self.residuals(profile)?;
        let lips = self.lipschitz(&res);
        Ok(lips.iter().zip(&res).map(|(a, b)| a * b).collect())
    }
}

/// Pointwise bound from per-layer coefficients and a full-model trace.
pub fn pointwise_from_trace(coef: &[f64], trace: &ForwardTrace) -> f64 {
    coef.iter().zip(&trace.inputs).map(|(c, a)| c * norm2(a)).sum()
}

/// Conservative pointwise bound.
pub fn pointwise_bound(net: &Network, stats: &CalibrationStats, profile: &Profile, x: &[f64]) -> Result<f64> {
    Certifier::conservative(net, stats)?.pointwise_bound(profile, x)
}

/// Conservative `Δ̂(k)`.
pub fn expected_bound(net: &Network, stats: &CalibrationStats, profile: &Profile) -> Result<f64> {
    Certifier::conservative(net, stats)?.expected_bound(profile)
}

/// Linear-interpolated percentile, `p` in `[0, 100]`.
pub fn percentile(values: &[f64], p: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = p / 100.0 * (v.len() - 1) as f64;
    let (lo, hi) = (rank.floor() as usize, rank.ceil() as usize);
    v[lo] + (v[hi] - v[lo]) * (rank - lo as f64)
}

/// Pearson correlation; `None` when either side has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    if va <= 0.0 || vb <= 0.0 {
        return None;
    }
    Some(cov / (va * vb).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileDiagnostics {
    pub profile_id: String,
    pub delta_hat: f64,
    pub mean_drift: f64,
    pub coverage_pct: f64,
    pub pointwise_bound_p95: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub epsilon: f64,
    pub mode: ProxyMode,
    /// Share of `(profile, input)` samples with drift `≤ ε`.
    pub coverage_pct: f64,
    /// Pearson correlation of `Δ̂` against mean drift across profiles.
    pub correlation: Option<f64>,
    pub mean_drift: f64,
    /// 95th percentile of `Δ̂` over profiles.
    pub delta_hat_p95: f64,
    /// 95th percentile of the pointwise bound over all samples.
    pub pointwise_bound_p95: f64,
    pub observed_drift_p95: f64,
    pub profiles: Vec<ProfileDiagnostics>,
}

/// Coverage, correlation and drift summaries over `profiles × inputs`.
pub fn diagnostics(cert: &Certifier, profiles: &[Profile], inputs: &[Vec<f64>], epsilon: f64) -> Result<DiagnosticsReport> {
    if profiles.is_empty() || inputs.is_empty() {
        return Err(Error::invalid("diagnostics need profiles and inputs"));
    }
    let full = cert.net.compile(None)?;
    let traces = inputs.iter().map(|x| full.forward(x)).collect::<Result<Vec<_>>>()?;
    let mut all_drift = Vec::new();
    let mut all_bound = Vec::new();
    let mut per = Vec::new();
    for p in profiles {
        let comp = cert.net.compile(Some(p))?;
        let coef = cert.coefficients(p)?;
        let delta_hat = cert.expected_bound(p)?;
        let mut drifts = Vec::with_capacity(inputs.len());
        let mut bounds = Vec::with_capacity(inputs.len());
        for (x, t) in inputs.iter().zip(&traces) {
            drifts.push(drift_between(&t.logits, &comp.logits(x)?));
            bounds.push(pointwise_from_trace(&coef, t));
        }
        let covered = drifts.iter().filter(|&&d| d <= epsilon).count();
        per.push(ProfileDiagnostics {
            profile_id: p.id.clone(),
            delta_hat,
            mean_drift: drifts.iter().sum::<f64>() / drifts.len() as f64,
            coverage_pct: 100.0 * covered as f64 / drifts.len() as f64,
            pointwise_bound_p95: percentile(&bounds, 95.0),
        });
        all_drift.extend(drifts);
        all_bound.extend(bounds);
    }
    let covered = all_drift.iter().filter(|&&d| d <= epsilon).count();
    let deltas: Vec<f64> = per.iter().map(|p| p.delta_hat).collect();
    let means: Vec<f64> = per.iter().map(|p| p.mean_drift).collect();
    Ok(DiagnosticsReport {
        epsilon,
        mode: cert.mode,
        coverage_pct: 100.0 * covered as f64 / all_drift.len() as f64,
        correlation: pearson(&deltas, &means),
        mean_drift: all_drift.iter().sum::<f64>() / all_drift.len() as f64,
        delta_hat_p95: percentile(&deltas, 95.0),
        pointwise_bound_p95: percentile(&all_bound, 95.0),
        observed_drift_p95: percentile(&all_drift, 95.0),
        profiles: per,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::elastic::ElasticLayer;
    use crate::linalg::Matrix;
    use crate::network::{logit_drift, Activation, Block};

    fn one_layer() -> Network {
        let w = Matrix::from_fn(3, 3, |i, j| ((i * 4 + j * 7) % 5) as f64 - 2.0 + if i == j { 3.0 } else { 0.0 });
        Network::new(vec![Block::new(ElasticLayer::dense_svd(&w, 1, 3).unwrap(), Activation::Identity)]).unwrap()
    }

    #[test]
    fn alpha_is_rms() {
        let w = Matrix::identity(2);
        let net = Network::new(vec![Block::new(ElasticLayer::dense_svd(&w, 1, 2).unwrap(), Activation::Identity)]).unwrap();
        let s = calibrate(&net, &[vec![3.0, 0.0], vec![0.0, 4.0]]).unwrap();
        assert!((s.alpha[0] - 12.5f64.sqrt()).abs() < 1e-12);
        assert_eq!(s.running_max[0], 4.0);
        let dup = calibrate(&net, &vec![vec![3.0, 0.0]; 5]).unwrap();
        assert!((dup.alpha[0] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn single_layer_bound_dominates_drift() {
        let net = one_layer();
        let xs: Vec<Vec<f64>> = (0..20).map(|i| vec![(i as f64).sin(), (i as f64 * 0.7).cos(), 0.3]).collect();
        let stats = calibrate(&net, &xs).unwrap();
        let p = Profile::new(vec![LayerSetting::float(1)]);
        let c = Certifier::conservative(&net, &stats).unwrap();
        for x in &xs {
            let b = c.pointwise_bound(&p, x).unwrap();
            let d = logit_drift(&net, x, &p).unwrap();
            assert!(d <= b + 1e-12);
            let expect = c.residual(0, p.layers[0]).unwrap() * norm2(x);
            assert!((b - expect).abs() < 1e-12);
        }
        assert_eq!(c.expected_bound(&net.full_profile()).unwrap(), 0.0);
        c.ledger(&p).unwrap().verify(1e-12).unwrap();
    }

    #[test]
    fn stale_stats_rejected() {
        let net = one_layer();
        let mut stats = calibrate(&net, &[vec![1.0, 0.0, 0.0]]).unwrap();
        stats.fingerprint = "x".into();
        assert!(matches!(Certifier::conservative(&net, &stats), Err(Error::Stale(_))));
    }

    #[test]
    fn power_iter_last_layer_is_one() {
        let net = one_layer();
        let xs = vec![vec![1.0, 2.0, 3.0]];
        assert!((lipschitz_proxy(&net, 0, ProxyMode::power_iter(), &xs).unwrap() - 1.0).abs() < 1e-9);
        assert_eq!(lipschitz_proxy(&net, 0, ProxyMode::Conservative, &xs).unwrap(), 1.0);
    }

    #[test]
    fn pearson_degenerate() {
        assert_eq!(pearson(&[1.0, 1.0], &[2.0, 3.0]), None);
        assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.5]).unwrap() - 1.0).abs() < 1e-2);
    }
}
