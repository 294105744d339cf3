//! Closed-form FLOPs/bytes accounting, break-even thresholds, NNLS latency
//! and energy proxies, and synthetic device tables.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::elastic::{ElasticLayer, FactorBits, LayerFactors};
use crate::error::{Error, Result};
use crate::linalg::{nnls, Matrix};
use crate::network::Network;
use crate::profile::{LayerSetting, Profile};

/// Activation bit-width assumed for activation traffic.
pub const ACTIVATION_BITS: u64 = 8;
/// Bits per stored value for unquantized factors.
pub const FLOAT_BITS: u8 = 64;

/// `2nk + k + 2mk` for `U diag(σ) Vᵀ x` with `U: m×k`, `V: n×k`.
pub fn flops_dense_svd(m: u64, n: u64, k: u64) -> u64 {
    2 * n * k + k + 2 * m * k
}

/// `2mn` for a dense matrix-vector product.
pub fn flops_dense_full(m: u64, n: u64) -> u64 {
    2 * m * n
}

/// `2HW(C_i r_i + r_o r_i h w + C_o r_o)`.
#[allow(clippy::too_many_arguments)]
pub fn flops_conv_tucker2(c_o: u64, c_i: u64, h: u64, w: u64, big_h: u64, big_w: u64, r_o: u64, r_i: u64) -> u64 {
    2 * big_h * big_w * (c_i * r_i + r_o * r_i * h * w + c_o * r_o)
}

/// `2 C_o C_i h w H W`.
pub fn flops_conv_full(c_o: u64, c_i: u64, h: u64, w: u64, big_h: u64, big_w: u64) -> u64 {
    2 * c_o * c_i * h * w * big_h * big_w
}

/// Compute break-even rank `⌊mn/(m+n)⌋` of a dense factorization.
pub fn threshold_rank_dense(m: u64, n: u64) -> u64 {
    (m * n) / (m + n)
}

/// Break-even rank ratio `1/√(hw)` of a Tucker-2 conv.
pub fn threshold_rho_conv(h: u64, w: u64) -> f64 {
    1.0 / ((h * w) as f64).sqrt()
}

fn tensor_bytes(values: u64, bits: u8) -> u64 {
    (values * bits as u64).div_ceil(8)
}

/// Element counts of the retained `(U, core, V)` tensors at rank `k`.
pub fn factor_sizes(layer: &ElasticLayer, k: usize) -> Result<[u64; 3]> {
    layer.check_rank(k)?;
    Ok(match &layer.factors {
        LayerFactors::DenseSvd(f) => [(f.u.rows() * k) as u64, k as u64, (f.v.rows() * k) as u64],
        LayerFactors::DenseCp(f) => [(f.a1.rows() * k) as u64, k as u64, (f.a2.rows() * k) as u64],
        LayerFactors::ConvTucker2 { factors, .. } => {
            let (ro, ri) = layer.tucker_ranks(k).expect("conv layer");
            let (h, w) = (factors.core.h, factors.core.w);
            [(factors.u_out.rows() * ro) as u64, (ro * ri * h * w) as u64, (factors.u_in.rows() * ri) as u64]
        }
    })
}

/// Weight payload bytes at rank `k`, rounded up per tensor; unquantized
/// factors count 64 bits per value.
pub fn bytes_of(layer: &ElasticLayer, k: usize, bits: Option<FactorBits>) -> Result<u64> {
    let [u, c, v] = factor_sizes(layer, k)?;
    let b = bits.unwrap_or(FactorBits::uniform(FLOAT_BITS));
    Ok(tensor_bytes(u, b.u) + tensor_bytes(c, b.core) + tensor_bytes(v, b.v))
}

/// FLOPs of a layer's staged factor kernels at rank `k`.
pub fn flops_of(layer: &ElasticLayer, k: usize) -> Result<u64> {
    layer.check_rank(k)?;
    Ok(match &layer.factors {
        LayerFactors::DenseSvd(f) => flops_dense_svd(f.u.rows() as u64, f.v.rows() as u64, k as u64),
        LayerFactors::DenseCp(f) => flops_dense_svd(f.a1.rows() as u64, f.a2.rows() as u64, k as u64),
        LayerFactors::ConvTucker2 { factors, geometry } => {
            let (ro, ri) = layer.tucker_ranks(k).expect("conv layer");
            flops_conv_tucker2(
                factors.u_out.rows() as u64,
                factors.u_in.rows() as u64,
                factors.core.h as u64,
                factors.core.w as u64,
                geometry.height as u64,
                geometry.width as u64,
                ro as u64,
                ri as u64,
            )
        }
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LayerCost {
    pub flops: u64,
    pub weight_bytes: u64,
    pub activation_bytes: u64,
}

impl LayerCost {
    /// Memory traffic feature: weights plus activations.
    pub fn bytes(&self) -> u64 {
        self.weight_bytes + self.activation_bytes
    }
}

pub fn layer_cost(net: &Network, l: usize, s: LayerSetting) -> Result<LayerCost> {
    let layer = &net.blocks[l].layer;
    Ok(LayerCost {
        flops: flops_of(layer, s.k)?,
        weight_bytes: bytes_of(layer, s.k, s.q.map(|q| net.bitmap.factor_bits(q)))?,
        activation_bytes: ((layer.in_dim() + layer.out_dim()) as u64 * ACTIVATION_BITS).div_ceil(8),
    })
}

pub fn profile_costs(net: &Network, p: &Profile) -> Result<Vec<LayerCost>> {
    net.check_profile(p)?;
    p.layers.iter().enumerate().map(|(l, &s)| layer_cost(net, l, s)).collect()
}

/// Sum of weight bytes over layers.
pub fn profile_bytes(net: &Network, p: &Profile) -> Result<u64> {
    Ok(profile_costs(net, p)?.iter().map(|c| c.weight_bytes).sum())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Metric {
    LatencyMs,
    EnergyMj,
}

/// `ŷ = α₀ + Σ_ℓ (α_ℓ^comp·FLOPs_ℓ + α_ℓ^mem·Bytes_ℓ)` with non-negative
/// coefficients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub device: String,
    pub metric: Metric,
    pub intercept: f64,
    pub comp: Vec<f64>,
    pub mem: Vec<f64>,
    pub r2: f64,
    pub mape: f64,
}

fn features(costs: &[LayerCost]) -> Vec<f64> {
    let mut f = Vec::with_capacity(1 + 2 * costs.len());
    f.push(1.0);
    for c in costs {
        f.push(c.flops as f64);
        f.push(c.bytes() as f64);
    }
    f
}

/// Linear prediction; errors on a layer-count mismatch.
pub fn predict(model: &CostModel, costs: &[LayerCost]) -> Result<f64> {
    if costs.len() != model.comp.len() {
        return Err(Error::invalid(format!(
            "cost model covers {} layers, profile has {}",
            model.comp.len(),
            costs.len()
        )));
    }
    Ok(model.intercept
        + costs
            .iter()
            .zip(model.comp.iter().zip(&model.mem))
            .map(|(c, (a, b))| a * c.flops as f64 + b * c.bytes() as f64)
            .sum::<f64>())
}

/// `(R², MAPE %)` of predictions against observations.
pub fn fit_stats(pred: &[f64], obs: &[f64]) -> (f64, f64) {
    let n = obs.len() as f64;
    let mean = obs.iter().sum::<f64>() / n;
    let ss_tot: f64 = obs.iter().map(|y| (y - mean).powi(2)).sum();
    let ss_res: f64 = obs.iter().zip(pred).map(|(y, p)| (y - p).powi(2)).sum();
    let r2 = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { f64::NAN };
    let mape = 100.0 * obs.iter().zip(pred).map(|(y, p)| ((y - p) / y).abs()).sum::<f64>() / n;
    (r2, mape)
}

/// NNLS fit of per-layer compute and memory coefficients.
pub fn fit_linear(device: &str, metric: Metric, rows: &[Vec<LayerCost>], targets: &[f64]) -> Result<CostModel> {
    let layers = rows.first().map_or(0, Vec::len);
    let unknowns = 1 + 2 * layers;
    if rows.len() != targets.len() {
        return Err(Error::dims("cost rows and targets differ in length"));
    }
    if rows.len() < unknowns {
        return Err(Error::Underdetermined { observations: rows.len(), unknowns });
    }
    if rows.iter().any(|r| r.len() != layers) {
        return Err(Error::dims("profiles differ in layer count"));
    }
    let feats: Vec<Vec<f64>> = rows.iter().map(|r| features(r)).collect();
    let a = Matrix::from_fn(rows.len(), unknowns, |i, j| feats[i][j]);
    let colscale: Vec<f64> = (0..unknowns)
        .map(|j| (0..rows.len()).map(|i| a.get(i, j).powi(2)).sum::<f64>().sqrt())
        .collect();
    if colscale[1..].iter().all(|&s| s == 0.0) {
        return Err(Error::invalid("all cost features are zero"));
    }
    let scaled = Matrix::from_fn(rows.len(), unknowns, |i, j| {
        if colscale[j] > 0.0 {
            a.get(i, j) / colscale[j]
        } else {
            0.0
        }
    });
    let z = nnls(&scaled, targets)?;
    let coef: Vec<f64> = z.iter().zip(&colscale).map(|(z, s)| if *s > 0.0 { z / s } else { 0.0 }).collect();
    let mut model = CostModel {
        device: device.to_string(),
        metric,
        intercept: coef[0],
        comp: (0..layers).map(|l| coef[1 + 2 * l]).collect(),
        mem: (0..layers).map(|l| coef[2 + 2 * l]).collect(),
        r2: 0.0,
        mape: 0.0,
    };
    let pred = rows.iter().map(|r| predict(&model, r)).collect::<Result<Vec<_>>>()?;
    (model.r2, model.mape) = fit_stats(&pred, targets);
    Ok(model)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviceRow {
    pub profile_id: String,
    pub latency_ms: f64,
    pub energy_mj: Option<f64>,
}

/// How a synthetic table was generated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub seed: u64,
    /// Log-normal multiplicative noise standard deviation.
    pub noise_sigma: f64,
    /// Per-layer launch overhead, in ms.
    pub launch_ms: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec { seed: 3407, noise_sigma: 0.03, launch_ms: 0.004 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviceTable {
    pub device: String,
    pub rows: Vec<DeviceRow>,
    pub synthetic: Option<SynthSpec>,
}

impl DeviceTable {
    /// Header `profile_id,latency_ms,energy_mj`; energy may be empty.
    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["profile_id", "latency_ms", "energy_mj"])?;
        for r in &self.rows {
            wr.write_record([
                r.profile_id.clone(),
                r.latency_ms.to_string(),
                r.energy_mj.map(|e| e.to_string()).unwrap_or_default(),
            ])?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn read_csv(device: &str, r: impl Read) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let headers = rd.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["profile_id", "latency_ms", "energy_mj"] {
            return Err(Error::Format("device table header must be profile_id,latency_ms,energy_mj".into()));
        }
        let mut rows = Vec::new();
        for rec in rd.records() {
            let rec = rec?;
            let num = |s: &str| s.trim().parse::<f64>().map_err(|_| Error::Format(format!("bad number {s:?}")));
            let latency_ms = num(&rec[1])?;
            if !(latency_ms > 0.0) {
                return Err(Error::Format(format!("non-positive latency for {}", &rec[0])));
            }
            let energy_mj = if rec[2].trim().is_empty() { None } else { Some(num(&rec[2])?) };
            rows.push(DeviceRow { profile_id: rec[0].to_string(), latency_ms, energy_mj });
        }
        Ok(DeviceTable { device: device.to_string(), rows, synthetic: None })
    }
}

/// Per-profile costs and targets of a device table, parsed from profile ids.
pub fn table_rows(net: &Network, table: &DeviceTable, metric: Metric) -> Result<(Vec<Vec<LayerCost>>, Vec<f64>)> {
    let mut rows = Vec::with_capacity(table.rows.len());
    let mut ys = Vec::with_capacity(table.rows.len());
    for r in &table.rows {
        let y = match metric {
            Metric::LatencyMs => r.latency_ms,
            Metric::EnergyMj => match r.energy_mj {
                Some(e) => e,
                None => continue,
            },
        };
        let p = Profile::new(Profile::parse_id(&r.profile_id)?);
        rows.push(profile_costs(net, &p)?);
        ys.push(y);
    }
    Ok((rows, ys))
}

pub fn fit_cost_model(net: &Network, table: &DeviceTable, metric: Metric) -> Result<CostModel> {
    let (rows, ys) = table_rows(net, table, metric)?;
    fit_linear(&table.device, metric, &rows, &ys)
}

/// The planted linear model behind a synthetic table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedModel {
    pub latency: CostModel,
    pub energy: CostModel,
}

fn log_uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    (rng.random_range(lo.ln()..hi.ln())).exp()
}

/// Draws a planted model for `net`'s layer count.
pub fn planted_model(device: &str, layers: usize, spec: &SynthSpec) -> PlantedModel {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut draw = |metric, comp: (f64, f64), mem: (f64, f64), launch: f64| CostModel {
        device: device.to_string(),
        metric,
        intercept: launch * layers as f64,
        comp: (0..layers).map(|_| log_uniform(&mut rng, comp.0, comp.1)).collect(),
        mem: (0..layers).map(|_| log_uniform(&mut rng, mem.0, mem.1)).collect(),
        r2: 1.0,
        mape: 0.0,
    };
    let latency = draw(Metric::LatencyMs, (2e-7, 2e-6), (2e-6, 2e-5), spec.launch_ms);
    let energy = draw(Metric::EnergyMj, (5e-7, 5e-6), (1e-5, 1e-4), spec.launch_ms * 0.5);
    PlantedModel { latency, energy }
}

/// Synthetic measurements: planted predictions with multiplicative
/// log-normal noise.
pub fn synth_device(net: &Network, device: &str, profiles: &[Profile], spec: &SynthSpec) -> Result<(DeviceTable, PlantedModel)> {
    let planted = planted_model(device, net.depth(), spec);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut rows = Vec::with_capacity(profiles.len());
    for p in profiles {
        let c = profile_costs(net, p)?;
        let n1: f64 = StandardNormal.sample(&mut rng);
        let n2: f64 = StandardNormal.sample(&mut rng);
        rows.push(DeviceRow {
            profile_id: Profile::canonical_id(&p.layers),
            latency_ms: predict(&planted.latency, &c)? * (spec.noise_sigma * n1).exp(),
            energy_mj: Some(predict(&planted.energy, &c)? * (spec.noise_sigma * n2).exp()),
        });
    }
    Ok((DeviceTable { device: device.to_string(), rows, synthetic: Some(spec.clone()) }, planted))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Matrix;

    #[test]
    fn formula_examples() {
        assert_eq!(flops_dense_svd(4, 4, 1), 17);
        assert_eq!(flops_conv_tucker2(4, 4, 3, 3, 8, 8, 1, 1), 2176);
        assert_eq!(threshold_rank_dense(64, 64), 32);
        assert_eq!(threshold_rank_dense(100, 1), 0);
        assert!((threshold_rho_conv(3, 3) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(threshold_rho_conv(1, 1), 1.0);
    }

    #[test]
    fn bytes_example() {
        let w = Matrix::from_fn(8, 8, |i, j| ((i * 3 + j * 5) % 7) as f64 - 3.0 + if i == j { 4.0 } else { 0.0 });
        let l = ElasticLayer::dense_svd(&w, 1, 8).unwrap();
        assert_eq!(bytes_of(&l, 2, Some(FactorBits::uniform(8))).unwrap(), 34);
        assert_eq!(bytes_of(&l, 2, Some(FactorBits::uniform(4))).unwrap(), 17);
    }

    #[test]
    fn csv_round_trip() {
        let t = DeviceTable {
            device: "d".into(),
            rows: vec![
                DeviceRow { profile_id: "k1q4".into(), latency_ms: 0.125, energy_mj: Some(1.5) },
                DeviceRow { profile_id: "k2q4".into(), latency_ms: 0.25, energy_mj: None },
            ],
            synthetic: None,
        };
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let back = DeviceTable::read_csv("d", buf.as_slice()).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn underdetermined_fit() {
        let rows = vec![vec![LayerCost { flops: 1, weight_bytes: 1, activation_bytes: 0 }]];
        assert!(matches!(fit_linear("d", Metric::LatencyMs, &rows, &[1.0]), Err(Error::Underdetermined { .. })));
    }
}
