//! Elastic factorized layers: truncation to a rank, quantized compression of
//! the retained factors, residual norms, relaxed rank masks and the
//! rank-tied bit map.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{tucker2_max_ranks, 
    conv2d, conv2d_transpose, conv_operator_norm, cp_fit, spectral_norm_exact, svd_full, tucker2_fit,
    ConvGeometry, CpFactors, Matrix, SvdFactors, Tensor4, Tucker2Factors,
};
use crate::quant::{calibrate_scale, dequantize, quantize, CalibrationRequest, ClipMode, QuantizedFactor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum LayerFactors {
    DenseSvd(SvdFactors),
    ConvTucker2 { factors: Tucker2Factors, geometry: ConvGeometry },
    DenseCp(CpFactors),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElasticLayer {
    pub factors: LayerFactors,
    pub k_min: usize,
    pub k_max: usize,
    /// Layers sharing a group always run at the same rank.
    pub group_id: Option<String>,
    #[serde(with = "crate::linalg::blob::opt")]
    pub bias: Option<Vec<f64>>,
}

impl ElasticLayer {
    /// Full SVD of `w`, elastic over `[k_min, k_max]`.
    pub fn dense_svd(w: &Matrix, k_min: usize, k_max: usize) -> Result<Self> {
        let f = svd_full(w, w.rows().min(w.cols()))?;
        Self::checked(LayerFactors::DenseSvd(f), k_min, k_max)
    }

    /// Full-rank Tucker-2 of a conv kernel; `k` scales both channel ranks.
    pub fn conv_tucker2(w: &Tensor4, geometry: ConvGeometry, k_min: usize, k_max: usize, sweeps: usize) -> Result<Self> {
        let (r_o, r_i) = tucker2_max_ranks(w);
        let f = tucker2_fit(w, r_o, r_i, sweeps)?;
        Self::checked(LayerFactors::ConvTucker2 { factors: f, geometry }, k_min, k_max)
    }

    /// Rank-`r` CP fit of `w`.
    pub fn dense_cp(w: &Matrix, r: usize, k_min: usize, k_max: usize, sweeps: usize) -> Result<Self> {
        let f = cp_fit(w, r, sweeps)?;
        Self::checked(LayerFactors::DenseCp(f), k_min, k_max)
    }

    pub fn from_factors(factors: LayerFactors, k_min: usize, k_max: usize) -> Result<Self> {
        Self::checked(factors, k_min, k_max)
    }

    fn checked(factors: LayerFactors, k_min: usize, k_max: usize) -> Result<Self> {
        let layer = ElasticLayer { factors, k_min, k_max, group_id: None, bias: None };
        layer.validate()?;
        Ok(layer)
    }

    pub fn with_bias(mut self, bias: Vec<f64>) -> Result<Self> {
        if bias.len() != self.out_dim() {
            return Err(Error::dims(format!("bias length {} for output dim {}", bias.len(), self.out_dim())));
        }
        self.bias = Some(bias);
        Ok(self)
    }

    pub fn with_group(mut self, group: impl Into<String>) -> Self {
        self.group_id = Some(group.into());
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_min == 0 || self.k_min > self.k_max || self.k_max > self.stored_rank() {
            return Err(Error::invalid(format!(
                "rank range [{}, {}] invalid for stored rank {}",
                self.k_min,
                self.k_max,
                self.stored_rank()
            )));
        }
        if let Some(b) = &self.bias {
            if b.len() != self.out_dim() {
                return Err(Error::dims("bias length"));
            }
        }
        Ok(())
    }

    pub fn stored_rank(&self) -> usize {
        match &self.factors {
            LayerFactors::DenseSvd(f) => f.rank(),
            LayerFactors::ConvTucker2 { factors, .. } => {
                let (a, b) = factors.ranks();
                a.max(b)
            }
            LayerFactors::DenseCp(f) => f.rank(),
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self.factors {
            LayerFactors::DenseSvd(_) => "dense_svd",
            LayerFactors::ConvTucker2 { .. } => "conv_tucker2",
            LayerFactors::DenseCp(_) => "dense_cp",
        }
    }

    pub fn is_conv(&self) -> bool {
        matches!(self.factors, LayerFactors::ConvTucker2 { .. })
    }

    /// Flattened input length.
    pub fn in_dim(&self) -> usize {
        match &self.factors {
            LayerFactors::DenseSvd(f) => f.v.rows(),
            LayerFactors::DenseCp(f) => f.a2.rows(),
            LayerFactors::ConvTucker2 { factors, geometry } => factors.u_in.rows() * geometry.pixels(),
        }
    }

    /// Flattened output length.
    pub fn out_dim(&self) -> usize {
        match &self.factors {
            LayerFactors::DenseSvd(f) => f.u.rows(),
            LayerFactors::DenseCp(f) => f.a1.rows(),
            LayerFactors::ConvTucker2 { factors, geometry } => factors.u_out.rows() * geometry.pixels(),
        }
    }

    pub fn check_rank(&self, k: usize) -> Result<()> {
        if k < self.k_min || k > self.k_max {
            return Err(Error::RankOutOfRange { k, k_min: self.k_min, k_max: self.k_max });
        }
        Ok(())
    }

    /// Channel ranks used by a conv layer at elastic rank `k`:
    /// `r(k) = ⌈k·R/k_max⌉` for each stored channel rank `R`.
    pub fn tucker_ranks(&self, k: usize) -> Option<(usize, usize)> {
        match &self.factors {
            LayerFactors::ConvTucker2 { factors, .. } => {
                let (ro, ri) = factors.ranks();
                let sched = |r: usize| (k * r).div_ceil(self.k_max).clamp(1, r);
                Some((sched(ro), sched(ri)))
            }
            _ => None,
        }
    }

    /// Number of entries in the per-rank mask vector.
    pub fn mask_len(&self) -> usize {
        self.k_max
    }
}

/// A realized weight: a dense matrix or a conv kernel on a fixed geometry.
#[derive(Clone, Debug, PartialEq)]
pub enum EffectiveWeight {
    Dense(Matrix),
    Conv { kernel: Tensor4, geometry: ConvGeometry },
}

impl EffectiveWeight {
    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        match self {
            EffectiveWeight::Dense(m) => m.matvec(x),
            EffectiveWeight::Conv { kernel, geometry } => conv2d(kernel, *geometry, x),
        }
    }

    pub fn apply_transpose(&self, y: &[f64]) -> Result<Vec<f64>> {
        match self {
            EffectiveWeight::Dense(m) => m.t_matvec(y),
            EffectiveWeight::Conv { kernel, geometry } => conv2d_transpose(kernel, *geometry, y),
        }
    }

    pub fn sub(&self, other: &EffectiveWeight) -> Result<EffectiveWeight> {
        match (self, other) {
            (EffectiveWeight::Dense(a), EffectiveWeight::Dense(b)) => Ok(EffectiveWeight::Dense(a.sub(b)?)),
            (EffectiveWeight::Conv { kernel: a, geometry }, EffectiveWeight::Conv { kernel: b, .. }) => {
                Ok(EffectiveWeight::Conv { kernel: a.sub(b)?, geometry: *geometry })
            }
            _ => Err(Error::dims("cannot subtract dense and conv weights")),
        }
    }

    /// Exact operator 2-norm on the flattened input space.
    pub fn operator_norm(&self) -> Result<f64> {
        match self {
            EffectiveWeight::Dense(m) => spectral_norm_exact(m),
            EffectiveWeight::Conv { kernel, geometry } => conv_operator_norm(kernel, *geometry),
        }
    }

    pub fn as_dense(&self) -> Option<&Matrix> {
        match self {
            EffectiveWeight::Dense(m) => Some(m),
            _ => None,
        }
    }

    pub fn values(&self) -> &[f64] {
        match self {
            EffectiveWeight::Dense(m) => m.data(),
            EffectiveWeight::Conv { kernel, .. } => kernel.data(),
        }
    }
}

/// Top-`k` reconstruction.
pub fn truncate(layer: &ElasticLayer, k: usize) -> Result<EffectiveWeight> {
    layer.check_rank(k)?;
    Ok(match &layer.factors {
        LayerFactors::DenseSvd(f) => EffectiveWeight::Dense(f.reconstruct(k)),
        LayerFactors::DenseCp(f) => EffectiveWeight::Dense(f.reconstruct(k)),
        LayerFactors::ConvTucker2 { factors, geometry } => {
            let (ro, ri) = layer.tucker_ranks(k).expect("conv layer");
            EffectiveWeight::Conv { kernel: factors.truncated(ro, ri).reconstruct(), geometry: *geometry }
        }
    })
}

/// Which factor of a layer a bit-width applies to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Factor {
    U,
    /// `Σ` for dense layers, the core tensor for conv layers.
    Core,
    V,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactorOffsets {
    pub u: i8,
    pub core: i8,
    pub v: i8,
}

impl Default for FactorOffsets {
    fn default() -> Self {
        FactorOffsets { u: 1, core: 0, v: 1 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactorBits {
    pub u: u8,
    pub core: u8,
    pub v: u8,
}

impl FactorBits {
    pub fn uniform(q: u8) -> Self {
        FactorBits { u: q, core: q, v: q }
    }

    pub fn get(&self, f: Factor) -> u8 {
        match f {
            Factor::U => self.u,
            Factor::Core => self.core,
            Factor::V => self.v,
        }
    }
}

/// `q(k) = min(q_max, ⌊a ln k + b⌋)` plus per-factor offsets.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BitMap {
    pub a: f64,
    pub b: f64,
    pub q_max: u8,
    pub offsets: FactorOffsets,
}

impl Default for BitMap {
    fn default() -> Self {
        BitMap { a: 1.0, b: 4.0, q_max: 8, offsets: FactorOffsets::default() }
    }
}

impl BitMap {
    /// Base bit-width before offsets, clamped to `[2, q_max]`.
    pub fn base(&self, k: usize) -> u8 {
        let raw = (self.a * (k.max(1) as f64).ln() + self.b).floor();
        raw.clamp(2.0, self.q_max as f64) as u8
    }

    /// Per-factor widths for a base width `q`.
    pub fn factor_bits(&self, q: u8) -> FactorBits {
        let off = |o: i8| (q as i16 + o as i16).clamp(2, self.q_max as i16) as u8;
        FactorBits { u: off(self.offsets.u), core: off(self.offsets.core), v: off(self.offsets.v) }
    }
}

/// Bit-width of `factor` at rank `k`.
pub fn bit_of_rank(bm: &BitMap, k: usize, factor: Factor) -> u8 {
    bm.factor_bits(bm.base(k)).get(factor)
}

/// Retained factors at a rank, possibly quantized. Values are the
/// dequantized ones that enter the forward pass.
#[derive(Clone, Debug, PartialEq)]
pub enum CompressedForm {
    /// `U diag(σ) Vᵀ` with `u: m×k`, `v: n×k` (also used for CP).
    LowRank { u: Matrix, sigma: Vec<f64>, v: Matrix },
    Tucker2 { u_out: Matrix, core: Tensor4, u_in: Matrix, geometry: ConvGeometry },
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompressedLayer {
    pub form: CompressedForm,
    /// Quantized payloads in `U, core, V` order when bits were given.
    pub payload: Option<[QuantizedFactor; 3]>,
}

impl CompressedForm {
    pub fn effective(&self) -> EffectiveWeight {
        match self {
            CompressedForm::LowRank { u, sigma, v } => {
                EffectiveWeight::Dense(u.scale_columns(sigma).matmul_t(v).expect("consistent factors"))
            }
            CompressedForm::Tucker2 { u_out, core, u_in, geometry } => EffectiveWeight::Conv {
                kernel: Tucker2Factors { u_out: u_out.clone(), core: core.clone(), u_in: u_in.clone() }.reconstruct(),
                geometry: *geometry,
            },
        }
    }
}

fn quantize_values(values: Vec<f64>, shape: Vec<usize>, bits: u8, clip: ClipMode) -> Result<(Vec<f64>, QuantizedFactor)> {
    let t = (values, shape);
    let req = CalibrationRequest { clip, ..CalibrationRequest::per_tensor(bits) };
    let spec = calibrate_scale(&t, req)?;
    let q = quantize(&t, &spec)?;
    Ok((dequantize(&q)?, q))
}

fn quantize_matrix(m: &Matrix, bits: u8, clip: ClipMode) -> Result<(Matrix, QuantizedFactor)> {
    let (v, q) = quantize_values(m.data().to_vec(), vec![m.rows(), m.cols()], bits, clip)?;
    Ok((Matrix::new(m.rows(), m.cols(), v)?, q))
}

/// Truncate to rank `k` then, when `bits` is given, quantize each retained
/// factor per tensor with nearest rounding.
pub fn compress(layer: &ElasticLayer, k: usize, bits: Option<FactorBits>, clip: ClipMode) -> Result<CompressedLayer> {
    layer.check_rank(k)?;
    let (u, core, v, geometry) = match &layer.factors {
        LayerFactors::DenseSvd(f) => (
            f.u.leading_columns(k),
            CoreValues::Diag(f.sigma[..k].to_vec()),
            f.v.leading_columns(k),
            None,
        ),
        LayerFactors::DenseCp(f) => (
            f.a1.leading_columns(k),
            CoreValues::Diag(f.lambda[..k].to_vec()),
            f.a2.leading_columns(k),
            None,
        ),
        LayerFactors::ConvTucker2 { factors, geometry } => {
            let (ro, ri) = layer.tucker_ranks(k).expect("conv layer");
            let t = factors.truncated(ro, ri);
            (t.u_out, CoreValues::Tensor(t.core), t.u_in, Some(*geometry))
        }
    };
    let Some(bits) = bits else {
        return Ok(CompressedLayer { form: core.into_form(u, v, geometry), payload: None });
    };
    let (uq, pu) = quantize_matrix(&u, bits.u, clip)?;
    let (vq, pv) = quantize_matrix(&v, bits.v, clip)?;
    let (coreq, pc) = match core {
        CoreValues::Diag(s) => {
            let n = s.len();
            let (vals, q) = quantize_values(s, vec![n], bits.core, clip)?;
            (CoreValues::Diag(vals), q)
        }
        CoreValues::Tensor(t) => {
            let (a, b, h, w) = t.dims();
            let (vals, q) = quantize_values(t.data().to_vec(), vec![a, b, h, w], bits.core, clip)?;
            (CoreValues::Tensor(Tensor4::new(a, b, h, w, vals)?), q)
        }
    };
    Ok(CompressedLayer { form: coreq.into_form(uq, vq, geometry), payload: Some([pu, pc, pv]) })
}

enum CoreValues {
    Diag(Vec<f64>),
    Tensor(Tensor4),
}

impl CoreValues {
    fn into_form(self, u: Matrix, v: Matrix, geometry: Option<ConvGeometry>) -> CompressedForm {
        match self {
            CoreValues::Diag(sigma) => CompressedForm::LowRank { u, sigma, v },
            CoreValues::Tensor(core) => CompressedForm::Tucker2 {
                u_out: u,
                core,
                u_in: v,
                geometry: geometry.expect("conv geometry"),
            },
        }
    }
}

/// The uncompressed reference weight, i.e. the reconstruction at `k_max`.
pub fn full_weight(layer: &ElasticLayer) -> EffectiveWeight {
    truncate(layer, layer.k_max).expect("k_max is in range")
}

/// `‖W − W̃(k)‖₂` against the `k_max` reconstruction, with `W̃` quantized
/// when `bits` is given.
pub fn residual_norm(layer: &ElasticLayer, k: usize, bits: Option<FactorBits>, clip: ClipMode) -> Result<f64> {
    layer.check_rank(k)?;
    if bits.is_none() {
        if k == layer.k_max {
            return Ok(0.0);
        }
        if let LayerFactors::DenseSvd(f) = &layer.factors {
            let kk = layer.k_max;
            if f.u.leading_columns(kk).orthonormality_defect() < 1e-12
                && f.v.leading_columns(kk).orthonormality_defect() < 1e-12
                && f.sigma[..kk].windows(2).all(|p| p[0] >= p[1])
            {
                return Ok(f.sigma[k].abs());
            }
        }
    }
    let w = full_weight(layer);
    let w_k = compress(layer, k, bits, clip)?.form.effective();
    w.sub(&w_k)?.operator_norm()
}

/// Relaxation mode of a rank mask.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskMode {
    Soft,
    Hard(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankMask {
    pub logits: Vec<f64>,
    pub temperature: f64,
    pub mode: MaskMode,
}

/// `1` for the leading `k` of `len` components.
pub fn hard_mask(len: usize, k: usize) -> Vec<f64> {
    (0..len).map(|i| if i < k { 1.0 } else { 0.0 }).collect()
}

/// Indicator of the `k` largest entries of `scores` (ties to the lower index).
pub fn top_k_indicator(scores: &[f64], k: usize) -> Vec<f64> {
    let order = descending_order(scores);
    let mut out = vec![0.0; scores.len()];
    for &i in order.iter().take(k) {
        out[i] = 1.0;
    }
    out
}

fn descending_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Threshold between the `k`-th and `(k+1)`-th largest perturbed scores.
/// With `k = len` it sits one unit below the smallest score.
pub fn mask_threshold(scores: &[f64], k: usize) -> f64 {
    let order = descending_order(scores);
    let n = scores.len();
    if k == 0 {
        scores[order[0]] + 1.0
    } else if k >= n {
        scores[order[n - 1]] - 1.0
    } else {
        0.5 * (scores[order[k - 1]] + scores[order[k]])
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Relaxed top-`k_target` mask `m̂_i = σ((g_i − t)/τ)` with perturbed scores
/// `g = logits + noise` and `t` the midpoint threshold of [`mask_threshold`].
/// A `Hard(k)` mask ignores noise and returns the leading-`k` indicator.
pub fn soft_mask(mask: &RankMask, gumbel_noise: &[f64], k_target: usize) -> Result<Vec<f64>> {
    if let MaskMode::Hard(k) = mask.mode {
        return Ok(hard_mask(mask.logits.len(), k));
    }
    if !(mask.temperature > 0.0) {
        return Err(Error::invalid(format!("mask temperature must be positive, got {}", mask.temperature)));
    }
    if gumbel_noise.len() != mask.logits.len() {
        return Err(Error::dims("noise and logits differ in length"));
    }
    if mask.logits.is_empty() {
        return Ok(Vec::new());
    }
    let g: Vec<f64> = mask.logits.iter().zip(gumbel_noise).map(|(l, n)| l + n).collect();
    let t = mask_threshold(&g, k_target);
    Ok(g.iter().map(|&gi| sigmoid((gi - t) / mask.temperature)).collect())
}

/// Standard Gumbel samples `−ln(−ln U)`.
pub fn gumbel_noise(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
            -(-u.ln()).ln()
        })
        .collect()
}

/// `τ_t = max(τ_min, τ0 · α^{t/T})`.
pub fn anneal_temperature(t: u64, tau0: f64, tau_min: f64, alpha: f64, horizon: u64) -> f64 {
    let frac = t as f64 / horizon.max(1) as f64;
    (tau0 * alpha.powf(frac)).max(tau_min)
}

pub const DEFAULT_TAU0: f64 = 2.0;
pub const DEFAULT_TAU_MIN: f64 = 0.3;
pub const DEFAULT_TAU_ALPHA: f64 = 0.5;

#[cfg(test)]
mod tests {
    use super::*;

    fn diag_layer() -> ElasticLayer {
        ElasticLayer::dense_svd(&Matrix::from_diag(&[5.0, 3.0, 1.0]), 1, 3).unwrap()
    }

    #[test]
    fn truncate_diag_rank_one() {
        let w = truncate(&diag_layer(), 1).unwrap();
        let m = w.as_dense().unwrap();
        assert!(m.max_abs_diff(&Matrix::from_diag(&[5.0, 0.0, 0.0])) < 1e-12);
    }

    #[test]
    fn truncate_at_k_max_is_full_reconstruction() {
        let layer = diag_layer();
        let LayerFactors::DenseSvd(f) = &layer.factors else { unreachable!() };
        assert_eq!(truncate(&layer, 3).unwrap(), EffectiveWeight::Dense(f.reconstruct(3)));
    }

    #[test]
    fn rank_out_of_range() {
        assert!(matches!(truncate(&diag_layer(), 4), Err(Error::RankOutOfRange { .. })));
        assert!(truncate(&diag_layer(), 0).is_err());
    }

    #[test]
    fn residual_diag() {
        let l = diag_layer();
        let clip = ClipMode::MaxRange;
        assert_eq!(residual_norm(&l, 3, None, clip).unwrap(), 0.0);
        assert!((residual_norm(&l, 2, None, clip).unwrap() - 1.0).abs() < 1e-12);
        assert!((residual_norm(&l, 1, None, clip).unwrap() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn bit_map_examples() {
        let constant = BitMap { a: 0.0, b: 8.0, q_max: 8, offsets: FactorOffsets::default() };
        assert!((1..100).all(|k| constant.base(k) == 8));
        let bm = BitMap { a: 1.0, b: 4.0, q_max: 8, offsets: FactorOffsets::default() };
        assert_eq!(bm.base(1), 4);
        assert_eq!(bm.base(55), 8);
        assert_eq!(bit_of_rank(&constant, 3, Factor::U), 8);
        assert_eq!(bit_of_rank(&constant, 3, Factor::Core), 8);
        assert_eq!(bit_of_rank(&constant, 3, Factor::V), 8);
        assert_eq!(bit_of_rank(&bm, 1, Factor::U), 5);
    }

    #[test]
    fn anneal_examples() {
        assert_eq!(anneal_temperature(0, 2.0, 0.3, 0.5, 100), 2.0);
        assert!((anneal_temperature(100, 2.0, 0.3, 0.5, 100) - 1.0).abs() < 1e-15);
        assert_eq!(anneal_temperature(1_000_000, 2.0, 0.3, 0.5, 100), 0.3);
    }

    #[test]
    fn soft_mask_limits() {
        let logits = vec![3.0, 1.0, -1.0, -3.0];
        let noise = vec![0.0; 4];
        let cold = RankMask { logits: logits.clone(), temperature: 1e-3, mode: MaskMode::Soft };
        let m = soft_mask(&cold, &noise, 2).unwrap();
        for (a, b) in m.iter().zip(hard_mask(4, 2)) {
            assert!((a - b).abs() < 1e-3);
        }
        let hot = RankMask { logits, temperature: 1e6, mode: MaskMode::Soft };
        let m = soft_mask(&hot, &noise, 2).unwrap();
        assert!(m.iter().all(|v| (v - m[0]).abs() < 1e-3));
    }

    #[test]
    fn soft_mask_rejects_bad_temperature() {
        let m = RankMask { logits: vec![0.0; 2], temperature: 0.0, mode: MaskMode::Soft };
        assert!(soft_mask(&m, &[0.0, 0.0], 1).is_err());
    }

    #[test]
    fn hard_mode_is_indicator() {
        let m = RankMask { logits: vec![0.0; 5], temperature: 1.0, mode: MaskMode::Hard(2) };
        assert_eq!(soft_mask(&m, &[9.0; 5], 4).unwrap(), vec![1.0, 1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn tucker_schedule_monotone_and_full_at_k_max() {
        let w = Tensor4::from_fn(4, 2, 3, 3, |o, i, y, x| ((o + 2 * i + 3 * y + x) % 5) as f64 - 2.0);
        let g = ConvGeometry { height: 4, width: 4 };
        let l = ElasticLayer::conv_tucker2(&w, g, 1, 4, 2).unwrap();
        assert_eq!(l.tucker_ranks(4), Some((4, 2)));
        assert_eq!(l.tucker_ranks(1), Some((1, 1)));
        let mut prev = (0, 0);
        for k in 1..=4 {
            let r = l.tucker_ranks(k).unwrap();
            assert!(r.0 >= prev.0 && r.1 >= prev.1);
            prev = r;
        }
        let EffectiveWeight::Conv { kernel, .. } = full_weight(&l) else { unreachable!() };
        assert!(kernel.sub(&w).unwrap().frobenius_norm() < 1e-9);
    }

    #[test]
    fn quantized_compress_has_payload() {
        let w = Matrix::from_fn(4, 3, |i, j| (i as f64 - j as f64) * 0.3 + 0.1);
        let l = ElasticLayer::dense_svd(&w, 1, 3).unwrap();
        let c = compress(&l, 2, Some(FactorBits::uniform(8)), ClipMode::MaxRange).unwrap();
        let p = c.payload.as_ref().unwrap();
        assert_eq!(p[0].shape, vec![4, 2]);
        assert_eq!(p[1].shape, vec![2]);
        assert_eq!(p[2].shape, vec![3, 2]);
        let r = residual_norm(&l, 2, Some(FactorBits::uniform(8)), ClipMode::MaxRange).unwrap();
        assert!(r >= residual_norm(&l, 2, None, ClipMode::MaxRange).unwrap() - 1e-3);
    }
}
