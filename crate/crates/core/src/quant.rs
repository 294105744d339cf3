//! Symmetric uniform quantizers: calibration, rounding, straight-through
//! gradients and bias correction.
//!
//! Codes live on the grid `G_q = {−(2^{q−1}−1), …, 2^{q−1}−1}`; the zero point
//! is always 0.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Matrix, Tensor4};

/// Default percentile for percentile clipping.
pub const DEFAULT_CLIP_PERCENTILE: f64 = 99.9;
pub const MIN_BITS: u8 = 2;
pub const MAX_BITS: u8 = 16;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Granularity {
    PerTensor,
    /// One scale per slice along `axis` of the logical shape.
    PerChannel { axis: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Rounding {
    /// Round half to even.
    Nearest,
    /// Unbiased stochastic rounding driven by its own seed.
    Stochastic { seed: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum ClipMode {
    MaxRange,
    /// Use the p-th percentile of `|T|` (p in `(0, 100]`) in place of the max.
    Percentile(f64),
}

/// What to calibrate: everything in a [`QuantSpec`] except the scales.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRequest {
    pub bits: u8,
    pub granularity: Granularity,
    pub clip: ClipMode,
    pub rounding: Rounding,
}

impl CalibrationRequest {
    pub fn per_tensor(bits: u8) -> Self {
        Self {
            bits,
            granularity: Granularity::PerTensor,
            clip: ClipMode::MaxRange,
            rounding: Rounding::Nearest,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantSpec {
    pub bits: u8,
    pub granularity: Granularity,
    pub scales: Vec<f64>,
    pub rounding: Rounding,
    pub clip: ClipMode,
}

impl QuantSpec {
    pub fn grid_max(&self) -> i64 {
        grid_max(self.bits)
    }

    /// Same spec with rounding forced to [`Rounding::Nearest`].
    pub fn deterministic(&self) -> QuantSpec {
        QuantSpec { rounding: Rounding::Nearest, ..self.clone() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantizedFactor {
    pub spec: QuantSpec,
    pub codes: Vec<i32>,
    pub shape: Vec<usize>,
}

/// Largest code on the `bits`-bit symmetric grid.
pub fn grid_max(bits: u8) -> i64 {
    (1i64 << (bits - 1)) - 1
}

/// Logical view of something quantizable.
pub trait TensorView {
    fn values(&self) -> &[f64];
    fn logical_shape(&self) -> Vec<usize>;
}

impl TensorView for Matrix {
    fn values(&self) -> &[f64] {
        self.data()
    }
    fn logical_shape(&self) -> Vec<usize> {
        vec![self.rows(), self.cols()]
    }
}

impl TensorView for Tensor4 {
    fn values(&self) -> &[f64] {
        self.data()
    }
    fn logical_shape(&self) -> Vec<usize> {
        vec![self.c_out, self.c_in, self.h, self.w]
    }
}

impl TensorView for (Vec<f64>, Vec<usize>) {
    fn values(&self) -> &[f64] {
        &self.0
    }
    fn logical_shape(&self) -> Vec<usize> {
        self.1.clone()
    }
}

fn check_bits(bits: u8) -> Result<()> {
    if !(MIN_BITS..=MAX_BITS).contains(&bits) {
        return Err(Error::invalid(format!("bit-width {bits} outside [{MIN_BITS}, {MAX_BITS}]")));
    }
    Ok(())
}

/// Number of scales and the channel of each flat index.
fn channel_map(shape: &[usize], granularity: Granularity) -> Result<(usize, Box<dyn Fn(usize) -> usize>)> {
    match granularity {
        Granularity::PerTensor => Ok((1, Box::new(|_| 0))),
        Granularity::PerChannel { axis } => {
            if axis >= shape.len() {
                return Err(Error::invalid(format!("axis {axis} out of range for rank {}", shape.len())));
            }
            let stride: usize = shape[axis + 1..].iter().product();
            let dim = shape[axis];
            Ok((dim, Box::new(move |idx| (idx / stride) % dim)))
        }
    }
}

fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Computes scales `s = range / (2^{q−1} − 1)` where `range` is the max (or a
/// percentile) of `|T|` over each channel. All-zero channels get `s = 1`.
pub fn calibrate_scale(t: &impl TensorView, req: CalibrationRequest) -> Result<QuantSpec> {
    check_bits(req.bits)?;
    let values = t.values();
    if values.is_empty() {
        return Err(Error::invalid("cannot calibrate an empty tensor"));
    }
    if let ClipMode::Percentile(p) = req.clip {
        if !(p > 0.0 && p <= 100.0) {
            return Err(Error::invalid(format!("percentile {p} outside (0, 100]")));
        }
    }
    let shape = t.logical_shape();
    let (nchan, chan) = channel_map(&shape, req.granularity)?;
    let mut buckets: Vec<Vec<f64>> = vec![Vec::new(); nchan];
    for (i, v) in values.iter().enumerate() {
        buckets[chan(i)].push(v.abs());
    }
    let denom = grid_max(req.bits) as f64;
    let scales = buckets
        .into_iter()
        .map(|mut b| {
            let range = match req.clip {
                ClipMode::MaxRange => b.iter().cloned().fold(0.0, f64::max),
                ClipMode::Percentile(p) => {
                    b.sort_by(|x, y| x.partial_cmp(y).expect("finite"));
                    percentile(&b, p)
                }
            };
            if range > 0.0 {
                range / denom
            } else {
                1.0
            }
        })
        .collect();
    Ok(QuantSpec {
        bits: req.bits,
        granularity: req.granularity,
        scales,
        rounding: req.rounding,
        clip: req.clip,
    })
}

/// `codes = clip(round(T/s), G_q)`.
pub fn quantize(t: &impl TensorView, spec: &QuantSpec) -> Result<QuantizedFactor> {
    check_bits(spec.bits)?;
    let shape = t.logical_shape();
    let (nchan, chan) = channel_map(&shape, spec.granularity)?;
    if spec.scales.len() != nchan || spec.scales.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
        return Err(Error::invalid("scales must be positive and match the channel count"));
    }
    let qmax = spec.grid_max() as f64;
    let mut rng = match spec.rounding {
        Rounding::Stochastic { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
        Rounding::Nearest => None,
    };
    let codes = t
        .values()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let u = v / spec.scales[chan(i)];
            let r = match rng.as_mut() {
                None => u.round_ties_even(),
                Some(rng) => {
                    let fl = u.floor();
                    if rng.random::<f64>() < u - fl {
                        fl + 1.0
                    } else {
                        fl
                    }
                }
            };
            r.clamp(-qmax, qmax) as i32
        })
        .collect();
    Ok(QuantizedFactor { spec: spec.clone(), codes, shape })
}

/// `value = s_c · code`.
pub fn dequantize(f: &QuantizedFactor) -> Result<Vec<f64>> {
    let (_, chan) = channel_map(&f.shape, f.spec.granularity)?;
    Ok(f.codes.iter().enumerate().map(|(i, &c)| f.spec.scales[chan(i)] * c as f64).collect())
}

/// Calibrate (max-range, nearest, per-tensor) then quantize and dequantize.
pub fn fake_quantize(values: &[f64], bits: u8) -> Result<Vec<f64>> {
    let t = (values.to_vec(), vec![values.len()]);
    let spec = calibrate_scale(&t, CalibrationRequest::per_tensor(bits))?;
    dequantize(&quantize(&t, &spec)?)
}

/// Straight-through gradients of `Quantize_q`.
#[derive(Clone, Debug, PartialEq)]
pub struct SteGradient {
    /// Upstream passed through where `|T/s| ≤ 2^{q−1}−1`, zero elsewhere.
    pub input: Vec<f64>,
    /// Gradient with respect to `log s_c`, one entry per scale.
    pub log_scale: Vec<f64>,
}

/// STE surrogate: `∂⌊u⌉/∂u ≈ 1` inside the clip range, 0 outside, and
/// `∂Q/∂s ≈ ⌊T/s⌉ − T/s` summed over in-range entries.
pub fn ste_gradient(upstream: &[f64], t: &impl TensorView, spec: &QuantSpec) -> Result<SteGradient> {
    let values = t.values();
    if upstream.len() != values.len() {
        return Err(Error::dims("upstream gradient and tensor differ in length"));
    }
    let shape = t.logical_shape();
    let (nchan, chan) = channel_map(&shape, spec.granularity)?;
    let qmax = spec.grid_max() as f64;
    let mut input = vec![0.0; values.len()];
    let mut log_scale = vec![0.0; nchan];
    for (i, (&g, &v)) in upstream.iter().zip(values).enumerate() {
        let c = chan(i);
        let s = spec.scales[c];
        let u = v / s;
        if u.abs() <= qmax {
            input[i] = g;
            log_scale[c] += g * (u.round_ties_even() - u) * s;
        }
    }
    Ok(SteGradient { input, log_scale })
}

/// Per-channel mean dequantization error `δ_c = E[T − Quantize(T)]` over a
/// calibration batch of same-shaped tensors.
pub fn bias_correction(batch: &[&dyn TensorView], spec: &QuantSpec) -> Result<Vec<f64>> {
    let first = batch.first().ok_or_else(|| Error::invalid("empty calibration batch"))?;
    let shape = first.logical_shape();
    let (nchan, chan) = channel_map(&shape, spec.granularity)?;
    let mut sum = vec![0.0; nchan];
    let mut count = vec![0usize; nchan];
    for t in batch {
        if t.logical_shape() != shape {
            return Err(Error::dims("calibration batch shapes differ"));
        }
        let owned = (t.values().to_vec(), shape.clone());
        let deq = dequantize(&quantize(&owned, spec)?)?;
        for (i, (&v, d)) in t.values().iter().zip(deq).enumerate() {
            sum[chan(i)] += v - d;
            count[chan(i)] += 1;
        }
    }
    Ok(sum.into_iter().zip(count).map(|(s, n)| if n > 0 { s / n as f64 } else { 0.0 }).collect())
}

/// Channel index of each flat element, for callers applying per-channel
/// offsets such as [`bias_correction`] results.
pub fn channel_of(shape: &[usize], granularity: Granularity, flat: usize) -> Result<usize> {
    let (_, chan) = channel_map(shape, granularity)?;
    Ok(chan(flat))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec_t(v: &[f64]) -> (Vec<f64>, Vec<usize>) {
        (v.to_vec(), vec![v.len()])
    }

    #[test]
    fn max_range_scale() {
        let t = vec_t(&[1.0, -12.7, 3.0]);
        let spec = calibrate_scale(&t, CalibrationRequest::per_tensor(8)).unwrap();
        assert!((spec.scales[0] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn zero_tensor_scale_is_one() {
        let spec = calibrate_scale(&vec_t(&[0.0; 4]), CalibrationRequest::per_tensor(4)).unwrap();
        assert_eq!(spec.scales, vec![1.0]);
    }

    #[test]
    fn per_channel_diag() {
        let m = Matrix::from_diag(&[1.0, 10.0]);
        let req = CalibrationRequest {
            granularity: Granularity::PerChannel { axis: 0 },
            ..CalibrationRequest::per_tensor(8)
        };
        let spec = calibrate_scale(&m, req).unwrap();
        assert_eq!(spec.scales, vec![1.0 / 127.0, 10.0 / 127.0]);
    }

    #[test]
    fn ties_round_to_even_and_saturate() {
        let spec = QuantSpec {
            bits: 8,
            granularity: Granularity::PerTensor,
            scales: vec![0.5],
            rounding: Rounding::Nearest,
            clip: ClipMode::MaxRange,
        };
        // 0.75/0.5 = 1.5 → 2, 1.25/0.5 = 2.5 → 2
        let q = quantize(&vec_t(&[0.75, 1.25, 1e6, -1e6]), &spec).unwrap();
        assert_eq!(q.codes, vec![2, 2, 127, -127]);
    }

    #[test]
    fn grid_points_are_fixed() {
        let s = 0.25;
        let vals: Vec<f64> = (-7..=7).map(|c| c as f64 * s).collect();
        let spec = QuantSpec {
            bits: 4,
            granularity: Granularity::PerTensor,
            scales: vec![s],
            rounding: Rounding::Nearest,
            clip: ClipMode::MaxRange,
        };
        let deq = dequantize(&quantize(&vec_t(&vals), &spec).unwrap()).unwrap();
        assert_eq!(deq, vals);
    }

    #[test]
    fn ste_in_range_and_saturated() {
        let t = vec_t(&[0.3, -0.2]);
        let spec = calibrate_scale(&t, CalibrationRequest::per_tensor(4)).unwrap();
        let g = ste_gradient(&[1.5, -2.0], &t, &spec).unwrap();
        assert_eq!(g.input, vec![1.5, -2.0]);
        let mut sat = spec.clone();
        sat.scales = vec![1e-3];
        let g = ste_gradient(&[1.5, -2.0], &t, &sat).unwrap();
        assert_eq!(g.input, vec![0.0, 0.0]);
        assert_eq!(g.log_scale, vec![0.0]);
    }

    #[test]
    fn stochastic_rounding_is_reproducible() {
        let t = vec_t(&[0.123, 0.456, -0.789, 0.3]);
        let mut spec = calibrate_scale(&t, CalibrationRequest::per_tensor(3)).unwrap();
        spec.rounding = Rounding::Stochastic { seed: 42 };
        let a = quantize(&t, &spec).unwrap();
        let b = quantize(&t, &spec).unwrap();
        assert_eq!(a.codes, b.codes);
        assert_eq!(quantize(&t, &spec.deterministic()).unwrap().spec.rounding, Rounding::Nearest);
    }

    #[test]
    fn bias_correction_constant_tensor() {
        let t = vec_t(&[0.33; 6]);
        let spec = QuantSpec {
            bits: 8,
            granularity: Granularity::PerTensor,
            scales: vec![0.1],
            rounding: Rounding::Nearest,
            clip: ClipMode::MaxRange,
        };
        let d = bias_correction(&[&t], &spec).unwrap();
        assert!((d[0] - (0.33 - 0.3)).abs() < 1e-12);
    }

    #[test]
    fn invalid_requests() {
        assert!(calibrate_scale(&vec_t(&[]), CalibrationRequest::per_tensor(8)).is_err());
        assert!(calibrate_scale(&vec_t(&[1.0]), CalibrationRequest::per_tensor(1)).is_err());
        let req = CalibrationRequest { clip: ClipMode::Percentile(0.0), ..CalibrationRequest::per_tensor(8) };
        assert!(calibrate_scale(&vec_t(&[1.0]), req).is_err());
    }
}
