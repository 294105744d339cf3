//! Reverse-mode gradients of dense elastic networks through the tape.

use super::{Block, ForwardTrace, Network};
use crate::autodiff::{QuantRecord, Tape, Var};
use crate::elastic::{hard_mask, FactorBits, LayerFactors};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::quant::ClipMode;

/// Tape variables of one low-rank layer.
#[derive(Clone, Debug)]
pub(crate) struct LayerVars {
    pub u: Var,
    pub sigma: Var,
    pub v: Var,
    pub bias: Option<Var>,
    /// Log-scale multipliers for `U`, core and `V`.
    pub theta: [Var; 3],
}

/// How a layer is realized on the tape.
pub(crate) struct LayerMode<'a> {
    /// `k_max×1` mask applied to `σ`.
    pub mask: Var,
    /// Also zero the masked columns of `U`/`V` before quantization, which
    /// reproduces the calibration of a hard truncation.
    pub mask_factors: Option<Var>,
    pub bits: Option<FactorBits>,
    pub clip: ClipMode,
    pub frozen: Option<&'a [QuantRecord]>,
}

pub(crate) fn low_rank_parts(block: &Block) -> Result<(Matrix, Vec<f64>, Matrix)> {
    match &block.layer.factors {
        LayerFactors::DenseSvd(f) => Ok((f.u.leading_columns(block.layer.k_max), f.sigma[..block.layer.k_max].to_vec(), f.v.leading_columns(block.layer.k_max))),
        LayerFactors::DenseCp(f) => Ok((f.a1.leading_columns(block.layer.k_max), f.lambda[..block.layer.k_max].to_vec(), f.a2.leading_columns(block.layer.k_max))),
        LayerFactors::ConvTucker2 { .. } => Err(Error::Unsupported("gradients through conv layers".into())),
    }
}

pub(crate) fn push_layer_vars(tape: &mut Tape, block: &Block) -> Result<LayerVars> {
    let (u, sigma, v) = low_rank_parts(block)?;
    Ok(LayerVars {
        u: tape.leaf(u),
        sigma: tape.leaf(Matrix::column_vector(&sigma)),
        v: tape.leaf(v),
        bias: block.layer.bias.as_ref().map(|b| tape.leaf(Matrix::column_vector(b))),
        theta: [tape.leaf(Matrix::scalar(0.0)), tape.leaf(Matrix::scalar(0.0)), tape.leaf(Matrix::scalar(0.0))],
    })
}

/// Effective `(U, σ, V)` after masking and fake quantization, plus the
/// quantizer records.
pub(crate) fn layer_factors(tape: &mut Tape, vars: &LayerVars, mode: &LayerMode) -> Result<(Var, Var, Var, Vec<QuantRecord>)> {
    let mut u = vars.u;
    let mut v = vars.v;
    if let Some(cm) = mode.mask_factors {
        let row = tape.value(cm).transpose();
        let (ur, vr) = (tape.value(u).rows(), tape.value(v).rows());
        let mu = tape.constant(Matrix::from_fn(ur, row.cols(), |_, j| row.get(0, j)));
        let mv = tape.constant(Matrix::from_fn(vr, row.cols(), |_, j| row.get(0, j)));
        u = tape.hadamard(u, mu)?;
        v = tape.hadamard(v, mv)?;
    }
    let mut sigma = tape.hadamard(vars.sigma, mode.mask)?;
    let mut records = Vec::new();
    if let Some(bits) = mode.bits {
        let fr = |i: usize| mode.frozen.map(|r| &r[i]);
        let (uq, ru) = tape.fake_quant(u, vars.theta[0], bits.u, mode.clip, fr(0))?;
        let (sq, rs) = tape.fake_quant(sigma, vars.theta[1], bits.core, mode.clip, fr(1))?;
        let (vq, rv) = tape.fake_quant(v, vars.theta[2], bits.v, mode.clip, fr(2))?;
        (u, sigma, v) = (uq, sq, vq);
        records = vec![ru, rs, rv];
    }
    Ok((u, sigma, v, records))
}

/// One block on a batch `x` (`n×B`). Returns the output and the
/// pre-activation.
pub(crate) fn block_forward(
    tape: &mut Tape,
    block: &Block,
    vars: &LayerVars,
    mode: &LayerMode,
    x: Var,
) -> Result<(Var, Var, Vec<QuantRecord>)> {
    let (u, sigma, v, recs) = layer_factors(tape, vars, mode)?;
    let (h, pre) = block_apply(tape, block, (u, sigma, v), vars.bias, x)?;
    Ok((h, pre, recs))
}

/// Applies already-realized factors `(U, σ, V)` of a block to `x`.
pub(crate) fn block_apply(tape: &mut Tape, block: &Block, (u, sigma, v): (Var, Var, Var), bias: Option<Var>, x: Var) -> Result<(Var, Var)> {
    let t = tape.t_matmul(v, x)?;
    let t = tape.scale_rows(t, sigma)?;
    let mut pre = tape.matmul(u, t)?;
    if let Some(b) = bias {
        pre = tape.add_col(pre, b)?;
    }
    let mut z = pre;
    if let Some(n) = &block.norm {
        let g = tape.constant(Matrix::column_vector(&n.gamma));
        let b = tape.constant(Matrix::column_vector(&n.beta));
        z = tape.scale_rows(z, g)?;
        z = tape.add_col(z, b)?;
    }
    let mut h = tape.activation(z, block.activation);
    if block.residual {
        h = tape.add(h, x)?;
    }
    Ok((h, pre))
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerGradient {
    pub u: Matrix,
    pub sigma: Vec<f64>,
    pub v: Matrix,
    pub bias: Option<Vec<f64>>,
    /// Log-scale multipliers of `U`, core and `V`; present when quantized.
    pub log_scales: Option<[f64; 3]>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkGradients {
    pub layers: Vec<LayerGradient>,
    pub input: Vec<f64>,
}

/// Pulls `upstream` (a gradient on the logits of `trace`) back to every
/// factor, bias and quantizer scale. Hard masks let gradients reach only the
/// active components.
pub fn backward(net: &Network, trace: &ForwardTrace, upstream: &[f64]) -> Result<NetworkGradients> {
    if trace.fingerprint != net.fingerprint() {
        return Err(Error::Stale("trace was produced by different parameters".into()));
    }
    if upstream.len() != net.out_dim() {
        return Err(Error::dims("upstream gradient length"));
    }
    let profile = trace.profile.clone().unwrap_or_else(|| net.full_profile());
    let mut tape = Tape::new();
    let x = tape.leaf(Matrix::column_vector(&trace.inputs[0]));
    let mut a = x;
    let mut vars = Vec::with_capacity(net.depth());
    for (block, s) in net.blocks.iter().zip(&profile.layers) {
        let lv = push_layer_vars(&mut tape, block)?;
        let m = tape.constant(Matrix::column_vector(&hard_mask(block.layer.k_max, s.k)));
        let bits = s.q.map(|q| net.bitmap.factor_bits(q));
        let mode = LayerMode { mask: m, mask_factors: Some(m), bits, clip: net.clip, frozen: None };
        a = block_forward(&mut tape, block, &lv, &mode, a)?.0;
        vars.push((lv, bits.is_some()));
    }
    let grads = tape.backward_seeded(a, Matrix::column_vector(upstream))?;
    let layers = vars
        .iter()
        .map(|(lv, quantized)| LayerGradient {
            u: grads.of(lv.u),
            sigma: grads.of(lv.sigma).into_data(),
            v: grads.of(lv.v),
            bias: lv.bias.map(|b| grads.of(b).into_data()),
            log_scales: quantized.then(|| lv.theta.map(|t| grads.of(t).get(0, 0))),
        })
        .collect();
    Ok(NetworkGradients { layers, input: grads.of(x).into_data() })
}
