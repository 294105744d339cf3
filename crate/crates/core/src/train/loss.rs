//! The composite training objective on the tape.

use serde::{Deserialize, Serialize};

use super::LossWeights;
use crate::autodiff::{MaskRecord, QuantRecord, Tape, Var};
use crate::cost::{predict, profile_costs, CostModel};
use crate::elastic::LayerFactors;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::network::{block_apply, layer_factors, LayerMode, LayerVars, Network};
use crate::profile::Profile;

/// Trainable state of the elastic network: factors and biases live inside
/// `net`, next to per-layer log-scale multipliers and rank-mask scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainParams {
    pub net: Network,
    pub log_scales: Vec<[f64; 3]>,
    pub mask_scores: Vec<Vec<f64>>,
}

/// Spacing of the initial mask scores.
const SCORE_STEP: f64 = 3.0;

impl TrainParams {
    /// Descending initial scores so the relaxed top-`k` keeps the leading
    /// components.
    pub fn new(net: Network) -> Result<Self> {
        for (l, b) in net.blocks.iter().enumerate() {
            match &b.layer.factors {
                LayerFactors::DenseSvd(f) if f.sigma.len() == b.layer.k_max && b.layer.bias.is_some() => {}
                _ => {
                    return Err(Error::Unsupported(format!(
                        "layer {l}: training needs dense SVD factors stored at exactly k_max, with a bias"
                    )))
                }
            }
        }
        let mask_scores = net
            .blocks
            .iter()
            .map(|b| (0..b.layer.k_max).map(|i| SCORE_STEP * (b.layer.k_max - i) as f64).collect())
            .collect();
        Ok(TrainParams { log_scales: vec![[0.0; 3]; net.depth()], mask_scores, net })
    }

    fn svd(&self, l: usize) -> &crate::linalg::SvdFactors {
        match &self.net.blocks[l].layer.factors {
            LayerFactors::DenseSvd(f) => f,
            _ => unreachable!("checked in TrainParams::new"),
        }
    }

    fn svd_mut(&mut self, l: usize) -> &mut crate::linalg::SvdFactors {
        match &mut self.net.blocks[l].layer.factors {
            LayerFactors::DenseSvd(f) => f,
            _ => unreachable!("checked in TrainParams::new"),
        }
    }

    /// All trainable scalars, per layer: `U`, `σ`, `V`, bias, log-scales,
    /// mask scores.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in 0..self.net.depth() {
            let f = self.svd(l);
            out.extend_from_slice(f.u.data());
            out.extend_from_slice(&f.sigma);
            out.extend_from_slice(f.v.data());
            out.extend_from_slice(self.net.blocks[l].layer.bias.as_deref().unwrap_or(&[]));
            out.extend_from_slice(&self.log_scales[l]);
            out.extend_from_slice(&self.mask_scores[l]);
        }
        out
    }

    /// Inverse of [`TrainParams::flatten`].
    pub fn set_flat(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.flatten().len() {
            return Err(Error::dims("flat parameter length"));
        }
        let mut at = 0;
        let mut take = |dst: &mut [f64]| {
            dst.copy_from_slice(&p[at..at + dst.len()]);
            at += dst.len();
        };
        for l in 0..self.net.depth() {
            let f = self.svd_mut(l);
            take(f.u.data_mut());
            take(&mut f.sigma);
            take(f.v.data_mut());
            take(self.net.blocks[l].layer.bias.as_mut().expect("bias checked"));
            take(&mut self.log_scales[l]);
            take(&mut self.mask_scores[l]);
        }
        Ok(())
    }

    /// Clamps singular values at zero after an unconstrained update.
    pub fn project(&mut self) {
        for l in 0..self.net.depth() {
            for s in &mut self.svd_mut(l).sigma {
                *s = s.max(0.0);
            }
        }
    }

    /// Re-factorizes every layer's `U diag(σ) Vᵀ` by SVD, restoring
    /// orthonormal factors and sorted singular values.
    pub fn reorthogonalize(&mut self) -> Result<()> {
        for l in 0..self.net.depth() {
            let f = self.svd(l);
            let w = f.u.scale_columns(&f.sigma).matmul_t(&f.v)?;
            let k = f.sigma.len();
            *self.svd_mut(l) = crate::linalg::svd_full(&w, k)?;
        }
        self.net.validate()
    }
}

/// Gradient with the same layout as [`TrainParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrad {
    pub u: Vec<Matrix>,
    pub sigma: Vec<Vec<f64>>,
    pub v: Vec<Matrix>,
    pub bias: Vec<Vec<f64>>,
    pub log_scales: Vec<[f64; 3]>,
    pub mask_scores: Vec<Vec<f64>>,
}

impl ParamGrad {
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in 0..self.u.len() {
            out.extend_from_slice(self.u[l].data());
            out.extend_from_slice(&self.sigma[l]);
            out.extend_from_slice(self.v[l].data());
            out.extend_from_slice(&self.bias[l]);
            out.extend_from_slice(&self.log_scales[l]);
            out.extend_from_slice(&self.mask_scores[l]);
        }
        out
    }
}

/// Inputs as columns with labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub x: Matrix,
    pub y: Vec<usize>,
}

impl Batch {
    pub fn new(xs: &[Vec<f64>], y: Vec<usize>) -> Result<Self> {
        if xs.is_empty() || xs.len() != y.len() {
            return Err(Error::dims("batch inputs and labels"));
        }
        Ok(Batch { x: Matrix::from_columns(xs[0].len(), xs), y })
    }
}

/// Everything random about one step, fixed up front so the loss is a
/// deterministic function of the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct StepSample {
    pub profile: Profile,
    pub tau: f64,
    /// Gumbel noise added to each layer's mask scores.
    pub mask_noise: Vec<Vec<f64>>,
    /// Additive perturbation defining the augmented batch.
    pub aug_noise: Matrix,
    pub budget_ms: f64,
}

/// Frozen per-layer quantities feeding the certificate and budget terms.
#[derive(Clone, Debug, PartialEq)]
pub struct LossAux {
    /// `L̂_ℓ` estimates.
    pub lhat: Vec<f64>,
    /// Calibration RMS input norms `α_ℓ`.
    pub alpha: Vec<f64>,
    pub latency: CostModel,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub total: f64,
    pub task: f64,
    pub sd: f64,
    pub aug: f64,
    pub cert: f64,
    pub bud: f64,
    pub iso: f64,
    pub delta_hat: f64,
    pub latency_ms: f64,
}

impl LossTerms {
    pub(crate) fn check_finite(&self, step: u64) -> Result<()> {
        let all = [self.total, self.task, self.sd, self.aug, self.cert, self.bud, self.iso, self.delta_hat];
        if all.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(format!("loss at step {step}: {self:?}")))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct LayerRecords {
    pub mask: Option<MaskRecord>,
    pub quant: Vec<QuantRecord>,
}

pub(crate) struct ParamVars {
    pub layer: LayerVars,
    pub scores: Var,
}

/// Tape with the network part of the objective built.
pub(crate) struct Graph {
    pub tape: Tape,
    pub vars: Vec<ParamVars>,
    pub records: Vec<LayerRecords>,
    pub task: Var,
    pub sd: Var,
    pub aug: Var,
    pub delta_hat: Var,
    /// `max(0, Δ̂ − ε)`.
    pub cert: Var,
    /// Predicted latency of the sampled profile and its budget hinge.
    pub latency_ms: f64,
    pub bud: f64,
}

pub(crate) fn build(
    params: &TrainParams,
    batch: &Batch,
    sample: &StepSample,
    epsilon: f64,
    aux: &LossAux,
    frozen: Option<&[LayerRecords]>,
) -> Result<Graph> {
    let net = &params.net;
    net.check_profile(&sample.profile)?;
    if aux.lhat.len() != net.depth() || aux.alpha.len() != net.depth() || sample.mask_noise.len() != net.depth() {
        return Err(Error::dims("per-layer auxiliary data"));
    }
    if sample.aug_noise.shape() != batch.x.shape() {
        return Err(Error::dims("augmentation noise shape"));
    }
    let mut tape = Tape::new();
    let mut vars = Vec::with_capacity(net.depth());
    for (l, block) in net.blocks.iter().enumerate() {
        let f = params.svd(l);
        let layer = LayerVars {
            u: tape.leaf(f.u.clone()),
            sigma: tape.leaf(Matrix::column_vector(&f.sigma)),
            v: tape.leaf(f.v.clone()),
            bias: block.layer.bias.as_ref().map(|b| tape.leaf(Matrix::column_vector(b))),
            theta: params.log_scales[l].map(|t| tape.leaf(Matrix::scalar(t))),
        };
        let scores = tape.leaf(Matrix::column_vector(&params.mask_scores[l]));
        vars.push(ParamVars { layer, scores });
    }

    let mut realized = Vec::with_capacity(net.depth());
    let mut records = Vec::with_capacity(net.depth());
    for (l, (block, pv)) in net.blocks.iter().zip(&vars).enumerate() {
        let s = sample.profile.layers[l];
        let fr = frozen.map(|f| &f[l]);
        let (mask, mrec) = if s.k == block.layer.k_max {
            (tape.constant(Matrix::from_fn(block.layer.k_max, 1, |_, _| 1.0)), None)
        } else {
            if sample.mask_noise[l].len() != block.layer.k_max {
                return Err(Error::dims("mask noise length"));
            }
            let noise = tape.constant(Matrix::column_vector(&sample.mask_noise[l]));
            let noisy = tape.add(pv.scores, noise)?;
            let (m, r) = tape.soft_mask(noisy, s.k, sample.tau, fr.and_then(|f| f.mask.as_ref()))?;
            (m, Some(r))
        };
        let mode = LayerMode {
            mask,
            mask_factors: None,
            bits: s.q.map(|q| net.bitmap.factor_bits(q)),
            clip: net.clip,
            frozen: fr.map(|f| f.quant.as_slice()),
        };
        let (u, sg, v, quant) = layer_factors(&mut tape, &pv.layer, &mode)?;
        realized.push((u, sg, v));
        records.push(LayerRecords { mask: mrec, quant });
    }

    let forward = |tape: &mut Tape, x: Var, compressed: bool| -> Result<Var> {
        let mut a = x;
        for (l, block) in net.blocks.iter().enumerate() {
            let lv = &vars[l].layer;
            let f = if compressed { realized[l] } else { (lv.u, lv.sigma, lv.v) };
            a = block_apply(tape, block, f, lv.bias, a)?.0;
        }
        Ok(a)
    };
    let x = tape.constant(batch.x.clone());
    let x_aug = tape.constant(batch.x.add(&sample.aug_noise)?);
    let full = forward(&mut tape, x, false)?;
    let comp = forward(&mut tape, x, true)?;
    let full_aug = forward(&mut tape, x_aug, false)?;
    let comp_aug = forward(&mut tape, x_aug, true)?;

    let task = tape.cross_entropy(full, &batch.y)?;
    let sd = tape.kl(full, comp)?;
    let aug = tape.kl(full_aug, comp_aug)?;

    let mut delta_hat: Option<Var> = None;
    for (l, pv) in vars.iter().enumerate() {
        let lv = &pv.layer;
        let (u, sg, v) = realized[l];
        let us = tape.scale_cols(lv.u, lv.sigma)?;
        let wf = tape.matmul_t(us, lv.v)?;
        let uk = tape.scale_cols(u, sg)?;
        let wk = tape.matmul_t(uk, v)?;
        let d = tape.sub(wf, wk)?;
        let sn = tape.spectral_norm(d)?;
        let term = tape.mul_const(sn, aux.lhat[l] * aux.alpha[l]);
        delta_hat = Some(match delta_hat {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    let delta_hat = delta_hat.ok_or_else(|| Error::invalid("empty network"))?;
    let shifted = tape.add_const(delta_hat, -epsilon);
    let cert = tape.relu(shifted);

    let latency_ms = predict(&aux.latency, &profile_costs(net, &sample.profile)?)?;
    let bud = (latency_ms / sample.budget_ms - 1.0).max(0.0);
    Ok(Graph { tape, vars, records, task, sd, aug, delta_hat, cert, latency_ms, bud })
}

impl Graph {
    /// `task + λ_SD·sd + λ_AUG·aug + λ_CERT·cert + λ_BUD·bud`, with optional
    /// replacements for the certificate and budget terms and extra terms.
    pub(crate) fn combine(&mut self, w: &LossWeights, cert: Option<Var>, bud: Option<Var>, extra: &[(Var, f64)]) -> Result<(Var, LossTerms)> {
        let cert = cert.unwrap_or(self.cert);
        let t = &mut self.tape;
        let mut root = self.task;
        for (v, lam) in [(self.sd, w.sd), (self.aug, w.aug), (cert, w.cert)].into_iter().chain(extra.iter().copied()) {
            let s = t.mul_const(v, lam);
            root = t.add(root, s)?;
        }
        let bud_value = match bud {
            Some(b) => {
                let s = t.mul_const(b, w.bud);
                root = t.add(root, s)?;
                t.scalar(b)
            }
            None => {
                root = t.add_const(root, w.bud * self.bud);
                self.bud
            }
        };
        let terms = LossTerms {
            total: t.scalar(root),
            task: t.scalar(self.task),
            sd: t.scalar(self.sd),
            aug: t.scalar(self.aug),
            cert: t.scalar(cert),
            bud: bud_value,
            iso: extra.first().map_or(0.0, |(v, _)| t.scalar(*v)),
            delta_hat: t.scalar(self.delta_hat),
            latency_ms: self.latency_ms,
        };
        Ok((root, terms))
    }

    pub(crate) fn param_grad(&self, g: &crate::autodiff::Gradients) -> ParamGrad {
        let mut out = ParamGrad { u: vec![], sigma: vec![], v: vec![], bias: vec![], log_scales: vec![], mask_scores: vec![] };
        for pv in &self.vars {
            let lv = &pv.layer;
            out.u.push(g.of(lv.u));
            out.sigma.push(g.of(lv.sigma).into_data());
            out.v.push(g.of(lv.v));
            out.bias.push(lv.bias.map(|b| g.of(b).into_data()).unwrap_or_default());
            out.log_scales.push(lv.theta.map(|t| g.of(t).get(0, 0)));
            out.mask_scores.push(g.of(pv.scores).into_data());
        }
        out
    }
}

/// Value and breakdown of the objective at a sampled profile.
pub fn total_loss(params: &TrainParams, batch: &Batch, sample: &StepSample, w: &LossWeights, aux: &LossAux) -> Result<LossTerms> {
    let mut g = build(params, batch, sample, w.epsilon, aux, None)?;
    Ok(g.combine(w, None, None, &[])?.1)
}

/// Recorded rounding and ordering decisions of one evaluation. Replaying them
/// makes the objective a smooth function of the parameters whose derivative
/// is the straight-through gradient at the recording point.
#[derive(Clone, Debug, PartialEq)]
pub struct LossProbe {
    records: Vec<LayerRecords>,
}

/// Objective with its gradient on every trainable parameter.
pub fn total_loss_grad(params: &TrainParams, batch: &Batch, sample: &StepSample, w: &LossWeights, aux: &LossAux) -> Result<(LossTerms, ParamGrad, LossProbe)> {
    let mut g = build(params, batch, sample, w.epsilon, aux, None)?;
    let (root, terms) = g.combine(w, None, None, &[])?;
    let grads = g.tape.backward(root)?;
    Ok((terms, g.param_grad(&grads), LossProbe { records: g.records }))
}

/// Frozen evaluation: loss, distance of the nearest ReLU/hinge input from
/// its kink, and the kink sign pattern.
pub struct ProbeValue {
    pub terms: LossTerms,
    pub kink_margin: f64,
    pub kink_signature: Vec<bool>,
}

impl LossProbe {
    pub fn eval(&self, params: &TrainParams, batch: &Batch, sample: &StepSample, w: &LossWeights, aux: &LossAux) -> Result<ProbeValue> {
        let mut g = build(params, batch, sample, w.epsilon, aux, Some(&self.records))?;
        let terms = g.combine(w, None, None, &[])?.1;
        Ok(ProbeValue { terms, kink_margin: g.tape.kink_margin(), kink_signature: g.tape.kink_signature() })
    }
}
