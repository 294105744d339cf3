//! Two-layer budget-conditioned policy over per-layer menus.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{q_value, BudgetToken, Menu};
use crate::autodiff::{Gradients, Tape, Var};
use crate::elastic::gumbel_noise;
use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub const DEVICE_EMBED_DIM: usize = 4;
/// Normalized targets plus presence flags.
const BUDGET_FEATURES: usize = 6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyHead {
    pub menus: Vec<Menu>,
    pub devices: Vec<String>,
    /// Budget that maps to `1.0` on each normalized axis.
    pub reference: BudgetToken,
    pub summary_dim: usize,
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
    /// `DEVICE_EMBED_DIM × devices`.
    pub device_embed: Matrix,
    pub temperature: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PolicyMode {
    Train { tau: f64 },
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyOutput {
    pub choices: Vec<usize>,
    pub probs: Vec<Vec<f64>>,
    /// Relaxed Gumbel-Softmax sample per layer in train mode.
    pub soft: Option<Vec<Vec<f64>>>,
}

/// Gradients in the order `w1, b1, w2, b2, device_embed`.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadGradient(pub [Matrix; 5]);

pub(crate) struct HeadVars {
    pub params: [Var; 5],
}

impl PolicyHead {
    pub fn new(menus: Vec<Menu>, devices: Vec<String>, reference: BudgetToken, hidden: usize, summary_dim: usize, seed: u64) -> Result<Self> {
        if menus.iter().any(|m| m.is_empty()) || devices.is_empty() {
            return Err(Error::invalid("policy needs non-empty menus and at least one device"));
        }
        reference.validate()?;
        let d = BUDGET_FEATURES + DEVICE_EMBED_DIM + summary_dim;
        let out: usize = menus.iter().map(Vec::len).sum();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = |r: usize, c: usize, scale: f64| {
            Matrix::from_fn(r, c, |_, _| scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
        };
        let w1 = init(hidden, d, (2.0 / d as f64).sqrt());
        let w2 = init(out, hidden, 0.1 / (hidden as f64).sqrt());
        let device_embed = init(DEVICE_EMBED_DIM, devices.len(), 0.1);
        Ok(PolicyHead {
            w1,
            b1: Matrix::zeros(hidden, 1),
            w2,
            b2: Matrix::zeros(out, 1),
            device_embed,
            menus,
            devices,
            reference,
            summary_dim,
            temperature: 1.0,
        })
    }

    pub fn params(&self) -> [&Matrix; 5] {
        [&self.w1, &self.b1, &self.w2, &self.b2, &self.device_embed]
    }

    pub fn params_mut(&mut self) -> [&mut Matrix; 5] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2, &mut self.device_embed]
    }

    /// `[t/t_ref or 0, present?]` for latency, bytes and energy.
    pub fn budget_features(&self, b: &BudgetToken) -> Vec<f64> {
        let r = &self.reference;
        let axis = |v: Option<f64>, rv: Option<f64>| match (v, rv) {
            (Some(v), Some(rv)) => [v / rv, 1.0],
            (Some(v), None) => [v, 1.0],
            (None, _) => [0.0, 0.0],
        };
        let mut f = Vec::with_capacity(BUDGET_FEATURES);
        f.extend(axis(b.latency_ms, r.latency_ms));
        f.extend(axis(b.bytes.map(|v| v as f64), r.bytes.map(|v| v as f64)));
        f.extend(axis(b.energy_mj, r.energy_mj));
        f
    }

    fn device_index(&self, b: &BudgetToken) -> Result<usize> {
        self.devices
            .iter()
            .position(|d| *d == b.device)
            .ok_or_else(|| Error::invalid(format!("unknown device {:?}", b.device)))
    }

    fn check_summary(&self, s: Option<&[f64]>) -> Result<Vec<f64>> {
        match s {
            None => Ok(vec![0.0; self.summary_dim]),
            Some(s) if s.len() == self.summary_dim => Ok(s.to_vec()),
            Some(s) => Err(Error::dims(format!("input summary has {} entries, head expects {}", s.len(), self.summary_dim))),
        }
    }

    /// Per-layer menu logits.
    pub fn logits(&self, b: &BudgetToken, s: Option<&[f64]>) -> Result<Vec<Vec<f64>>> {
        let dev = self.device_index(b)?;
        let mut x = self.budget_features(b);
        x.extend(self.device_embed.col(dev));
        x.extend(self.check_summary(s)?);
        let h: Vec<f64> = self.w1.matvec(&x)?.iter().zip(self.b1.data()).map(|(a, b)| (a + b).max(0.0)).collect();
        let o: Vec<f64> = self.w2.matvec(&h)?.iter().zip(self.b2.data()).map(|(a, b)| a + b).collect();
        let mut out = Vec::with_capacity(self.menus.len());
        let mut at = 0;
        for m in &self.menus {
            out.push(o[at..at + m.len()].to_vec());
            at += m.len();
        }
        Ok(out)
    }

    pub(crate) fn push_vars(&self, tape: &mut Tape) -> HeadVars {
        HeadVars { params: self.params().map(|m| tape.leaf(m.clone())) }
    }

    /// Per-layer logit columns on the tape.
    pub(crate) fn tape_logits(&self, tape: &mut Tape, vars: &HeadVars, b: &BudgetToken, s: Option<&[f64]>) -> Result<Vec<Var>> {
        let dev = self.device_index(b)?;
        let [w1, b1, w2, b2, emb] = vars.params;
        let feats = tape.constant(Matrix::column_vector(&self.budget_features(b)));
        let onehot = tape.constant(Matrix::from_fn(self.devices.len(), 1, |i, _| if i == dev { 1.0 } else { 0.0 }));
        let demb = tape.matmul(emb, onehot)?;
        let mut x = tape.concat_rows(feats, demb)?;
        if self.summary_dim > 0 {
            let sv = tape.constant(Matrix::column_vector(&self.check_summary(s)?));
            x = tape.concat_rows(x, sv)?;
        }
        let h = tape.matmul(w1, x)?;
        let h = tape.add(h, b1)?;
        let h = tape.relu(h);
        let o = tape.matmul(w2, h)?;
        let o = tape.add(o, b2)?;
        let mut out = Vec::with_capacity(self.menus.len());
        let mut at = 0;
        for m in &self.menus {
            out.push(tape.slice_rows(o, at, m.len())?);
            at += m.len();
        }
        Ok(out)
    }

    pub(crate) fn gradient(vars: &HeadVars, g: &Gradients) -> HeadGradient {
        HeadGradient(vars.params.map(|v| g.of(v)))
    }

    /// Relaxed expected `(k, q)` per layer under the softmax distribution.
    pub fn expected_settings(&self, b: &BudgetToken, s: Option<&[f64]>) -> Result<Vec<(f64, f64)>> {
        let logits = self.logits(b, s)?;
        Ok(logits
            .iter()
            .zip(&self.menus)
            .map(|(l, m)| {
                let p = softmax(l);
                let k = p.iter().zip(m).map(|(p, e)| p * e.k as f64).sum();
                let q = p.iter().zip(m).map(|(p, e)| p * q_value(e)).sum();
                (k, q)
            })
            .collect())
    }
}

pub fn softmax(l: &[f64]) -> Vec<f64> {
    let m = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = l.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// `softmax((l + g)/τ)`.
pub fn gumbel_softmax(l: &[f64], g: &[f64], tau: f64) -> Vec<f64> {
    softmax(&l.iter().zip(g).map(|(a, g)| (a + g) / tau).collect::<Vec<_>>())
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    v.iter().enumerate().fold(0, |best, (i, x)| if *x > v[best] { i } else { best })
}

/// Menu choice per layer: argmax in eval mode, a Gumbel-Softmax sample in
/// train mode.
pub fn policy_forward(head: &PolicyHead, b: &BudgetToken, s: Option<&[f64]>, mode: PolicyMode, rng: &mut impl Rng) -> Result<PolicyOutput> {
    let logits = head.logits(b, s)?;
    let probs: Vec<Vec<f64>> = logits.iter().map(|l| softmax(l)).collect();
    match mode {
        PolicyMode::Eval => Ok(PolicyOutput { choices: logits.iter().map(|l| argmax(l)).collect(), probs, soft: None }),
        PolicyMode::Train { tau } => {
            if !(tau > 0.0) {
                return Err(Error::invalid("Gumbel-Softmax temperature must be positive"));
            }
            let soft: Vec<Vec<f64>> = logits
                .iter()
                .map(|l| {
                    let g = gumbel_noise(l.len(), rng);
                    gumbel_softmax(l, &g, tau)
                })
                .collect();
            Ok(PolicyOutput { choices: soft.iter().map(|p| argmax(p)).collect(), probs, soft: Some(soft) })
        }
    }
}

/// Straight-through Gumbel-Softmax sample on the tape for given Gumbel
/// noise: one-hot forward, relaxed backward. Returns the sample and the
/// chosen index.
pub(crate) fn gumbel_st(tape: &mut Tape, logits: Var, tau: f64, noise: &[f64]) -> Result<(Var, usize)> {
    let n = tape.value(logits).rows();
    if noise.len() != n {
        return Err(Error::dims("gumbel noise length"));
    }
    let g = tape.constant(Matrix::column_vector(noise));
    let z = tape.add(logits, g)?;
    let z = tape.mul_const(z, 1.0 / tau);
    let soft = tape.softmax(z);
    let i = argmax(tape.value(soft).data());
    let hard = Matrix::from_fn(n, 1, |r, _| if r == i { 1.0 } else { 0.0 });
    Ok((tape.straight_through(soft, hard)?, i))
}

#[derive(Clone, Debug, PartialEq)]
pub struct IsoHinge {
    pub value: f64,
    pub grad: HeadGradient,
}

/// Builds `λ Σ_ℓ max(0, E k_ℓ(b₁) − E k_ℓ(b₂)) + max(0, E q_ℓ(b₁) − E q_ℓ(b₂))`
/// on the tape and returns the root.
pub(crate) fn tape_isotonic_hinge(
    head: &PolicyHead,
    tape: &mut Tape,
    vars: &HeadVars,
    b1: &BudgetToken,
    b2: &BudgetToken,
    lambda: f64,
) -> Result<Var> {
    let l1 = head.tape_logits(tape, vars, b1, None)?;
    let l2 = head.tape_logits(tape, vars, b2, None)?;
    let mut total: Option<Var> = None;
    for ((a, b), menu) in l1.into_iter().zip(l2).zip(&head.menus) {
        let pa = tape.softmax(a);
        let pb = tape.softmax(b);
        let diff = tape.sub(pa, pb)?;
        for vals in [
            menu.iter().map(|e| e.k as f64).collect::<Vec<_>>(),
            menu.iter().map(q_value).collect::<Vec<_>>(),
        ] {
            let c = tape.constant(Matrix::column_vector(&vals));
            let d = tape.hadamard(diff, c)?;
            let d = tape.sum(d);
            let h = tape.relu(d);
            total = Some(match total {
                Some(t) => tape.add(t, h)?,
                None => h,
            });
        }
    }
    let total = total.ok_or_else(|| Error::invalid("policy has no layers"))?;
    Ok(tape.mul_const(total, lambda))
}

/// Isotonic hinge between budgets `b₁ ≼ b₂` on the relaxed assignments, with
/// its gradient on the head parameters.
pub fn isotonic_hinge(head: &PolicyHead, b1: &BudgetToken, b2: &BudgetToken, lambda: f64) -> Result<IsoHinge> {
    if !b1.le(b2) {
        return Err(Error::invalid("isotonic hinge needs b1 ≼ b2"));
    }
    let mut tape = Tape::new();
    let vars = head.push_vars(&mut tape);
    let root = tape_isotonic_hinge(head, &mut tape, &vars, b1, b2, lambda)?;
    let g = tape.backward(root)?;
    Ok(IsoHinge { value: tape.scalar(root), grad: PolicyHead::gradient(&vars, &g) })
}
