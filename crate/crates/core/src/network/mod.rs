//! Feed-forward execution over elastic layers: full, truncated and quantized
//! forwards, traces, logit drift, post-layer Lipschitz bounds and an
//! instrumented staged forward.

mod grad;

pub use grad::{backward, LayerGradient, NetworkGradients};
pub(crate) use grad::{block_apply, layer_factors, LayerMode, LayerVars};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::elastic::{compress, truncate, BitMap, CompressedForm, EffectiveWeight, ElasticLayer};
use crate::error::{Error, Result};
use crate::linalg::norm2;
use crate::profile::{LayerSetting, Profile};
use crate::quant::ClipMode;

/// Global Lipschitz constant used for GELU in conservative bounds. The
/// derivative of GELU peaks at about 1.1289 near `x = √2`.
pub const GELU_LIPSCHITZ: f64 = 1.13;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Gelu,
    Identity,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // √(2/π)

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
            Activation::Gelu => {
                let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
                0.5 * x * (1.0 + t)
            }
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
            Activation::Gelu => {
                let inner = GELU_C * (x + 0.044715 * x * x * x);
                let t = inner.tanh();
                let dinner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
            }
        }
    }

    pub fn lipschitz(self) -> f64 {
        match self {
            Activation::Relu | Activation::Identity => 1.0,
            Activation::Gelu => GELU_LIPSCHITZ,
        }
    }

    pub fn is_piecewise_linear(self) -> bool {
        !matches!(self, Activation::Gelu)
    }
}

/// Frozen per-unit affine map `γ ⊙ x + β`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    #[serde(with = "crate::linalg::blob")]
    pub gamma: Vec<f64>,
    #[serde(with = "crate::linalg::blob")]
    pub beta: Vec<f64>,
}

impl Affine {
    pub fn gain(&self) -> f64 {
        self.gamma.iter().fold(0.0, |m, g| m.max(g.abs()))
    }
}

/// `h = act(norm(W a + b)) (+ a if residual)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub layer: ElasticLayer,
    pub activation: Activation,
    pub norm: Option<Affine>,
    pub residual: bool,
}

impl Block {
    pub fn new(layer: ElasticLayer, activation: Activation) -> Self {
        Block { layer, activation, norm: None, residual: false }
    }

    /// Lipschitz factor of `pre ↦ h` for a fixed skip input.
    pub fn post_gain(&self) -> f64 {
        self.norm.as_ref().map_or(1.0, Affine::gain) * self.activation.lipschitz()
    }

    fn finish(&self, pre: &[f64], input: &[f64]) -> Vec<f64> {
        pre.iter()
            .enumerate()
            .map(|(i, &p)| {
                let z = match &self.norm {
                    Some(n) => n.gamma[i] * p + n.beta[i],
                    None => p,
                };
                let h = self.activation.apply(z);
                if self.residual {
                    h + input[i]
                } else {
                    h
                }
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub blocks: Vec<Block>,
    pub bitmap: BitMap,
    pub clip: ClipMode,
}

/// Per-layer activations of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    /// `a_{ℓ−1}`, the input of each block.
    pub inputs: Vec<Vec<f64>>,
    /// `W a + b` before normalization and activation.
    pub pre: Vec<Vec<f64>>,
    /// `h_ℓ`, the output of each block.
    pub outputs: Vec<Vec<f64>>,
    pub logits: Vec<f64>,
    pub profile: Option<Profile>,
    pub fingerprint: String,
}

/// A network with effective weights realized for one profile.
#[derive(Clone, Debug)]
pub struct CompiledNetwork<'a> {
    pub net: &'a Network,
    pub weights: Vec<EffectiveWeight>,
    pub profile: Option<Profile>,
    pub fingerprint: String,
}

impl Network {
    pub fn new(blocks: Vec<Block>) -> Result<Self> {
        let net = Network { blocks, bitmap: BitMap::default(), clip: ClipMode::MaxRange };
        net.validate()?;
        Ok(net)
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(Error::invalid("network has no layers"));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            b.layer.validate()?;
            if i > 0 && self.blocks[i - 1].layer.out_dim() != b.layer.in_dim() {
                return Err(Error::dims(format!(
                    "layer {} outputs {} values, layer {i} expects {}",
                    i - 1,
                    self.blocks[i - 1].layer.out_dim(),
                    b.layer.in_dim()
                )));
            }
            if b.residual && b.layer.in_dim() != b.layer.out_dim() {
                return Err(Error::dims(format!("residual layer {i} changes width")));
            }
            if let Some(n) = &b.norm {
                if n.gamma.len() != b.layer.out_dim() || n.beta.len() != b.layer.out_dim() {
                    return Err(Error::dims(format!("norm of layer {i} has the wrong width")));
                }
            }
        }
        Ok(())
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    pub fn in_dim(&self) -> usize {
        self.blocks[0].layer.in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.blocks.last().expect("non-empty").layer.out_dim()
    }

    pub fn is_piecewise_linear(&self) -> bool {
        self.blocks.iter().all(|b| b.activation.is_piecewise_linear())
    }

    /// SHA-256 over the serialized parameters.
    pub fn fingerprint(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("network serializes");
        hex(&Sha256::digest(bytes))
    }

    /// Every layer at `k_max`, unquantized.
    pub fn full_profile(&self) -> Profile {
        Profile::new(self.blocks.iter().map(|b| LayerSetting::float(b.layer.k_max)).collect())
    }

    pub fn check_profile(&self, p: &Profile) -> Result<()> {
        if p.layers.len() != self.blocks.len() {
            return Err(Error::invalid(format!(
                "profile {} has {} layers, network has {}",
                p.id,
                p.layers.len(),
                self.blocks.len()
            )));
        }
        for (b, s) in self.blocks.iter().zip(&p.layers) {
            b.layer.check_rank(s.k)?;
            if let Some(q) = s.q {
                if q < 2 || q > self.bitmap.q_max {
                    return Err(Error::invalid(format!("bit-width {q} outside [2, {}]", self.bitmap.q_max)));
                }
            }
        }
        let mut groups: std::collections::BTreeMap<&str, usize> = Default::default();
        for (b, s) in self.blocks.iter().zip(&p.layers) {
            if let Some(g) = &b.layer.group_id {
                if *groups.entry(g).or_insert(s.k) != s.k {
                    return Err(Error::invalid(format!("tied group {g} has unequal ranks in {}", p.id)));
                }
            }
        }
        Ok(())
    }

    /// Effective weight of layer `l` under `s`: truncation, then
    /// quantize/dequantize when bits are set.
    pub fn layer_weight(&self, l: usize, s: LayerSetting) -> Result<EffectiveWeight> {
        let layer = &self.blocks[l].layer;
        match s.q {
            None => truncate(layer, s.k),
            Some(q) => Ok(compress(layer, s.k, Some(self.bitmap.factor_bits(q)), self.clip)?.form.effective()),
        }
    }

    pub fn compressed_form(&self, l: usize, s: LayerSetting) -> Result<CompressedForm> {
        let bits = s.q.map(|q| self.bitmap.factor_bits(q));
        Ok(compress(&self.blocks[l].layer, s.k, bits, self.clip)?.form)
    }

    pub fn compile(&self, profile: Option<&Profile>) -> Result<CompiledNetwork<'_>> {
        let owned;
        let p = match profile {
            Some(p) => {
                self.check_profile(p)?;
                p
            }
            None => {
                owned = self.full_profile();
                &owned
            }
        };
        let weights = p
            .layers
            .iter()
            .enumerate()
            .map(|(l, &s)| self.layer_weight(l, s))
            .collect::<Result<Vec<_>>>()?;
        Ok(CompiledNetwork { net: self, weights, profile: profile.cloned(), fingerprint: self.fingerprint() })
    }
}

impl CompiledNetwork<'_> {
    pub fn block_pre(&self, l: usize, input: &[f64]) -> Result<Vec<f64>> {
        let mut pre = self.weights[l].apply(input)?;
        if let Some(b) = &self.net.blocks[l].layer.bias {
            pre.iter_mut().zip(b).for_each(|(p, b)| *p += b);
        }
        Ok(pre)
    }

    pub fn forward(&self, x: &[f64]) -> Result<ForwardTrace> {
        if x.len() != self.net.in_dim() {
            return Err(Error::dims(format!("input has {} values, network expects {}", x.len(), self.net.in_dim())));
        }
        let depth = self.net.depth();
        let mut trace = ForwardTrace {
            inputs: Vec::with_capacity(depth),
            pre: Vec::with_capacity(depth),
            outputs: Vec::with_capacity(depth),
            logits: Vec::new(),
            profile: self.profile.clone(),
            fingerprint: self.fingerprint.clone(),
        };
        let mut a = x.to_vec();
        for (l, block) in self.net.blocks.iter().enumerate() {
            let pre = self.block_pre(l, &a)?;
            let h = block.finish(&pre, &a);
            trace.inputs.push(a);
            trace.pre.push(pre);
            trace.outputs.push(h.clone());
            a = h;
        }
        trace.logits = a;
        Ok(trace)
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(x)?.logits)
    }

    /// Runs blocks `from..` starting from input `a` to layer `from`.
    pub fn forward_from(&self, from: usize, a: &[f64]) -> Result<Vec<f64>> {
        let mut a = a.to_vec();
        for l in from..self.net.depth() {
            let pre = self.block_pre(l, &a)?;
            a = self.net.blocks[l].finish(&pre, &a);
        }
        Ok(a)
    }
}

/// Forward pass under `profile`, or the full model when `None`.
pub fn forward(net: &Network, x: &[f64], profile: Option<&Profile>) -> Result<ForwardTrace> {
    net.compile(profile)?.forward(x)
}

/// `‖f̃_k(x) − f(x)‖₂`.
pub fn logit_drift(net: &Network, x: &[f64], profile: &Profile) -> Result<f64> {
    let full = net.compile(None)?.logits(x)?;
    let comp = net.compile(Some(profile))?.logits(x)?;
    Ok(drift_between(&full, &comp))
}

pub fn drift_between(a: &[f64], b: &[f64]) -> f64 {
    norm2(&a.iter().zip(b).map(|(x, y)| x - y).collect::<Vec<_>>())
}

/// Operator norms of each layer's full (`k_max`, float) weight.
pub fn full_weight_norms(net: &Network) -> Result<Vec<f64>> {
    net.blocks
        .iter()
        .map(|b| crate::elastic::full_weight(&b.layer).operator_norm())
        .collect()
}

/// Upper bound on the gain from a perturbation of layer `l`'s
/// pre-activation to the logits, given per-layer weight-norm bounds.
///
/// Block `j > l` contributes `[residual] + post_gain_j · norm_j`; layer `l`
/// itself contributes its `post_gain`.
pub fn postlayer_bound(net: &Network, l: usize, weight_norms: &[f64]) -> f64 {
    let mut g = net.blocks[l].post_gain();
    for j in l + 1..net.depth() {
        let b = &net.blocks[j];
        g *= (if b.residual { 1.0 } else { 0.0 }) + b.post_gain() * weight_norms[j];
    }
    g
}

/// Guaranteed bound on the post-layer Jacobian gain of the full model.
pub fn exact_postlayer_lipschitz(net: &Network, l: usize) -> Result<f64> {
    if l >= net.depth() {
        return Err(Error::invalid(format!("layer {l} out of range")));
    }
    Ok(postlayer_bound(net, l, &full_weight_norms(net)?))
}

/// Running multiply-add accounting: each scalar multiply and each add
/// count one FLOP.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FlopCounter {
    pub flops: u64,
}

/// Applies retained factors stage by stage (`Vᵀa`, `Σ·`, `U·` or reduce,
/// core conv, expand), counting FLOPs as it goes.
pub fn apply_staged(form: &CompressedForm, x: &[f64], counter: &mut FlopCounter) -> Result<Vec<f64>> {
    match form {
        CompressedForm::LowRank { u, sigma, v } => {
            if x.len() != v.rows() {
                return Err(Error::dims("staged input length"));
            }
            let k = sigma.len();
            let mut t = vec![0.0; k];
            for (j, tj) in t.iter_mut().enumerate() {
                for (i, &xi) in x.iter().enumerate() {
                    *tj += v.get(i, j) * xi;
                    counter.flops += 2;
                }
            }
            for (tj, s) in t.iter_mut().zip(sigma) {
                *tj *= s;
                counter.flops += 1;
            }
            let mut y = vec![0.0; u.rows()];
            for (i, yi) in y.iter_mut().enumerate() {
                for (j, &tj) in t.iter().enumerate() {
                    *yi += u.get(i, j) * tj;
                    counter.flops += 2;
                }
            }
            Ok(y)
        }
        CompressedForm::Tucker2 { u_out, core, u_in, geometry } => {
            let hw = geometry.pixels();
            let (ci, ri) = u_in.shape();
            let (co, ro) = u_out.shape();
            if x.len() != ci * hw {
                return Err(Error::dims("staged conv input length"));
            }
            let mut reduced = vec![0.0; ri * hw];
            for a in 0..ri {
                for p in 0..hw {
                    for c in 0..ci {
                        reduced[a * hw + p] += u_in.get(c, a) * x[c * hw + p];
                        counter.flops += 2;
                    }
                }
            }
            // Core conv over a zero-padded buffer: every tap is executed.
            let (kh, kw) = (core.h, core.w);
            let (h, w) = (geometry.height, geometry.width);
            let (ph, pw) = (kh / 2, kw / 2);
            let (hp, wp) = (h + 2 * ph, w + 2 * pw);
            let mut padded = vec![0.0; ri * hp * wp];
            for a in 0..ri {
                for y in 0..h {
                    for xx in 0..w {
                        padded[(a * hp + y + ph) * wp + xx + pw] = reduced[a * hw + y * w + xx];
                    }
                }
            }
            let mut mid = vec![0.0; ro * hw];
            for o in 0..ro {
                for y in 0..h {
                    for xx in 0..w {
                        let mut acc = 0.0;
                        for a in 0..ri {
                            for dy in 0..kh {
                                for dx in 0..kw {
                                    acc += core.get(o, a, dy, dx) * padded[(a * hp + y + dy) * wp + xx + dx];
                                    counter.flops += 2;
                                }
                            }
                        }
                        mid[o * hw + y * w + xx] = acc;
                    }
                }
            }
            let mut out = vec![0.0; co * hw];
            for c in 0..co {
                for p in 0..hw {
                    for o in 0..ro {
                        out[c * hw + p] += u_out.get(c, o) * mid[o * hw + p];
                        counter.flops += 2;
                    }
                }
            }
            Ok(out)
        }
    }
}

/// Forward through the staged factor kernels of `profile`, returning the
/// logits and the FLOPs spent in the weight stages.
pub fn forward_staged(net: &Network, profile: &Profile, x: &[f64]) -> Result<(Vec<f64>, u64)> {
    net.check_profile(profile)?;
    let mut counter = FlopCounter::default();
    let mut a = x.to_vec();
    for (l, (block, &s)) in net.blocks.iter().zip(&profile.layers).enumerate() {
        let form = net.compressed_form(l, s)?;
        let mut pre = apply_staged(&form, &a, &mut counter)?;
        if let Some(b) = &block.layer.bias {
            pre.iter_mut().zip(b).for_each(|(p, b)| *p += b);
        }
        a = block.finish(&pre, &a);
    }
    Ok((a, counter.flops))
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
