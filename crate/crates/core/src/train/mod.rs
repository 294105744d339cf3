//! Desk-scale training of an elastic classifier: rank sampling, schedules,
//! the composite objective, and the toy training loop.

mod loss;
mod run;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub use loss::{total_loss, total_loss_grad, Batch, LossAux, LossProbe, LossTerms, ParamGrad, ProbeValue, StepSample, TrainParams};
pub use run::{evaluate_accuracy, evaluate_accuracy_on, train_toy, MetricRow, ProfileEval, TrainReport, TrainState};

use crate::elastic::{BitMap, ElasticLayer, DEFAULT_TAU0, DEFAULT_TAU_ALPHA, DEFAULT_TAU_MIN};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::network::{Activation, Block, Network};
use crate::quant::ClipMode;

/// Seeds used for paired comparisons.
pub const DEFAULT_SEEDS: [u64; 3] = [3407, 2025, 9157];

/// Coefficients of the composite objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub sd: f64,
    pub aug: f64,
    pub cert: f64,
    pub bud: f64,
    pub iso: f64,
    /// Drift tolerance of the certificate hinge.
    pub epsilon: f64,
    /// Fraction of training over which `sd`, `aug` and `cert` ramp up.
    pub warmup_frac: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { sd: 0.5, aug: 0.2, cert: 0.2, bud: 0.3, iso: 0.1, epsilon: 0.5, warmup_frac: 0.15 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.sd, self.aug, self.cert, self.bud, self.iso, self.epsilon, self.warmup_frac];
        if all.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || self.warmup_frac > 1.0 {
            return Err(Error::invalid("loss weights must be finite and non-negative, warmup_frac ≤ 1"));
        }
        Ok(())
    }

    /// Weights at step `t` with linear warmups on `sd`, `aug` and `cert`.
    pub fn at(&self, t: u64, warmup_steps: u64) -> LossWeights {
        LossWeights {
            sd: lambda_warmup(self.sd, t, warmup_steps),
            aug: lambda_warmup(self.aug, t, warmup_steps),
            cert: lambda_warmup(self.cert, t, warmup_steps),
            ..self.clone()
        }
    }
}

/// Linear ramp from 0 to `base` over `warmup_steps`.
pub fn lambda_warmup(base: f64, t: u64, warmup_steps: u64) -> f64 {
    if warmup_steps == 0 || t >= warmup_steps {
        base
    } else {
        base * t as f64 / warmup_steps as f64
    }
}

/// Mixture `γ_t·U[k_min, k_max] + (1 − γ_t)·U(K_profiles)` with
/// `γ_t = max(0, 1 − t/T_anneal)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankSampler {
    pub k_min: usize,
    pub k_max: usize,
    pub t_anneal: u64,
    pub profile_ranks: Vec<usize>,
}

impl RankSampler {
    pub fn new(k_min: usize, k_max: usize, t_anneal: u64, profile_ranks: Vec<usize>) -> Result<Self> {
        if k_min == 0 || k_min > k_max || profile_ranks.is_empty() || profile_ranks.iter().any(|k| !(k_min..=k_max).contains(k)) {
            return Err(Error::invalid("rank sampler needs 1 ≤ k_min ≤ k_max and profile ranks inside the range"));
        }
        Ok(RankSampler { k_min, k_max, t_anneal, profile_ranks })
    }

    pub fn gamma(&self, t: u64) -> f64 {
        if self.t_anneal == 0 {
            0.0
        } else {
            (1.0 - t as f64 / self.t_anneal as f64).max(0.0)
        }
    }
}

pub fn sample_rank(s: &RankSampler, t: u64, rng: &mut impl Rng) -> usize {
    if rng.random::<f64>() < s.gamma(t) {
        rng.random_range(s.k_min..=s.k_max)
    } else {
        s.profile_ranks[rng.random_range(0..s.profile_ranks.len())]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    AdamW,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub dim: usize,
    pub train: usize,
    pub eval: usize,
    pub centers_per_class: usize,
    pub center_scale: f64,
    pub spread: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { dim: 16, train: 2000, eval: 500, centers_per_class: 3, center_scale: 1.0, spread: 1.0 }
    }
}

/// Every knob of a toy run. Unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub steps: u64,
    pub batch_size: usize,
    pub optimizer: Optimizer,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub policy_lr: f64,
    pub weights: LossWeights,
    pub data: DataConfig,
    pub hidden: Vec<usize>,
    pub classes: usize,
    pub k_min: usize,
    pub menu_size: usize,
    /// Rank-sampler anneal horizon as a fraction of `steps`.
    pub anneal_frac: f64,
    pub tau0: f64,
    pub tau_min: f64,
    pub tau_alpha: f64,
    pub aug_sigma: f64,
    pub resvd_every: u64,
    pub refresh_every: u64,
    pub calibration_samples: usize,
    pub power_steps: usize,
    /// Fractions of training spent in the global-budget, tight-budget and
    /// input-aware stages.
    pub curriculum: [f64; 3],
    /// Budget range during the tight stage, as fractions of the latency of
    /// the largest menu profile.
    pub budget_range: [f64; 2],
    /// Budget levels of the evaluation lattice, same units.
    pub eval_budgets: Vec<f64>,
    pub device: String,
    pub device_noise: f64,
    pub device_profiles: usize,
    pub policy_hidden: usize,
    pub input_aware: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: DEFAULT_SEEDS[0],
            steps: 400,
            batch_size: 64,
            optimizer: Optimizer::Sgd,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 0.0,
            policy_lr: 0.05,
            weights: LossWeights::default(),
            data: DataConfig::default(),
            hidden: vec![32, 32],
            classes: 2,
            k_min: 1,
            menu_size: 5,
            anneal_frac: 0.5,
            tau0: DEFAULT_TAU0,
            tau_min: DEFAULT_TAU_MIN,
            tau_alpha: DEFAULT_TAU_ALPHA,
            aug_sigma: 0.05,
            resvd_every: 50,
            refresh_every: 25,
            calibration_samples: 256,
            power_steps: 5,
            curriculum: [0.4, 0.4, 0.2],
            budget_range: [0.4, 1.0],
            eval_budgets: vec![0.45, 0.7, 1.0],
            device: "synthetic-cpu".into(),
            device_noise: 0.03,
            device_profiles: 64,
            policy_hidden: 16,
            input_aware: false,
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Format(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        let bad = |m: &str| Err(Error::invalid(format!("config: {m}")));
        if self.steps == 0 || self.batch_size == 0 {
            return bad("steps and batch_size must be positive");
        }
        if !(self.lr > 0.0 && self.policy_lr >= 0.0 && (0.0..1.0).contains(&self.momentum)) {
            return bad("lr > 0, policy_lr ≥ 0, momentum in [0, 1)");
        }
        if self.classes < 2 || self.data.dim == 0 || self.data.train < self.batch_size || self.data.eval == 0 {
            return bad("need ≥ 2 classes, a non-empty eval set and a train set of at least one batch");
        }
        if self.curriculum.iter().any(|f| *f < 0.0) || (self.curriculum.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad("curriculum fractions must be non-negative and sum to 1");
        }
        if !(0.0 < self.budget_range[0] && self.budget_range[0] <= self.budget_range[1]) {
            return bad("budget_range must be positive and ordered");
        }
        if self.eval_budgets.is_empty() || self.eval_budgets.windows(2).any(|w| w[0] > w[1]) || self.eval_budgets[0] <= 0.0 {
            return bad("eval_budgets must be positive and ascending");
        }
        if !(self.tau0 >= self.tau_min && self.tau_min > 0.0 && self.tau_alpha > 0.0) {
            return bad("temperatures must satisfy tau0 ≥ tau_min > 0");
        }
        if self.k_min == 0 || self.menu_size == 0 || self.calibration_samples == 0 {
            return bad("k_min, menu_size and calibration_samples must be positive");
        }
        Ok(())
    }

    pub fn warmup_steps(&self) -> u64 {
        (self.weights.warmup_frac * self.steps as f64).round() as u64
    }

    pub fn anneal_steps(&self) -> u64 {
        (self.anneal_frac * self.steps as f64).round() as u64
    }

    /// Curriculum stage (0, 1 or 2) of step `t`.
    pub fn stage(&self, t: u64) -> usize {
        let f = t as f64 / self.steps as f64;
        if f < self.curriculum[0] {
            0
        } else if f < self.curriculum[0] + self.curriculum[1] {
            1
        } else {
            2
        }
    }
}

/// Labeled samples, one per entry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub x: Vec<Vec<f64>>,
    pub y: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

/// Interleaved Gaussian mixtures: every class owns several centers drawn
/// from the same distribution.
pub fn synthetic_data(cfg: &DataConfig, classes: usize, seed: u64) -> (Dataset, Dataset) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xda7a);
    let normal = move |rng: &mut ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };
    let centers: Vec<Vec<Vec<f64>>> = (0..classes)
        .map(|_| (0..cfg.centers_per_class).map(|_| (0..cfg.dim).map(|_| cfg.center_scale * normal(&mut rng)).collect()).collect())
        .collect();
    let draw = |n: usize, rng: &mut ChaCha8Rng| {
        let mut d = Dataset { x: Vec::with_capacity(n), y: Vec::with_capacity(n) };
        for i in 0..n {
            let c = i % classes;
            let m = &centers[c][rng.random_range(0..cfg.centers_per_class)];
            d.x.push(m.iter().map(|v| v + cfg.spread * normal(rng)).collect());
            d.y.push(c);
        }
        d
    };
    let train = draw(cfg.train, &mut rng);
    let eval = draw(cfg.eval, &mut rng);
    (train, eval)
}

/// Randomly initialized `dim → hidden… → classes` ReLU network with every
/// layer factorized at full rank.
pub fn toy_network(cfg: &TrainConfig) -> Result<Network> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x0e7);
    let mut dims = vec![cfg.data.dim];
    dims.extend(&cfg.hidden);
    dims.push(cfg.classes);
    let mut blocks = Vec::with_capacity(dims.len() - 1);
    for (i, w) in dims.windows(2).enumerate() {
        let (n, m) = (w[0], w[1]);
        let scale = (2.0 / n as f64).sqrt();
        let wm = Matrix::from_fn(m, n, |_, _| scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng));
        let k_max = m.min(n);
        let layer = ElasticLayer::dense_svd(&wm, cfg.k_min.min(k_max), k_max)?.with_bias(vec![0.0; m])?;
        let act = if i + 2 == dims.len() { Activation::Identity } else { Activation::Relu };
        blocks.push(Block::new(layer, act));
    }
    let mut net = Network::new(blocks)?;
    net.bitmap = BitMap::default();
    net.clip = ClipMode::MaxRange;
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_ramp() {
        assert_eq!(lambda_warmup(0.4, 0, 10), 0.0);
        assert_eq!(lambda_warmup(0.4, 5, 10), 0.2);
        assert_eq!(lambda_warmup(0.4, 11, 10), 0.4);
        assert_eq!(lambda_warmup(0.4, 0, 0), 0.4);
    }

    #[test]
    fn sampler_support_after_anneal() {
        let s = RankSampler::new(1, 8, 100, vec![2, 5]).unwrap();
        assert_eq!(s.gamma(0), 1.0);
        assert_eq!(s.gamma(50), 0.5);
        assert_eq!(s.gamma(150), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..500 {
            assert!([2, 5].contains(&sample_rank(&s, 100, &mut rng)));
        }
    }

    #[test]
    fn projection_keeps_singular_values_non_negative() {
        let mut p = TrainParams::new(toy_network(&TrainConfig::default()).unwrap()).unwrap();
        let mut flat = p.flatten();
        for v in flat.iter_mut() {
            *v = -v.abs() - 0.1;
        }
        p.set_flat(&flat).unwrap();
        p.project();
        for b in &p.net.blocks {
            match &b.layer.factors {
                crate::elastic::LayerFactors::DenseSvd(f) => assert!(f.sigma.iter().all(|s| *s == 0.0)),
                _ => unreachable!(),
            }
        }
    }

    #[test]
    fn config_round_trip_and_rejects_unknown_keys() {
        let c = TrainConfig::default();
        assert_eq!(TrainConfig::from_toml(&c.to_toml()).unwrap(), c);
        assert!(TrainConfig::from_toml("bogus = 1").is_err());
        assert!(TrainConfig::from_toml("steps = 0").is_err());
    }

    #[test]
    fn toy_shapes() {
        let cfg = TrainConfig::default();
        let net = toy_network(&cfg).unwrap();
        assert_eq!((net.in_dim(), net.out_dim(), net.depth()), (16, 2, 3));
        let (tr, ev) = synthetic_data(&cfg.data, 2, 1);
        assert_eq!((tr.len(), ev.len()), (2000, 500));
    }
}
