//! The toy training loop, checkpoints and evaluation.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::loss::build;
use super::{sample_rank, synthetic_data, toy_network, Batch, Dataset, LossTerms, Optimizer, RankSampler, StepSample, TrainConfig, TrainParams};
use crate::autodiff::Var;
use crate::certificate::{calibrate, lipschitz_proxy, Certifier, ProxyMode, DEFAULT_EMA_DECAY};
use crate::controller::{
    argmax, audit_monotone, build_lattice, chain_menu, gumbel_softmax, gumbel_st, lattice_audit_points, menu_terms, synthetic_device_table,
    tape_isotonic_hinge, AuditReport, BudgetToken, CostModels, Menu, PolicyHead,
};
use crate::cost::{fit_cost_model, layer_cost, Metric, SynthSpec};
use crate::elastic::{anneal_temperature, gumbel_noise, residual_norm};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::network::{drift_between, Network};
use crate::profile::{LayerSetting, Profile};

/// Number of calibration inputs fed to the power-iteration proxy.
const PROXY_INPUTS: usize = 32;
const GRAD_CLIP: f64 = 5.0;
const DIVERGENCE_FACTOR: f64 = 10.0;
const DIVERGENCE_PATIENCE: u64 = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: u64,
    pub stage: usize,
    pub policy_step: bool,
    pub profile_id: String,
    pub budget_ms: f64,
    pub tau: f64,
    pub gamma: f64,
    pub lambda_sd: f64,
    pub lambda_aug: f64,
    pub lambda_cert: f64,
    #[serde(flatten)]
    pub terms: LossTerms,
}

/// Optimizer buffers over a flat parameter vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct OptState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl OptState {
    fn new(n: usize) -> Self {
        OptState { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    fn step(&mut self, cfg: &TrainConfig, lr: f64, p: &mut [f64], g: &[f64]) {
        self.t += 1;
        match cfg.optimizer {
            Optimizer::Sgd => {
                for i in 0..p.len() {
                    self.m[i] = cfg.momentum * self.m[i] + g[i] + cfg.weight_decay * p[i];
                    p[i] -= lr * self.m[i];
                }
            }
            Optimizer::AdamW => {
                let (b1, b2, eps): (f64, f64, f64) = (cfg.momentum, 0.999, 1e-8);
                let c1 = 1.0 - b1.powi(self.t as i32);
                let c2 = 1.0 - b2.powi(self.t as i32);
                for i in 0..p.len() {
                    self.m[i] = b1 * self.m[i] + (1.0 - b1) * g[i];
                    self.v[i] = b2 * self.v[i] + (1.0 - b2) * g[i] * g[i];
                    p[i] -= lr * (self.m[i] / c1 / ((self.v[i] / c2).sqrt() + eps) + cfg.weight_decay * p[i]);
                }
            }
        }
    }
}

fn clip(g: &mut [f64], max_norm: f64) {
    let n = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n > max_norm {
        let s = max_norm / n;
        g.iter_mut().for_each(|v| *v *= s);
    }
}

fn head_flat(h: &PolicyHead) -> Vec<f64> {
    h.params().iter().flat_map(|m| m.data().iter().copied()).collect()
}

fn set_head_flat(h: &mut PolicyHead, p: &[f64]) {
    let mut at = 0;
    for m in h.params_mut() {
        let n = m.data().len();
        m.data_mut().copy_from_slice(&p[at..at + n]);
        at += n;
    }
}

/// Everything needed to continue a run bit-for-bit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub config: TrainConfig,
    pub step: u64,
    pub params: TrainParams,
    pub head: PolicyHead,
    pub menus: Vec<Menu>,
    pub costs: CostModels,
    pub reference_latency_ms: f64,
    /// Training-time `L̂_ℓ` buffer.
    pub lhat: Vec<f64>,
    pub alpha: Vec<f64>,
    /// Certificate term of every menu entry at the last refresh.
    pub menu_terms: Vec<Vec<f64>>,
    pub initial_loss: Option<f64>,
    pub over_count: u64,
    pub metrics: Vec<MetricRow>,
    opt: OptState,
    head_opt: OptState,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileEval {
    pub name: String,
    pub profile_id: String,
    pub accuracy: f64,
    pub delta_hat: f64,
    pub latency_ms: f64,
    pub bytes: u64,
    /// Fraction of eval samples whose logit drift exceeds `ε`.
    pub violation_rate: f64,
    pub mean_drift: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub seed: u64,
    pub steps: u64,
    pub final_loss: f64,
    pub full_accuracy: f64,
    pub epsilon: f64,
    pub lattice: Vec<ProfileEval>,
    /// Violation rate of the smallest lattice profile.
    pub tiny_violation_rate: f64,
    pub audit: AuditReport,
}

fn step_rng(seed: u64, step: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ step.wrapping_mul(0xbf58_476d_1ce4_e5b9) ^ stream)
}

impl TrainState {
    pub fn init(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let seed = config.seed;
        let net = toy_network(&config)?;
        let menus: Vec<Menu> = net.blocks.iter().map(|b| chain_menu(&b.layer, &net.bitmap, config.menu_size)).collect();
        let costs = synthetic_costs(&net, &menus, &config)?;
        let top = Profile::new(menus.iter().map(|m| *m.last().expect("non-empty menu")).collect());
        let reference_latency_ms = crate::controller::profile_metrics(&net, &costs, &top)?.latency_ms;
        let summary_dim = if config.input_aware { config.hidden.last().copied().unwrap_or(config.data.dim) } else { 0 };
        let head = PolicyHead::new(
            menus.clone(),
            vec![config.device.clone()],
            BudgetToken::latency(reference_latency_ms, config.device.clone())?,
            config.policy_hidden,
            summary_dim,
            seed ^ 0x90_11c7,
        )?;
        let params = TrainParams::new(net)?;
        let n = params.flatten().len();
        let hn = head_flat(&head).len();
        let depth = params.net.depth();
        let mut st = TrainState {
            config,
            step: 0,
            params,
            head,
            menus,
            costs,
            reference_latency_ms,
            lhat: vec![0.0; depth],
            alpha: vec![0.0; depth],
            menu_terms: Vec::new(),
            initial_loss: None,
            over_count: 0,
            metrics: Vec::new(),
            opt: OptState::new(n),
            head_opt: OptState::new(hn),
        };
        let (train, _) = st.datasets();
        st.refresh(&train, true)?;
        Ok(st)
    }

    pub fn datasets(&self) -> (Dataset, Dataset) {
        synthetic_data(&self.config.data, self.config.classes, self.config.seed)
    }

    fn calibration_inputs<'a>(&self, train: &'a Dataset) -> &'a [Vec<f64>] {
        &train.x[..self.config.calibration_samples.min(train.len())]
    }

    /// Recalibrates `α`, folds a fresh power-iteration estimate into the
    /// `L̂` buffer and recomputes menu certificate terms.
    fn refresh(&mut self, train: &Dataset, first: bool) -> Result<()> {
        let net = &self.params.net;
        let calib = self.calibration_inputs(train);
        self.alpha = calibrate(net, calib)?.alpha;
        let mode = ProxyMode::PowerIter { steps: self.config.power_steps, ema_decay: DEFAULT_EMA_DECAY };
        let probe = &calib[..PROXY_INPUTS.min(calib.len())];
        let fresh = (0..net.depth()).map(|l| lipschitz_proxy(net, l, mode, probe)).collect::<Result<Vec<_>>>()?;
        if first {
            self.lhat = fresh;
        } else {
            let d = DEFAULT_EMA_DECAY.powf(self.config.refresh_every as f64);
            for (h, f) in self.lhat.iter_mut().zip(fresh) {
                *h = d * *h + (1.0 - d) * f;
            }
        }
        self.menu_terms = self
            .menus
            .iter()
            .enumerate()
            .map(|(l, menu)| {
                let layer = &net.blocks[l].layer;
                menu.iter()
                    .map(|s| {
                        let r = residual_norm(layer, s.k, s.q.map(|q| net.bitmap.factor_bits(q)), net.clip)?;
                        Ok(self.lhat[l] * self.alpha[l] * r)
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(())
    }

    fn samplers(&self) -> Result<Vec<RankSampler>> {
        self.params
            .net
            .blocks
            .iter()
            .zip(&self.menus)
            .map(|(b, m)| RankSampler::new(b.layer.k_min, b.layer.k_max, self.config.anneal_steps(), m.iter().map(|s| s.k).collect()))
            .collect()
    }

    fn budget_for(&self, stage: usize, rng: &mut impl Rng) -> f64 {
        let [lo, hi] = self.config.budget_range;
        match stage {
            0 => hi * self.reference_latency_ms,
            _ => rng.random_range(lo..=hi) * self.reference_latency_ms,
        }
    }

    /// Per-entry latency contribution of each layer's menu.
    fn menu_latency(&self) -> Result<Vec<Vec<f64>>> {
        let net = &self.params.net;
        let m = &self.costs.latency;
        self.menus
            .iter()
            .enumerate()
            .map(|(l, menu)| {
                menu.iter()
                    .map(|&s| {
                        let c = layer_cost(net, l, s)?;
                        Ok(m.comp[l] * c.flops as f64 + m.mem[l] * c.bytes() as f64)
                    })
                    .collect()
            })
            .collect()
    }

    /// One optimization step.
    pub fn step_once(&mut self, train: &Dataset) -> Result<()> {
        let cfg = self.config.clone();
        let t = self.step;
        let mut rng = step_rng(cfg.seed, t, 0);
        let stage = cfg.stage(t);
        let budget_ms = self.budget_for(stage, &mut rng);
        let tau = anneal_temperature(t, cfg.tau0, cfg.tau_min, cfg.tau_alpha, cfg.steps);
        let idx: Vec<usize> = (0..cfg.batch_size).map(|_| rng.random_range(0..train.len())).collect();
        let batch = Batch::new(&idx.iter().map(|&i| train.x[i].clone()).collect::<Vec<_>>(), idx.iter().map(|&i| train.y[i]).collect())?;
        let noise = Normal::new(0.0, cfg.aug_sigma).map_err(|e| Error::invalid(e.to_string()))?;
        let aug_noise = Matrix::from_fn(batch.x.rows(), batch.x.cols(), |_, _| noise.sample(&mut rng));
        let net = &self.params.net;
        let mask_noise: Vec<Vec<f64>> = net.blocks.iter().map(|b| gumbel_noise(b.layer.k_max, &mut rng)).collect();
        let w = cfg.weights.at(t, cfg.warmup_steps());
        let policy_step = t % 2 == 1;
        let samplers = self.samplers()?;
        let gamma = samplers[0].gamma(t);

        let budget = BudgetToken::latency(budget_ms, cfg.device.clone())?;
        let (profile, policy_noise) = if policy_step {
            let logits = self.head.logits(&budget, None)?;
            let g: Vec<Vec<f64>> = logits.iter().map(|l| gumbel_noise(l.len(), &mut rng)).collect();
            let choice: Vec<LayerSetting> =
                logits.iter().zip(&g).zip(&self.menus).map(|((l, g), m)| m[argmax(&gumbel_softmax(l, g, tau))]).collect();
            (Profile::new(choice), Some(g))
        } else {
            let layers = samplers
                .iter()
                .map(|s| {
                    let k = sample_rank(s, t, &mut rng);
                    LayerSetting::new(k, net.bitmap.base(k))
                })
                .collect();
            (Profile::new(layers), None)
        };

        let sample = StepSample { profile: profile.clone(), tau, mask_noise, aug_noise, budget_ms };
        let aux = super::LossAux { lhat: self.lhat.clone(), alpha: self.alpha.clone(), latency: self.costs.latency.clone() };
        let mut graph = build(&self.params, &batch, &sample, w.epsilon, &aux, None)?;

        let (root, terms, head_vars) = match policy_noise {
            None => {
                let (root, terms) = graph.combine(&w, None, None, &[])?;
                (root, terms, None)
            }
            Some(g) => {
                let menu_lat = self.menu_latency()?;
                let tape = &mut graph.tape;
                let hv = self.head.push_vars(tape);
                let logits = self.head.tape_logits(tape, &hv, &budget, None)?;
                let mut cert_sum: Option<Var> = None;
                let mut lat_sum: Option<Var> = None;
                for (l, lv) in logits.into_iter().enumerate() {
                    let (y, i) = gumbel_st(tape, lv, tau, &g[l])?;
                    if self.menus[l][i] != profile.layers[l] {
                        return Err(Error::invalid("policy sample disagrees with its tape replay"));
                    }
                    for (table, acc) in [(&self.menu_terms[l], &mut cert_sum), (&menu_lat[l], &mut lat_sum)] {
                        let c = tape.constant(Matrix::column_vector(table));
                        let e = tape.hadamard(y, c)?;
                        let e = tape.sum(e);
                        *acc = Some(match *acc {
                            Some(a) => tape.add(a, e)?,
                            None => e,
                        });
                    }
                }
                let cert = tape.add_const(cert_sum.expect("layers"), -w.epsilon);
                let cert = tape.relu(cert);
                let lat = tape.add_const(lat_sum.expect("layers"), self.costs.latency.intercept);
                let lat = tape.mul_const(lat, 1.0 / budget_ms);
                let lat = tape.add_const(lat, -1.0);
                let bud = tape.relu(lat);
                let [lo, hi] = cfg.budget_range;
                let (mut f1, mut f2) = (rng.random_range(lo..=hi), rng.random_range(lo..=hi));
                if f1 > f2 {
                    std::mem::swap(&mut f1, &mut f2);
                }
                let b1 = BudgetToken::latency(f1 * self.reference_latency_ms, cfg.device.clone())?;
                let b2 = BudgetToken::latency(f2 * self.reference_latency_ms, cfg.device.clone())?;
                let iso = tape_isotonic_hinge(&self.head, tape, &hv, &b1, &b2, 1.0)?;
                let (root, terms) = graph.combine(&w, Some(cert), Some(bud), &[(iso, w.iso)])?;
                (root, terms, Some(hv))
            }
        };
        terms.check_finite(t)?;

        let grads = graph.tape.backward(root)?;
        let mut g = graph.param_grad(&grads).flatten();
        clip(&mut g, GRAD_CLIP);
        let mut p = self.params.flatten();
        self.opt.step(&cfg, cfg.lr, &mut p, &g);
        self.params.set_flat(&p)?;
        self.params.project();
        if let Some(hv) = head_vars {
            let mut hg: Vec<f64> = PolicyHead::gradient(&hv, &grads).0.iter().flat_map(|m| m.data().to_vec()).collect();
            clip(&mut hg, GRAD_CLIP);
            let mut hp = head_flat(&self.head);
            self.head_opt.step(&cfg, cfg.policy_lr, &mut hp, &hg);
            set_head_flat(&mut self.head, &hp);
        }

        let init = *self.initial_loss.get_or_insert(terms.total);
        if terms.total > DIVERGENCE_FACTOR * init {
            self.over_count += 1;
            if self.over_count >= DIVERGENCE_PATIENCE {
                return Err(Error::Diverged {
                    step: t as usize,
                    reason: format!("loss {} above {}× the initial {init} for {DIVERGENCE_PATIENCE} steps", terms.total, DIVERGENCE_FACTOR),
                });
            }
        } else {
            self.over_count = 0;
        }
        self.metrics.push(MetricRow {
            step: t,
            stage,
            policy_step,
            profile_id: profile.id.clone(),
            budget_ms,
            tau,
            gamma,
            lambda_sd: w.sd,
            lambda_aug: w.aug,
            lambda_cert: w.cert,
            terms,
        });
        self.step += 1;
        if cfg.resvd_every > 0 && self.step % cfg.resvd_every == 0 {
            self.params.reorthogonalize()?;
            self.opt = OptState::new(p.len());
        }
        if cfg.refresh_every > 0 && self.step % cfg.refresh_every == 0 {
            self.refresh(train, false)?;
        }
        Ok(())
    }

    /// Runs until `until` steps (capped by the configured total).
    pub fn run_until(&mut self, train: &Dataset, until: u64) -> Result<()> {
        while self.step < until.min(self.config.steps) {
            self.step_once(train)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::export::atomic_write(path, serde_json::to_string(self)?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let st: TrainState = serde_json::from_slice(&std::fs::read(path)?)?;
        st.config.validate()?;
        Ok(st)
    }

    pub fn write_metrics_csv(&self, w: impl Write) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record([
            "step", "stage", "policy_step", "profile_id", "budget_ms", "tau", "gamma", "lambda_sd", "lambda_aug", "lambda_cert", "total",
            "task", "sd", "aug", "cert", "bud", "iso", "delta_hat", "latency_ms",
        ])?;
        for r in &self.metrics {
            let t = &r.terms;
            let mut rec = vec![r.step.to_string(), r.stage.to_string(), r.policy_step.to_string(), r.profile_id.clone()];
            rec.extend(
                [r.budget_ms, r.tau, r.gamma, r.lambda_sd, r.lambda_aug, r.lambda_cert, t.total, t.task, t.sd, t.aug, t.cert, t.bud, t.iso, t.delta_hat, t.latency_ms]
                    .iter()
                    .map(|v| format!("{v:?}")),
            );
            wr.write_record(&rec)?;
        }
        wr.flush()?;
        Ok(())
    }

    /// Lattice from greedy knapsack at the evaluation budgets, scored on the
    /// eval set.
    pub fn report(&self, train: &Dataset, eval: &Dataset) -> Result<TrainReport> {
        let net = &self.params.net;
        let cfg = &self.config;
        let calib = self.calibration_inputs(train);
        let stats = calibrate(net, calib)?;
        let mode = ProxyMode::PowerIter { steps: cfg.power_steps, ema_decay: DEFAULT_EMA_DECAY };
        let cert = Certifier::new(net, &stats, mode, &calib[..PROXY_INPUTS.min(calib.len())])?;
        let terms = menu_terms(&cert, &net.full_profile(), &self.menus)?;
        let budgets = cfg
            .eval_budgets
            .iter()
            .map(|f| BudgetToken::latency(f * self.reference_latency_ms, cfg.device.clone()))
            .collect::<Result<Vec<_>>>()?;
        let built = build_lattice(&cert, &self.menus, &budgets, &self.costs, &terms)?;
        let full = net.compile(None)?;
        let full_logits = eval.x.iter().map(|x| full.logits(x)).collect::<Result<Vec<_>>>()?;
        let full_accuracy = accuracy_of(&full_logits, &eval.y);
        let mut lattice = Vec::with_capacity(built.lattice.len());
        for e in &built.lattice.entries {
            let comp = net.compile(Some(&e.profile))?;
            let logits = eval.x.iter().map(|x| comp.logits(x)).collect::<Result<Vec<_>>>()?;
            let drifts: Vec<f64> = logits.iter().zip(&full_logits).map(|(a, b)| drift_between(a, b)).collect();
            lattice.push(ProfileEval {
                name: e.name.clone(),
                profile_id: e.profile.id.clone(),
                accuracy: accuracy_of(&logits, &eval.y),
                delta_hat: e.delta_hat,
                latency_ms: e.predicted_latency_ms,
                bytes: e.bytes,
                violation_rate: drifts.iter().filter(|d| **d > cfg.weights.epsilon).count() as f64 / drifts.len() as f64,
                mean_drift: drifts.iter().sum::<f64>() / drifts.len() as f64,
            });
        }
        let acc: Vec<f64> = lattice.iter().map(|p| p.accuracy).collect();
        let audit = audit_monotone(&lattice_audit_points(&built.lattice, &built.assignment, Some(&acc)));
        Ok(TrainReport {
            seed: cfg.seed,
            steps: self.step,
            final_loss: self.metrics.last().map_or(f64::NAN, |m| m.terms.total),
            full_accuracy,
            epsilon: cfg.weights.epsilon,
            tiny_violation_rate: lattice[0].violation_rate,
            lattice,
            audit,
        })
    }
}

fn accuracy_of(logits: &[Vec<f64>], y: &[usize]) -> f64 {
    let hits = logits.iter().zip(y).filter(|(l, y)| argmax(l) == **y).count();
    hits as f64 / y.len() as f64
}

/// Fraction of `data` classified correctly under `profile`.
pub fn evaluate_accuracy(net: &Network, profile: Option<&Profile>, data: &Dataset) -> Result<f64> {
    evaluate_accuracy_on(net, profile, &data.x, &data.y)
}

pub fn evaluate_accuracy_on(net: &Network, profile: Option<&Profile>, x: &[Vec<f64>], y: &[usize]) -> Result<f64> {
    if x.len() != y.len() || x.is_empty() {
        return Err(Error::dims("one label per sample"));
    }
    let c = net.compile(profile)?;
    let logits = x.iter().map(|x| c.logits(x)).collect::<Result<Vec<_>>>()?;
    Ok(accuracy_of(&logits, y))
}

/// Synthetic device table over menu profiles, fitted by NNLS.
fn synthetic_costs(net: &Network, menus: &[Menu], cfg: &TrainConfig) -> Result<CostModels> {
    let spec = SynthSpec { seed: cfg.seed, noise_sigma: cfg.device_noise, ..SynthSpec::default() };
    let table = synthetic_device_table(net, menus, &cfg.device, cfg.device_profiles, &spec)?;
    Ok(CostModels { latency: fit_cost_model(net, &table, Metric::LatencyMs)?, energy: Some(fit_cost_model(net, &table, Metric::EnergyMj)?) })
}

/// Trains from scratch with `seed` and reports on the eval set.
pub fn train_toy(config: &TrainConfig, seed: u64) -> Result<(TrainState, TrainReport)> {
    let mut cfg = config.clone();
    cfg.seed = seed;
    let mut st = TrainState::init(cfg)?;
    let (train, eval) = st.datasets();
    st.run_until(&train, st.config.steps)?;
    let report = st.report(&train, &eval)?;
    Ok((st, report))
}
