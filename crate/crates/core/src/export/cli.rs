//! The `ecomp` command line. Every machine-readable stdout line starts with
//! [`SENTINEL`] followed by the command name and `key=value` pairs.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use super::data::{read_samples, write_samples, Samples};
use super::manifest::{sha256_hex, CertificateDoc, CostDoc, Dec, LatticeDoc, Manifest, RawWeights};
use super::report::{build_report, render_text, write_report_csv};
use super::{atomic_write, build_payload};
use crate::certificate::{calibrate, Certifier, ProxyMode, DEFAULT_EMA_DECAY};
use crate::controller::{
    audit_monotone, build_lattice, chain_menu, lattice_audit_points, menu_terms, select_runtime, synthetic_device_table,
    AuditReport, BudgetToken, CostModels, Menu, SelectStatus,
};
use crate::cost::{fit_cost_model, DeviceTable, Metric, SynthSpec};
use crate::elastic::{full_weight, ElasticLayer, EffectiveWeight};
use crate::error::{Error, Result};
use crate::linalg::{tucker2_max_ranks, TRAINING_POWER_STEPS};
use crate::network::{Block, Network};
use crate::profile::Profile;
use crate::train::{evaluate_accuracy_on, TrainConfig, TrainState};

pub const SENTINEL: &str = "@@ecomp";

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const ERROR: i32 = 1;
    pub const USAGE: i32 = 2;
    /// `select` fell back to the lowest-latency profile.
    pub const CERT_WARNING: i32 = 3;
    /// A budget cannot be met or evaluated.
    pub const INFEASIBLE: i32 = 4;
    pub const AUDIT_FAILED: i32 = 5;
    /// Fingerprint or calibration mismatch.
    pub const STALE: i32 = 6;
    pub const DIVERGED: i32 = 7;
}

#[derive(Debug, Parser)]
#[command(name = "ecomp", version, about = "Budget-steerable elastic compression with drift certificates")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Factorize the raw layers of a model manifest.
    Decompose(DecomposeArgs),
    /// Calibrate and write certificate ledgers.
    Certify(CertifyArgs),
    /// Fit the cost model and build the profile lattice.
    Plan(PlanArgs),
    /// Pick the lattice profile for a budget.
    Select(SelectArgs),
    /// Coverage, violation and monotonicity tables on evaluation data.
    Report(ReportArgs),
    /// Train the toy model.
    Train(TrainArgs),
    /// Re-verify a manifest and scan the lattice for monotonicity.
    Audit(AuditArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Conservative,
    Poweriter,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum KindArg {
    Svd,
    Cp,
    Tucker2,
}

#[derive(Debug, Clone, Args)]
pub struct BudgetFlags {
    /// Latency targets in ms (comma-separated where several are accepted).
    #[arg(long = "latency-ms", value_delimiter = ',')]
    pub latency_ms: Vec<f64>,
    /// Weight-byte targets.
    #[arg(long, value_delimiter = ',')]
    pub bytes: Vec<u64>,
    /// Energy targets in mJ.
    #[arg(long = "energy-mj", value_delimiter = ',')]
    pub energy_mj: Vec<f64>,
    #[arg(long, default_value = "synthetic-cpu")]
    pub device: String,
}

impl BudgetFlags {
    pub fn tokens(&self) -> Result<Vec<BudgetToken>> {
        let n = self.latency_ms.len().max(self.bytes.len()).max(self.energy_mj.len());
        if n == 0 {
            return Err(Error::invalid("give at least one of --latency-ms, --bytes, --energy-mj"));
        }
        if [self.latency_ms.len(), self.bytes.len(), self.energy_mj.len()].iter().any(|&l| l != 0 && l != n) {
            return Err(Error::invalid("budget target lists must have equal lengths"));
        }
        (0..n)
            .map(|i| BudgetToken::new(self.latency_ms.get(i).copied(), self.bytes.get(i).copied(), self.energy_mj.get(i).copied(), &self.device))
            .collect()
    }

    fn single(&self) -> Result<BudgetToken> {
        let mut t = self.tokens()?;
        if t.len() != 1 {
            return Err(Error::invalid("select takes a single budget"));
        }
        Ok(t.remove(0))
    }
}

#[derive(Debug, Args)]
pub struct DecomposeArgs {
    /// Manifest with raw weights.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// Largest elastic rank; defaults to the stored rank of each layer.
    #[arg(long)]
    pub k_max: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pub k_min: usize,
    /// Factorization per layer; one value applies to all layers. Defaults to
    /// svd for dense and tucker2 for conv layers.
    #[arg(long, value_delimiter = ',')]
    pub kinds: Vec<KindArg>,
    /// CP rank for `cp` layers.
    #[arg(long)]
    pub cp_rank: Option<usize>,
    #[arg(long, default_value_t = 50)]
    pub sweeps: usize,
}

#[derive(Debug, Args)]
pub struct CertifyArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Calibration inputs (`x0,…` CSV).
    #[arg(long)]
    pub calibration: PathBuf,
    #[arg(long, value_enum, default_value_t = ModeArg::Conservative)]
    pub mode: ModeArg,
    /// Profile ids or lattice names; defaults to the full profile and the
    /// lattice.
    #[arg(long, value_delimiter = ',')]
    pub profiles: Vec<String>,
    #[arg(long, default_value_t = TRAINING_POWER_STEPS)]
    pub power_steps: usize,
    /// Defaults to updating the manifest in place.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PlanArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Measured device table; a synthetic device is used when absent.
    #[arg(long)]
    pub device_table: Option<PathBuf>,
    #[command(flatten)]
    pub budget: BudgetFlags,
    #[arg(long, default_value_t = 5)]
    pub menu_size: usize,
    /// Drift tolerance recorded with the lattice for `select`.
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Seed of the synthetic device.
    #[arg(long, default_value_t = 3407)]
    pub seed: u64,
    #[arg(long, default_value_t = 64)]
    pub device_profiles: usize,
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SelectArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[command(flatten)]
    pub budget: BudgetFlags,
    /// Defaults to the planned tolerance, else the smallest lattice `Δ̂`.
    #[arg(long)]
    pub epsilon: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Evaluation inputs, optionally labelled.
    #[arg(long)]
    pub eval: PathBuf,
    /// Defaults to the planned tolerance, else the largest lattice `Δ̂`.
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML config; defaults apply to missing keys.
    #[arg(long, conflicts_with = "resume")]
    pub config: Option<PathBuf>,
    #[arg(long, conflicts_with = "resume")]
    pub seed: Option<u64>,
    #[arg(long, conflicts_with = "resume")]
    pub steps: Option<u64>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Stop (and checkpoint) at this step.
    #[arg(long)]
    pub until: Option<u64>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct AuditArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Number of adjacent budget pairs in the rebuild scan (0 skips it).
    #[arg(long, default_value_t = 2000)]
    pub scan: usize,
    /// Labelled evaluation data for the accuracy column.
    #[arg(long)]
    pub eval: Option<PathBuf>,
    #[arg(long, default_value_t = 1e-10)]
    pub tol: f64,
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = if usage { write!(err, "{}", e.render()) } else { write!(out, "{}", e.render()) };
            return if usage { exit::USAGE } else { exit::OK };
        }
    };
    match dispatch(&cli.command, out) {
        Ok(code) => code,
        Err(e) => {
            let code = error_code(&e);
            let _ = writeln!(out, "{SENTINEL} error code={code} message={:?}", e.to_string());
            let _ = writeln!(err, "error: {e}");
            code
        }
    }
}

pub fn error_code(e: &Error) -> i32 {
    match e {
        Error::Stale(_) => exit::STALE,
        Error::Diverged { .. } => exit::DIVERGED,
        Error::Infeasible(_) => exit::INFEASIBLE,
        _ => exit::ERROR,
    }
}

fn dispatch(cmd: &Command, out: &mut dyn Write) -> Result<i32> {
    match cmd {
        Command::Decompose(a) => cmd_decompose(a, out),
        Command::Certify(a) => cmd_certify(a, out),
        Command::Plan(a) => cmd_plan(a, out),
        Command::Select(a) => cmd_select(a, out),
        Command::Report(a) => cmd_report(a, out),
        Command::Train(a) => cmd_train(a, out),
        Command::Audit(a) => cmd_audit(a, out),
    }
}

fn read_samples_file(path: &Path) -> Result<(Samples, String)> {
    let bytes = std::fs::read(path)?;
    Ok((read_samples(bytes.as_slice())?, sha256_hex(&bytes)))
}

fn check_inputs(net: &Network, s: &Samples) -> Result<()> {
    if s.x.iter().any(|x| x.len() != net.in_dim()) {
        return Err(Error::dims(format!("samples must have {} features", net.in_dim())));
    }
    Ok(())
}

fn rel_error(reference: &EffectiveWeight, approx: &EffectiveWeight) -> f64 {
    let (a, b) = (reference.values(), approx.values());
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    let den: f64 = a.iter().map(|x| x * x).sum();
    if den == 0.0 {
        num.sqrt()
    } else {
        (num / den).sqrt()
    }
}

pub fn cmd_decompose(a: &DecomposeArgs, out: &mut dyn Write) -> Result<i32> {
    let input = Manifest::read(&a.input)?;
    let raw = input.raw.as_ref().filter(|r| !r.is_empty()).ok_or_else(|| Error::Format("input manifest has no raw layers".into()))?;
    if a.kinds.len() > 1 && a.kinds.len() != raw.len() {
        return Err(Error::invalid(format!("{} kinds for {} layers", a.kinds.len(), raw.len())));
    }
    let mut blocks = Vec::with_capacity(raw.len());
    let mut errors = Vec::with_capacity(raw.len());
    for (l, r) in raw.iter().enumerate() {
        let kind = a.kinds.get(if a.kinds.len() == 1 { 0 } else { l }).copied();
        let (layer, reference) = match (&r.weights, kind) {
            (RawWeights::Dense { w }, None | Some(KindArg::Svd)) => {
                let stored = w.rows().min(w.cols());
                let k_max = a.k_max.unwrap_or(stored).min(stored);
                (ElasticLayer::dense_svd(w, a.k_min.min(k_max), k_max)?, EffectiveWeight::Dense(w.clone()))
            }
            (RawWeights::Dense { w }, Some(KindArg::Cp)) => {
                let rank = a.cp_rank.unwrap_or(w.rows().min(w.cols()));
                let k_max = a.k_max.unwrap_or(rank).min(rank);
                (ElasticLayer::dense_cp(w, rank, a.k_min.min(k_max), k_max, a.sweeps)?, EffectiveWeight::Dense(w.clone()))
            }
            (RawWeights::Conv { w, geometry }, None | Some(KindArg::Tucker2)) => {
                let (r_o, r_i) = tucker2_max_ranks(w);
                let stored = r_o.max(r_i);
                let k_max = a.k_max.unwrap_or(stored).min(stored);
                let layer = ElasticLayer::conv_tucker2(w, *geometry, a.k_min.min(k_max), k_max, a.sweeps)?;
                (layer, EffectiveWeight::Conv { kernel: w.clone(), geometry: *geometry })
            }
            (RawWeights::Dense { .. }, Some(KindArg::Tucker2)) => {
                return Err(Error::Unsupported(format!("layer {l}: tucker2 needs a conv layer")));
            }
            (RawWeights::Conv { .. }, Some(k)) => {
                return Err(Error::Unsupported(format!("layer {l}: {k:?} factorization of a conv layer")));
            }
        };
        let layer = match &r.bias {
            Some(b) => layer.with_bias(b.clone())?,
            None => layer,
        };
        let stored = ElasticLayer::from_factors(layer.factors.clone(), 1, layer.stored_rank())?;
        let err = rel_error(&reference, &full_weight(&stored));
        errors.push((layer.kind_name(), layer.k_max, err));
        blocks.push(Block::new(layer, r.activation));
    }
    let net = Network::new(blocks)?;
    let mut m = Manifest::from_network(net);
    m.provenance = input.provenance.clone();
    m.provenance.history.push("decompose".into());
    let bytes = m.to_bytes()?;
    atomic_write(&a.output, &bytes)?;
    for (l, (kind, k_max, err)) in errors.iter().enumerate() {
        writeln!(out, "{SENTINEL} decompose layer={l} kind={kind} k_max={k_max} rel_error={err}")?;
    }
    writeln!(out, "{SENTINEL} decompose layers={} fingerprint={} sha256={}", errors.len(), m.fingerprint.as_deref().unwrap_or(""), sha256_hex(&bytes))?;
    Ok(exit::OK)
}

fn resolve_profiles(m: &Manifest, net: &Network, names: &[String]) -> Result<Vec<Profile>> {
    let lattice = m.lattice.as_ref().map(LatticeDoc::lattice);
    if names.is_empty() {
        let mut v = vec![net.full_profile()];
        if let Some(l) = lattice {
            v.extend(l.entries.into_iter().map(|e| e.profile));
        }
        return Ok(v);
    }
    names
        .iter()
        .map(|n| {
            if let Some(e) = lattice.as_ref().and_then(|l| l.entries.iter().find(|e| &e.name == n)) {
                return Ok(e.profile.clone());
            }
            let p = Profile::new(Profile::parse_id(n)?);
            net.check_profile(&p)?;
            Ok(p)
        })
        .collect()
}

pub fn cmd_certify(a: &CertifyArgs, out: &mut dyn Write) -> Result<i32> {
    let mut m = Manifest::read(&a.manifest)?;
    let net = m.network()?.clone();
    let (samples, sha) = read_samples_file(&a.calibration)?;
    check_inputs(&net, &samples)?;
    let stats = calibrate(&net, &samples.x)?;
    let mode = match a.mode {
        ModeArg::Conservative => ProxyMode::Conservative,
        ModeArg::Poweriter => ProxyMode::PowerIter { steps: a.power_steps, ema_decay: DEFAULT_EMA_DECAY },
    };
    let cert = Certifier::new(&net, &stats, mode, &samples.x)?;
    let profiles = resolve_profiles(&m, &net, &a.profiles)?;
    m.certificate = Some(CertificateDoc::new(mode, &stats, sha, cert.estimates()));
    m.ledgers.clear();
    for p in &profiles {
        let ledger = cert.ledger_with_quantiles(p, &samples.x)?;
        writeln!(
            out,
            "{SENTINEL} certify profile={} delta_hat={} mode={} certified={}",
            p.id,
            ledger.delta_hat,
            mode.name(),
            ledger.certified
        )?;
        m.upsert_ledger(&ledger);
    }
    if let Some(lat) = m.lattice.as_mut() {
        for e in &mut lat.entries {
            let p = Profile::named(e.profile_id.clone(), e.layers.clone());
            e.delta_hat = Dec(cert.expected_bound(&p)?);
        }
    }
    m.provenance.history.push("certify".into());
    m.write(a.output.as_deref().unwrap_or(&a.manifest))?;
    Ok(exit::OK)
}

fn menus_of(net: &Network, menu_size: usize) -> Vec<Menu> {
    net.blocks.iter().map(|b| chain_menu(&b.layer, &net.bitmap, menu_size)).collect()
}

pub fn cmd_plan(a: &PlanArgs, out: &mut dyn Write) -> Result<i32> {
    let mut m = Manifest::read(&a.manifest)?;
    let net = m.network()?.clone();
    let stats = m.calibration_stats()?;
    let cert = m.certifier(&net, &stats)?;
    let menus = menus_of(&net, a.menu_size);
    let device = a.budget.device.clone();
    let (table, synthetic, table_sha) = match &a.device_table {
        Some(p) => {
            let bytes = std::fs::read(p)?;
            (DeviceTable::read_csv(&device, bytes.as_slice())?, None, sha256_hex(&bytes))
        }
        None => {
            let spec = SynthSpec { seed: a.seed, ..SynthSpec::default() };
            let t = synthetic_device_table(&net, &menus, &device, a.device_profiles, &spec)?;
            let mut buf = Vec::new();
            t.write_csv(&mut buf)?;
            (t, Some(spec), sha256_hex(&buf))
        }
    };
    let latency = fit_cost_model(&net, &table, Metric::LatencyMs)?;
    let energy = if table.rows.iter().all(|r| r.energy_mj.is_some()) {
        Some(fit_cost_model(&net, &table, Metric::EnergyMj)?)
    } else {
        None
    };
    writeln!(out, "{SENTINEL} plan cost_fit device={device} rows={} r2={} mape_pct={}", table.rows.len(), latency.r2, latency.mape)?;
    let models = CostModels { latency, energy };
    let budgets = a.budget.tokens()?;
    let terms = menu_terms(&cert, &net.full_profile(), &menus)?;
    let built = build_lattice(&cert, &menus, &budgets, &models, &terms)?;
    let audit = audit_monotone(&lattice_audit_points(&built.lattice, &built.assignment, None));
    m.payloads = built.lattice.entries.iter().map(|e| build_payload(&net, &e.profile)).collect::<Result<Vec<_>>>()?;
    for e in &built.lattice.entries {
        m.upsert_ledger(&cert.ledger(&e.profile)?);
    }
    m.cost = Some(CostDoc::new(&models, synthetic.as_ref(), table_sha));
    m.lattice = Some(LatticeDoc {
        device,
        menu_size: a.menu_size,
        epsilon: a.epsilon.map(Dec),
        budgets: budgets.iter().map(Into::into).collect(),
        assignment: built.assignment.clone(),
        infeasible: built.infeasible.clone(),
        pruned: built.repair.pruned.clone(),
        entries: LatticeDoc::entry_docs(&built.lattice),
        audit: (&audit).into(),
    });
    m.provenance.history.push("plan".into());
    m.write(a.output.as_deref().unwrap_or(&a.manifest))?;
    for e in &built.lattice.entries {
        writeln!(
            out,
            "{SENTINEL} plan profile={} id={} latency_ms={} bytes={} delta_hat={}",
            e.name, e.profile.id, e.predicted_latency_ms, e.bytes, e.delta_hat
        )?;
    }
    for i in &built.infeasible {
        writeln!(out, "{SENTINEL} plan infeasible budget={i}")?;
    }
    write_audit(out, "plan", &audit)?;
    Ok(if built.infeasible.is_empty() { exit::OK } else { exit::INFEASIBLE })
}

fn write_audit(out: &mut dyn Write, cmd: &str, a: &AuditReport) -> Result<()> {
    writeln!(
        out,
        "{SENTINEL} {cmd} audit pairs={} accuracy_events={} latency_events={} delta_events={} violation_pct={}",
        a.pairs, a.accuracy_events, a.latency_events, a.delta_events, a.violation_pct
    )?;
    Ok(())
}

pub fn cmd_select(a: &SelectArgs, out: &mut dyn Write) -> Result<i32> {
    let m = Manifest::read(&a.manifest)?;
    let doc = m.lattice_doc()?;
    let lat = doc.lattice();
    let budget = a.budget.single()?;
    let eps = a
        .epsilon
        .or(doc.epsilon.map(|d| d.0))
        .unwrap_or_else(|| lat.entries.iter().map(|e| e.delta_hat).fold(f64::INFINITY, f64::min));
    let sel = select_runtime(&lat, &budget, eps)?;
    let e = &lat.entries[sel.index];
    let (status, code) = match sel.status {
        SelectStatus::Ok => ("ok", exit::OK),
        SelectStatus::CertWarning => ("cert_warning", exit::CERT_WARNING),
        SelectStatus::Infeasible => ("infeasible", exit::INFEASIBLE),
    };
    writeln!(
        out,
        "{SENTINEL} select profile={} id={} latency_ms={} bytes={} delta_hat={} epsilon={eps} status={status}",
        e.name, e.profile.id, e.predicted_latency_ms, e.bytes, e.delta_hat
    )?;
    Ok(code)
}

pub fn cmd_report(a: &ReportArgs, out: &mut dyn Write) -> Result<i32> {
    let m = Manifest::read(&a.manifest)?;
    let doc = m.lattice_doc()?;
    let (eval, _) = read_samples_file(&a.eval)?;
    check_inputs(m.network()?, &eval)?;
    let eps = a
        .epsilon
        .or(doc.epsilon.map(|d| d.0))
        .unwrap_or_else(|| doc.entries.iter().map(|e| e.delta_hat.0).fold(0.0, f64::max));
    let r = build_report(&m, &eval, eps)?;
    std::fs::create_dir_all(&a.out_dir)?;
    let mut csv = Vec::new();
    write_report_csv(&mut csv, &r.rows)?;
    atomic_write(&a.out_dir.join("report.csv"), &csv)?;
    atomic_write(&a.out_dir.join("report.txt"), render_text(&r).as_bytes())?;
    for row in &r.rows {
        writeln!(
            out,
            "{SENTINEL} report profile={} accuracy={} delta_hat={} coverage_pct={} violation_pct={}",
            row.profile,
            row.accuracy.map_or("na".into(), |v| v.to_string()),
            row.delta_hat,
            row.coverage_pct,
            row.violation_pct
        )?;
    }
    writeln!(
        out,
        "{SENTINEL} report epsilon={eps} coverage_pct={} correlation={}",
        r.coverage_pct,
        r.correlation.map_or("na".into(), |c| c.to_string())
    )?;
    write_audit(out, "report", &r.audit)?;
    Ok(exit::OK)
}

pub fn cmd_train(a: &TrainArgs, out: &mut dyn Write) -> Result<i32> {
    let mut st = match &a.resume {
        Some(p) => TrainState::load(p)?,
        None => {
            let mut cfg = match &a.config {
                Some(p) => TrainConfig::from_toml(&std::fs::read_to_string(p)?)?,
                None => TrainConfig::default(),
            };
            if let Some(s) = a.seed {
                cfg.seed = s;
            }
            if let Some(n) = a.steps {
                cfg.steps = n;
            }
            TrainState::init(cfg)?
        }
    };
    let (train, eval) = st.datasets();
    st.run_until(&train, a.until.unwrap_or(st.config.steps))?;
    std::fs::create_dir_all(&a.out_dir)?;
    st.save(&a.out_dir.join("checkpoint.json"))?;
    let mut metrics = Vec::new();
    st.write_metrics_csv(&mut metrics)?;
    atomic_write(&a.out_dir.join("metrics.csv"), &metrics)?;
    let last = st.metrics.last().map_or(f64::NAN, |r| r.terms.total);
    writeln!(out, "{SENTINEL} train step={} of={} loss={last}", st.step, st.config.steps)?;
    if st.step < st.config.steps {
        return Ok(exit::OK);
    }

    let report = st.report(&train, &eval)?;
    let mut json = serde_json::to_vec_pretty(&report)?;
    json.push(b'\n');
    atomic_write(&a.out_dir.join("train_report.json"), &json)?;
    let mut m = Manifest::from_network(st.params.net.clone());
    m.provenance.seed = Some(st.config.seed);
    m.provenance.config_sha256 = Some(sha256_hex(st.config.to_toml().as_bytes()));
    m.provenance.history.push("train".into());
    m.write(&a.out_dir.join("model.json"))?;
    let calib = Samples { x: train.x[..st.config.calibration_samples.min(train.len())].to_vec(), labels: None };
    let evals = Samples { x: eval.x.clone(), labels: Some(eval.y.clone()) };
    for (name, s) in [("calibration.csv", &calib), ("eval.csv", &evals)] {
        let mut buf = Vec::new();
        write_samples(&mut buf, s)?;
        atomic_write(&a.out_dir.join(name), &buf)?;
    }
    writeln!(out, "{SENTINEL} train seed={} full_accuracy={} tiny_violation_rate={}", report.seed, report.full_accuracy, report.tiny_violation_rate)?;
    for p in &report.lattice {
        writeln!(
            out,
            "{SENTINEL} train profile={} id={} accuracy={} delta_hat={} violation_rate={}",
            p.name, p.profile_id, p.accuracy, p.delta_hat, p.violation_rate
        )?;
    }
    write_audit(out, "train", &report.audit)?;
    Ok(exit::OK)
}

/// Latency budgets spanning the lattice range, for the monotonicity scan.
fn scan_budgets(m: &Manifest, net: &Network, models: &CostModels, menus: &[Menu], pairs: usize) -> Result<Vec<BudgetToken>> {
    let lo = Profile::new(menus.iter().map(|mu| mu[0]).collect());
    let hi = Profile::new(menus.iter().map(|mu| mu[mu.len() - 1]).collect());
    let lo = crate::controller::profile_metrics(net, models, &lo)?.latency_ms;
    let hi = crate::controller::profile_metrics(net, models, &hi)?.latency_ms;
    let (a, b) = (0.9 * lo, 1.1 * hi);
    let device = &m.lattice_doc()?.device;
    (0..=pairs).map(|i| BudgetToken::latency(a + (b - a) * i as f64 / pairs as f64, device)).collect()
}

pub fn cmd_audit(a: &AuditArgs, out: &mut dyn Write) -> Result<i32> {
    let m = Manifest::read(&a.manifest)?;
    let summary = match m.verify(a.tol) {
        Ok(s) => s,
        Err(e) => {
            writeln!(out, "{SENTINEL} audit verify=fail message={:?}", e.to_string())?;
            return Ok(exit::AUDIT_FAILED);
        }
    };
    writeln!(
        out,
        "{SENTINEL} audit verify=ok ledgers={} payloads={} lattice_entries={}",
        summary.ledgers, summary.payloads, summary.lattice_entries
    )?;
    let Some(doc) = &m.lattice else {
        return Ok(exit::OK);
    };
    let net = m.network()?;
    let lat = doc.lattice();
    let accuracy = match &a.eval {
        Some(p) => {
            let (s, _) = read_samples_file(p)?;
            check_inputs(net, &s)?;
            let y = s.labels.as_ref().ok_or_else(|| Error::Format("audit --eval needs a label column".into()))?;
            Some(lat.entries.iter().map(|e| evaluate_accuracy_on(net, Some(&e.profile), &s.x, y)).collect::<Result<Vec<_>>>()?)
        }
        None => None,
    };
    let stored = audit_monotone(&lattice_audit_points(&lat, &doc.assignment, accuracy.as_deref()));
    write_audit(out, "audit stored", &stored)?;
    let mut failed = stored.latency_events > 0 || stored.delta_events > 0;
    if a.scan > 0 {
        let stats = m.calibration_stats()?;
        let cert = m.certifier(net, &stats)?;
        let models = m.cost.as_ref().ok_or_else(|| Error::Format("manifest has no cost model".into()))?.models();
        let menus = menus_of(net, doc.menu_size);
        let budgets = scan_budgets(&m, net, &models, &menus, a.scan)?;
        let terms = menu_terms(&cert, &net.full_profile(), &menus)?;
        let built = build_lattice(&cert, &menus, &budgets, &models, &terms)?;
        let scan = audit_monotone(&lattice_audit_points(&built.lattice, &built.assignment, None));
        write_audit(out, "audit scan", &scan)?;
        failed |= scan.latency_events > 0 || scan.delta_events > 0;
    }
    Ok(if failed { exit::AUDIT_FAILED } else { exit::OK })
}
