//! The manifest document: topology and parameters, calibration summary,
//! certificate ledgers, cost models, the profile lattice and per-profile
//! packed payloads.

use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{de::Error as _, Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use super::atomic_write;
use crate::certificate::{CalibrationStats, CertificateLedger, Certifier, LedgerEntry, ProxyMode, QuantileSummary};
use crate::controller::{AuditReport, BudgetToken, CostModels, LatticeEntry, ProfileLattice};
use crate::cost::{bytes_of, CostModel, Metric, SynthSpec};
use crate::elastic::{compress, CompressedForm};
use crate::error::{Error, Result};
use crate::linalg::{blob, ConvGeometry, Matrix, Tensor4};
use crate::network::{Activation, Network};
use crate::profile::{LayerSetting, Profile};
use crate::quant::grid_max;

pub const FORMAT_VERSION: u32 = 1;

/// An `f64` written as a decimal string with 17 significant digits.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dec(pub f64);

impl Serialize for Dec {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&format!("{:.16e}", self.0))
    }
}

impl<'de> Deserialize<'de> for Dec {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse::<f64>().map(Dec).map_err(|_| D::Error::custom(format!("bad decimal {s:?}")))
    }
}

fn decs(v: &[f64]) -> Vec<Dec> {
    v.iter().copied().map(Dec).collect()
}

fn floats(v: &[Dec]) -> Vec<f64> {
    v.iter().map(|d| d.0).collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RawWeights {
    Dense { w: Matrix },
    Conv { w: Tensor4, geometry: ConvGeometry },
}

/// One unfactorized layer, the input of `decompose`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawLayer {
    pub weights: RawWeights,
    #[serde(with = "crate::linalg::blob::opt")]
    pub bias: Option<Vec<f64>>,
    pub activation: Activation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "lowercase")]
pub enum ModeDoc {
    Conservative,
    Poweriter { steps: usize, ema_decay: Dec },
}

impl From<ProxyMode> for ModeDoc {
    fn from(m: ProxyMode) -> Self {
        match m {
            ProxyMode::Conservative => ModeDoc::Conservative,
            ProxyMode::PowerIter { steps, ema_decay } => ModeDoc::Poweriter { steps, ema_decay: Dec(ema_decay) },
        }
    }
}

impl From<&ModeDoc> for ProxyMode {
    fn from(m: &ModeDoc) -> Self {
        match m {
            ModeDoc::Conservative => ProxyMode::Conservative,
            ModeDoc::Poweriter { steps, ema_decay } => ProxyMode::PowerIter { steps: *steps, ema_decay: ema_decay.0 },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationDoc {
    pub alpha: Vec<Dec>,
    pub running_max: Vec<Dec>,
    pub count: usize,
    pub fingerprint: String,
    /// Hash of the calibration file the statistics came from.
    pub source_sha256: String,
}

/// Calibration summary and spectral proxies shared by every ledger.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CertificateDoc {
    pub mode: ModeDoc,
    pub calibration: CalibrationDoc,
    /// Power-iteration `L̂_ℓ`; absent in conservative mode, where they are
    /// recomputed per profile.
    pub lipschitz: Option<Vec<Dec>>,
}

impl CertificateDoc {
    pub fn new(mode: ProxyMode, stats: &CalibrationStats, source_sha256: String, lipschitz: Option<&[f64]>) -> Self {
        CertificateDoc {
            mode: mode.into(),
            calibration: CalibrationDoc {
                alpha: decs(&stats.alpha),
                running_max: decs(&stats.running_max),
                count: stats.count,
                fingerprint: stats.fingerprint.clone(),
                source_sha256,
            },
            lipschitz: lipschitz.map(decs),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntryDoc {
    pub layer: usize,
    pub lipschitz: Dec,
    pub residual_norm: Dec,
    pub alpha: Dec,
    pub term: Dec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantilesDoc {
    pub samples: usize,
    pub pointwise_bound_p95: Dec,
    pub observed_drift_p95: Dec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LedgerDoc {
    pub profile_id: String,
    pub mode: ModeDoc,
    pub certified: bool,
    pub entries: Vec<LedgerEntryDoc>,
    pub delta_hat: Dec,
    pub quantiles: Option<QuantilesDoc>,
}

impl From<&CertificateLedger> for LedgerDoc {
    fn from(l: &CertificateLedger) -> Self {
        LedgerDoc {
            profile_id: l.profile_id.clone(),
            mode: l.mode.into(),
            certified: l.certified,
            entries: l
                .entries
                .iter()
                .map(|e| LedgerEntryDoc {
                    layer: e.layer,
                    lipschitz: Dec(e.lipschitz),
                    residual_norm: Dec(e.residual_norm),
                    alpha: Dec(e.alpha),
                    term: Dec(e.term),
                })
                .collect(),
            delta_hat: Dec(l.delta_hat),
            quantiles: l.quantiles.as_ref().map(|q| QuantilesDoc {
                samples: q.samples,
                pointwise_bound_p95: Dec(q.pointwise_bound_p95),
                observed_drift_p95: Dec(q.observed_drift_p95),
            }),
        }
    }
}

impl From<&LedgerDoc> for CertificateLedger {
    fn from(l: &LedgerDoc) -> Self {
        CertificateLedger {
            profile_id: l.profile_id.clone(),
            mode: (&l.mode).into(),
            certified: l.certified,
            entries: l
                .entries
                .iter()
                .map(|e| LedgerEntry {
                    layer: e.layer,
                    lipschitz: e.lipschitz.0,
                    residual_norm: e.residual_norm.0,
                    alpha: e.alpha.0,
                    term: e.term.0,
                })
                .collect(),
            delta_hat: l.delta_hat.0,
            quantiles: l.quantiles.as_ref().map(|q| QuantileSummary {
                samples: q.samples,
                pointwise_bound_p95: q.pointwise_bound_p95.0,
                observed_drift_p95: q.observed_drift_p95.0,
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostModelDoc {
    pub metric: Metric,
    pub intercept: Dec,
    pub comp: Vec<Dec>,
    pub mem: Vec<Dec>,
    pub r2: Dec,
    pub mape: Dec,
}

impl From<&CostModel> for CostModelDoc {
    fn from(m: &CostModel) -> Self {
        CostModelDoc {
            metric: m.metric,
            intercept: Dec(m.intercept),
            comp: decs(&m.comp),
            mem: decs(&m.mem),
            r2: Dec(m.r2),
            mape: Dec(m.mape),
        }
    }
}

impl CostModelDoc {
    fn model(&self, device: &str) -> CostModel {
        CostModel {
            device: device.to_string(),
            metric: self.metric,
            intercept: self.intercept.0,
            comp: floats(&self.comp),
            mem: floats(&self.mem),
            r2: self.r2.0,
            mape: self.mape.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthDoc {
    pub seed: u64,
    pub noise_sigma: Dec,
    pub launch_ms: Dec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostDoc {
    pub device: String,
    /// Set when the device table was synthesized rather than measured.
    pub synthetic: Option<SynthDoc>,
    pub table_sha256: String,
    pub latency: CostModelDoc,
    pub energy: Option<CostModelDoc>,
}

impl CostDoc {
    pub fn new(models: &CostModels, synthetic: Option<&SynthSpec>, table_sha256: String) -> Self {
        CostDoc {
            device: models.latency.device.clone(),
            synthetic: synthetic.map(|s| SynthDoc { seed: s.seed, noise_sigma: Dec(s.noise_sigma), launch_ms: Dec(s.launch_ms) }),
            table_sha256,
            latency: (&models.latency).into(),
            energy: models.energy.as_ref().map(Into::into),
        }
    }

    pub fn models(&self) -> CostModels {
        CostModels { latency: self.latency.model(&self.device), energy: self.energy.as_ref().map(|e| e.model(&self.device)) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetDoc {
    pub latency_ms: Option<Dec>,
    pub bytes: Option<u64>,
    pub energy_mj: Option<Dec>,
}

impl From<&BudgetToken> for BudgetDoc {
    fn from(b: &BudgetToken) -> Self {
        BudgetDoc { latency_ms: b.latency_ms.map(Dec), bytes: b.bytes, energy_mj: b.energy_mj.map(Dec) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatticeEntryDoc {
    pub name: String,
    pub profile_id: String,
    pub layers: Vec<LayerSetting>,
    pub predicted_latency_ms: Dec,
    pub predicted_energy_mj: Option<Dec>,
    pub bytes: u64,
    pub delta_hat: Dec,
    pub measured_latency_ms: Option<Dec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditDoc {
    pub pairs: usize,
    pub accuracy_events: usize,
    pub latency_events: usize,
    pub delta_events: usize,
    pub violation_pct: Dec,
}

impl From<&AuditReport> for AuditDoc {
    fn from(a: &AuditReport) -> Self {
        AuditDoc {
            pairs: a.pairs,
            accuracy_events: a.accuracy_events,
            latency_events: a.latency_events,
            delta_events: a.delta_events,
            violation_pct: Dec(a.violation_pct),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatticeDoc {
    pub device: String,
    pub menu_size: usize,
    /// Drift tolerance the lattice was planned for, if one was given.
    pub epsilon: Option<Dec>,
    pub budgets: Vec<BudgetDoc>,
    pub assignment: Vec<usize>,
    pub infeasible: Vec<usize>,
    pub pruned: Vec<usize>,
    pub entries: Vec<LatticeEntryDoc>,
    pub audit: AuditDoc,
}

impl LatticeDoc {
    pub fn lattice(&self) -> ProfileLattice {
        ProfileLattice {
            device: self.device.clone(),
            entries: self
                .entries
                .iter()
                .map(|e| LatticeEntry {
                    name: e.name.clone(),
                    profile: Profile::named(e.profile_id.clone(), e.layers.clone()),
                    predicted_latency_ms: e.predicted_latency_ms.0,
                    predicted_energy_mj: e.predicted_energy_mj.map(|d| d.0),
                    bytes: e.bytes,
                    delta_hat: e.delta_hat.0,
                    measured_latency_ms: e.measured_latency_ms.map(|d| d.0),
                })
                .collect(),
        }
    }

    pub fn entry_docs(lattice: &ProfileLattice) -> Vec<LatticeEntryDoc> {
        lattice
            .entries
            .iter()
            .map(|e| LatticeEntryDoc {
                name: e.name.clone(),
                profile_id: e.profile.id.clone(),
                layers: e.profile.layers.clone(),
                predicted_latency_ms: Dec(e.predicted_latency_ms),
                predicted_energy_mj: e.predicted_energy_mj.map(Dec),
                bytes: e.bytes,
                delta_hat: Dec(e.delta_hat),
                measured_latency_ms: e.measured_latency_ms.map(Dec),
            })
            .collect()
    }
}

/// One retained factor: packed codes and scales, or raw little-endian `f64`
/// values when the layer runs unquantized.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorPayload {
    pub name: String,
    pub shape: Vec<usize>,
    pub bits: u8,
    pub scales: Vec<Dec>,
    pub data: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerPayload {
    pub layer: usize,
    pub k: usize,
    pub q: Option<u8>,
    pub bytes: u64,
    pub factors: Vec<FactorPayload>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PayloadDoc {
    pub profile_id: String,
    pub layers: Vec<LayerPayload>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub seed: Option<u64>,
    pub config_sha256: Option<String>,
    /// Commands applied to this manifest, oldest first.
    pub history: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    /// Unfactorized layers, present only before `decompose`.
    pub raw: Option<Vec<RawLayer>>,
    pub network: Option<Network>,
    /// SHA-256 of the serialized network.
    pub fingerprint: Option<String>,
    pub certificate: Option<CertificateDoc>,
    pub ledgers: Vec<LedgerDoc>,
    pub cost: Option<CostDoc>,
    pub lattice: Option<LatticeDoc>,
    pub payloads: Vec<PayloadDoc>,
    pub provenance: Provenance,
}

fn tool() -> String {
    format!("{} {}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION"))
}

/// LSB-first packing of offset-binary codes in `bits` bits each.
pub fn pack_codes(codes: &[i32], bits: u8) -> Result<Vec<u8>> {
    let g = grid_max(bits);
    let mut out = vec![0u8; (codes.len() * bits as usize).div_ceil(8)];
    for (i, &c) in codes.iter().enumerate() {
        if (c as i64).abs() > g {
            return Err(Error::invalid(format!("code {c} outside the {bits}-bit grid")));
        }
        let u = (c as i64 + g) as u64;
        let start = i * bits as usize;
        for b in 0..bits as usize {
            if u >> b & 1 == 1 {
                out[(start + b) / 8] |= 1 << ((start + b) % 8);
            }
        }
    }
    Ok(out)
}

pub fn unpack_codes(bytes: &[u8], bits: u8, n: usize) -> Result<Vec<i32>> {
    if bytes.len() != (n * bits as usize).div_ceil(8) {
        return Err(Error::Format(format!("{} packed bytes for {n} codes of {bits} bits", bytes.len())));
    }
    let g = grid_max(bits);
    Ok((0..n)
        .map(|i| {
            let start = i * bits as usize;
            let u = (0..bits as usize).fold(0u64, |acc, b| acc | (((bytes[(start + b) / 8] >> ((start + b) % 8)) & 1) as u64) << b);
            (u as i64 - g) as i32
        })
        .collect())
}

fn raw_factor(name: &str, shape: Vec<usize>, values: &[f64]) -> FactorPayload {
    FactorPayload { name: name.into(), shape, bits: 64, scales: Vec::new(), data: blob::encode(values) }
}

/// Payload of every layer of `profile`.
pub fn build_payload(net: &Network, profile: &Profile) -> Result<PayloadDoc> {
    net.check_profile(profile)?;
    let mut layers = Vec::with_capacity(net.depth());
    for (l, &s) in profile.layers.iter().enumerate() {
        let layer = &net.blocks[l].layer;
        let bits = s.q.map(|q| net.bitmap.factor_bits(q));
        let c = compress(layer, s.k, bits, net.clip)?;
        let factors = match (&c.payload, &c.form) {
            (Some(qf), _) => qf
                .iter()
                .zip(["u", "core", "v"])
                .map(|(f, name)| {
                    Ok(FactorPayload {
                        name: name.into(),
                        shape: f.shape.clone(),
                        bits: f.spec.bits,
                        scales: decs(&f.spec.scales),
                        data: STANDARD.encode(pack_codes(&f.codes, f.spec.bits)?),
                    })
                })
                .collect::<Result<Vec<_>>>()?,
            (None, CompressedForm::LowRank { u, sigma, v }) => vec![
                raw_factor("u", vec![u.rows(), u.cols()], u.data()),
                raw_factor("core", vec![sigma.len()], sigma),
                raw_factor("v", vec![v.rows(), v.cols()], v.data()),
            ],
            (None, CompressedForm::Tucker2 { u_out, core, u_in, .. }) => {
                let (a, b, h, w) = core.dims();
                vec![
                    raw_factor("u", vec![u_out.rows(), u_out.cols()], u_out.data()),
                    raw_factor("core", vec![a, b, h, w], core.data()),
                    raw_factor("v", vec![u_in.rows(), u_in.cols()], u_in.data()),
                ]
            }
        };
        let bytes = factors.iter().map(|f| STANDARD.decode(&f.data).map(|d| d.len() as u64)).sum::<std::result::Result<u64, _>>()
            .map_err(|e| Error::Format(e.to_string()))?;
        layers.push(LayerPayload { layer: l, k: s.k, q: s.q, bytes, factors });
    }
    Ok(PayloadDoc { profile_id: profile.id.clone(), layers })
}

/// What [`Manifest::verify`] checked.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct VerifySummary {
    pub ledgers: usize,
    pub payloads: usize,
    pub lattice_entries: usize,
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

impl Manifest {
    pub fn from_raw(raw: Vec<RawLayer>) -> Self {
        Manifest {
            format_version: FORMAT_VERSION,
            raw: Some(raw),
            network: None,
            fingerprint: None,
            certificate: None,
            ledgers: Vec::new(),
            cost: None,
            lattice: None,
            payloads: Vec::new(),
            provenance: Provenance { tool: tool(), ..Provenance::default() },
        }
    }

    pub fn from_network(net: Network) -> Self {
        let mut m = Manifest::from_raw(Vec::new());
        m.raw = None;
        m.set_network(net);
        m
    }

    /// Replaces the parameters; everything derived from the old ones is
    /// dropped.
    pub fn set_network(&mut self, net: Network) {
        self.fingerprint = Some(net.fingerprint());
        self.network = Some(net);
        self.certificate = None;
        self.ledgers.clear();
        self.cost = None;
        self.lattice = None;
        self.payloads.clear();
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut v = serde_json::to_vec_pretty(self)?;
        v.push(b'\n');
        Ok(v)
    }

    /// Parses and checks the format version and the parameter fingerprint.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let m: Manifest = serde_json::from_slice(bytes)?;
        if m.format_version != FORMAT_VERSION {
            return Err(Error::Format(format!("manifest format {} (expected {FORMAT_VERSION})", m.format_version)));
        }
        if let Some(net) = &m.network {
            net.validate()?;
            if m.fingerprint.as_deref() != Some(net.fingerprint().as_str()) {
                return Err(Error::Stale("manifest fingerprint does not match its parameters".into()));
            }
        }
        Ok(m)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.to_bytes()?)
    }

    pub fn network(&self) -> Result<&Network> {
        self.network.as_ref().ok_or_else(|| Error::Format("manifest holds no elastic network; run decompose first".into()))
    }

    pub fn certificate(&self) -> Result<&CertificateDoc> {
        self.certificate.as_ref().ok_or_else(|| Error::Format("manifest has no calibration; run certify first".into()))
    }

    pub fn lattice_doc(&self) -> Result<&LatticeDoc> {
        self.lattice.as_ref().ok_or_else(|| Error::Format("manifest has no lattice; run plan first".into()))
    }

    pub fn calibration_stats(&self) -> Result<CalibrationStats> {
        let c = &self.certificate()?.calibration;
        Ok(CalibrationStats {
            alpha: floats(&c.alpha),
            running_max: floats(&c.running_max),
            count: c.count,
            fingerprint: c.fingerprint.clone(),
        })
    }

    /// Certifier rebuilt from the stored calibration and proxies.
    pub fn certifier<'a>(&self, net: &'a Network, stats: &'a CalibrationStats) -> Result<Certifier<'a>> {
        let doc = self.certificate()?;
        let mode = ProxyMode::from(&doc.mode);
        match (&doc.lipschitz, mode) {
            (None, ProxyMode::Conservative) => Certifier::conservative(net, stats),
            (Some(l), ProxyMode::PowerIter { .. }) => Certifier::with_estimates(net, stats, mode, floats(l)),
            _ => Err(Error::Format("certificate mode and stored proxies disagree".into())),
        }
    }

    pub fn upsert_ledger(&mut self, ledger: &CertificateLedger) {
        let doc = LedgerDoc::from(ledger);
        match self.ledgers.iter_mut().find(|l| l.profile_id == doc.profile_id) {
            Some(slot) => *slot = doc,
            None => self.ledgers.push(doc),
        }
    }

    pub fn payload(&self, profile_id: &str) -> Option<&PayloadDoc> {
        self.payloads.iter().find(|p| p.profile_id == profile_id)
    }

    /// Independent read-and-recompute pass over everything derived from the
    /// parameters: calibration fingerprint, ledger terms, payloads and the
    /// lattice's byte counts and `Δ̂`.
    pub fn verify(&self, tol: f64) -> Result<VerifySummary> {
        let mut summary = VerifySummary::default();
        let Some(net) = &self.network else {
            return Ok(summary);
        };
        if self.fingerprint.as_deref() != Some(net.fingerprint().as_str()) {
            return Err(Error::Stale("manifest fingerprint does not match its parameters".into()));
        }
        if let Some(cert_doc) = &self.certificate {
            if cert_doc.calibration.fingerprint != net.fingerprint() {
                return Err(Error::Stale("calibration summary belongs to different parameters".into()));
            }
            let stats = self.calibration_stats()?;
            let cert = self.certifier(net, &stats)?;
            for doc in &self.ledgers {
                let ledger = CertificateLedger::from(doc);
                ledger.verify(tol)?;
                if ledger.mode != cert.mode || ledger.certified != cert.mode.is_certified() {
                    return Err(Error::Format(format!("ledger {} mode differs from the certificate", doc.profile_id)));
                }
                let profile = Profile::named(doc.profile_id.clone(), Profile::parse_id(&doc.profile_id)?);
                let fresh = cert.ledger(&profile)?;
                for (a, b) in ledger.entries.iter().zip(&fresh.entries) {
                    if !(close(a.lipschitz, b.lipschitz, tol) && close(a.residual_norm, b.residual_norm, tol) && close(a.alpha, b.alpha, tol)) {
                        return Err(Error::Format(format!("ledger {} layer {} does not recompute", doc.profile_id, a.layer)));
                    }
                }
                if ledger.entries.len() != fresh.entries.len() || !close(ledger.delta_hat, fresh.delta_hat, tol) {
                    return Err(Error::Format(format!("ledger {} total does not recompute", doc.profile_id)));
                }
                summary.ledgers += 1;
            }
            if let Some(lat) = &self.lattice {
                for e in &lat.entries {
                    let p = Profile::named(e.profile_id.clone(), e.layers.clone());
                    if !close(e.delta_hat.0, cert.expected_bound(&p)?, tol) {
                        return Err(Error::Format(format!("lattice entry {} Δ̂ does not recompute", e.name)));
                    }
                }
            }
        }
        for p in &self.payloads {
            let profile = Profile::named(p.profile_id.clone(), Profile::parse_id(&p.profile_id)?);
            let fresh = build_payload(net, &profile)?;
            if fresh != *p {
                return Err(Error::Format(format!("payload {} does not match its parameters", p.profile_id)));
            }
            for lp in &p.layers {
                let layer = &net.blocks[lp.layer].layer;
                let want = bytes_of(layer, lp.k, lp.q.map(|q| net.bitmap.factor_bits(q)))?;
                let mut got = 0u64;
                for f in &lp.factors {
                    let raw = STANDARD.decode(&f.data).map_err(|e| Error::Format(e.to_string()))?;
                    let n: usize = f.shape.iter().product();
                    if f.bits == 64 {
                        if raw.len() != 8 * n {
                            return Err(Error::Format(format!("raw factor {} of {} has the wrong length", f.name, p.profile_id)));
                        }
                    } else {
                        unpack_codes(&raw, f.bits, n)?;
                    }
                    got += raw.len() as u64;
                }
                if got != want || lp.bytes != want {
                    return Err(Error::Format(format!("payload {} layer {}: {got} bytes, bytes_of gives {want}", p.profile_id, lp.layer)));
                }
            }
            summary.payloads += 1;
        }
        if let Some(lat) = &self.lattice {
            for e in &lat.entries {
                if self.payload(&e.profile_id).is_none() {
                    return Err(Error::Format(format!("lattice profile {} has no payload", e.name)));
                }
                let p = Profile::named(e.profile_id.clone(), e.layers.clone());
                if e.profile_id != Profile::canonical_id(&e.layers) {
                    return Err(Error::Format(format!("lattice entry {} id does not match its settings", e.name)));
                }
                if e.bytes != crate::cost::profile_bytes(net, &p)? {
                    return Err(Error::Format(format!("lattice entry {} bytes differ from bytes_of", e.name)));
                }
                summary.lattice_entries += 1;
            }
            lat.lattice().validate()?;
        }
        Ok(summary)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dec_round_trips_bits() {
        for v in [0.1, -0.0, 1.0 / 3.0, 6.02214076e23, f64::MIN_POSITIVE, 5e-324] {
            let s = serde_json::to_string(&Dec(v)).unwrap();
            let back: Dec = serde_json::from_str(&s).unwrap();
            assert_eq!(back.0.to_bits(), v.to_bits(), "{s}");
        }
    }

    #[test]
    fn pack_round_trip() {
        for bits in 2..=8u8 {
            let g = grid_max(bits) as i32;
            let codes: Vec<i32> = (0..37).map(|i| (i * 7 % (2 * g + 1)) - g).collect();
            let packed = pack_codes(&codes, bits).unwrap();
            assert_eq!(packed.len(), (37 * bits as usize).div_ceil(8));
            assert_eq!(unpack_codes(&packed, bits, 37).unwrap(), codes);
        }
        assert!(pack_codes(&[2], 2).is_err());
    }
}
