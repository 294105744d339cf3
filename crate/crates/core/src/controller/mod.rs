//! Budget tokens, profile menus and lattices, snapping, monotonicity repair,
//! the greedy knapsack baseline and runtime selection.

mod policy;

use std::cmp::Ordering;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub(crate) use policy::{argmax, gumbel_st, tape_isotonic_hinge};
pub use policy::{gumbel_softmax, isotonic_hinge, policy_forward, softmax, HeadGradient, IsoHinge, PolicyHead, PolicyMode, PolicyOutput, DEVICE_EMBED_DIM};

use crate::certificate::{CertificateLedger, Certifier};
use crate::cost::{predict, profile_costs, synth_device, CostModel, DeviceTable, SynthSpec, FLOAT_BITS};
use crate::elastic::{BitMap, ElasticLayer};
use crate::error::{Error, Result};
use crate::network::Network;
use crate::profile::{LayerSetting, Profile};

/// A deployment objective. Absent targets are unconstrained.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetToken {
    pub latency_ms: Option<f64>,
    pub bytes: Option<u64>,
    pub energy_mj: Option<f64>,
    pub device: String,
}

impl BudgetToken {
    pub fn new(latency_ms: Option<f64>, bytes: Option<u64>, energy_mj: Option<f64>, device: impl Into<String>) -> Result<Self> {
        let b = BudgetToken { latency_ms, bytes, energy_mj, device: device.into() };
        b.validate()?;
        Ok(b)
    }

    pub fn latency(ms: f64, device: impl Into<String>) -> Result<Self> {
        Self::new(Some(ms), None, None, device)
    }

    pub fn validate(&self) -> Result<()> {
        if self.latency_ms.is_none() && self.bytes.is_none() && self.energy_mj.is_none() {
            return Err(Error::invalid("budget token needs at least one target"));
        }
        for v in [self.latency_ms, self.energy_mj].into_iter().flatten() {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(format!("budget target {v} must be positive and finite")));
            }
        }
        Ok(())
    }

    fn targets(&self) -> [f64; 3] {
        [
            self.latency_ms.unwrap_or(f64::INFINITY),
            self.bytes.map_or(f64::INFINITY, |b| b as f64),
            self.energy_mj.unwrap_or(f64::INFINITY),
        ]
    }

    /// `self ≼ other`: same device and every target no looser.
    pub fn le(&self, other: &BudgetToken) -> bool {
        self.device == other.device && self.targets().iter().zip(other.targets()).all(|(a, b)| *a <= b)
    }

    pub fn partial_cmp_budget(&self, other: &BudgetToken) -> Option<Ordering> {
        match (self.le(other), other.le(self)) {
            (true, true) => Some(Ordering::Equal),
            (true, false) => Some(Ordering::Less),
            (false, true) => Some(Ordering::Greater),
            (false, false) => None,
        }
    }

    /// Whether `m` satisfies every present target. `None` when a target
    /// cannot be evaluated.
    pub fn admits(&self, m: &ProfileMetrics) -> Option<bool> {
        let mut ok = true;
        if let Some(t) = self.latency_ms {
            ok &= m.latency_ms <= t;
        }
        if let Some(t) = self.bytes {
            ok &= m.bytes <= t;
        }
        if let Some(t) = self.energy_mj {
            ok &= m.energy_mj? <= t;
        }
        Some(ok)
    }

    /// Sum of `metric / target` over present targets.
    pub fn normalized_cost(&self, m: &ProfileMetrics) -> Option<f64> {
        let mut c = 0.0;
        if let Some(t) = self.latency_ms {
            c += m.latency_ms / t;
        }
        if let Some(t) = self.bytes {
            c += m.bytes as f64 / t as f64;
        }
        if let Some(t) = self.energy_mj {
            c += m.energy_mj? / t;
        }
        Some(c)
    }
}

/// Fitted proxies for one device.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostModels {
    pub latency: CostModel,
    pub energy: Option<CostModel>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileMetrics {
    pub latency_ms: f64,
    pub energy_mj: Option<f64>,
    pub bytes: u64,
}

pub fn profile_metrics(net: &Network, models: &CostModels, p: &Profile) -> Result<ProfileMetrics> {
    let costs = profile_costs(net, p)?;
    Ok(ProfileMetrics {
        latency_ms: predict(&models.latency, &costs)?,
        energy_mj: models.energy.as_ref().map(|m| predict(m, &costs)).transpose()?,
        bytes: costs.iter().map(|c| c.weight_bytes).sum(),
    })
}

/// Per-layer menu of admissible settings.
pub type Menu = Vec<LayerSetting>;

/// Synthetic device table over the all-minimum, the all-maximum and random
/// menu profiles, at least enough rows to identify every coefficient.
pub fn synthetic_device_table(net: &Network, menus: &[Menu], device: &str, count: usize, spec: &SynthSpec) -> Result<DeviceTable> {
    if menus.len() != net.depth() || menus.iter().any(|m| m.is_empty()) {
        return Err(Error::dims("one non-empty menu per layer"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0xc057);
    let mut profiles = vec![
        Profile::new(menus.iter().map(|m| m[0]).collect()),
        Profile::new(menus.iter().map(|m| m[m.len() - 1]).collect()),
    ];
    while profiles.len() < count.max(2 * (1 + 2 * net.depth())) {
        profiles.push(Profile::new(menus.iter().map(|m| m[rng.random_range(0..m.len())]).collect()));
    }
    Ok(synth_device(net, device, &profiles, spec)?.0)
}

/// `n` ranks spread over `[k_min, k_max]` with bit-widths from the rank map,
/// giving a chain ordered in both `k` and `q`.
pub fn chain_menu(layer: &ElasticLayer, bitmap: &BitMap, n: usize) -> Menu {
    let span = layer.k_max - layer.k_min;
    let n = n.clamp(1, span + 1);
    let mut ks: Vec<usize> = if n == 1 {
        vec![layer.k_max]
    } else {
        (0..n).map(|i| layer.k_min + (i * span + (n - 1) / 2) / (n - 1)).collect()
    };
    ks.dedup();
    ks.into_iter().map(|k| LayerSetting::new(k, bitmap.base(k))).collect()
}

/// Cartesian product of ranks and bit-widths.
pub fn product_menu(ranks: &[usize], bits: &[u8]) -> Menu {
    ranks.iter().flat_map(|&k| bits.iter().map(move |&q| LayerSetting::new(k, q))).collect()
}

/// Numeric bit-width used by the snapping metric; float factors count as
/// 64 bits.
pub fn q_value(s: &LayerSetting) -> f64 {
    s.q.map_or(FLOAT_BITS as f64, f64::from)
}

/// Larger `(k, q)` first in lexicographic order.
fn larger(a: &LayerSetting, b: &LayerSetting) -> Ordering {
    (a.k, a.q_rank()).cmp(&(b.k, b.q_rank()))
}

/// Per-layer certificate tolerances and the per-entry terms they gate.
#[derive(Clone, Debug, PartialEq)]
pub struct SnapSafety {
    pub tolerances: Vec<f64>,
    /// `terms[ℓ][i]`: certificate term of entry `i` of layer `ℓ`'s menu.
    pub terms: Vec<Vec<f64>>,
}

/// Layer budget `ε · (term_ℓ / Δ̂)` from a reference ledger; an even split
/// when the reference has no mass.
pub fn layer_tolerances(reference: &CertificateLedger, epsilon: f64) -> Vec<f64> {
    let total = reference.delta_hat;
    let n = reference.entries.len().max(1) as f64;
    reference.entries.iter().map(|e| if total > 0.0 { epsilon * e.term / total } else { epsilon / n }).collect()
}

/// `L̂_ℓ ‖ΔW_ℓ(s)‖₂ α_ℓ` for every menu entry, with `L̂` taken at `reference`.
pub fn menu_terms(cert: &Certifier, reference: &Profile, menus: &[Menu]) -> Result<Vec<Vec<f64>>> {
    let lips = cert.lipschitz(&cert.residuals(reference)?);
    menus
        .iter()
        .enumerate()
        .map(|(l, menu)| menu.iter().map(|&s| Ok(lips[l] * cert.residual(l, s)? * cert.stats.alpha[l])).collect())
        .collect()
}

/// Nearest menu entry per layer under `|k−k̂|/s_k + β|q−q̂|/s_q`, where the
/// scales are the menu's spreads. Ties go to the larger entry. An entry over
/// its layer tolerance escalates to the nearest safe entry above it.
pub fn snap(proposal: &[(f64, f64)], menus: &[Menu], beta: f64, safety: Option<&SnapSafety>) -> Result<Profile> {
    if proposal.len() != menus.len() {
        return Err(Error::dims("proposal and menus differ in layer count"));
    }
    if let Some(s) = safety {
        if s.tolerances.len() != menus.len() || s.terms.len() != menus.len() {
            return Err(Error::dims("snap safety layer count"));
        }
    }
    let mut out = Vec::with_capacity(menus.len());
    for (l, (&(kh, qh), menu)) in proposal.iter().zip(menus).enumerate() {
        if menu.is_empty() {
            return Err(Error::invalid(format!("menu of layer {l} is empty")));
        }
        let spread = |f: &dyn Fn(&LayerSetting) -> f64| {
            let (lo, hi) = menu.iter().map(f).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
            (hi - lo).max(1.0)
        };
        let (sk, sq) = (spread(&|s| s.k as f64), spread(&q_value));
        let dist = |s: &LayerSetting| (s.k as f64 - kh).abs() / sk + beta * (q_value(s) - qh).abs() / sq;
        let by_distance = |a: &&LayerSetting, b: &&LayerSetting| dist(a).total_cmp(&dist(b)).then_with(|| larger(b, a));
        let nearest = *menu.iter().min_by(by_distance).expect("non-empty menu");
        let safe = |i: usize| safety.is_none_or(|s| s.terms[l][i] <= s.tolerances[l]);
        let idx = menu.iter().position(|s| *s == nearest).expect("member");
        let chosen = if safe(idx) {
            nearest
        } else {
            *menu
                .iter()
                .enumerate()
                .filter(|(i, s)| nearest.le(s) && **s != nearest && safe(*i))
                .map(|(_, s)| s)
                .min_by(by_distance)
                .ok_or_else(|| Error::Infeasible(format!("layer {l}: no menu entry within tolerance")))?
        };
        out.push(chosen);
    }
    Ok(Profile::new(out))
}

/// Isotonic (non-decreasing) least-squares fit by pool-adjacent-violators.
pub fn pava(y: &[f64]) -> Vec<f64> {
    let mut blocks: Vec<(f64, usize)> = Vec::with_capacity(y.len());
    for &v in y {
        blocks.push((v, 1));
        while blocks.len() > 1 {
            let (m2, n2) = blocks[blocks.len() - 1];
            let (m1, n1) = blocks[blocks.len() - 2];
            if m1 <= m2 {
                break;
            }
            blocks.pop();
            let n = n1 + n2;
            *blocks.last_mut().expect("two blocks") = ((m1 * n1 as f64 + m2 * n2 as f64) / n as f64, n);
        }
    }
    blocks.into_iter().flat_map(|(m, n)| std::iter::repeat_n(m, n)).collect()
}

/// Isotonic repair of an ordinal sequence: pooled means are rounded up to the
/// next observed level, so every output value already occurs in the input.
fn isotonic_levels<T: Copy + Ord>(seq: &[T]) -> Vec<T> {
    let mut levels: Vec<T> = seq.to_vec();
    levels.sort();
    levels.dedup();
    let ord: Vec<f64> = seq.iter().map(|v| levels.binary_search(v).expect("level") as f64).collect();
    pava(&ord).into_iter().map(|m| levels[((m - 1e-9).ceil().max(0.0) as usize).min(levels.len() - 1)]).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonotoneRepair {
    pub assignments: Vec<Profile>,
    /// Indices of input assignments that were changed.
    pub pruned: Vec<usize>,
}

/// Makes per-layer `k` and `q` non-decreasing along an ascending budget grid.
pub fn enforce_monotone(assignments: &[Profile]) -> Result<MonotoneRepair> {
    let Some(first) = assignments.first() else {
        return Ok(MonotoneRepair { assignments: Vec::new(), pruned: Vec::new() });
    };
    if assignments.iter().any(|p| p.len() != first.len()) {
        return Err(Error::dims("assignments differ in layer count"));
    }
    let mut layers = vec![Vec::with_capacity(first.len()); assignments.len()];
    for l in 0..first.len() {
        let ks: Vec<usize> = assignments.iter().map(|p| p.layers[l].k).collect();
        let qs: Vec<(u16, Option<u8>)> = assignments.iter().map(|p| (p.layers[l].q_rank(), p.layers[l].q)).collect();
        for (j, (k, q)) in isotonic_levels(&ks).into_iter().zip(isotonic_levels(&qs)).enumerate() {
            layers[j].push(LayerSetting { k, q: q.1 });
        }
    }
    let mut out = Vec::with_capacity(assignments.len());
    let mut pruned = Vec::new();
    for (j, (orig, ls)) in assignments.iter().zip(layers).enumerate() {
        if orig.layers == ls {
            out.push(orig.clone());
        } else {
            pruned.push(j);
            out.push(Profile::new(ls));
        }
    }
    Ok(MonotoneRepair { assignments: out, pruned })
}

/// Layers that must move together: tied groups and singletons, in order of
/// first layer.
pub fn upgrade_units(net: &Network) -> Vec<Vec<usize>> {
    let mut units: Vec<Vec<usize>> = Vec::new();
    let mut seen: Vec<(String, usize)> = Vec::new();
    for (l, b) in net.blocks.iter().enumerate() {
        match &b.layer.group_id {
            Some(g) => match seen.iter().find(|(name, _)| name == g) {
                Some(&(_, u)) => units[u].push(l),
                None => {
                    seen.push((g.clone(), units.len()));
                    units.push(vec![l]);
                }
            },
            None => units.push(vec![l]),
        }
    }
    units
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KnapsackStep {
    pub unit: Vec<usize>,
    /// Menu index after the upgrade.
    pub to: usize,
    pub ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KnapsackResult {
    pub profile: Profile,
    pub metrics: ProfileMetrics,
    pub feasible: bool,
    pub trace: Vec<KnapsackStep>,
}

fn profile_at(menus: &[Menu], idx: &[usize]) -> Profile {
    Profile::new(menus.iter().zip(idx).map(|(m, &i)| m[i]).collect())
}

/// Greedy benefit-per-cost upgrades over chain menus. `terms[ℓ][i]` is the
/// certificate term of menu entry `i`; an upgrade's benefit is the drop in
/// term summed over its unit, its cost the rise in normalized budget usage.
pub fn greedy_knapsack(
    net: &Network,
    menus: &[Menu],
    budget: &BudgetToken,
    models: &CostModels,
    terms: &[Vec<f64>],
) -> Result<KnapsackResult> {
    budget.validate()?;
    if menus.len() != net.depth() || terms.len() != net.depth() {
        return Err(Error::dims("menus/terms must cover every layer"));
    }
    for (l, (m, t)) in menus.iter().zip(terms).enumerate() {
        if m.is_empty() || m.len() != t.len() {
            return Err(Error::dims(format!("layer {l}: menu and terms mismatch")));
        }
        if m.windows(2).any(|w| !w[0].le(&w[1]) || w[0] == w[1]) {
            return Err(Error::invalid(format!("layer {l}: knapsack menus must be strictly increasing chains")));
        }
    }
    if budget.energy_mj.is_some() && models.energy.is_none() {
        return Err(Error::invalid("energy target without an energy model"));
    }
    let units = upgrade_units(net);
    for u in &units {
        if u.iter().any(|&l| menus[l] != menus[u[0]]) {
            return Err(Error::invalid("tied layers need identical menus"));
        }
    }
    let mut idx = vec![0usize; net.depth()];
    let eval = |idx: &[usize]| -> Result<(Profile, ProfileMetrics)> {
        let p = profile_at(menus, idx);
        let m = profile_metrics(net, models, &p)?;
        Ok((p, m))
    };
    let (mut profile, mut metrics) = eval(&idx)?;
    if !budget.admits(&metrics).expect("evaluable") {
        return Ok(KnapsackResult { profile, metrics, feasible: false, trace: Vec::new() });
    }
    let mut trace = Vec::new();
    loop {
        let cur_cost = budget.normalized_cost(&metrics).expect("evaluable");
        let mut best: Option<(f64, usize, Vec<usize>, Profile, ProfileMetrics)> = None;
        for (ui, unit) in units.iter().enumerate() {
            let at = idx[unit[0]];
            if at + 1 >= menus[unit[0]].len() {
                continue;
            }
            let mut next = idx.clone();
            for &l in unit {
                next[l] = at + 1;
            }
            let (p, m) = eval(&next)?;
            if !budget.admits(&m).expect("evaluable") {
                continue;
            }
            let benefit: f64 = unit.iter().map(|&l| terms[l][at] - terms[l][at + 1]).sum();
            let dc = budget.normalized_cost(&m).expect("evaluable") - cur_cost;
            let ratio = if dc > 0.0 { benefit / dc } else { f64::INFINITY };
            if best.as_ref().is_none_or(|b| ratio > b.0) {
                best = Some((ratio, ui, next, p, m));
            }
        }
        let Some((ratio, ui, next, p, m)) = best else { break };
        trace.push(KnapsackStep { unit: units[ui].clone(), to: next[units[ui][0]], ratio });
        (idx, profile, metrics) = (next, p, m);
    }
    Ok(KnapsackResult { profile, metrics, feasible: true, trace })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatticeEntry {
    pub name: String,
    pub profile: Profile,
    pub predicted_latency_ms: f64,
    pub predicted_energy_mj: Option<f64>,
    pub bytes: u64,
    pub delta_hat: f64,
    pub measured_latency_ms: Option<f64>,
}

impl LatticeEntry {
    pub fn metrics(&self) -> ProfileMetrics {
        ProfileMetrics { latency_ms: self.predicted_latency_ms, energy_mj: self.predicted_energy_mj, bytes: self.bytes }
    }
}

/// Profiles ordered `s₁ ≺ s₂ ≺ … ≺ s_J`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileLattice {
    pub device: String,
    pub entries: Vec<LatticeEntry>,
}

impl ProfileLattice {
    pub fn validate(&self) -> Result<()> {
        if self.entries.is_empty() {
            return Err(Error::invalid("empty lattice"));
        }
        for w in self.entries.windows(2) {
            if w[0].profile.partial_cmp_componentwise(&w[1].profile) != Some(Ordering::Less) {
                return Err(Error::Profile(format!("lattice not totally ordered at {} / {}", w[0].name, w[1].name)));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

pub fn lattice_names(j: usize) -> Vec<String> {
    match j {
        1 => vec!["Max".into()],
        2 => vec!["Tiny".into(), "Max".into()],
        3 => vec!["Tiny".into(), "Med".into(), "Max".into()],
        _ => (1..=j).map(|i| format!("P{i}")).collect(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatticeBuild {
    pub lattice: ProfileLattice,
    /// Lattice index serving each input budget.
    pub assignment: Vec<usize>,
    /// Budgets whose all-minimum profile already overshoots.
    pub infeasible: Vec<usize>,
    pub repair: MonotoneRepair,
}

/// Drops menu entries whose certificate term does not fall below every
/// cheaper entry's, summing terms over tied units. Returns the kept menus
/// and terms.
pub fn prune_dominated(net: &Network, menus: &[Menu], terms: &[Vec<f64>]) -> Result<(Vec<Menu>, Vec<Vec<f64>>)> {
    if menus.len() != net.depth() || terms.len() != net.depth() {
        return Err(Error::dims("menus/terms must cover every layer"));
    }
    let mut out_m = menus.to_vec();
    let mut out_t = terms.to_vec();
    for unit in upgrade_units(net) {
        let n = menus[unit[0]].len();
        if unit.iter().any(|&l| menus[l].len() != n || terms[l].len() != n) {
            return Err(Error::dims("menu and terms mismatch"));
        }
        let mut keep = Vec::with_capacity(n);
        let mut best = f64::INFINITY;
        for i in 0..n {
            let t: f64 = unit.iter().map(|&l| terms[l][i]).sum();
            if i == 0 || t < best {
                keep.push(i);
                best = best.min(t);
            }
        }
        for &l in &unit {
            out_m[l] = keep.iter().map(|&i| menus[l][i]).collect();
            out_t[l] = keep.iter().map(|&i| terms[l][i]).collect();
        }
    }
    Ok((out_m, out_t))
}

/// Greedy knapsack per budget over [`prune_dominated`] menus, monotone
/// repair, then deduplication into a chain. Budgets must be ascending.
pub fn build_lattice(
    cert: &Certifier,
    menus: &[Menu],
    budgets: &[BudgetToken],
    models: &CostModels,
    terms: &[Vec<f64>],
) -> Result<LatticeBuild> {
    let net = cert.net;
    if budgets.is_empty() {
        return Err(Error::invalid("no budgets"));
    }
    if budgets.windows(2).any(|w| !w[0].le(&w[1])) {
        return Err(Error::invalid("budgets must be ascending in the budget order"));
    }
    let (menus, terms) = prune_dominated(net, menus, terms)?;
    let mut picks = Vec::with_capacity(budgets.len());
    let mut infeasible = Vec::new();
    for (i, b) in budgets.iter().enumerate() {
        let r = greedy_knapsack(net, &menus, b, models, &terms)?;
        if !r.feasible {
            infeasible.push(i);
        }
        picks.push(r.profile);
    }
    let repair = enforce_monotone(&picks)?;
    let mut distinct: Vec<Profile> = Vec::new();
    let mut assignment = Vec::with_capacity(budgets.len());
    for p in &repair.assignments {
        if distinct.last().is_none_or(|d| d.layers != p.layers) {
            distinct.push(p.clone());
        }
        assignment.push(distinct.len() - 1);
    }
    let names = lattice_names(distinct.len());
    let entries = distinct
        .into_iter()
        .zip(names)
        .map(|(profile, name)| {
            let m = profile_metrics(net, models, &profile)?;
            Ok(LatticeEntry {
                name,
                delta_hat: cert.expected_bound(&profile)?,
                profile,
                predicted_latency_ms: m.latency_ms,
                predicted_energy_mj: m.energy_mj,
                bytes: m.bytes,
                measured_latency_ms: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let lattice = ProfileLattice { device: budgets[0].device.clone(), entries };
    lattice.validate()?;
    Ok(LatticeBuild { lattice, assignment, infeasible, repair })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SelectStatus {
    Ok,
    /// No profile meets both the budget and the drift tolerance.
    CertWarning,
    /// The budget cannot be evaluated on this lattice (other device, or a
    /// target without a fitted proxy).
    Infeasible,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub index: usize,
    pub status: SelectStatus,
}

/// `argmin_j Lat̂(s_j)` subject to the budget and `Δ̂(s_j) ≤ ε`; otherwise the
/// lowest-latency profile with a flag. Latency ties go to the lower index.
pub fn select_runtime(lattice: &ProfileLattice, budget: &BudgetToken, epsilon: f64) -> Result<Selection> {
    if lattice.entries.is_empty() {
        return Err(Error::invalid("empty lattice"));
    }
    let lowest = |it: &mut dyn Iterator<Item = usize>| {
        it.min_by(|&a, &b| {
            lattice.entries[a].predicted_latency_ms.total_cmp(&lattice.entries[b].predicted_latency_ms).then(a.cmp(&b))
        })
    };
    let fallback = lowest(&mut (0..lattice.len())).expect("non-empty");
    if budget.device != lattice.device {
        return Ok(Selection { index: fallback, status: SelectStatus::Infeasible });
    }
    let mut feasible = Vec::new();
    for (j, e) in lattice.entries.iter().enumerate() {
        match budget.admits(&e.metrics()) {
            None => return Ok(Selection { index: fallback, status: SelectStatus::Infeasible }),
            Some(true) if e.delta_hat <= epsilon => feasible.push(j),
            Some(_) => {}
        }
    }
    Ok(match lowest(&mut feasible.into_iter()) {
        Some(index) => Selection { index, status: SelectStatus::Ok },
        None => Selection { index: fallback, status: SelectStatus::CertWarning },
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DownshiftEvent {
    LatencyOverrun,
    DriftAlarm,
    Thermal,
}

/// Steps one profile down the lattice, stopping at the smallest.
pub fn downshift(lattice: &ProfileLattice, current: usize, _event: DownshiftEvent) -> Result<usize> {
    if current >= lattice.len() {
        return Err(Error::invalid(format!("profile index {current} outside lattice of {}", lattice.len())));
    }
    Ok(current.saturating_sub(1))
}

/// One budget point of an audit, budgets ascending.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditPoint {
    pub accuracy: Option<f64>,
    pub latency_ms: f64,
    pub delta_hat: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub pairs: usize,
    /// Looser budget, lower accuracy.
    pub accuracy_events: usize,
    /// Looser budget served by a faster profile: the tighter budget got the
    /// slower one.
    pub latency_events: usize,
    /// Looser budget with a larger drift bound.
    pub delta_events: usize,
    pub violation_pct: f64,
}

/// Counts non-monotone adjacent pairs along an ascending budget grid.
pub fn audit_monotone(points: &[AuditPoint]) -> AuditReport {
    let mut r = AuditReport { pairs: points.len().saturating_sub(1), accuracy_events: 0, latency_events: 0, delta_events: 0, violation_pct: 0.0 };
    let mut bad = 0;
    for w in points.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        let acc = matches!((a.accuracy, b.accuracy), (Some(x), Some(y)) if y < x);
        let lat = b.latency_ms < a.latency_ms;
        let del = matches!((a.delta_hat, b.delta_hat), (Some(x), Some(y)) if y > x);
        r.accuracy_events += acc as usize;
        r.latency_events += lat as usize;
        r.delta_events += del as usize;
        bad += (acc || lat || del) as usize;
    }
    if r.pairs > 0 {
        r.violation_pct = 100.0 * bad as f64 / r.pairs as f64;
    }
    r
}

/// Audit points for budgets served through a lattice assignment.
pub fn lattice_audit_points(lattice: &ProfileLattice, assignment: &[usize], accuracy: Option<&[f64]>) -> Vec<AuditPoint> {
    assignment
        .iter()
        .map(|&j| {
            let e = &lattice.entries[j];
            AuditPoint { accuracy: accuracy.map(|a| a[j]), latency_ms: e.predicted_latency_ms, delta_hat: Some(e.delta_hat) }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(k: usize, q: u8) -> LayerSetting {
        LayerSetting::new(k, q)
    }

    #[test]
    fn budget_order() {
        let a = BudgetToken::new(Some(1.0), Some(100), None, "d").unwrap();
        let b = BudgetToken::new(Some(2.0), None, None, "d").unwrap();
        assert!(a.le(&b) && !b.le(&a));
        let c = BudgetToken::latency(2.0, "e").unwrap();
        assert_eq!(a.partial_cmp_budget(&c), None);
        assert!(BudgetToken::new(None, None, None, "d").is_err());
    }

    #[test]
    fn snap_fixed_point_and_tie() {
        let menus = vec![vec![s(2, 4), s(4, 4), s(6, 4)]];
        assert_eq!(snap(&[(4.0, 4.0)], &menus, 1.0, None).unwrap().layers, vec![s(4, 4)]);
        assert_eq!(snap(&[(5.0, 4.0)], &menus, 1.0, None).unwrap().layers, vec![s(6, 4)]);
    }

    #[test]
    fn snap_escalates_past_unsafe_entry() {
        let menus = vec![vec![s(2, 4), s(4, 4), s(6, 4)]];
        let safety = SnapSafety { tolerances: vec![1.0], terms: vec![vec![3.0, 2.0, 0.5]] };
        assert_eq!(snap(&[(2.0, 4.0)], &menus, 1.0, Some(&safety)).unwrap().layers, vec![s(6, 4)]);
        let none = SnapSafety { tolerances: vec![0.1], terms: vec![vec![3.0, 2.0, 0.5]] };
        assert!(matches!(snap(&[(2.0, 4.0)], &menus, 1.0, Some(&none)), Err(Error::Infeasible(_))));
    }

    #[test]
    fn pava_pools() {
        assert_eq!(pava(&[4.0, 3.0, 5.0]), vec![3.5, 3.5, 5.0]);
        assert_eq!(isotonic_levels(&[4usize, 3, 5]), vec![4, 4, 5]);
        let ps: Vec<Profile> = [4, 3, 5].iter().map(|&k| Profile::new(vec![s(k, 4)])).collect();
        let r = enforce_monotone(&ps).unwrap();
        assert_eq!(r.assignments.iter().map(|p| p.layers[0].k).collect::<Vec<_>>(), vec![4, 4, 5]);
        assert_eq!(r.pruned, vec![1]);
    }

    #[test]
    fn audit_counts_planted_swap() {
        let pts: Vec<AuditPoint> =
            [1.0, 3.0, 2.0, 4.0].iter().map(|&l| AuditPoint { accuracy: None, latency_ms: l, delta_hat: None }).collect();
        let r = audit_monotone(&pts);
        assert_eq!((r.latency_events, r.accuracy_events, r.pairs), (1, 0, 3));
        assert_eq!(audit_monotone(&pts[..1]).pairs, 0);
    }

    #[test]
    fn downshift_clamps() {
        let e = |k| LatticeEntry {
            name: String::new(),
            profile: Profile::new(vec![s(k, 4)]),
            predicted_latency_ms: k as f64,
            predicted_energy_mj: None,
            bytes: 0,
            delta_hat: 0.0,
            measured_latency_ms: None,
        };
        let lat = ProfileLattice { device: "d".into(), entries: vec![e(1), e(2), e(3)] };
        assert_eq!(downshift(&lat, 0, DownshiftEvent::Thermal).unwrap(), 0);
        assert_eq!(downshift(&lat, 2, DownshiftEvent::Thermal).unwrap(), 1);
        let b = BudgetToken::latency(100.0, "d").unwrap();
        assert_eq!(select_runtime(&lat, &b, 1.0).unwrap(), Selection { index: 0, status: SelectStatus::Ok });
        let tight = BudgetToken::latency(0.5, "d").unwrap();
        assert_eq!(select_runtime(&lat, &tight, 1.0).unwrap().status, SelectStatus::CertWarning);
    }
}
