//! Per-profile diagnostics tables, written as CSV and as text.

use std::fmt::Write as _;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::data::Samples;
use super::manifest::Manifest;
use crate::certificate::{diagnostics, pointwise_from_trace};
use crate::controller::{audit_monotone, AuditPoint, AuditReport};
use crate::error::{Error, Result};
use crate::train::evaluate_accuracy_on;

/// Fixed column order of the CSV form.
pub const REPORT_COLUMNS: [&str; 8] =
    ["profile", "profile_id", "accuracy", "predicted_latency_ms", "bytes", "delta_hat", "coverage_pct", "violation_pct"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub profile: String,
    pub profile_id: String,
    /// Absent when the evaluation data has no labels.
    pub accuracy: Option<f64>,
    pub predicted_latency_ms: f64,
    pub bytes: u64,
    pub delta_hat: f64,
    /// Share of samples with observed drift `≤ ε`.
    pub coverage_pct: f64,
    /// Share of samples whose pointwise bound exceeds `ε`.
    pub violation_pct: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub epsilon: f64,
    pub mode: String,
    pub samples: usize,
    pub coverage_pct: f64,
    pub correlation: Option<f64>,
    pub rows: Vec<ReportRow>,
    pub audit: AuditReport,
}

/// Diagnostics of every lattice profile on `eval`, from the manifest alone.
pub fn build_report(m: &Manifest, eval: &Samples, epsilon: f64) -> Result<Report> {
    if eval.is_empty() {
        return Err(Error::invalid("empty evaluation data"));
    }
    let net = m.network()?;
    let lat = m.lattice_doc()?.lattice();
    let stats = m.calibration_stats()?;
    let cert = m.certifier(net, &stats)?;
    let profiles: Vec<_> = lat.entries.iter().map(|e| e.profile.clone()).collect();
    let diag = diagnostics(&cert, &profiles, &eval.x, epsilon)?;
    let full = net.compile(None)?;
    let traces = eval.x.iter().map(|x| full.forward(x)).collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::with_capacity(lat.len());
    for (e, d) in lat.entries.iter().zip(&diag.profiles) {
        let coef = cert.coefficients(&e.profile)?;
        let over = traces.iter().filter(|t| pointwise_from_trace(&coef, t) > epsilon).count();
        let accuracy = match &eval.labels {
            Some(y) => Some(evaluate_accuracy_on(net, Some(&e.profile), &eval.x, y)?),
            None => None,
        };
        rows.push(ReportRow {
            profile: e.name.clone(),
            profile_id: e.profile.id.clone(),
            accuracy,
            predicted_latency_ms: e.predicted_latency_ms,
            bytes: e.bytes,
            delta_hat: e.delta_hat,
            coverage_pct: d.coverage_pct,
            violation_pct: 100.0 * over as f64 / traces.len() as f64,
        });
    }
    let points: Vec<AuditPoint> =
        rows.iter().map(|r| AuditPoint { accuracy: r.accuracy, latency_ms: r.predicted_latency_ms, delta_hat: Some(r.delta_hat) }).collect();
    Ok(Report {
        epsilon,
        mode: cert.mode.name().into(),
        samples: eval.len(),
        coverage_pct: diag.coverage_pct,
        correlation: diag.correlation,
        audit: audit_monotone(&points),
        rows,
    })
}

pub fn write_report_csv(w: impl Write, rows: &[ReportRow]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(REPORT_COLUMNS)?;
    for r in rows {
        wr.write_record([
            r.profile.clone(),
            r.profile_id.clone(),
            r.accuracy.map_or(String::new(), |a| a.to_string()),
            r.predicted_latency_ms.to_string(),
            r.bytes.to_string(),
            r.delta_hat.to_string(),
            r.coverage_pct.to_string(),
            r.violation_pct.to_string(),
        ])?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_report_csv(r: impl Read) -> Result<Vec<ReportRow>> {
    let mut rd = csv::Reader::from_reader(r);
    if rd.headers()?.iter().collect::<Vec<_>>() != REPORT_COLUMNS {
        return Err(Error::Format("unexpected report columns".into()));
    }
    let num = |s: &str| s.parse::<f64>().map_err(|_| Error::Format(format!("bad number {s:?}")));
    rd.records()
        .map(|rec| {
            let rec = rec?;
            Ok(ReportRow {
                profile: rec[0].to_string(),
                profile_id: rec[1].to_string(),
                accuracy: if rec[2].is_empty() { None } else { Some(num(&rec[2])?) },
                predicted_latency_ms: num(&rec[3])?,
                bytes: rec[4].parse().map_err(|_| Error::Format(format!("bad byte count {:?}", &rec[4])))?,
                delta_hat: num(&rec[5])?,
                coverage_pct: num(&rec[6])?,
                violation_pct: num(&rec[7])?,
            })
        })
        .collect()
}

pub fn render_text(r: &Report) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "epsilon {}  mode {}  samples {}", r.epsilon, r.mode, r.samples);
    let _ = writeln!(
        s,
        "coverage {:.2}%  corr(delta_hat, drift) {}",
        r.coverage_pct,
        r.correlation.map_or("n/a".into(), |c| format!("{c:.4}"))
    );
    let _ = writeln!(s);
    let _ = writeln!(
        s,
        "{:<6} {:<32} {:>8} {:>12} {:>8} {:>12} {:>9} {:>9}",
        "prof", "id", "acc", "lat_ms", "bytes", "delta_hat", "cover%", "viol%"
    );
    for row in &r.rows {
        let _ = writeln!(
            s,
            "{:<6} {:<32} {:>8} {:>12.6} {:>8} {:>12.6} {:>9.2} {:>9.2}",
            row.profile,
            row.profile_id,
            row.accuracy.map_or("-".into(), |a| format!("{a:.4}")),
            row.predicted_latency_ms,
            row.bytes,
            row.delta_hat,
            row.coverage_pct,
            row.violation_pct
        );
    }
    let a = &r.audit;
    let _ = writeln!(s);
    let _ = writeln!(
        s,
        "monotonicity: {} adjacent pairs, {} accuracy / {} latency / {} delta_hat events ({:.1}%)",
        a.pairs, a.accuracy_events, a.latency_events, a.delta_events, a.violation_pct
    );
    s
}
