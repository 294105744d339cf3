//! Manifests, reports and the commands behind `ecomp`.

mod cli;
mod data;
mod manifest;
mod report;

use std::path::Path;

pub use cli::{
    cmd_audit, cmd_certify, cmd_decompose, cmd_plan, cmd_report, cmd_select, cmd_train, error_code, exit, run, AuditArgs,
    BudgetFlags, CertifyArgs, Cli, Command, DecomposeArgs, KindArg, ModeArg, PlanArgs, ReportArgs, SelectArgs, TrainArgs,
    SENTINEL,
};
pub use data::{read_samples, write_samples, Samples};
pub use manifest::{
    build_payload, pack_codes, sha256_hex, unpack_codes, AuditDoc, BudgetDoc, CalibrationDoc, CertificateDoc, CostDoc,
    CostModelDoc, Dec, FactorPayload, LatticeDoc, LatticeEntryDoc, LayerPayload, LedgerDoc, LedgerEntryDoc, Manifest,
    ModeDoc, PayloadDoc, Provenance, QuantilesDoc, RawLayer, RawWeights, SynthDoc, VerifySummary, FORMAT_VERSION,
};
pub use report::{build_report, read_report_csv, render_text, write_report_csv, Report, ReportRow, REPORT_COLUMNS};

use crate::error::Result;

/// Writes `bytes` to a sibling temp file, then renames it over `path`.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}
