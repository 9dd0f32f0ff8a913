use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use okdrop_core::gamma_analysis::{droplet_statistics, DropletStatistics, SweepRecord};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};
use crate::output::{fmt_f64, write_json, Table, TABLE_CSV_SCHEMA};
use crate::sweep::{merge_rows, read_row_file, RowFailure, RowFile};

pub const REPORT_FORMAT: &str = "okdrop-report-v1";

const DIAMETER_NOTE: &str = "diameter proxy is 2·max r_i, meaningful only under the ball ansatz; \
component convergence is reported at the level of masses (fraction within 10% of m*)";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub format: String,
    /// Distinct manifest hashes found in the sweep, sorted.
    pub manifest_hashes: Vec<String>,
    pub forced: bool,
    pub note: String,
    pub skipped_rows: Vec<RowFailure>,
    pub statistics: DropletStatistics,
}

/// Per-ε artifacts of a sweep directory, in file-name order.
pub fn load_rows(dir: &Path) -> Result<Vec<RowFile>> {
    let entries = fs::read_dir(dir).map_err(|e| HarnessError::io(dir, e))?;
    let mut paths: Vec<PathBuf> = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| HarnessError::io(dir, e))?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if name.starts_with("eps_") && name.ends_with(".json") {
            paths.push(path);
        }
    }
    paths.sort();
    if paths.is_empty() {
        return Err(HarnessError::validation(format!(
            "{} contains no per-epsilon result files",
            dir.display()
        )));
    }
    paths.iter().map(|p| read_row_file(p)).collect()
}

/// Builds the statistics report for a sweep directory. Rows from different
/// manifests are refused unless `force` is set.
pub fn analyze_dir(dir: &Path, m_star: f64, f_star: f64, force: bool) -> Result<AnalysisReport> {
    let rows = load_rows(dir)?;
    let hashes: BTreeSet<String> = rows.iter().map(|r| r.manifest_hash.clone()).collect();
    let hashes: Vec<String> = hashes.into_iter().collect();
    if hashes.len() > 1 && !force {
        return Err(HarnessError::MixedManifest(hashes));
    }
    let lambdas: BTreeSet<u64> = rows.iter().map(|r| r.lambda.to_bits()).collect();
    if lambdas.len() > 1 {
        return Err(HarnessError::validation("sweep rows disagree on lambda"));
    }
    let skipped_rows = rows
        .iter()
        .filter(|r| !r.is_ok())
        .map(|r| RowFailure {
            epsilon: r.epsilon,
            error: r.error.clone().unwrap_or_default(),
        })
        .collect();
    let hash_label = if hashes.len() == 1 { hashes[0].clone() } else { "mixed".to_string() };
    let record: SweepRecord = merge_rows(rows[0].lambda, &hash_label, &rows);
    let statistics = droplet_statistics(&record, m_star, f_star)?;
    Ok(AnalysisReport {
        format: REPORT_FORMAT.to_string(),
        manifest_hashes: hashes,
        forced: force,
        note: DIAMETER_NOTE.to_string(),
        skipped_rows,
        statistics,
    })
}

/// Writes `out` (JSON) and one CSV per statistic next to it, named
/// `<stem>_<statistic>.csv`. Returns the CSV paths.
pub fn write_report(report: &AnalysisReport, out: &Path) -> Result<Vec<PathBuf>> {
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| HarnessError::io(parent, e))?;
    }
    write_json(out, report)?;
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("report");
    let dir = out.parent().unwrap_or(Path::new(""));
    let mut written = Vec::new();
    for (name, table) in report_tables(report) {
        let path = dir.join(format!("{stem}_{name}.csv"));
        table.write(&path)?;
        written.push(path);
    }
    Ok(written)
}

pub fn report_tables(report: &AnalysisReport) -> Vec<(&'static str, Table)> {
    let s = &report.statistics;
    let hash = report.manifest_hashes.join("+");
    let mut counts = Table::new(
        TABLE_CSV_SCHEMA,
        &["manifest_hash", "epsilon", "n_droplets", "log_epsilon", "log_n", "fitted_log_n"],
    );
    let mut near = Table::new(TABLE_CSV_SCHEMA, &["manifest_hash", "epsilon", "near_optimal_fraction"]);
    let mut gap = Table::new(TABLE_CSV_SCHEMA, &["manifest_hash", "epsilon", "gap", "relative_gap"]);
    let mut potential = Table::new(TABLE_CSV_SCHEMA, &["manifest_hash", "epsilon", "sup_v"]);
    let mut equi = Table::new(
        TABLE_CSV_SCHEMA,
        &["manifest_hash", "epsilon", "mass_deviation", "energy_deviation"],
    );
    let mut diameter = Table::new(TABLE_CSV_SCHEMA, &["manifest_hash", "epsilon", "diameter_ratio"]);
    for r in &s.rows {
        let e = fmt_f64(r.epsilon);
        let le = r.epsilon.ln();
        counts.push(vec![
            hash.clone(),
            e.clone(),
            r.n_droplets.to_string(),
            fmt_f64(le),
            fmt_f64((r.n_droplets as f64).ln()),
            fmt_f64(s.count_intercept + s.count_slope * le),
        ]);
        near.push(vec![hash.clone(), e.clone(), fmt_f64(r.near_optimal_fraction)]);
        gap.push(vec![hash.clone(), e.clone(), fmt_f64(r.gap), fmt_f64(r.relative_gap)]);
        potential.push(vec![hash.clone(), e.clone(), fmt_f64(r.sup_v)]);
        equi.push(vec![
            hash.clone(),
            e.clone(),
            fmt_f64(r.mass_deviation),
            fmt_f64(r.energy_deviation),
        ]);
        diameter.push(vec![hash.clone(), e, fmt_f64(r.diameter_ratio)]);
    }
    let mut summary = Table::new(TABLE_CSV_SCHEMA, &["manifest_hash", "quantity", "value"]);
    let flag = |b: bool| if b { "true" } else { "false" }.to_string();
    for (q, v) in [
        ("lambda", fmt_f64(s.lambda)),
        ("m_star", fmt_f64(s.m_star)),
        ("f_star", fmt_f64(s.f_star)),
        ("count_slope", fmt_f64(s.count_slope)),
        ("count_intercept", fmt_f64(s.count_intercept)),
        ("gap_positive", flag(s.gap_positive)),
        ("gap_non_increasing", flag(s.gap_non_increasing)),
        ("mass_deviation_decreasing", flag(s.mass_deviation_decreasing)),
        ("energy_deviation_decreasing", flag(s.energy_deviation_decreasing)),
        ("sup_v_envelope_non_increasing", flag(s.sup_v_envelope_non_increasing)),
        ("max_diameter_ratio", fmt_f64(s.max_diameter_ratio)),
    ] {
        summary.push(vec![hash.clone(), q.to_string(), v]);
    }
    vec![
        ("counts", counts),
        ("near_optimal", near),
        ("energy_gap", gap),
        ("potential", potential),
        ("equidistribution", equi),
        ("diameter", diameter),
        ("summary", summary),
    ]
}
