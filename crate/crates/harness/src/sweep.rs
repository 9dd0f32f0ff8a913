use std::path::{Path, PathBuf};

use okdrop_core::drop_model::f_star_closed_form;
use okdrop_core::gamma_analysis::{diameter_proxy, SweepRecord, SweepRow};
use okdrop_core::kernel::{EwaldKernel, KernelParams};
use okdrop_core::minimizer::{anneal, init_lattice, polish, MinimizeResult, MoveStats};
use okdrop_core::torus_energy::{energy_measure, potential_field, total_energy, DropletConfig, EnergyBreakdown, TorusSpec};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{AnalysisParams, ExperimentConfig};
use crate::error::{HarnessError, Result};
use crate::manifest::Manifest;
use crate::output::{fmt_f64, history_table, write_json, Table, SWEEP_CSV_SCHEMA};

pub const ROW_FORMAT: &str = "okdrop-row-v1";
pub const SWEEP_FORMAT: &str = "okdrop-sweep-v1";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const SWEEP_CSV: &str = "sweep.csv";
pub const SWEEP_JSON: &str = "sweep.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RowDiagnostics {
    pub start_droplets: usize,
    /// Final annealing energy of every chain, scaled frame.
    pub chain_energies: Vec<f64>,
    pub best_chain: usize,
    pub anneal_accepted: u64,
    pub anneal_rejected: u64,
    pub move_stats: MoveStats,
    pub polish_passes: u64,
    pub multiplier_spread: f64,
    pub max_gradient: f64,
    pub c_lower: f64,
    pub c_fit: f64,
    pub gradient_excess: f64,
    pub removed_alias_mean: f64,
    pub resolution_warning: Option<String>,
    pub measure_mass_total: f64,
    pub measure_energy_total: f64,
}

/// Per-ε artifact: everything needed to recompute the row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RowFile {
    pub format: String,
    pub manifest_hash: String,
    pub index: usize,
    pub epsilon: f64,
    pub lambda: f64,
    pub seed: u64,
    pub error: Option<String>,
    pub row: Option<SweepRow>,
    pub config: Option<DropletConfig>,
    pub breakdown: Option<EnergyBreakdown>,
    pub diagnostics: Option<RowDiagnostics>,
}

impl RowFile {
    pub fn is_ok(&self) -> bool {
        self.error.is_none() && self.row.is_some()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepDocument {
    pub format: String,
    pub record: SweepRecord,
    pub failures: Vec<RowFailure>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RowFailure {
    pub epsilon: f64,
    pub error: String,
}

#[derive(Clone, Debug)]
pub struct SweepOutcome {
    pub manifest: Manifest,
    pub manifest_hash: String,
    pub record: SweepRecord,
    pub rows: Vec<RowFile>,
    pub output_dir: PathBuf,
}

impl SweepOutcome {
    pub fn failures(&self) -> impl Iterator<Item = &RowFile> {
        self.rows.iter().filter(|r| !r.is_ok())
    }
}

pub fn row_file_name(index: usize) -> String {
    format!("eps_{index:02}.json")
}

pub fn history_file_name(index: usize) -> String {
    format!("eps_{index:02}_history.csv")
}

/// Measurements of a finished configuration.
pub struct Measured {
    pub row: SweepRow,
    pub breakdown: EnergyBreakdown,
    pub field: okdrop_core::torus_energy::PotentialField,
    pub measure: okdrop_core::torus_energy::CoarseGrainReport,
}

/// `total_energy → potential_field → energy_measure` for one configuration.
/// Recomputing a stored row goes through the same function.
pub fn measure_config(config: &DropletConfig, kernel: KernelParams, analysis: &AnalysisParams) -> Result<Measured> {
    let k = EwaldKernel::new(config.side_length(), kernel)?;
    let breakdown = total_energy(config, &k)?;
    let field = potential_field(config, &k, analysis.grid_n)?;
    let measure = energy_measure(config, &k, analysis.subdivisions)?;
    let row = SweepRow {
        epsilon: config.spec().epsilon,
        n_droplets: config.len(),
        scaled_total: breakdown.scaled_total,
        sup_v: field.sup_abs,
        min_v: field.inf,
        masses: config.masses(),
        diameter_proxy: diameter_proxy(config),
        mass_deviation: measure.max_mass_deviation(),
        energy_deviation: measure.max_energy_deviation(f_star_closed_form()),
        config_file: None,
    };
    Ok(Measured {
        row,
        breakdown,
        field,
        measure,
    })
}

struct RowRun {
    config: DropletConfig,
    measured: Measured,
    diagnostics: RowDiagnostics,
    history: Vec<okdrop_core::minimizer::HistorySample>,
}

fn compute_row(cfg: &ExperimentConfig, manifest: &Manifest, index: usize) -> Result<RowRun> {
    let eps = cfg.epsilons[index];
    let spec = TorusSpec::new(eps, cfg.lambda)?;
    let kernel = EwaldKernel::new(spec.side_length(), cfg.kernel)?;
    let start = init_lattice(spec, cfg.lattice, cfg.droplet_mass)?;
    let mut chains: Vec<MinimizeResult> = Vec::with_capacity(cfg.chains);
    for c in 0..cfg.chains {
        let mut schedule = cfg.schedule.clone();
        schedule.seed = manifest.chain_seed(index, c);
        chains.push(anneal(&start, &kernel, &schedule)?);
    }
    let best_chain = (0..chains.len())
        .min_by(|&a, &b| chains[a].breakdown.total.total_cmp(&chains[b].breakdown.total))
        .expect("at least one chain");
    let chain_energies = chains.iter().map(|c| c.breakdown.scaled_total).collect();
    let best = chains.swap_remove(best_chain);
    let polished = polish(&best.config, &kernel, cfg.analysis.polish_tol)?;
    let measured = measure_config(&polished.config, cfg.kernel, &cfg.analysis)?;
    let diagnostics = RowDiagnostics {
        start_droplets: start.len(),
        chain_energies,
        best_chain,
        anneal_accepted: best.accepted_moves,
        anneal_rejected: best.rejected_moves,
        move_stats: best.move_stats,
        polish_passes: polished.history.len().saturating_sub(1) as u64,
        multiplier_spread: polished.multiplier_spread,
        max_gradient: measured.field.max_gradient,
        c_lower: measured.field.c_lower,
        c_fit: measured.field.c_fit,
        gradient_excess: measured.field.gradient_excess,
        removed_alias_mean: measured.field.removed_alias_mean,
        resolution_warning: measured.field.resolution_warning.clone(),
        measure_mass_total: measured.measure.mass_total,
        measure_energy_total: measured.measure.energy_total,
    };
    Ok(RowRun {
        config: polished.config,
        measured,
        diagnostics,
        history: best.history,
    })
}

/// Runs every ε of the experiment on the current rayon pool and writes the
/// manifest, one JSON file and one history CSV per ε, and the merged
/// `sweep.csv` / `sweep.json`. Row failures are recorded and do not stop
/// the sweep.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<SweepOutcome> {
    cfg.validate()?;
    cfg.ensure_output_dir()?;
    let dir = cfg.output_dir.clone();
    let manifest = Manifest::from_config(cfg);
    let hash = manifest.hash();
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;

    let rows: Vec<Result<RowFile>> = (0..cfg.epsilons.len())
        .into_par_iter()
        .map(|index| {
            let mut file = RowFile {
                format: ROW_FORMAT.to_string(),
                manifest_hash: hash.clone(),
                index,
                epsilon: cfg.epsilons[index],
                lambda: cfg.lambda,
                seed: manifest.row_seeds[index],
                error: None,
                row: None,
                config: None,
                breakdown: None,
                diagnostics: None,
            };
            match compute_row(cfg, &manifest, index) {
                Ok(run) => {
                    let mut row = run.measured.row;
                    row.config_file = Some(row_file_name(index));
                    history_table(&run.history).write(&dir.join(history_file_name(index)))?;
                    file.row = Some(row);
                    file.config = Some(run.config);
                    file.breakdown = Some(run.measured.breakdown);
                    file.diagnostics = Some(run.diagnostics);
                }
                Err(e) => file.error = Some(e.to_string()),
            }
            write_json(&dir.join(row_file_name(index)), &file)?;
            Ok(file)
        })
        .collect();
    let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;

    let record = merge_rows(cfg.lambda, &hash, &rows);
    let failures = rows
        .iter()
        .filter(|r| !r.is_ok())
        .map(|r| RowFailure {
            epsilon: r.epsilon,
            error: r.error.clone().unwrap_or_default(),
        })
        .collect();
    write_json(
        &dir.join(SWEEP_JSON),
        &SweepDocument {
            format: SWEEP_FORMAT.to_string(),
            record: record.clone(),
            failures,
        },
    )?;
    sweep_table(&rows, f_star_closed_form()).write(&dir.join(SWEEP_CSV))?;
    Ok(SweepOutcome {
        manifest,
        manifest_hash: hash,
        record,
        rows,
        output_dir: dir,
    })
}

/// Successful rows ordered by decreasing ε.
pub fn merge_rows(lambda: f64, hash: &str, rows: &[RowFile]) -> SweepRecord {
    let mut record = SweepRecord {
        lambda,
        manifest_hash: Some(hash.to_string()),
        rows: rows.iter().filter_map(|r| r.row.clone()).collect(),
    };
    record.sort();
    record
}

/// One line per ε, failures included with empty numeric fields.
pub fn sweep_table(rows: &[RowFile], f_star: f64) -> Table {
    let mut t = Table::new(
        SWEEP_CSV_SCHEMA,
        &[
            "manifest_hash",
            "index",
            "epsilon",
            "status",
            "n_droplets",
            "scaled_total",
            "relative_gap",
            "sup_v",
            "min_v",
            "diameter_proxy",
            "mass_deviation",
            "energy_deviation",
            "min_mass",
            "max_mass",
            "error",
        ],
    );
    let mut sorted: Vec<&RowFile> = rows.iter().collect();
    sorted.sort_by(|a, b| b.epsilon.total_cmp(&a.epsilon));
    for r in sorted {
        let head = vec![r.manifest_hash.clone(), r.index.to_string(), fmt_f64(r.epsilon)];
        let body = match &r.row {
            Some(row) if r.error.is_none() => {
                let target = r.lambda * f_star;
                let min = row.masses.iter().copied().fold(f64::INFINITY, f64::min);
                let max = row.masses.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                vec![
                    "ok".to_string(),
                    row.n_droplets.to_string(),
                    fmt_f64(row.scaled_total),
                    fmt_f64((row.scaled_total - target) / target),
                    fmt_f64(row.sup_v),
                    fmt_f64(row.min_v),
                    fmt_f64(row.diameter_proxy),
                    fmt_f64(row.mass_deviation),
                    fmt_f64(row.energy_deviation),
                    fmt_f64(min),
                    fmt_f64(max),
                    String::new(),
                ]
            }
            _ => {
                let mut v = vec!["error".to_string()];
                v.extend(std::iter::repeat_n(String::new(), 10));
                v.push(r.error.clone().unwrap_or_default());
                v
            }
        };
        t.push(head.into_iter().chain(body).collect());
    }
    t
}

/// Reads a per-ε artifact.
pub fn read_row_file(path: &Path) -> Result<RowFile> {
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Recomputes a stored row from its configuration and the manifest
/// settings.
pub fn recompute_row(file: &RowFile, manifest: &Manifest) -> Result<SweepRow> {
    let config = file
        .config
        .as_ref()
        .ok_or_else(|| HarnessError::validation(format!("row {} has no stored configuration", file.index)))?;
    let mut row = measure_config(config, manifest.kernel, &manifest.analysis)?.row;
    row.config_file = Some(row_file_name(file.index));
    Ok(row)
}
