//! Stand-alone tasks behind the non-sweep subcommands.

use std::f64::consts::PI;
use std::path::Path;

use okdrop_core::drop_model::{f_star_closed_form, linear_mass_grid, self_energy_table, SelfEnergyTable};
use okdrop_core::gamma_analysis::{e0_energy, recovery_sequence, LimitMeasure, Recovery, RecoveryOptions};
use okdrop_core::geometry::Point;
use okdrop_core::kernel::{EwaldKernel, KernelParams};
use okdrop_core::minimizer::{anneal, derive_seed, init_lattice, polish, AnnealSchedule, Lattice, MinimizeResult};
use okdrop_core::torus_energy::{coulomb_energy, potential_field, total_energy, DropletConfig, EnergyBreakdown, TorusSpec};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};
use crate::output::{fmt_f64, Table, TABLE_CSV_SCHEMA};

pub const KERNEL_ORACLE_TOL: f64 = 1e-6;
pub const DIRICHLET_TOL: f64 = 1e-3;

const WINDOW_RADIUS: f64 = 30.0;
const WINDOW_WIDTH: f64 = 0.08;

pub fn selfenergy(m_min: f64, m_max: f64, points: usize, n_max: usize) -> Result<SelfEnergyTable> {
    let grid = linear_mass_grid(m_min, m_max, points)?;
    Ok(self_energy_table(&grid, n_max)?)
}

pub fn selfenergy_csv(table: &SelfEnergyTable) -> Table {
    let mut t = Table::new(TABLE_CSV_SCHEMA, &["mass", "e", "f", "lambda", "n_optimal", "asymmetric"]);
    for i in 0..table.mass_grid.len() {
        let m = table.mass_grid[i];
        t.push(vec![
            fmt_f64(m),
            fmt_f64(table.e_values[i]),
            fmt_f64(table.f_values[i]),
            fmt_f64(table.lambda_values[i]),
            table.n_optimal[i].to_string(),
            table.asymmetric_masses.contains(&m).to_string(),
        ]);
    }
    t
}

fn window(s: f64) -> f64 {
    0.5 * libm::erfc((s - 0.5) / WINDOW_WIDTH)
}

fn simpson<F: Fn(f64) -> f64>(a: f64, b: f64, n: usize, f: F) -> f64 {
    let h = (b - a) / n as f64;
    let mut acc = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(a + i as f64 * h);
    }
    acc * h / 3.0
}

/// Real-space oracle for `G` on the unit torus: images weighted by a smooth
/// radial window, minus the integral of the windowed kernel (the uniform
/// background). Independent of any Ewald splitting.
pub struct ImageSumOracle {
    background: f64,
}

impl Default for ImageSumOracle {
    fn default() -> Self {
        ImageSumOracle {
            background: WINDOW_RADIUS * WINDOW_RADIUS * simpson(0.0, 1.2, 4000, |s| window(s) * s),
        }
    }
}

impl ImageSumOracle {
    pub fn green(&self, x: Point) -> f64 {
        let m = WINDOW_RADIUS.ceil() as i32 + 1;
        let mut acc = 0.0;
        for nx in -m..=m {
            for ny in -m..=m {
                for nz in -m..=m {
                    let z = [x[0] + nx as f64, x[1] + ny as f64, x[2] + nz as f64];
                    let r = (z[0] * z[0] + z[1] * z[1] + z[2] * z[2]).sqrt();
                    let s = r / WINDOW_RADIUS;
                    if s < 1.0 {
                        acc += window(s) / (4.0 * PI * r);
                    }
                }
            }
        }
        acc - self.background
    }
}

/// Uniform point of `[-1/2, 1/2)³` from a counter-based stream.
fn sample_point(seed: u64, i: u64) -> Point {
    std::array::from_fn(|a| {
        let bits = derive_seed(seed, 3 * i + a as u64) >> 11;
        bits as f64 / (1u64 << 53) as f64 - 0.5
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OraclePoint {
    pub x: Point,
    pub ewald: f64,
    pub image_sum: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirichletCheck {
    pub droplets: usize,
    pub grid_n: usize,
    pub coulomb: f64,
    pub dirichlet: f64,
    pub relative_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelCheckReport {
    pub r_at_zero: f64,
    pub points: Vec<OraclePoint>,
    pub max_abs_error: f64,
    pub dirichlet: DirichletCheck,
    pub passed: bool,
}

/// Ewald kernel against the image-sum oracle at `points` random points of
/// the unit torus, and the Dirichlet identity `Coulomb = ½∫|∇v|²` for a
/// 16-droplet BCC configuration on a 64³ grid.
pub fn kernel_check(points: usize, seed: u64) -> Result<KernelCheckReport> {
    let kernel = EwaldKernel::new(1.0, KernelParams::default())?;
    let oracle = ImageSumOracle::default();
    let mut samples = Vec::with_capacity(points);
    let mut worst: f64 = 0.0;
    for i in 0..points as u64 {
        let x = sample_point(seed, i);
        let ewald = kernel.green_eval(x)?;
        let image_sum = oracle.green(x);
        worst = worst.max((ewald - image_sum).abs());
        samples.push(OraclePoint { x, ewald, image_sum });
    }

    let spec = TorusSpec::new(1.25e-4, 9.2)?;
    let config = init_lattice(spec, Lattice::Bcc, spec.mass_budget() / 16.0)?;
    let k = EwaldKernel::new(spec.side_length(), KernelParams::default())?;
    let grid_n = 64;
    let field = potential_field(&config, &k, grid_n)?;
    let coulomb = coulomb_energy(&config, &k)?;
    let dirichlet = field.dirichlet_energy();
    let relative_error = ((dirichlet - coulomb) / coulomb).abs();
    let passed = worst < KERNEL_ORACLE_TOL && relative_error < DIRICHLET_TOL;
    Ok(KernelCheckReport {
        r_at_zero: kernel.r_at_zero(),
        points: samples,
        max_abs_error: worst,
        dirichlet: DirichletCheck {
            droplets: config.len(),
            grid_n,
            coulomb,
            dirichlet,
            relative_error,
        },
        passed,
    })
}

pub fn kernel_check_csv(report: &KernelCheckReport) -> Table {
    let mut t = Table::new(TABLE_CSV_SCHEMA, &["x", "y", "z", "ewald", "image_sum", "abs_error"]);
    for p in &report.points {
        t.push(vec![
            fmt_f64(p.x[0]),
            fmt_f64(p.x[1]),
            fmt_f64(p.x[2]),
            fmt_f64(p.ewald),
            fmt_f64(p.image_sum),
            fmt_f64((p.ewald - p.image_sum).abs()),
        ]);
    }
    t
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MinimizeOutput {
    pub format: String,
    pub seed: u64,
    pub schedule: AnnealSchedule,
    pub start_energy: EnergyBreakdown,
    pub annealed: MinimizeResult,
    pub polished: Option<MinimizeResult>,
}

impl MinimizeOutput {
    pub fn final_config(&self) -> &DropletConfig {
        self.polished.as_ref().map_or(&self.annealed.config, |p| &p.config)
    }
}

/// Anneals a stored configuration with the default kernel, then optionally
/// polishes it.
pub fn minimize(
    start: &DropletConfig,
    schedule: &AnnealSchedule,
    seed: u64,
    polish_tol: Option<f64>,
) -> Result<MinimizeOutput> {
    let kernel = EwaldKernel::new(start.side_length(), KernelParams::default())?;
    let mut schedule = schedule.clone();
    schedule.seed = seed;
    schedule
        .validate()
        .map_err(|e| HarnessError::validation(format!("schedule: {e}")))?;
    let start_energy = total_energy(start, &kernel)?;
    let annealed = anneal(start, &kernel, &schedule)?;
    let polished = match polish_tol {
        Some(tol) => Some(polish(&annealed.config, &kernel, tol)?),
        None => None,
    };
    Ok(MinimizeOutput {
        format: "okdrop-minimize-v1".to_string(),
        seed,
        schedule,
        start_energy,
        annealed,
        polished,
    })
}

pub fn read_config(path: &Path) -> Result<DropletConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    DropletConfig::from_json(&text).map_err(|e| HarnessError::validation(format!("{}: {e}", path.display())))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecoverySummary {
    pub epsilon: f64,
    pub lambda: f64,
    pub amplitude: f64,
    pub m_star: f64,
    pub cubes_per_side: usize,
    pub counts: Vec<usize>,
    pub n_droplets: usize,
    pub min_spacing: f64,
    pub scaled_total: f64,
    /// Limit energy of the target density.
    pub e0: f64,
}

/// Recovery construction for the density `λ(1 + a·cos 2πx₁)` sampled on an
/// `n³` grid.
pub fn recover(
    lambda: f64,
    epsilon: f64,
    amplitude: f64,
    grid_n: usize,
    m_star: f64,
    options: &RecoveryOptions,
) -> Result<(Recovery, RecoverySummary)> {
    if amplitude.abs() >= 1.0 || amplitude.is_nan() {
        return Err(HarnessError::validation(format!(
            "amplitude must satisfy |a| < 1 so that the density stays positive, got {amplitude}"
        )));
    }
    let mu = LimitMeasure::from_fn(grid_n, |x| lambda * (1.0 + amplitude * (2.0 * PI * x[0]).cos()))?;
    let rec = recovery_sequence(&mu, epsilon, m_star, options)?;
    let kernel = EwaldKernel::new(rec.config.side_length(), KernelParams::default())?;
    let b = total_energy(&rec.config, &kernel)?;
    let unit = EwaldKernel::new(1.0, KernelParams::default())?;
    let e0 = e0_energy(&mu, &unit, f_star_closed_form())?;
    let summary = RecoverySummary {
        epsilon,
        lambda,
        amplitude,
        m_star,
        cubes_per_side: rec.cubes_per_side,
        counts: rec.counts.clone(),
        n_droplets: rec.config.len(),
        min_spacing: rec.min_spacing,
        scaled_total: b.scaled_total,
        e0,
    };
    Ok((rec, summary))
}
