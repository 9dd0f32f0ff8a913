use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use okdrop::analyze::{analyze_dir, write_report};
use okdrop::commands::{
    kernel_check, kernel_check_csv, minimize, read_config, recover, selfenergy, selfenergy_csv,
};
use okdrop::config::read_schedule;
use okdrop::output::{history_table, write_json};
use okdrop::{run_sweep, validate_config_file, HarnessError, Result};
use okdrop_core::drop_model::{f_star_closed_form, m_star_closed_form, DEFAULT_N_MAX};
use okdrop_core::gamma_analysis::{RecoveryOptions, SpacingBounds};
use okdrop_core::minimizer::AnnealSchedule;

#[derive(Parser)]
#[command(name = "okdrop", version, about = "Droplet-lattice experiments for the liquid-drop energy on the flat torus")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Tabulate e(m), f(m), e'(m) and optimal partitions under the ball ansatz.
    Selfenergy {
        #[arg(long, default_value_t = 1.0)]
        m_min: f64,
        #[arg(long, default_value_t = 150.0)]
        m_max: f64,
        #[arg(long, default_value_t = 300)]
        points: usize,
        #[arg(long, default_value_t = DEFAULT_N_MAX)]
        n_max: usize,
        /// CSV table; a JSON summary is written next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare the Ewald kernel with a real-space image sum and check the
    /// Dirichlet energy identity.
    KernelCheck {
        #[arg(long, default_value_t = 50)]
        points: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// CSV of sampled points; a JSON report is written next to it.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Anneal and polish a stored droplet configuration.
    Minimize {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// TOML schedule document; defaults apply when omitted.
        #[arg(long)]
        schedule: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Relative tolerance of the final local descent.
        #[arg(long, default_value_t = 1e-10)]
        polish_tol: f64,
        #[arg(long)]
        no_polish: bool,
    },
    /// Run an ε-sweep described by a TOML experiment file.
    Sweep {
        #[arg(long)]
        config: PathBuf,
    },
    /// Statistics of a finished sweep directory.
    Analyze {
        #[arg(long)]
        sweep: PathBuf,
        #[arg(long)]
        m_star: Option<f64>,
        #[arg(long)]
        f_star: Option<f64>,
        #[arg(long)]
        out: PathBuf,
        /// Accept rows produced under different manifests.
        #[arg(long)]
        force: bool,
    },
    /// Build the recovery construction for λ(1 + a·cos 2πx₁).
    Recover {
        #[arg(long)]
        lambda: f64,
        #[arg(long)]
        epsilon: f64,
        #[arg(long, default_value_t = 0.0)]
        amplitude: f64,
        #[arg(long, default_value_t = 16)]
        grid: usize,
        #[arg(long)]
        m_star: Option<f64>,
        /// Cube side; defaults to ε^{1/27}.
        #[arg(long)]
        delta: Option<f64>,
        #[arg(long)]
        k: Option<f64>,
        #[arg(long)]
        k_prime: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn with_suffix(path: &Path, suffix: &str, ext: &str) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("out");
    path.with_file_name(format!("{stem}{suffix}.{ext}"))
}

fn configure_threads() -> Result<()> {
    let Ok(value) = std::env::var("OKDROP_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| HarnessError::validation(format!("OKDROP_THREADS must be a positive integer, got {value:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| HarnessError::validation(format!("cannot configure worker pool: {e}")))
}

fn run(cli: Cli) -> Result<ExitCode> {
    configure_threads()?;
    match cli.command {
        Command::Selfenergy {
            m_min,
            m_max,
            points,
            n_max,
            out,
        } => {
            let table = selfenergy(m_min, m_max, points, n_max)?;
            selfenergy_csv(&table).write(&out)?;
            write_json(&with_suffix(&out, "", "json"), &table)?;
            println!("m* = {:.12e}  f* = {:.12e}  m_c1 = {:.12e}", table.m_star, table.f_star, table.m_c1);
        }
        Command::KernelCheck { points, seed, out } => {
            let report = kernel_check(points, seed)?;
            if let Some(out) = out {
                kernel_check_csv(&report).write(&out)?;
                write_json(&with_suffix(&out, "", "json"), &report)?;
            }
            println!(
                "R(0) = {:.12e}  max |G_ewald − G_images| = {:.3e}  Dirichlet relative error = {:.3e}",
                report.r_at_zero, report.max_abs_error, report.dirichlet.relative_error
            );
            if !report.passed {
                return Err(HarnessError::Numerical("kernel check outside tolerance".into()));
            }
        }
        Command::Minimize {
            config,
            seed,
            schedule,
            out,
            polish_tol,
            no_polish,
        } => {
            let start = read_config(&config)?;
            let schedule = match schedule {
                Some(p) => read_schedule(&p)?,
                None => AnnealSchedule::default(),
            };
            let result = minimize(&start, &schedule, seed, (!no_polish).then_some(polish_tol))?;
            write_json(&out, &result)?;
            history_table(&result.annealed.history).write(&with_suffix(&out, "_history", "csv"))?;
            let fin = result.final_config();
            let e = result.polished.as_ref().map_or(&result.annealed.breakdown, |p| &p.breakdown);
            println!(
                "droplets {} -> {}  scaled energy {:.12e} -> {:.12e}",
                start.len(),
                fin.len(),
                result.start_energy.scaled_total,
                e.scaled_total
            );
        }
        Command::Sweep { config } => {
            let cfg = validate_config_file(&config)?;
            let outcome = run_sweep(&cfg)?;
            println!("manifest {}", outcome.manifest_hash);
            for r in &outcome.rows {
                match (&r.row, &r.error) {
                    (Some(row), None) => println!(
                        "eps {:.3e}  N = {:4}  scaled_total = {:.12e}",
                        r.epsilon, row.n_droplets, row.scaled_total
                    ),
                    (_, err) => println!("eps {:.3e}  failed: {}", r.epsilon, err.as_deref().unwrap_or("")),
                }
            }
            if outcome.failures().next().is_some() {
                eprintln!("error: some sweep rows failed; see {}", outcome.output_dir.display());
                return Ok(ExitCode::from(3));
            }
        }
        Command::Analyze {
            sweep,
            m_star,
            f_star,
            out,
            force,
        } => {
            let report = analyze_dir(
                &sweep,
                m_star.unwrap_or_else(m_star_closed_form),
                f_star.unwrap_or_else(f_star_closed_form),
                force,
            )?;
            let tables = write_report(&report, &out)?;
            let s = &report.statistics;
            println!(
                "count slope {:.4}  gap positive {}  gap non-increasing {}  ({} tables)",
                s.count_slope,
                s.gap_positive,
                s.gap_non_increasing,
                tables.len()
            );
        }
        Command::Recover {
            lambda,
            epsilon,
            amplitude,
            grid,
            m_star,
            delta,
            k,
            k_prime,
            out,
        } => {
            let m_star = m_star.unwrap_or_else(m_star_closed_form);
            let mut spacing = SpacingBounds::default_for(m_star, lambda);
            if let Some(k) = k {
                spacing.k = k;
            }
            if let Some(kp) = k_prime {
                spacing.k_prime = kp;
            }
            let options = RecoveryOptions {
                delta,
                spacing: Some(spacing),
            };
            let (rec, summary) = recover(lambda, epsilon, amplitude, grid, m_star, &options)?;
            write_json(&out, &rec.config)?;
            write_json(&with_suffix(&out, "_summary", "json"), &summary)?;
            println!(
                "N = {}  cubes/side = {}  scaled_total = {:.12e}  E0 = {:.12e}",
                summary.n_droplets, summary.cubes_per_side, summary.scaled_total, summary.e0
            );
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
