use std::fs;
use std::path::{Path, PathBuf};

use okdrop_core::drop_model::m_star_closed_form;
use okdrop_core::kernel::{EwaldKernel, KernelParams};
use okdrop_core::minimizer::{AnnealSchedule, Lattice};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

pub const DEFAULT_SEED: u64 = 20_240_917;
pub const DEFAULT_OUTPUT_DIR: &str = "okdrop-out";

/// Post-minimization measurement settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisParams {
    /// Potential grid points per axis.
    pub grid_n: usize,
    /// Subcubes per axis for the mass and energy measures.
    pub subdivisions: usize,
    /// Relative tolerance of the final local descent.
    pub polish_tol: f64,
}

impl Default for AnalysisParams {
    fn default() -> Self {
        AnalysisParams {
            grid_n: 64,
            subdivisions: 2,
            polish_tol: 1e-10,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    lambda: f64,
    epsilons: Vec<f64>,
    seed: Option<u64>,
    lattice: Option<Lattice>,
    output_dir: Option<PathBuf>,
    schedule_file: Option<PathBuf>,
    droplet_mass: Option<f64>,
    chains: Option<usize>,
    kernel: Option<KernelParams>,
    schedule: Option<AnnealSchedule>,
    analysis: Option<AnalysisParams>,
}

/// Fully resolved experiment description. Paths are absolute or relative to
/// the working directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub lambda: f64,
    /// Strictly decreasing, each in `(0, λ^{-3/2})`.
    pub epsilons: Vec<f64>,
    /// Root of every random stream in the sweep.
    pub seed: u64,
    pub lattice: Lattice,
    pub output_dir: PathBuf,
    pub schedule_file: Option<PathBuf>,
    /// Target mass of the initial lattice droplets.
    pub droplet_mass: f64,
    /// Independent annealing chains per ε; the lowest energy wins.
    pub chains: usize,
    pub kernel: KernelParams,
    /// Annealing schedule; its `seed` is replaced by per-row derived seeds.
    pub schedule: AnnealSchedule,
    pub analysis: AnalysisParams,
}

impl ExperimentConfig {
    /// Defaults for everything except the physical parameters.
    pub fn new(lambda: f64, epsilons: Vec<f64>) -> Self {
        ExperimentConfig {
            lambda,
            epsilons,
            seed: DEFAULT_SEED,
            lattice: Lattice::Bcc,
            output_dir: PathBuf::from(DEFAULT_OUTPUT_DIR),
            schedule_file: None,
            droplet_mass: m_star_closed_form(),
            chains: 1,
            kernel: KernelParams::default(),
            schedule: AnnealSchedule::default(),
            analysis: AnalysisParams::default(),
        }
    }

    /// Checks every invariant that can be checked without touching the
    /// file system.
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(HarnessError::validation(format!(
                "lambda must be positive and finite, got {}",
                self.lambda
            )));
        }
        if self.epsilons.is_empty() {
            return Err(HarnessError::validation("epsilons must not be empty"));
        }
        let bound = self.lambda.powf(-1.5);
        for &eps in &self.epsilons {
            if !(eps > 0.0 && eps < bound) {
                return Err(HarnessError::validation(format!(
                    "epsilon {eps:e} violates the admissibility bound 0 < ε < λ^(-3/2) = {bound:e}"
                )));
            }
        }
        if let Some(w) = self.epsilons.windows(2).find(|w| w[1] >= w[0]) {
            return Err(HarnessError::validation(format!(
                "epsilons must be strictly decreasing, found {:e} followed by {:e}",
                w[0], w[1]
            )));
        }
        if !(self.droplet_mass > 0.0 && self.droplet_mass.is_finite()) {
            return Err(HarnessError::validation(format!(
                "droplet_mass must be positive, got {}",
                self.droplet_mass
            )));
        }
        if self.chains == 0 {
            return Err(HarnessError::validation("chains must be at least 1"));
        }
        let a = &self.analysis;
        if !(8..=256).contains(&a.grid_n) {
            return Err(HarnessError::validation(format!(
                "analysis.grid_n must lie in [8, 256], got {}",
                a.grid_n
            )));
        }
        if !(2..=16).contains(&a.subdivisions) {
            return Err(HarnessError::validation(format!(
                "analysis.subdivisions must lie in [2, 16], got {}",
                a.subdivisions
            )));
        }
        if !(a.polish_tol > 0.0 && a.polish_tol.is_finite()) {
            return Err(HarnessError::validation(format!(
                "analysis.polish_tol must be positive, got {}",
                a.polish_tol
            )));
        }
        EwaldKernel::new(1.0, self.kernel).map_err(|e| HarnessError::validation(format!("kernel: {e}")))?;
        self.schedule
            .validate()
            .map_err(|e| HarnessError::validation(format!("schedule: {e}")))?;
        Ok(())
    }

    /// Creates the output directory if needed and checks that it accepts
    /// files.
    pub fn ensure_output_dir(&self) -> Result<()> {
        let dir = &self.output_dir;
        fs::create_dir_all(dir).map_err(|e| {
            HarnessError::validation(format!("output directory {} is not writable: {e}", dir.display()))
        })?;
        let probe = dir.join(".okdrop-write-probe");
        fs::write(&probe, b"").map_err(|e| {
            HarnessError::validation(format!("output directory {} is not writable: {e}", dir.display()))
        })?;
        let _ = fs::remove_file(&probe);
        Ok(())
    }
}

/// Reads, resolves and validates an experiment file. Relative paths inside
/// the file are taken relative to the file's directory.
pub fn validate_config_file(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let cfg = parse_config(&text, &path.display().to_string(), base)?;
    cfg.ensure_output_dir()?;
    Ok(cfg)
}

/// Parses and validates a config document without touching the output
/// directory. `origin` labels error messages.
pub fn parse_config(text: &str, origin: &str, base: &Path) -> Result<ExperimentConfig> {
    let raw: RawConfig = toml::from_str(text).map_err(|e| parse_error(&e, text, origin))?;
    let mut cfg = ExperimentConfig::new(raw.lambda, raw.epsilons);
    if let Some(seed) = raw.seed {
        cfg.seed = seed;
    }
    if let Some(lattice) = raw.lattice {
        cfg.lattice = lattice;
    }
    cfg.output_dir = resolve(base, raw.output_dir.unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_DIR)));
    if let Some(m) = raw.droplet_mass {
        cfg.droplet_mass = m;
    }
    if let Some(c) = raw.chains {
        cfg.chains = c;
    }
    if let Some(k) = raw.kernel {
        cfg.kernel = k;
    }
    if let Some(a) = raw.analysis {
        cfg.analysis = a;
    }
    match (raw.schedule_file, raw.schedule) {
        (Some(_), Some(_)) => {
            return Err(HarnessError::validation(
                "schedule_file and an inline [schedule] section are mutually exclusive",
            ))
        }
        (Some(file), None) => {
            let file = resolve(base, file);
            cfg.schedule = read_schedule(&file)?;
            cfg.schedule_file = Some(file);
        }
        (None, Some(s)) => cfg.schedule = s,
        (None, None) => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Reads a stand-alone schedule document.
pub fn read_schedule(path: &Path) -> Result<AnnealSchedule> {
    let text = fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    let schedule: AnnealSchedule =
        toml::from_str(&text).map_err(|e| parse_error(&e, &text, &path.display().to_string()))?;
    schedule
        .validate()
        .map_err(|e| HarnessError::validation(format!("schedule: {e}")))?;
    Ok(schedule)
}

fn resolve(base: &Path, p: PathBuf) -> PathBuf {
    if p.is_absolute() {
        p
    } else {
        base.join(p)
    }
}

fn parse_error(err: &toml::de::Error, text: &str, origin: &str) -> HarnessError {
    let offset = err.span().map(|s| s.start).unwrap_or(0).min(text.len());
    let before = &text[..offset];
    let line = before.matches('\n').count() + 1;
    let column = before.rsplit('\n').next().map(|l| l.chars().count()).unwrap_or(0) + 1;
    let mut message = err.message().trim().to_string();
    if let Some(hint) = suggestion(&message) {
        message.push_str(&format!("; did you mean `{hint}`?"));
    }
    HarnessError::Parse {
        path: origin.to_string(),
        line,
        column,
        message,
    }
}

/// Closest expected key for an "unknown field" message.
fn suggestion(message: &str) -> Option<String> {
    let rest = message.strip_prefix("unknown field `")?;
    let (unknown, rest) = rest.split_once('`')?;
    let expected = rest.split_once("expected")?.1;
    expected
        .split('`')
        .skip(1)
        .step_by(2)
        .map(|cand| (strsim::levenshtein(unknown, cand), cand))
        .filter(|(d, cand)| *d <= 3.max(cand.len() / 3))
        .min()
        .map(|(_, cand)| cand.to_string())
}
