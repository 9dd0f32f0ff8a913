use okdrop_core::kernel::KernelParams;
use okdrop_core::minimizer::{derive_seed, AnnealSchedule, Lattice};
use okdrop_core::BALL_ANSATZ;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{AnalysisParams, ExperimentConfig};

pub const MANIFEST_FORMAT: &str = "okdrop-manifest-v1";

/// Everything that determines the numbers of a sweep. Output locations,
/// timestamps and thread counts are deliberately absent so that the hash
/// identifies the computation, not the run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub code_version: String,
    pub ansatz: String,
    pub lambda: f64,
    pub epsilons: Vec<f64>,
    pub root_seed: u64,
    /// Seed of row `i`; chain `c` of that row uses `derive_seed(row_seed, c)`.
    pub row_seeds: Vec<u64>,
    pub chains: usize,
    pub lattice: Lattice,
    pub droplet_mass: f64,
    pub kernel: KernelParams,
    pub schedule: AnnealSchedule,
    pub analysis: AnalysisParams,
}

impl Manifest {
    pub fn from_config(cfg: &ExperimentConfig) -> Self {
        Manifest {
            format: MANIFEST_FORMAT.to_string(),
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            ansatz: BALL_ANSATZ.to_string(),
            lambda: cfg.lambda,
            epsilons: cfg.epsilons.clone(),
            root_seed: cfg.seed,
            row_seeds: (0..cfg.epsilons.len() as u64).map(|i| derive_seed(cfg.seed, i)).collect(),
            chains: cfg.chains,
            lattice: cfg.lattice,
            droplet_mass: cfg.droplet_mass,
            kernel: cfg.kernel,
            schedule: cfg.schedule.clone(),
            analysis: cfg.analysis.clone(),
        }
    }

    /// Seed of chain `chain` in row `row`.
    pub fn chain_seed(&self, row: usize, chain: usize) -> u64 {
        derive_seed(self.row_seeds[row], chain as u64)
    }

    /// Lower-case hex SHA-256 of the compact JSON encoding.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("manifest serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}
