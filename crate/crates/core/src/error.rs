use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// The Green's function diverges at lattice points.
    #[error("kernel singularity: G is not defined at lattice point (|x| = {distance:e})")]
    Singular { distance: f64 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("droplets {i} and {j} overlap: distance {distance} < {min_distance}")]
    Overlap {
        i: usize,
        j: usize,
        distance: f64,
        min_distance: f64,
    },

    #[error("infeasible configuration: {0}")]
    Infeasible(String),

    #[error("kernel side length {kernel} does not match configuration side length {config}")]
    SideMismatch { kernel: f64, config: f64 },

    /// Atomic measures are not in the dual of H¹ (finite Coulomb energy).
    #[error("infinite Coulomb self-energy: atomic measures have no finite Coulomb energy")]
    InfiniteSelfEnergy,

    #[error("insufficient sweep: {0}")]
    InsufficientSweep(String),

    #[error("convergence failure: {0}")]
    Convergence(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }
}
