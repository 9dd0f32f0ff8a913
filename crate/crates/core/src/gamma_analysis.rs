//! Limit energy, recovery sequences and droplet statistics along ε-sweeps.
//!
//! Limit measures live on the unit torus. Droplet configurations are built
//! in the rescaled frame of side `ℓ = ε^{-1/3}`, where a measure `μ` with
//! `μ(T) = λ` corresponds to a droplet mass budget `λℓ`.

use std::f64::consts::PI;

use rustfft::num_complex::Complex64;
use rustfft::FftDirection;
use serde::{Deserialize, Serialize};

use crate::geometry::{ball_radius, min_image, norm, sub, Point};
use crate::kernel::EwaldKernel;
use crate::spectral::{fft3, signed_index};
use crate::torus_energy::{balance_masses, Droplet, DropletConfig, TorusSpec};
use crate::{Error, Result, BALL_ANSATZ};

/// A nonnegative measure on the unit torus with total mass `λ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LimitMeasure {
    /// Cell values on an `n³` grid, index `((i·n)+j)·n+k` for the cell
    /// `[i/n, (i+1)/n) × …`. The mass of a cell is its value times `n⁻³`.
    Density { n: usize, values: Vec<f64> },
    Atomic { atoms: Vec<(Point, f64)> },
}

impl LimitMeasure {
    pub fn uniform(lambda: f64, n: usize) -> Result<Self> {
        Self::density(n, vec![lambda; n * n * n])
    }

    pub fn density(n: usize, values: Vec<f64>) -> Result<Self> {
        if n == 0 || values.len() != n * n * n {
            return Err(Error::param(format!(
                "density needs n³ = {} values, got {}",
                n * n * n,
                values.len()
            )));
        }
        if values.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::param("density values must be finite and nonnegative"));
        }
        if values.iter().sum::<f64>() <= 0.0 {
            return Err(Error::param("density must have positive mass"));
        }
        Ok(LimitMeasure::Density { n, values })
    }

    /// Density sampled at cell midpoints.
    pub fn from_fn<F: Fn(Point) -> f64>(n: usize, f: F) -> Result<Self> {
        let h = 1.0 / n as f64;
        let mut values = Vec::with_capacity(n * n * n);
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    values.push(f([(i as f64 + 0.5) * h, (j as f64 + 0.5) * h, (k as f64 + 0.5) * h]));
                }
            }
        }
        Self::density(n, values)
    }

    pub fn atomic(atoms: Vec<(Point, f64)>) -> Result<Self> {
        if atoms.is_empty() || atoms.iter().any(|a| !(a.1 >= 0.0 && a.1.is_finite())) {
            return Err(Error::param("atomic measure needs nonnegative finite weights"));
        }
        Ok(LimitMeasure::Atomic { atoms })
    }

    /// `λ = μ(T)`.
    pub fn total_mass(&self) -> f64 {
        match self {
            // offsets from the first value keep the mean of a constant exact
            LimitMeasure::Density { n, values } => {
                let v0 = values[0];
                v0 + values.iter().map(|v| v - v0).sum::<f64>() / (n * n * n) as f64
            }
            LimitMeasure::Atomic { atoms } => atoms.iter().map(|a| a.1).sum(),
        }
    }

    /// Mass of the box `[lo, hi)` inside the unit cell.
    pub fn mass_in_box(&self, lo: Point, hi: Point) -> f64 {
        match self {
            LimitMeasure::Density { n, values } => {
                let n = *n;
                let h = 1.0 / n as f64;
                let overlaps: Vec<Vec<(usize, f64)>> = (0..3)
                    .map(|a| {
                        (0..n)
                            .filter_map(|p| {
                                let w = (hi[a].min((p + 1) as f64 * h) - lo[a].max(p as f64 * h)).max(0.0);
                                (w > 0.0).then_some((p, w))
                            })
                            .collect()
                    })
                    .collect();
                let mut m = 0.0;
                for &(i, wx) in &overlaps[0] {
                    for &(j, wy) in &overlaps[1] {
                        for &(k, wz) in &overlaps[2] {
                            m += values[(i * n + j) * n + k] * wx * wy * wz;
                        }
                    }
                }
                m
            }
            LimitMeasure::Atomic { atoms } => atoms
                .iter()
                .filter(|(p, _)| (0..3).all(|a| p[a] >= lo[a] && p[a] < hi[a]))
                .map(|a| a.1)
                .sum(),
        }
    }
}

fn check_unit_kernel(kernel: &EwaldKernel) -> Result<()> {
    if (kernel.side_length() - 1.0).abs() > 1e-12 {
        return Err(Error::SideMismatch {
            kernel: kernel.side_length(),
            config: 1.0,
        });
    }
    Ok(())
}

/// `½∬G dμ dμ` for a density, from its discrete Fourier coefficients
/// against `1/(4π²|k|²)`.
pub fn coulomb_quadratic(mu: &LimitMeasure) -> Result<f64> {
    let LimitMeasure::Density { n, values } = mu else {
        return Err(Error::InfiniteSelfEnergy);
    };
    let n = *n;
    let cells = (n * n * n) as f64;
    let mut data: Vec<Complex64> = values.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft3(&mut data, n, FftDirection::Forward);
    let mut e = 0.0;
    for i in 0..n {
        let kx = signed_index(i, n) as f64;
        for j in 0..n {
            let ky = signed_index(j, n) as f64;
            for k in 0..n {
                if i == 0 && j == 0 && k == 0 {
                    continue;
                }
                let kz = signed_index(k, n) as f64;
                let c = data[(i * n + j) * n + k] / cells;
                e += c.norm_sqr() / (4.0 * PI * PI * (kx * kx + ky * ky + kz * kz));
            }
        }
    }
    Ok(0.5 * e)
}

/// Limit energy `E₀(μ) = λf* + ½∬G dμ dμ`. Atomic measures have no finite
/// Coulomb energy and are refused.
pub fn e0_energy(mu: &LimitMeasure, kernel: &EwaldKernel, f_star: f64) -> Result<f64> {
    check_unit_kernel(kernel)?;
    if let LimitMeasure::Atomic { atoms } = mu {
        if atoms.iter().any(|a| a.1 > 0.0) {
            return Err(Error::InfiniteSelfEnergy);
        }
        return Ok(0.0);
    }
    Ok(mu.total_mass() * f_star + coulomb_quadratic(mu)?)
}

/// `(E₀(μ₁) + E₀(μ₂))/2 − E₀((μ₁+μ₂)/2)`, which for the quadratic form
/// equals a quarter of the Coulomb energy of `μ₁ − μ₂`.
pub fn convexity_margin(mu1: &LimitMeasure, mu2: &LimitMeasure) -> Result<f64> {
    match (mu1, mu2) {
        (LimitMeasure::Density { n: n1, values: v1 }, LimitMeasure::Density { n: n2, values: v2 }) if n1 == n2 => {
            let diff: Vec<f64> = v1.iter().zip(v2).map(|(a, b)| a - b).collect();
            // the difference may be signed; bypass the nonnegativity check
            Ok(0.25 * coulomb_quadratic(&LimitMeasure::Density { n: *n1, values: diff })?)
        }
        (LimitMeasure::Density { .. }, LimitMeasure::Density { .. }) => {
            Err(Error::param("densities must share a grid"))
        }
        _ => Err(Error::InfiniteSelfEnergy),
    }
}

/// Spacing window `[K, K']·ε^{1/9}` of the recovery construction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpacingBounds {
    pub k: f64,
    pub k_prime: f64,
}

impl SpacingBounds {
    /// `K = 0.8·(m*/λ)^{1/3}`, `K' = 1.5·K`.
    pub fn default_for(m_star: f64, lambda: f64) -> Self {
        let k = 0.8 * (m_star / lambda).cbrt();
        SpacingBounds { k, k_prime: 1.5 * k }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RecoveryOptions {
    /// Side of the partition cubes on the unit torus; `ε^{1/27}` if unset.
    /// The partition uses `⌈1/δ⌉` cubes per side.
    pub delta: Option<f64>,
    pub spacing: Option<SpacingBounds>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Recovery {
    pub config: DropletConfig,
    /// Cubes per side of the partition.
    pub cubes_per_side: usize,
    /// Droplet count per cube, index `((i·c)+j)·c+k`.
    pub counts: Vec<usize>,
    /// Unit-frame cube masses `μ(Q_i)`.
    pub cube_masses: Vec<f64>,
    /// Smallest center distance in the ε-frame.
    pub min_spacing: f64,
    pub spacing: SpacingBounds,
}

/// Sites of the smallest SC, BCC or FCC sub-lattice of a cube with at least
/// `count` points, offset so adjacent cubes continue the lattice. Equal
/// site counts prefer BCC, then FCC.
fn cube_sites(count: usize, lo: Point, side: f64) -> Vec<Point> {
    const BCC: &[[f64; 3]] = &[[0.25, 0.25, 0.25], [0.75, 0.75, 0.75]];
    const FCC: &[[f64; 3]] = &[[0.25, 0.25, 0.25], [0.75, 0.75, 0.25], [0.75, 0.25, 0.75], [0.25, 0.75, 0.75]];
    const SC: &[[f64; 3]] = &[[0.5, 0.5, 0.5]];
    let mut best: Option<(usize, usize, &[[f64; 3]])> = None;
    for n in 1usize.. {
        for basis in [BCC, FCC, SC] {
            let sites = basis.len() * n.pow(3);
            if sites >= count && best.is_none_or(|b| sites < b.0) {
                best = Some((sites, n, basis));
            }
        }
        if n.pow(3) >= count {
            break;
        }
    }
    let (_, n, basis) = best.unwrap_or((1, 1, SC));
    let a = side / n as f64;
    let mut out = Vec::new();
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                for b in basis {
                    out.push([
                        lo[0] + (i as f64 + b[0]) * a,
                        lo[1] + (j as f64 + b[1]) * a,
                        lo[2] + (k as f64 + b[2]) * a,
                    ]);
                }
            }
        }
    }
    out
}

/// Explicit upper-bound construction for a density `μ`: `N_i = ⌈μ(Q_i)ℓ/m*⌉`
/// droplets per cube, equal masses `μ(Q_i)ℓ/N_i` inside each cube, placed
/// on a cubic sub-lattice by greedy farthest-point selection.
pub fn recovery_sequence(
    mu: &LimitMeasure,
    epsilon: f64,
    m_star: f64,
    options: &RecoveryOptions,
) -> Result<Recovery> {
    let LimitMeasure::Density { values, .. } = mu else {
        return Err(Error::param("the recovery construction needs a density"));
    };
    if values.iter().any(|&v| v <= 0.0) {
        return Err(Error::param("density must be bounded away from zero"));
    }
    if !(m_star > 0.0 && m_star.is_finite()) {
        return Err(Error::param(format!("m* must be positive, got {m_star}")));
    }
    let lambda = mu.total_mass();
    let spec = TorusSpec::new(epsilon, lambda)?;
    let ell = spec.side_length();
    let delta = options.delta.unwrap_or(epsilon.powf(1.0 / 27.0));
    if !(delta > 0.0 && delta <= 1.0) {
        return Err(Error::param(format!("cube side δ must lie in (0, 1], got {delta}")));
    }
    let c = (1.0 / delta - 1e-9).ceil().max(1.0) as usize;
    let spacing = options.spacing.unwrap_or_else(|| SpacingBounds::default_for(m_star, lambda));
    let cube = 1.0 / c as f64;

    let mut counts = Vec::with_capacity(c * c * c);
    let mut cube_masses = Vec::with_capacity(c * c * c);
    let mut droplets: Vec<Droplet> = Vec::new();
    for i in 0..c {
        for j in 0..c {
            for k in 0..c {
                let lo = [i as f64 * cube, j as f64 * cube, k as f64 * cube];
                let hi = [lo[0] + cube, lo[1] + cube, lo[2] + cube];
                let mass = mu.mass_in_box(lo, hi);
                let count = ((mass * ell / m_star) * (1.0 - 1e-12)).ceil().max(1.0) as usize;
                let sites = cube_sites(count, [lo[0] * ell, lo[1] * ell, lo[2] * ell], cube * ell);
                let chosen = farthest_points(&sites, count, &droplets, ell);
                let m = mass * ell / count as f64;
                droplets.extend(chosen.into_iter().map(|center| Droplet { center, mass: m }));
                counts.push(count);
                cube_masses.push(mass);
            }
        }
    }
    let mut masses: Vec<f64> = droplets.iter().map(|d| d.mass).collect();
    balance_masses(&mut masses, spec.mass_budget());
    for (d, m) in droplets.iter_mut().zip(masses) {
        d.mass = m;
    }

    let min_rescaled = min_distance(&droplets, ell);
    let min_spacing = min_rescaled / ell;
    let scale = epsilon.powf(1.0 / 9.0);
    let (lo, hi) = (spacing.k * scale, spacing.k_prime * scale);
    if droplets.len() > 1 && !(min_spacing >= lo && min_spacing <= hi) {
        return Err(Error::Infeasible(format!(
            "minimal droplet spacing {min_spacing:.6} outside [{lo:.6}, {hi:.6}] \
             (K = {:.4}, K' = {:.4}, ε = {epsilon:e}, {c}³ cubes, {} droplets)",
            spacing.k,
            spacing.k_prime,
            droplets.len()
        )));
    }
    let config = DropletConfig::new(spec, droplets)?;
    Ok(Recovery {
        config,
        cubes_per_side: c,
        counts,
        cube_masses,
        min_spacing,
        spacing,
    })
}

fn min_distance(droplets: &[Droplet], side: f64) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..droplets.len() {
        for j in i + 1..droplets.len() {
            best = best.min(norm(min_image(sub(droplets[i].center, droplets[j].center), side)));
        }
    }
    best
}

/// Picks `count` sites, each maximizing its distance to everything chosen
/// so far (including droplets already placed elsewhere). Ties go to the
/// lowest site index.
fn farthest_points(sites: &[Point], count: usize, placed: &[Droplet], side: f64) -> Vec<Point> {
    if count >= sites.len() {
        return sites.to_vec();
    }
    let mut dist: Vec<f64> = sites
        .iter()
        .map(|s| {
            placed
                .iter()
                .map(|d| norm(min_image(sub(*s, d.center), side)))
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    let mut taken = vec![false; sites.len()];
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut pick = None;
        for (i, &d) in dist.iter().enumerate() {
            if !taken[i] && pick.is_none_or(|p: usize| d > dist[p]) {
                pick = Some(i);
            }
        }
        let p = pick.expect("fewer sites than requested");
        taken[p] = true;
        out.push(sites[p]);
        for (i, s) in sites.iter().enumerate() {
            dist[i] = dist[i].min(norm(min_image(sub(*s, sites[p]), side)));
        }
    }
    out
}

/// One ε of a sweep. Lengths are in the ε-frame (unit torus).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub epsilon: f64,
    pub n_droplets: usize,
    pub scaled_total: f64,
    pub sup_v: f64,
    pub min_v: f64,
    pub masses: Vec<f64>,
    /// `2·max r_i` in the ε-frame.
    pub diameter_proxy: f64,
    /// Largest `|μ_ε(Q) − λ|Q||/(λ|Q|)` over the subcubes.
    pub mass_deviation: f64,
    /// Largest `|ν_ε(Q) − λf*|Q||/(λf*|Q|)` over the subcubes.
    pub energy_deviation: f64,
    /// File name of the stored configuration, if any.
    #[serde(default)]
    pub config_file: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub lambda: f64,
    #[serde(default)]
    pub manifest_hash: Option<String>,
    pub rows: Vec<SweepRow>,
}

impl SweepRecord {
    /// Sorts rows by decreasing ε.
    pub fn sort(&mut self) {
        self.rows.sort_by(|a, b| b.epsilon.total_cmp(&a.epsilon));
    }

    pub fn is_sorted(&self) -> bool {
        self.rows.windows(2).all(|w| w[0].epsilon > w[1].epsilon)
    }
}

/// Diameter proxy of a configuration: `2·max r_i` mapped to the ε-frame.
pub fn diameter_proxy(config: &DropletConfig) -> f64 {
    let r = config.droplets().iter().map(|d| d.radius()).fold(0.0, f64::max);
    2.0 * r / config.side_length()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatisticsRow {
    pub epsilon: f64,
    pub n_droplets: usize,
    /// Fraction of droplets with `|m − m*|/m* < 0.1`.
    pub near_optimal_fraction: f64,
    pub gap: f64,
    pub relative_gap: f64,
    pub sup_v: f64,
    pub mass_deviation: f64,
    pub energy_deviation: f64,
    /// Diameter proxy over `ε^{1/3}`.
    pub diameter_ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DropletStatistics {
    pub ansatz: String,
    pub lambda: f64,
    pub m_star: f64,
    pub f_star: f64,
    /// Least-squares slope of `log N_ε` against `log ε`.
    pub count_slope: f64,
    pub count_intercept: f64,
    pub rows: Vec<StatisticsRow>,
    /// Relative gap positive in every row.
    pub gap_positive: bool,
    /// Relative gap non-increasing as ε decreases.
    pub gap_non_increasing: bool,
    pub mass_deviation_decreasing: bool,
    pub energy_deviation_decreasing: bool,
    /// No row exceeds the largest `sup|v|` of the rows before it, i.e. the
    /// running envelope never rises after the first ε.
    pub sup_v_envelope_non_increasing: bool,
    pub max_diameter_ratio: f64,
}

fn strictly_decreasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] < w[0])
}

/// Summary statistics of a sweep. Needs at least three ε values spanning at
/// least two decades.
pub fn droplet_statistics(sweep: &SweepRecord, m_star: f64, f_star: f64) -> Result<DropletStatistics> {
    let mut rows = sweep.rows.clone();
    rows.sort_by(|a, b| b.epsilon.total_cmp(&a.epsilon));
    if rows.len() < 3 {
        return Err(Error::InsufficientSweep(format!(
            "need at least 3 ε values, got {}",
            rows.len()
        )));
    }
    let span = (rows[0].epsilon / rows[rows.len() - 1].epsilon).log10();
    if span < 2.0 - 1e-9 {
        return Err(Error::InsufficientSweep(format!(
            "ε values span {span:.3} decades, need at least 2"
        )));
    }
    if rows.windows(2).any(|w| w[0].epsilon == w[1].epsilon) {
        return Err(Error::InsufficientSweep("duplicate ε values".into()));
    }
    let lambda = sweep.lambda;
    let target = lambda * f_star;

    let xs: Vec<f64> = rows.iter().map(|r| r.epsilon.ln()).collect();
    let ys: Vec<f64> = rows.iter().map(|r| (r.n_droplets as f64).ln()).collect();
    let (count_slope, count_intercept) = least_squares(&xs, &ys);

    let stats: Vec<StatisticsRow> = rows
        .iter()
        .map(|r| {
            let near = r.masses.iter().filter(|&&m| ((m - m_star) / m_star).abs() < 0.1).count();
            StatisticsRow {
                epsilon: r.epsilon,
                n_droplets: r.n_droplets,
                near_optimal_fraction: if r.masses.is_empty() {
                    0.0
                } else {
                    near as f64 / r.masses.len() as f64
                },
                gap: r.scaled_total - target,
                relative_gap: (r.scaled_total - target) / target,
                sup_v: r.sup_v,
                mass_deviation: r.mass_deviation,
                energy_deviation: r.energy_deviation,
                diameter_ratio: r.diameter_proxy / r.epsilon.cbrt(),
            }
        })
        .collect();

    let gaps: Vec<f64> = stats.iter().map(|s| s.relative_gap).collect();
    let mass_dev: Vec<f64> = stats.iter().map(|s| s.mass_deviation).collect();
    let energy_dev: Vec<f64> = stats.iter().map(|s| s.energy_deviation).collect();
    let mut envelope = f64::MIN;
    let mut sup_ok = true;
    for (i, s) in stats.iter().enumerate() {
        if i > 0 && s.sup_v > envelope {
            sup_ok = false;
        }
        envelope = envelope.max(s.sup_v);
    }
    Ok(DropletStatistics {
        ansatz: BALL_ANSATZ.to_string(),
        lambda,
        m_star,
        f_star,
        count_slope,
        count_intercept,
        gap_positive: gaps.iter().all(|&g| g > 0.0),
        gap_non_increasing: gaps.windows(2).all(|w| w[1] <= w[0]),
        mass_deviation_decreasing: strictly_decreasing(&mass_dev),
        energy_deviation_decreasing: strictly_decreasing(&energy_dev),
        sup_v_envelope_non_increasing: sup_ok,
        max_diameter_ratio: stats.iter().map(|s| s.diameter_ratio).fold(0.0, f64::max),
        rows: stats,
    })
}

/// Ordinary least squares `y ≈ slope·x + intercept`.
pub fn least_squares(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

/// Heuristic per-droplet magnitudes `(εR², R⁵, R⁶/d³)` in the ε-frame, with
/// `R = ε^{1/3}(3m/4π)^{1/3}` the radius of a rescaled mass-`m` droplet and
/// `d` the lattice spacing.
pub fn scaling_balance(epsilon: f64, m: f64, lattice_spacing: f64) -> (f64, f64, f64) {
    let r = epsilon.cbrt() * ball_radius(m);
    (epsilon * r * r, r.powi(5), r.powi(6) / lattice_spacing.powi(3))
}
