//! Energy, potential and coarse-grained measures of ball unions on the torus.
//!
//! Everything is computed in the rescaled frame: the torus has side
//! `ℓ = ε^{-1/3}`, droplets carry total volume `λℓ`, and the energy is
//!
//! ```text
//! Ẽ_ℓ(ũ) = Per(ũ) + ½∬ G_ℓ(x − y) (ũ(x) − ū)(ũ(y) − ū) dx dy,
//! ```
//!
//! with `ε^{-4/3} E_ε = ε^{1/3} Ẽ_ℓ`. Because `G_ℓ` has zero mean the
//! background drops out of the double integral.
//!
//! For non-overlapping balls the Coulomb term is evaluated exactly: the
//! Newtonian part by Newton's theorem and the regular part `R` by the mean
//! value property, using `ΔR = 1/ℓ³` away from the lattice.

use std::f64::consts::PI;

use rustfft::num_complex::Complex64;
use rustfft::FftDirection;
use serde::{Deserialize, Serialize};

use crate::geometry::{ball_radius, into_cell, min_image, norm, sub, Point};
use crate::kernel::{ball_form_factor, EwaldKernel};
use crate::overlap::{ball_box_integrals, box_contains_ball, box_misses_ball, sphere_box_area};
use crate::quadrature::{ball_pair_average, ball_self_average, BALL_AVERAGE_NODES};
use crate::spectral::{fft3, signed_index};
use crate::{Error, Result};

/// Version tag of the droplet configuration JSON document.
pub const CONFIG_FORMAT_VERSION: u32 = 1;

/// Relative tolerance on the mass constraint when validating documents.
const MASS_TOLERANCE: f64 = 1e-12;

/// A scaled problem instance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TorusSpec {
    pub epsilon: f64,
    pub lambda: f64,
}

impl TorusSpec {
    /// Requires `0 < ε < λ^{-3/2}`.
    pub fn new(epsilon: f64, lambda: f64) -> Result<Self> {
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::param(format!("lambda must be positive, got {lambda}")));
        }
        let bound = lambda.powf(-1.5);
        if !(epsilon > 0.0 && epsilon < bound) {
            return Err(Error::param(format!(
                "epsilon = {epsilon} violates the admissibility bound 0 < epsilon < lambda^(-3/2) = {bound}"
            )));
        }
        Ok(TorusSpec { epsilon, lambda })
    }

    /// Instance whose rescaled torus has the given side, `ε = ℓ^{-3}`.
    pub fn from_side(side_length: f64, lambda: f64) -> Result<Self> {
        if !(side_length > 0.0 && side_length.is_finite()) {
            return Err(Error::param("side length must be positive"));
        }
        Self::new(side_length.powi(-3), lambda)
    }

    /// `ℓ = ε^{-1/3}`.
    pub fn side_length(&self) -> f64 {
        1.0 / self.epsilon.cbrt()
    }

    pub fn volume(&self) -> f64 {
        self.side_length().powi(3)
    }

    /// Total droplet volume `λℓ` in the rescaled frame.
    pub fn mass_budget(&self) -> f64 {
        self.lambda * self.side_length()
    }

    /// Uniform background density `λℓ/ℓ³ = λε^{2/3}`.
    pub fn background_density(&self) -> f64 {
        self.mass_budget() / self.volume()
    }
}

/// One droplet: a uniform ball, center in the rescaled frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Droplet {
    pub center: Point,
    pub mass: f64,
}

impl Droplet {
    pub fn radius(&self) -> f64 {
        ball_radius(self.mass)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigDocument {
    version: u32,
    epsilon: f64,
    lambda: f64,
    droplets: Vec<Droplet>,
}

/// Ball-union configuration on the torus of side `ℓ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ConfigDocument", into = "ConfigDocument")]
pub struct DropletConfig {
    spec: TorusSpec,
    droplets: Vec<Droplet>,
}

impl TryFrom<ConfigDocument> for DropletConfig {
    type Error = Error;

    fn try_from(doc: ConfigDocument) -> Result<Self> {
        if doc.version != CONFIG_FORMAT_VERSION {
            return Err(Error::param(format!(
                "unsupported configuration version {} (expected {CONFIG_FORMAT_VERSION})",
                doc.version
            )));
        }
        DropletConfig::new(TorusSpec::new(doc.epsilon, doc.lambda)?, doc.droplets)
    }
}

impl From<DropletConfig> for ConfigDocument {
    fn from(c: DropletConfig) -> Self {
        ConfigDocument {
            version: CONFIG_FORMAT_VERSION,
            epsilon: c.spec.epsilon,
            lambda: c.spec.lambda,
            droplets: c.droplets,
        }
    }
}

/// Adjusts the last entry so that the left-to-right sum equals `budget`
/// exactly.
pub fn balance_masses(masses: &mut [f64], budget: f64) {
    let Some(last) = masses.len().checked_sub(1) else {
        return;
    };
    let rest: f64 = masses[..last].iter().sum();
    masses[last] = budget - rest;
    for _ in 0..16 {
        let s: f64 = masses.iter().sum();
        if s == budget {
            return;
        }
        masses[last] = if s < budget {
            masses[last].next_up()
        } else {
            masses[last].next_down()
        };
    }
}

impl DropletConfig {
    /// Validates non-overlap, the radius bound `r < ℓ/4` and the mass
    /// constraint. Centers are wrapped into `[0, ℓ)³`.
    pub fn new(spec: TorusSpec, droplets: Vec<Droplet>) -> Result<Self> {
        let side = spec.side_length();
        if droplets.is_empty() {
            return Err(Error::param("a configuration needs at least one droplet"));
        }
        let mut out = Vec::with_capacity(droplets.len());
        for d in &droplets {
            if !(d.mass > 0.0 && d.mass.is_finite()) {
                return Err(Error::param(format!("droplet mass must be positive, got {}", d.mass)));
            }
            if d.center.iter().any(|c| !c.is_finite()) {
                return Err(Error::param("droplet center must be finite"));
            }
            if d.radius() >= 0.25 * side {
                return Err(Error::Infeasible(format!(
                    "droplet radius {} is not below a quarter of the side {side}",
                    d.radius()
                )));
            }
            out.push(Droplet {
                center: into_cell(d.center, side),
                mass: d.mass,
            });
        }
        let total: f64 = out.iter().map(|d| d.mass).sum();
        let budget = spec.mass_budget();
        if (total - budget).abs() > MASS_TOLERANCE * budget {
            return Err(Error::Infeasible(format!(
                "droplet masses sum to {total}, mass budget is {budget}"
            )));
        }
        let config = DropletConfig { spec, droplets: out };
        config.check_overlap()?;
        Ok(config)
    }

    fn check_overlap(&self) -> Result<()> {
        let side = self.side_length();
        for i in 0..self.droplets.len() {
            for j in i + 1..self.droplets.len() {
                let d = norm(min_image(sub(self.droplets[i].center, self.droplets[j].center), side));
                let min = self.droplets[i].radius() + self.droplets[j].radius();
                if d < min {
                    return Err(Error::Overlap {
                        i,
                        j,
                        distance: d,
                        min_distance: min,
                    });
                }
            }
        }
        Ok(())
    }

    pub fn spec(&self) -> &TorusSpec {
        &self.spec
    }

    pub fn droplets(&self) -> &[Droplet] {
        &self.droplets
    }

    pub fn len(&self) -> usize {
        self.droplets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.droplets.is_empty()
    }

    pub fn side_length(&self) -> f64 {
        self.spec.side_length()
    }

    pub fn total_mass(&self) -> f64 {
        self.droplets.iter().map(|d| d.mass).sum()
    }

    pub fn masses(&self) -> Vec<f64> {
        self.droplets.iter().map(|d| d.mass).collect()
    }

    /// Smallest minimum-image center distance, `None` for one droplet.
    pub fn min_center_distance(&self) -> Option<f64> {
        let side = self.side_length();
        let mut best: Option<f64> = None;
        for i in 0..self.droplets.len() {
            for j in i + 1..self.droplets.len() {
                let d = norm(min_image(sub(self.droplets[i].center, self.droplets[j].center), side));
                best = Some(best.map_or(d, |b| b.min(d)));
            }
        }
        best
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

fn check_side(config: &DropletConfig, kernel: &EwaldKernel) -> Result<()> {
    let (a, b) = (kernel.side_length(), config.side_length());
    if (a - b).abs() > 1e-12 * b {
        return Err(Error::SideMismatch { kernel: a, config: b });
    }
    Ok(())
}

/// Newtonian potential of a unit-mass uniform ball of radius `r` at
/// distance `rho` from its center.
pub fn ball_newton_potential(rho: f64, r: f64) -> f64 {
    if rho >= r {
        1.0 / (4.0 * PI * rho)
    } else {
        (3.0 * r * r - rho * rho) / (8.0 * PI * r.powi(3))
    }
}

/// Periodic self-energy of one ball: `½m²⟨G(x−y)⟩` over the ball.
pub fn self_term(kernel: &EwaldKernel, mass: f64, radius: f64) -> f64 {
    let v = kernel.volume();
    0.5 * mass * mass * (6.0 / (5.0 * 4.0 * PI * radius) + kernel.r_at_zero() + radius * radius / (5.0 * v))
}

/// Periodic interaction `m_i m_j⟨G(x−y)⟩` of two disjoint balls whose
/// centers are displaced by `d`.
pub fn pair_term(kernel: &EwaldKernel, d: Point, mi: f64, ri: f64, mj: f64, rj: f64) -> f64 {
    let v = kernel.volume();
    let dm = min_image(d, kernel.side_length());
    let rho = norm(dm);
    mi * mj * (1.0 / (4.0 * PI * rho) + kernel.regular_part(dm) + (ri * ri + rj * rj) / (10.0 * v))
}

/// Coulomb energy `½∬G_ℓ(ũ − ū)(ũ − ū)` of the configuration.
pub fn coulomb_energy(config: &DropletConfig, kernel: &EwaldKernel) -> Result<f64> {
    Ok(coulomb_parts(config, kernel)?.iter().map(|p| p.0 + p.1).sum())
}

/// `(self_i, interaction_i)` for every droplet; pair terms are shared
/// equally.
fn coulomb_parts(config: &DropletConfig, kernel: &EwaldKernel) -> Result<Vec<(f64, f64)>> {
    check_side(config, kernel)?;
    let ds = config.droplets();
    let mut parts: Vec<(f64, f64)> = ds
        .iter()
        .map(|d| (self_term(kernel, d.mass, d.radius()), 0.0))
        .collect();
    for i in 0..ds.len() {
        for j in i + 1..ds.len() {
            let p = pair_term(
                kernel,
                sub(ds[i].center, ds[j].center),
                ds[i].mass,
                ds[i].radius(),
                ds[j].mass,
                ds[j].radius(),
            );
            parts[i].1 += 0.5 * p;
            parts[j].1 += 0.5 * p;
        }
    }
    Ok(parts)
}

/// Ball average of `erf(α|x−y|)/(4π|x−y|)` over a unit-mass ball of radius
/// `r` whose center is `rho` away from `x`.
pub fn ball_erf_average(rho: f64, r: f64, alpha: f64) -> f64 {
    let sp = PI.sqrt();
    let a2 = alpha * alpha;
    if rho < 1e-4 * r {
        // value at the center; the average is even and smooth in rho
        let s = r;
        let prim = (0.5 * s * s - 0.25 / a2) * libm::erf(alpha * s) + s * (-a2 * s * s).exp() / (2.0 * alpha * sp);
        return 3.0 / (4.0 * PI * r.powi(3)) * prim;
    }
    let psi1 = |t: f64| {
        (0.5 * t * t + 0.25 / a2) * libm::erf(alpha * t) + t * (-a2 * t * t).exp() / (2.0 * alpha * sp)
    };
    let psi2 = |t: f64| {
        let c = 1.0 / (6.0 * alpha.powi(3) * sp);
        (t.powi(3) / 6.0 + t / (4.0 * a2)) * libm::erf(alpha * t) + c * (1.0 + a2 * t * t) * (-a2 * t * t).exp() - c
    };
    let bracket = r * (psi1(rho + r) + psi1(rho - r)) - (psi2(rho + r) - psi2(rho - r));
    3.0 / (2.0 * rho * r.powi(3)) * bracket / (4.0 * PI)
}

/// Independent evaluation of the Coulomb energy by Ewald summation with
/// ball form factors: a reciprocal sum over `F(qr_i)F(qr_j)`, a real-space
/// sum of ball-averaged `erfc` kernels and the background constant.
pub fn coulomb_energy_reference(config: &DropletConfig, kernel: &EwaldKernel) -> Result<f64> {
    check_side(config, kernel)?;
    let ds = config.droplets();
    let alpha = kernel.splitting_alpha();
    let side = config.side_length();

    let mut recip = 0.0;
    for (q, w) in kernel.modes() {
        let qn = norm(q);
        let mut s = Complex64::new(0.0, 0.0);
        for d in ds {
            let phase = q[0] * d.center[0] + q[1] * d.center[1] + q[2] * d.center[2];
            s += Complex64::from_polar(d.mass * ball_form_factor(qn, d.radius()), phase);
        }
        recip += 0.5 * w * s.norm_sqr();
    }

    let total: f64 = config.total_mass();
    let background = -0.5 * total * total * kernel.background_constant();

    let erfc_pair = |dist: f64, a: f64, b: f64| {
        1.0 / (4.0 * PI * dist)
            - ball_pair_average(dist, a, b, BALL_AVERAGE_NODES, |t| libm::erf(alpha * t) / (4.0 * PI * t))
    };
    let mut real = 0.0;
    for i in 0..ds.len() {
        let ri = ds[i].radius();
        for j in i..ds.len() {
            let rj = ds[j].radius();
            let mm = ds[i].mass * ds[j].mass;
            let d0 = min_image(sub(ds[j].center, ds[i].center), side);
            let weight = if i == j { 0.5 } else { 1.0 };
            for z in kernel.images(d0, ri + rj) {
                let dist = norm(z);
                if i == j && dist < 1e-9 * side {
                    let newton = 6.0 / (5.0 * 4.0 * PI * ri);
                    let erf = ball_self_average(ri, BALL_AVERAGE_NODES, |t| {
                        if t == 0.0 {
                            alpha / (2.0 * PI.powf(1.5))
                        } else {
                            libm::erf(alpha * t) / (4.0 * PI * t)
                        }
                    });
                    real += weight * mm * (newton - erf);
                } else {
                    real += weight * mm * erfc_pair(dist, ri, rj);
                }
            }
        }
    }
    Ok(recip + real + background)
}

/// Plain reciprocal-space sum `½Σ_{0<|k|∞≤K} |ρ̂(q)|²/(Vq²)` with ball form
/// factors. Converges only like `K^{-3}`; kept as a diagnostic.
pub fn coulomb_energy_reciprocal(config: &DropletConfig, k_cutoff: usize) -> f64 {
    let side = config.side_length();
    let v = config.spec().volume();
    let kc = k_cutoff as i64;
    let ds = config.droplets();
    let mut e = 0.0;
    for kx in 0..=kc {
        for ky in -kc..=kc {
            for kz in -kc..=kc {
                let positive = kx > 0 || (kx == 0 && (ky > 0 || (ky == 0 && kz > 0)));
                if !positive {
                    continue;
                }
                let q = [
                    2.0 * PI * kx as f64 / side,
                    2.0 * PI * ky as f64 / side,
                    2.0 * PI * kz as f64 / side,
                ];
                let q2 = q[0] * q[0] + q[1] * q[1] + q[2] * q[2];
                let qn = q2.sqrt();
                let mut s = Complex64::new(0.0, 0.0);
                for d in ds {
                    let phase = q[0] * d.center[0] + q[1] * d.center[1] + q[2] * d.center[2];
                    s += Complex64::from_polar(d.mass * ball_form_factor(qn, d.radius()), phase);
                }
                e += s.norm_sqr() / (v * q2);
            }
        }
    }
    e
}

/// Per-droplet energy components in the rescaled frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DropletEnergy {
    pub surface: f64,
    pub self_energy: f64,
    pub interaction: f64,
}

/// Energy of a configuration; `surface`, `coulomb` and `total` are in the
/// rescaled frame, `scaled_total = ε^{-4/3}E_ε = ε^{1/3}·total`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyBreakdown {
    pub surface: f64,
    pub coulomb: f64,
    pub total: f64,
    pub scaled_total: f64,
    pub per_droplet: Vec<DropletEnergy>,
}

pub fn total_energy(config: &DropletConfig, kernel: &EwaldKernel) -> Result<EnergyBreakdown> {
    let parts = coulomb_parts(config, kernel)?;
    let per_droplet: Vec<DropletEnergy> = config
        .droplets()
        .iter()
        .zip(&parts)
        .map(|(d, p)| {
            let r = d.radius();
            DropletEnergy {
                surface: 4.0 * PI * r * r,
                self_energy: p.0,
                interaction: p.1,
            }
        })
        .collect();
    let surface: f64 = per_droplet.iter().map(|d| d.surface).sum();
    let coulomb: f64 = parts.iter().map(|p| p.0 + p.1).sum();
    let total = surface + coulomb;
    Ok(EnergyBreakdown {
        surface,
        coulomb,
        total,
        scaled_total: config.spec().epsilon.cbrt() * total,
        per_droplet,
    })
}

/// Exact potential `ṽ(x) = ∫G_ℓ(x − y)(ũ(y) − ū) dy` at a point.
pub fn potential_at(config: &DropletConfig, kernel: &EwaldKernel, x: Point) -> Result<f64> {
    check_side(config, kernel)?;
    Ok(config
        .droplets()
        .iter()
        .map(|d| single_ball_potential(kernel, d, x))
        .sum())
}

fn single_ball_potential(kernel: &EwaldKernel, d: &Droplet, x: Point) -> f64 {
    let r = d.radius();
    let dm = min_image(sub(x, d.center), kernel.side_length());
    d.mass * (ball_newton_potential(norm(dm), r) + kernel.regular_part(dm) + r * r / (10.0 * kernel.volume()))
}

/// Potential sampled on the grid `x_p = ℓp/n`, with diagnostics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PotentialField {
    pub grid_n: usize,
    pub side_length: f64,
    /// Values at `x_{ijk}`, index `((i·n)+j)·n+k`.
    pub values: Vec<f64>,
    pub sup: f64,
    pub inf: f64,
    pub sup_abs: f64,
    /// Largest grid gradient (central differences).
    pub max_gradient: f64,
    /// `−inf v`, the empirical lower-bound constant.
    pub c_lower: f64,
    /// Smallest `C` with `|∇v| ≤ (3/2)(v + C)` on the grid.
    pub c_fit: f64,
    /// `max(|∇v| − (3/2)(v + c_lower))`; non-positive when the gradient
    /// bound holds with the lower-bound constant.
    pub gradient_excess: f64,
    /// Grid average of the exact samples before it was removed; the exact
    /// field has zero mean, so this is pure aliasing.
    pub removed_alias_mean: f64,
    pub resolution_warning: Option<String>,
}

impl PotentialField {
    /// `½∫|∇v|²` from the samples by spectral differentiation.
    pub fn dirichlet_energy(&self) -> f64 {
        let n = self.grid_n;
        let mut data: Vec<Complex64> = self.values.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        fft3(&mut data, n, FftDirection::Forward);
        let total = (n * n * n) as f64;
        let w = 2.0 * PI / self.side_length;
        let mut acc = 0.0;
        for i in 0..n {
            let qx = w * signed_index(i, n) as f64;
            for j in 0..n {
                let qy = w * signed_index(j, n) as f64;
                for k in 0..n {
                    let qz = w * signed_index(k, n) as f64;
                    let c = data[(i * n + j) * n + k] / total;
                    acc += (qx * qx + qy * qy + qz * qz) * c.norm_sqr();
                }
            }
        }
        0.5 * self.side_length.powi(3) * acc
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }
}

/// Samples the potential on an `n³` grid by Ewald synthesis: the smooth
/// reciprocal part by one inverse FFT, the screened real-space part from
/// closed-form ball averages.
pub fn potential_field(config: &DropletConfig, kernel: &EwaldKernel, grid_n: usize) -> Result<PotentialField> {
    check_side(config, kernel)?;
    if grid_n < 16 {
        return Err(Error::param(format!("grid_n must be at least 16, got {grid_n}")));
    }
    let n = grid_n;
    let side = config.side_length();
    let vol = side.powi(3);
    let h = side / n as f64;
    let q_nyquist = PI * n as f64 / side;
    let alpha = q_nyquist / 12.1;
    let ds = config.droplets();

    // reciprocal part
    let w = 2.0 * PI / side;
    let phases: Vec<[Vec<Complex64>; 3]> = ds
        .iter()
        .map(|d| {
            std::array::from_fn(|axis| {
                (0..n)
                    .map(|i| Complex64::from_polar(1.0, -w * signed_index(i, n) as f64 * d.center[axis]))
                    .collect()
            })
        })
        .collect();
    let mut data = vec![Complex64::new(0.0, 0.0); n * n * n];
    for i in 0..n {
        let qx = w * signed_index(i, n) as f64;
        for j in 0..n {
            let qy = w * signed_index(j, n) as f64;
            for k in 0..n {
                if i == 0 && j == 0 && k == 0 {
                    continue;
                }
                let qz = w * signed_index(k, n) as f64;
                let q2 = qx * qx + qy * qy + qz * qz;
                let damping = (-q2 / (4.0 * alpha * alpha)).exp();
                if damping < 1e-300 {
                    continue;
                }
                let qn = q2.sqrt();
                let mut s = Complex64::new(0.0, 0.0);
                for (d, ph) in ds.iter().zip(&phases) {
                    s += ph[0][i] * ph[1][j] * ph[2][k] * (d.mass * ball_form_factor(qn, d.radius()));
                }
                data[(i * n + j) * n + k] = s * (damping / (q2 * vol));
            }
        }
    }
    fft3(&mut data, n, FftDirection::Inverse);
    let mut values: Vec<f64> = data.iter().map(|c| c.re).collect();

    // screened real-space part
    let cutoff = 6.2 / alpha;
    for d in ds {
        let r = d.radius();
        let reach = cutoff + r;
        let lo: [i64; 3] = std::array::from_fn(|a| ((d.center[a] - reach) / h).ceil() as i64);
        let hi: [i64; 3] = std::array::from_fn(|a| ((d.center[a] + reach) / h).floor() as i64);
        for gi in lo[0]..=hi[0] {
            let dx = gi as f64 * h - d.center[0];
            let ii = gi.rem_euclid(n as i64) as usize;
            for gj in lo[1]..=hi[1] {
                let dy = gj as f64 * h - d.center[1];
                let jj = gj.rem_euclid(n as i64) as usize;
                for gk in lo[2]..=hi[2] {
                    let dz = gk as f64 * h - d.center[2];
                    let rho = (dx * dx + dy * dy + dz * dz).sqrt();
                    if rho >= reach {
                        continue;
                    }
                    let kk = gk.rem_euclid(n as i64) as usize;
                    values[(ii * n + jj) * n + kk] +=
                        d.mass * (ball_newton_potential(rho, r) - ball_erf_average(rho, r, alpha));
                }
            }
        }
    }
    let constant = -config.total_mass() / (4.0 * alpha * alpha * vol);
    for v in values.iter_mut() {
        *v += constant;
    }
    let alias_mean = values.iter().sum::<f64>() / values.len() as f64;
    for v in values.iter_mut() {
        *v -= alias_mean;
    }

    let at = |i: usize, j: usize, k: usize| values[((i % n) * n + (j % n)) * n + (k % n)];
    let mut sup = f64::MIN;
    let mut inf = f64::MAX;
    let mut grads = Vec::with_capacity(values.len());
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                let v = at(i, j, k);
                sup = sup.max(v);
                inf = inf.min(v);
                let gx = (at(i + 1, j, k) - at(i + n - 1, j, k)) / (2.0 * h);
                let gy = (at(i, j + 1, k) - at(i, j + n - 1, k)) / (2.0 * h);
                let gz = (at(i, j, k + 1) - at(i, j, k + n - 1)) / (2.0 * h);
                grads.push((v, (gx * gx + gy * gy + gz * gz).sqrt()));
            }
        }
    }
    let c_lower = -inf;
    let max_gradient = grads.iter().map(|g| g.1).fold(0.0, f64::max);
    let c_fit = grads.iter().map(|&(v, g)| 2.0 * g / 3.0 - v).fold(f64::MIN, f64::max);
    let gradient_excess = grads
        .iter()
        .map(|&(v, g)| g - 1.5 * (v + c_lower))
        .fold(f64::MIN, f64::max);
    let r_min = ds.iter().map(|d| d.radius()).fold(f64::MAX, f64::min);
    let resolution_warning = (r_min < 2.0 * h).then(|| {
        format!("smallest radius {r_min:.4} is below two grid cells ({:.4}); field is under-resolved", 2.0 * h)
    });
    Ok(PotentialField {
        grid_n: n,
        side_length: side,
        values,
        sup,
        inf,
        sup_abs: sup.abs().max(inf.abs()),
        max_gradient,
        c_lower,
        c_fit,
        gradient_excess,
        removed_alias_mean: alias_mean,
        resolution_warning,
    })
}

/// Per-subcube mass measure `μ_ε` and energy measure `ν_ε`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoarseGrainReport {
    pub subdivisions: usize,
    pub lambda: f64,
    /// `μ_ε(Q)` per subcube, index `((i·s)+j)·s+k`.
    pub mass: Vec<f64>,
    /// `ν_ε(Q)` per subcube.
    pub energy: Vec<f64>,
    pub mass_total: f64,
    pub energy_total: f64,
}

impl CoarseGrainReport {
    /// `|Q|` on the unit torus.
    pub fn cube_volume(&self) -> f64 {
        (self.subdivisions as f64).powi(-3)
    }

    /// `max_Q |μ(Q) − λ|Q|| / (λ|Q|)`.
    pub fn max_mass_deviation(&self) -> f64 {
        let target = self.lambda * self.cube_volume();
        self.mass.iter().map(|m| (m - target).abs() / target).fold(0.0, f64::max)
    }

    /// `max_Q |ν(Q) − λf*|Q|| / (λf*|Q|)`.
    pub fn max_energy_deviation(&self, f_star: f64) -> f64 {
        let target = self.lambda * f_star * self.cube_volume();
        self.energy.iter().map(|e| (e - target).abs() / target).fold(0.0, f64::max)
    }
}

/// Quadratic model of the smooth part of the potential inside a droplet.
struct LocalQuadratic {
    value: f64,
    grad: Point,
    hess: [[f64; 3]; 3],
}

fn local_quadratic(config: &DropletConfig, kernel: &EwaldKernel, idx: usize) -> LocalQuadratic {
    let d = &config.droplets()[idx];
    let r = d.radius();
    let step = 0.5 * r;
    let smooth = |y: Point| -> f64 {
        let x = [d.center[0] + y[0], d.center[1] + y[1], d.center[2] + y[2]];
        let mut v = 0.0;
        for (j, other) in config.droplets().iter().enumerate() {
            if j == idx {
                let dm = y;
                v += d.mass * (kernel.regular_part(dm) + r * r / (10.0 * kernel.volume()));
            } else {
                v += single_ball_potential(kernel, other, x);
            }
        }
        v
    };
    let e = |k: usize, s: f64| {
        let mut p = [0.0; 3];
        p[k] = s;
        p
    };
    let v0 = smooth([0.0; 3]);
    let mut grad = [0.0; 3];
    let mut hess = [[0.0; 3]; 3];
    for k in 0..3 {
        let vp = smooth(e(k, step));
        let vm = smooth(e(k, -step));
        grad[k] = (vp - vm) / (2.0 * step);
        hess[k][k] = (vp - 2.0 * v0 + vm) / (step * step);
        for l in k + 1..3 {
            let mut pp = [0.0; 3];
            let mut pm = [0.0; 3];
            let mut mp = [0.0; 3];
            let mut mm = [0.0; 3];
            pp[k] = step;
            pp[l] = step;
            pm[k] = step;
            pm[l] = -step;
            mp[k] = -step;
            mp[l] = step;
            mm[k] = -step;
            mm[l] = -step;
            let h = (smooth(pp) - smooth(pm) - smooth(mp) + smooth(mm)) / (4.0 * step * step);
            hess[k][l] = h;
            hess[l][k] = h;
        }
    }
    LocalQuadratic {
        value: v0,
        grad,
        hess,
    }
}

/// Coarse-grains the configuration onto `subdivisions³` congruent subcubes.
///
/// Volume and surface fractions of every droplet in every subcube come from
/// ball–box quadrature; the Coulomb share `½∫_{B∩Q} ũṽ` uses the exact
/// radial self-potential plus a quadratic model of the remaining smooth
/// potential. Each droplet's shares are then normalized so that its exact
/// mass, surface and Coulomb totals are reproduced.
pub fn energy_measure(config: &DropletConfig, kernel: &EwaldKernel, subdivisions: usize) -> Result<CoarseGrainReport> {
    check_side(config, kernel)?;
    if !(2..=16).contains(&subdivisions) {
        return Err(Error::param(format!("subdivisions must be in 2..=16, got {subdivisions}")));
    }
    let s = subdivisions;
    let side = config.side_length();
    let cube = side / s as f64;
    let parts = coulomb_parts(config, kernel)?;
    let mut mass = vec![0.0; s * s * s];
    let mut energy = vec![0.0; s * s * s];

    for (idx, d) in config.droplets().iter().enumerate() {
        let r = d.radius();
        let exact_coulomb = parts[idx].0 + parts[idx].1;
        let surface = 4.0 * PI * r * r;
        // (cube index, volume, area, coulomb) contributions
        let mut shares: Vec<(usize, f64, f64, f64)> = Vec::new();
        let mut quad: Option<LocalQuadratic> = None;
        for ix in -1i64..=1 {
            for iy in -1i64..=1 {
                for iz in -1i64..=1 {
                    let c = [
                        d.center[0] + ix as f64 * side,
                        d.center[1] + iy as f64 * side,
                        d.center[2] + iz as f64 * side,
                    ];
                    let lo_idx: [i64; 3] = std::array::from_fn(|a| ((c[a] - r) / cube).floor() as i64);
                    let hi_idx: [i64; 3] = std::array::from_fn(|a| ((c[a] + r) / cube).floor() as i64);
                    for qi in lo_idx[0].max(0)..=hi_idx[0].min(s as i64 - 1) {
                        for qj in lo_idx[1].max(0)..=hi_idx[1].min(s as i64 - 1) {
                            for qk in lo_idx[2].max(0)..=hi_idx[2].min(s as i64 - 1) {
                                let q = [qi, qj, qk];
                                let a: Point = std::array::from_fn(|k| q[k] as f64 * cube - c[k]);
                                let b: Point = std::array::from_fn(|k| (q[k] + 1) as f64 * cube - c[k]);
                                if box_misses_ball(r, a, b) {
                                    continue;
                                }
                                let flat = ((qi as usize) * s + qj as usize) * s + qk as usize;
                                if box_contains_ball(r, a, b) {
                                    shares.push((flat, 1.0, 1.0, 1.0));
                                    continue;
                                }
                                let lq = quad.get_or_insert_with(|| local_quadratic(config, kernel, idx));
                                let [vol, coul] = ball_box_integrals(r, a, b, |y| {
                                    let rho = norm(y);
                                    let mut v = d.mass * ball_newton_potential(rho, r) + lq.value;
                                    for k in 0..3 {
                                        v += lq.grad[k] * y[k];
                                        for l in 0..3 {
                                            v += 0.5 * lq.hess[k][l] * y[k] * y[l];
                                        }
                                    }
                                    [1.0, 0.5 * v]
                                });
                                let area = sphere_box_area(r, a, b);
                                shares.push((flat, vol, area, coul));
                            }
                        }
                    }
                }
            }
        }
        if shares.len() == 1 {
            let f = shares[0].0;
            mass[f] += d.mass;
            energy[f] += surface + exact_coulomb;
            continue;
        }
        let vol_sum: f64 = shares.iter().map(|x| x.1).sum();
        let area_sum: f64 = shares.iter().map(|x| x.2).sum();
        let coul_sum: f64 = shares.iter().map(|x| x.3).sum();
        for &(f, vol, area, coul) in &shares {
            let frac = vol / vol_sum;
            mass[f] += d.mass * frac;
            energy[f] += surface * area / area_sum + coul + (exact_coulomb - coul_sum) * frac;
        }
    }
    for m in mass.iter_mut() {
        *m /= side;
    }
    for e in energy.iter_mut() {
        *e /= side;
    }
    Ok(CoarseGrainReport {
        subdivisions: s,
        lambda: config.spec().lambda,
        mass_total: mass.iter().sum(),
        energy_total: energy.iter().sum(),
        mass,
        energy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn single(side: f64, lambda: f64, center: Point) -> (DropletConfig, EwaldKernel) {
        let spec = TorusSpec::from_side(side, lambda).unwrap();
        let config = DropletConfig::new(
            spec,
            vec![Droplet {
                center,
                mass: spec.mass_budget(),
            }],
        )
        .unwrap();
        (config, EwaldKernel::with_defaults(side).unwrap())
    }

    #[test]
    fn spec_admissibility() {
        assert!(TorusSpec::new(0.5, 1.0).is_ok());
        assert!(TorusSpec::new(1.0, 1.0).is_err());
        assert!(TorusSpec::new(0.2, 4.0).is_err());
        let s = TorusSpec::new(1e-6, 0.5).unwrap();
        assert_relative_eq!(s.side_length(), 100.0, max_relative = 1e-14);
        assert_relative_eq!(s.background_density(), 0.5 * 1e-4, max_relative = 1e-12);
    }

    #[test]
    fn balance_is_exact() {
        let mut m = vec![0.1, 0.2, 0.3, 0.4];
        balance_masses(&mut m, 1.0);
        assert_eq!(m.iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn erf_average_matches_quadrature() {
        // average over a ball by the pair density of a point (radius → 0)
        let (r, alpha) = (1.3, 0.7);
        for rho in [0.0, 0.05, 0.6, 1.3, 2.0, 4.5] {
            let direct = if rho == 0.0 {
                crate::quadrature::integrate(0.0, r, 64, |s| {
                    3.0 * s * s / r.powi(3) * libm::erf(alpha * s) / (4.0 * PI * s)
                })
            } else {
                // shell average (1/(2ρs))∫_{|ρ−s|}^{ρ+s} t φ(t) dt, weighted by 3s²/r³
                crate::quadrature::integrate(0.0, r, 64, |s| {
                    let shell = crate::quadrature::integrate((rho - s).abs(), rho + s, 64, |t| {
                        libm::erf(alpha * t) / (4.0 * PI)
                    }) / (2.0 * rho * s);
                    3.0 * s * s / r.powi(3) * shell
                })
            };
            assert_relative_eq!(ball_erf_average(rho, r, alpha), direct, max_relative = 1e-10);
        }
    }

    #[test]
    fn side_mismatch_is_reported() {
        let (config, _) = single(10.0, 1.0, [0.0; 3]);
        let other = EwaldKernel::with_defaults(11.0).unwrap();
        assert!(matches!(coulomb_energy(&config, &other), Err(Error::SideMismatch { .. })));
    }

    #[test]
    fn json_roundtrip() {
        let (config, _) = single(10.0, 1.0, [1.0, 2.0, 3.0]);
        let text = config.to_json().unwrap();
        assert!(text.contains("\"version\": 1"));
        let back = DropletConfig::from_json(&text).unwrap();
        assert_eq!(back, config);
        let bad = text.replace("\"version\": 1", "\"version\": 2");
        assert!(DropletConfig::from_json(&bad).is_err());
    }

    #[test]
    fn overlap_and_budget_are_validated() {
        let spec = TorusSpec::from_side(10.0, 2.0).unwrap();
        let half = spec.mass_budget() / 2.0;
        let overlapping = vec![
            Droplet { center: [0.0; 3], mass: half },
            Droplet { center: [1.0, 0.0, 0.0], mass: half },
        ];
        assert!(matches!(DropletConfig::new(spec, overlapping), Err(Error::Overlap { .. })));
        // overlap across the periodic boundary
        let wrapped = vec![
            Droplet { center: [0.2, 0.0, 0.0], mass: half },
            Droplet { center: [9.8, 0.0, 0.0], mass: half },
        ];
        assert!(matches!(DropletConfig::new(spec, wrapped), Err(Error::Overlap { .. })));
        let short = vec![Droplet { center: [0.0; 3], mass: half }];
        assert!(matches!(DropletConfig::new(spec, short), Err(Error::Infeasible(_))));
    }

    #[test]
    fn fast_and_reference_paths_agree() {
        let spec = TorusSpec::from_side(9.0, 3.0).unwrap();
        let masses = [7.0, 9.5, 10.5];
        let droplets = vec![
            Droplet { center: [1.0, 1.0, 1.0], mass: masses[0] },
            Droplet { center: [4.5, 2.0, 6.0], mass: masses[1] },
            Droplet { center: [7.9, 6.5, 3.0], mass: spec.mass_budget() - masses[0] - masses[1] },
        ];
        let config = DropletConfig::new(spec, droplets).unwrap();
        let kernel = EwaldKernel::with_defaults(9.0).unwrap();
        let fast = coulomb_energy(&config, &kernel).unwrap();
        let reference = coulomb_energy_reference(&config, &kernel).unwrap();
        assert_relative_eq!(fast, reference, max_relative = 1e-8);
    }

    #[test]
    fn breakdown_is_additive() {
        let (config, kernel) = single(12.0, 2.0, [3.0, 3.0, 3.0]);
        let b = total_energy(&config, &kernel).unwrap();
        let parts: f64 = b.per_droplet.iter().map(|d| d.surface + d.self_energy + d.interaction).sum();
        assert_relative_eq!(parts, b.total, max_relative = 1e-12);
        assert_relative_eq!(b.total, b.surface + b.coulomb, max_relative = 1e-12);
        assert_relative_eq!(b.scaled_total, b.total / 12.0, max_relative = 1e-12);
    }
}
