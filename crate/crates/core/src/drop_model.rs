//! Whole-space liquid-drop problem under the ball ansatz.
//!
//! A droplet of mass `m` is a ball of radius `r = (3m/4π)^{1/3}` with
//! perimeter `4πr²` and Coulomb self-energy `3m²/(20πr)`, so that
//!
//! ```text
//! f(m) = e(m)/m = A m^{-1/3} + B m^{2/3},
//! A = 6^{2/3} π^{1/3},   B = 3^{2/3} 2^{-1/3} π^{-2/3} / 10.
//! ```
//!
//! Generalized minimizers are finite collections of such balls placed
//! infinitely far apart; their energy is the sum of the ball energies.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::geometry::{ball_radius, norm, sub, Point};
use crate::kernel::{CutoffConvention, TruncationProfile};
use crate::quadrature::{ball_pair_average_split, ball_self_average_split, BALL_AVERAGE_NODES};
use crate::{Error, Result};

/// Default largest number of components searched by [`generalized_minimum`].
pub const DEFAULT_N_MAX: usize = 16;

/// Split fractions of the two-block refinement: `0.05, 0.055, …, 0.5`.
const SPLIT_POINTS: usize = 91;

fn check_mass(m: f64) -> Result<()> {
    if m > 0.0 && m.is_finite() {
        Ok(())
    } else {
        Err(Error::param(format!("mass must be positive and finite, got {m}")))
    }
}

fn coeff_a() -> f64 {
    6f64.powf(2.0 / 3.0) * PI.cbrt()
}

fn coeff_b() -> f64 {
    3f64.powf(2.0 / 3.0) * 2f64.powf(-1.0 / 3.0) * PI.powf(-2.0 / 3.0) / 10.0
}

/// Perimeter of a ball of volume `m`, `4πr²`.
pub fn ball_surface_energy(m: f64) -> Result<f64> {
    check_mass(m)?;
    let r = ball_radius(m);
    Ok(4.0 * PI * r * r)
}

/// Coulomb self-energy `½∬ dx dy /(4π|x−y|)` of a uniform ball of volume `m`.
pub fn ball_coulomb_self_energy(m: f64) -> Result<f64> {
    check_mass(m)?;
    Ok(3.0 * m * m / (20.0 * PI * ball_radius(m)))
}

/// Energy of a single ball, `e_ball(m)`.
pub fn e_ball(m: f64) -> Result<f64> {
    Ok(ball_surface_energy(m)? + ball_coulomb_self_energy(m)?)
}

/// Energy per unit mass of a single ball.
pub fn f_ball(m: f64) -> Result<f64> {
    check_mass(m)?;
    Ok(coeff_a() * m.powf(-1.0 / 3.0) + coeff_b() * m.powf(2.0 / 3.0))
}

/// `e_ball'(m) = 2/r + r²/3`: twice the mean curvature plus the potential
/// on the boundary of the ball.
pub fn e_ball_derivative(m: f64) -> Result<f64> {
    check_mass(m)?;
    let r = ball_radius(m);
    Ok(2.0 / r + r * r / 3.0)
}

/// `x^p − y^p` without cancellation when `x ≈ y`.
fn pow_diff(x: f64, y: f64, p: f64) -> f64 {
    y.powf(p) * (p * ((x - y) / y).ln_1p()).exp_m1()
}

/// `f_ball(a) − f_ball(b)`, accurate to relative precision of the difference.
pub fn f_ball_difference(a: f64, b: f64) -> f64 {
    coeff_a() * pow_diff(a, b, -1.0 / 3.0) + coeff_b() * pow_diff(a, b, 2.0 / 3.0)
}

/// Minimizer of `f_ball`, `A/(2B) = 10π`.
pub fn m_star_closed_form() -> f64 {
    coeff_a() / (2.0 * coeff_b())
}

/// `f* = 3^{5/3} 2^{-2/3} 5^{-1/3}`.
pub fn f_star_closed_form() -> f64 {
    3f64.powf(5.0 / 3.0) * 2f64.powf(-2.0 / 3.0) * 5f64.powf(-1.0 / 3.0)
}

/// Largest mass for which one ball beats two balls of half the mass,
/// `(40π/3)(2^{1/3} + 2^{-1/3} − 1)`.
pub fn m_c1() -> f64 {
    40.0 * PI / 3.0 * (2f64.cbrt() + 1.0 / 2f64.cbrt() - 1.0)
}

/// Root of `e_ball(m) − 2 e_ball(m/2)` on `[30, 60]` by bisection.
pub fn m_c1_bisection() -> f64 {
    let g = |m: f64| {
        // e(m) − 2e(m/2) = m (f(m) − f(m/2))
        m * f_ball_difference(m, 0.5 * m)
    };
    let (mut lo, mut hi) = (30.0, 60.0);
    let g_lo = g(lo);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if (g(mid) < 0.0) == (g_lo < 0.0) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Golden-section search for the minimum of a unimodal function given
/// through the difference oracle `diff(a, b) = f(a) − f(b)`.
pub fn golden_section<D: FnMut(f64, f64) -> f64>(lo: f64, hi: f64, rel_tol: f64, mut diff: D) -> f64 {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (lo, hi);
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    for _ in 0..500 {
        if (b - a) <= rel_tol * 0.5 * (a.abs() + b.abs()) {
            break;
        }
        if diff(c, d) < 0.0 {
            b = d;
            d = c;
            c = b - inv_phi * (b - a);
        } else {
            a = c;
            c = d;
            d = a + inv_phi * (b - a);
        }
    }
    0.5 * (a + b)
}

/// A droplet in whole space.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ball {
    pub center: Point,
    pub mass: f64,
}

impl Ball {
    pub fn radius(&self) -> f64 {
        ball_radius(self.mass)
    }
}

/// Non-overlapping balls in `ℝ³`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BallCluster {
    balls: Vec<Ball>,
}

impl BallCluster {
    pub fn new(balls: Vec<Ball>) -> Result<Self> {
        if balls.is_empty() {
            return Err(Error::param("a cluster needs at least one ball"));
        }
        for b in &balls {
            check_mass(b.mass)?;
        }
        for i in 0..balls.len() {
            for j in i + 1..balls.len() {
                let d = norm(sub(balls[i].center, balls[j].center));
                let min = balls[i].radius() + balls[j].radius();
                if d < min * (1.0 - 1e-12) {
                    return Err(Error::Overlap {
                        i,
                        j,
                        distance: d,
                        min_distance: min,
                    });
                }
            }
        }
        Ok(BallCluster { balls })
    }

    /// Balls of the given masses on the x-axis, consecutive surfaces `gap`
    /// apart.
    pub fn on_line(masses: &[f64], gap: f64) -> Result<Self> {
        let mut balls = Vec::with_capacity(masses.len());
        let mut x = 0.0;
        let mut prev_r = 0.0;
        for (k, &m) in masses.iter().enumerate() {
            check_mass(m)?;
            let r = ball_radius(m);
            if k > 0 {
                x += prev_r + gap + r;
            }
            balls.push(Ball {
                center: [x, 0.0, 0.0],
                mass: m,
            });
            prev_r = r;
        }
        Self::new(balls)
    }

    pub fn balls(&self) -> &[Ball] {
        &self.balls
    }

    pub fn total_mass(&self) -> f64 {
        self.balls.iter().map(|b| b.mass).sum()
    }

    /// Untruncated whole-space energy: ball energies plus Newtonian
    /// interactions `m_i m_j /(4πd)`.
    pub fn energy(&self) -> f64 {
        let mut e: f64 = self.balls.iter().map(|b| e_ball(b.mass).expect("validated")).sum();
        for i in 0..self.balls.len() {
            for j in i + 1..self.balls.len() {
                let d = norm(sub(self.balls[i].center, self.balls[j].center));
                e += self.balls[i].mass * self.balls[j].mass / (4.0 * PI * d);
            }
        }
        e
    }
}

/// Whole-space energy with the Coulomb kernel multiplied by `η(|x−y|/R)`.
///
/// The shape of `trunc` is used with radius `r_cut`; its own `rho` is
/// ignored. Only the inner-unit convention (`η = 1` for `t ≤ 1`, `η = 0` for
/// `t ≥ 2`) is accepted.
pub fn truncated_energy(cluster: &BallCluster, r_cut: f64, trunc: &TruncationProfile) -> Result<f64> {
    if !(r_cut > 0.0 && r_cut.is_finite()) {
        return Err(Error::param(format!("truncation radius must be positive, got {r_cut}")));
    }
    if trunc.convention != CutoffConvention::Truncation {
        return Err(Error::param("truncated energy needs the inner-unit cutoff convention"));
    }
    let profile = TruncationProfile::truncation(r_cut);
    let kernel = |t: f64| profile.at(t) / (4.0 * PI * t);
    let breaks = [r_cut, 2.0 * r_cut];
    let balls = cluster.balls();

    let mut e = 0.0;
    for b in balls {
        let r = b.radius();
        e += ball_surface_energy(b.mass)?;
        if 2.0 * r <= r_cut {
            e += ball_coulomb_self_energy(b.mass)?;
        } else {
            e += 0.5 * b.mass * b.mass * ball_self_average_split(r, BALL_AVERAGE_NODES, &breaks, kernel);
        }
    }
    for i in 0..balls.len() {
        for j in i + 1..balls.len() {
            let (bi, bj) = (&balls[i], &balls[j]);
            let (ri, rj) = (bi.radius(), bj.radius());
            let d = norm(sub(bi.center, bj.center));
            let mm = bi.mass * bj.mass;
            if d >= 2.0 * r_cut + ri + rj {
                continue;
            }
            if d <= r_cut - ri - rj {
                e += mm / (4.0 * PI * d);
            } else {
                e += mm * ball_pair_average_split(d, ri, rj, BALL_AVERAGE_NODES, &breaks, kernel);
            }
        }
    }
    Ok(e)
}

/// Result of the partition search for `e(m)` under the ball ansatz.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneralizedMinimum {
    pub energy: f64,
    pub n: usize,
    pub masses: Vec<f64>,
    /// `e_ball'(m_i)` for each component.
    pub multipliers: Vec<f64>,
    /// True when an unequal two-block partition beat every equal partition.
    pub asymmetric: bool,
}

impl GeneralizedMinimum {
    pub fn total_mass(&self) -> f64 {
        self.masses.iter().sum()
    }

    /// Spread of the multipliers across components.
    pub fn multiplier_spread(&self) -> f64 {
        let (lo, hi) = self
            .multipliers
            .iter()
            .fold((f64::MAX, f64::MIN), |(lo, hi), &x| (lo.min(x), hi.max(x)));
        hi - lo
    }
}

/// `N` equal parts of `m`, with the last part absorbing rounding so that the
/// sum is exactly `m`.
fn equal_parts(m: f64, n: usize) -> Vec<f64> {
    let part = m / n as f64;
    let mut v = vec![part; n];
    let rest: f64 = v[..n - 1].iter().sum();
    v[n - 1] = m - rest;
    v
}

fn equal_partition_energy(m: f64, n: usize) -> f64 {
    // N e(m/N) = m f(m/N)
    m * f_ball(m / n as f64).expect("positive mass")
}

/// Minimal energy of a collection of balls with total mass `m` and at most
/// `n_max` components.
///
/// Equal partitions are searched exhaustively; a two-block refinement then
/// tries split fractions `s ∈ [0.05, 0.5]`, each block equally partitioned.
pub fn generalized_minimum(m: f64, n_max: usize) -> Result<GeneralizedMinimum> {
    check_mass(m)?;
    if n_max == 0 {
        return Err(Error::param("n_max must be at least 1"));
    }
    let (mut best_n, mut best_e) = (1, equal_partition_energy(m, 1));
    for n in 2..=n_max {
        let e = equal_partition_energy(m, n);
        if e < best_e {
            best_e = e;
            best_n = n;
        }
    }
    let mut masses = equal_parts(m, best_n);
    let mut asymmetric = false;

    if n_max >= 2 {
        let mut best_split: Option<(f64, Vec<f64>)> = None;
        for k in 0..SPLIT_POINTS {
            let s = 0.05 + 0.45 * k as f64 / (SPLIT_POINTS - 1) as f64;
            let (ma, mb) = (s * m, m - s * m);
            for na in 1..n_max {
                for nb in 1..=(n_max - na) {
                    let e = equal_partition_energy(ma, na) + equal_partition_energy(mb, nb);
                    let parts_equal = (ma / na as f64 - mb / nb as f64).abs() <= 1e-12 * m;
                    if parts_equal {
                        continue;
                    }
                    if best_split.as_ref().is_none_or(|(be, _)| e < *be) {
                        let mut v = equal_parts(ma, na);
                        v.extend(equal_parts(mb, nb));
                        best_split = Some((e, v));
                    }
                }
            }
        }
        if let Some((e, v)) = best_split {
            if e < best_e * (1.0 - 1e-12) {
                best_e = e;
                best_n = v.len();
                masses = v;
                asymmetric = true;
            }
        }
    }

    let multipliers = masses
        .iter()
        .map(|&mi| e_ball_derivative(mi))
        .collect::<Result<Vec<_>>>()?;
    Ok(GeneralizedMinimum {
        energy: best_e,
        n: best_n,
        masses,
        multipliers,
        asymmetric,
    })
}

/// Tabulated whole-space self-energy curves.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelfEnergyTable {
    pub mass_grid: Vec<f64>,
    pub e_values: Vec<f64>,
    pub f_values: Vec<f64>,
    pub lambda_values: Vec<f64>,
    pub n_optimal: Vec<usize>,
    pub m_star: f64,
    pub f_star: f64,
    pub m_c1: f64,
    /// Grid masses whose optimum is an unequal partition.
    pub asymmetric_masses: Vec<f64>,
}

impl SelfEnergyTable {
    /// Largest `|e(m_i) − e(m_j)|/|m_i − m_j|` over all grid pairs.
    pub fn max_discrete_slope(&self) -> f64 {
        let mut s: f64 = 0.0;
        for i in 0..self.mass_grid.len() {
            for j in i + 1..self.mass_grid.len() {
                let dm = self.mass_grid[j] - self.mass_grid[i];
                s = s.max((self.e_values[j] - self.e_values[i]).abs() / dm);
            }
        }
        s
    }
}

/// `e'(m)` by central differences with step `1e-4 m`, one Richardson step.
pub fn lagrange_multiplier(m: f64, n_max: usize) -> Result<f64> {
    check_mass(m)?;
    let e = |x: f64| generalized_minimum(x, n_max).map(|g| g.energy);
    let central = |h: f64| -> Result<f64> { Ok((e(m + h)? - e(m - h)?) / (2.0 * h)) };
    let h = 1e-4 * m;
    let coarse = central(h)?;
    let fine = central(0.5 * h)?;
    Ok((4.0 * fine - coarse) / 3.0)
}

/// `f(a) − f(b)` for the generalized per-mass energy, using the
/// cancellation-free form when both optima are `n` equal balls.
fn generalized_f_difference(a: f64, b: f64, n_max: usize) -> f64 {
    let ga = generalized_minimum(a, n_max).expect("positive mass");
    let gb = generalized_minimum(b, n_max).expect("positive mass");
    if !ga.asymmetric && !gb.asymmetric && ga.n == gb.n {
        let n = ga.n as f64;
        f_ball_difference(a / n, b / n)
    } else {
        ga.energy / a - gb.energy / b
    }
}

/// Samples `e`, `f`, `λ` and the optimal component count on `mass_grid`,
/// and locates `m*`, `f*` by golden-section refinement of the grid minimum
/// among single-droplet optima.
pub fn self_energy_table(mass_grid: &[f64], n_max: usize) -> Result<SelfEnergyTable> {
    if mass_grid.len() < 3 {
        return Err(Error::param("mass grid needs at least 3 points"));
    }
    for &m in mass_grid {
        check_mass(m)?;
    }
    if mass_grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::param("mass grid must be strictly increasing"));
    }
    if n_max == 0 {
        return Err(Error::param("n_max must be at least 1"));
    }
    let mut e_values = Vec::with_capacity(mass_grid.len());
    let mut f_values = Vec::with_capacity(mass_grid.len());
    let mut lambda_values = Vec::with_capacity(mass_grid.len());
    let mut n_optimal = Vec::with_capacity(mass_grid.len());
    let mut asymmetric_masses = Vec::new();
    for &m in mass_grid {
        let g = generalized_minimum(m, n_max)?;
        e_values.push(g.energy);
        f_values.push(g.energy / m);
        lambda_values.push(lagrange_multiplier(m, n_max)?);
        n_optimal.push(g.n);
        if g.asymmetric {
            asymmetric_masses.push(m);
        }
    }
    // f* is also attained by every multiple of m* split into equal balls,
    // so the search is restricted to single-droplet optima when present.
    let single: Vec<usize> = (0..mass_grid.len()).filter(|&i| n_optimal[i] == 1).collect();
    let candidates: Vec<usize> = if single.is_empty() {
        (0..mass_grid.len()).collect()
    } else {
        single
    };
    let imin = candidates
        .iter()
        .copied()
        .min_by(|&a, &b| f_values[a].total_cmp(&f_values[b]))
        .expect("non-empty grid");
    let lo = mass_grid[imin.saturating_sub(1)];
    let hi = mass_grid[(imin + 1).min(mass_grid.len() - 1)];
    let m_star = golden_section(lo, hi, 1e-14, |a, b| generalized_f_difference(a, b, n_max));
    let f_star = generalized_minimum(m_star, n_max)?.energy / m_star;
    Ok(SelfEnergyTable {
        mass_grid: mass_grid.to_vec(),
        e_values,
        f_values,
        lambda_values,
        n_optimal,
        m_star,
        f_star,
        m_c1: m_c1(),
        asymmetric_masses,
    })
}

/// `points` masses evenly spaced on `[m_min, m_max]`.
pub fn linear_mass_grid(m_min: f64, m_max: f64, points: usize) -> Result<Vec<f64>> {
    if points < 3 || !(m_min > 0.0 && m_max > m_min) {
        return Err(Error::param("grid needs 0 < m_min < m_max and at least 3 points"));
    }
    let step = (m_max - m_min) / (points - 1) as f64;
    Ok((0..points).map(|i| m_min + step * i as f64).collect())
}
