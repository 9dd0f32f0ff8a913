//! Periodic Coulomb kernel on the flat cubic torus of side `ℓ`.
//!
//! `G` solves `−ΔG = δ − 1/ℓ³` with zero mean. It is evaluated by the
//! classical Ewald split
//!
//! ```text
//! G(x) = Σ_n erfc(α|x+nℓ|)/(4π|x+nℓ|)
//!      + (1/ℓ³) Σ_{q≠0} exp(−q²/4α²)/q² · cos(q·x)  −  1/(4α²ℓ³),
//! ```
//!
//! where the last constant removes the mean of the screened real-space sum.
//! The regular part `R = G − Γ#`, with `Γ#` the Newtonian potential of the
//! nearest lattice image, replaces the nearest-image term by
//! `−erf(αρ)/(4πρ)`, which is smooth through the origin.

use std::f64::consts::PI;

use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::geometry::{min_image, norm, Point};
use crate::{Error, Result};

/// Reciprocal modes whose Gaussian damping falls below this are dropped.
const DAMPING_FLOOR: f64 = 1e-18;
/// `erfc(x) < 1e-18` beyond this argument.
const REAL_SPACE_EXTENT: f64 = 6.2;
/// Evaluations closer than this fraction of the side to a lattice point are
/// treated as singular.
const SINGULAR_FRACTION: f64 = 1e-8;

/// Construction parameters of an [`EwaldKernel`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KernelParams {
    /// Largest reciprocal lattice index per axis.
    pub k_cutoff: usize,
    /// Splitting width in units of the inverse side length, `α = factor/ℓ`.
    pub alpha_factor: f64,
}

impl Default for KernelParams {
    fn default() -> Self {
        KernelParams {
            k_cutoff: 12,
            alpha_factor: 5.0,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Mode {
    k: [i32; 3],
    /// `2/V · exp(−q²/4α²)/q²`; the factor two accounts for `−k`.
    weight: f64,
    q: Point,
}

/// Immutable Ewald representation of the periodic Green's function.
#[derive(Clone, Debug)]
pub struct EwaldKernel {
    side_length: f64,
    k_cutoff: usize,
    splitting_alpha: f64,
    r_at_zero: f64,
    real_cutoff: f64,
    background: f64,
    modes: Vec<Mode>,
}

impl EwaldKernel {
    pub fn new(side_length: f64, params: KernelParams) -> Result<Self> {
        if !(side_length > 0.0 && side_length.is_finite()) {
            return Err(Error::param(format!("side length must be positive, got {side_length}")));
        }
        if params.k_cutoff < 1 {
            return Err(Error::param("k_cutoff must be at least 1"));
        }
        if !(params.alpha_factor > 0.0 && params.alpha_factor.is_finite()) {
            return Err(Error::param("splitting alpha must be positive"));
        }
        let alpha = params.alpha_factor / side_length;
        let volume = side_length.powi(3);
        let kc = params.k_cutoff as i32;
        let mut modes = Vec::new();
        for kx in 0..=kc {
            for ky in -kc..=kc {
                for kz in -kc..=kc {
                    // Half space: keep one of each ±k pair.
                    let positive = kx > 0 || (kx == 0 && (ky > 0 || (ky == 0 && kz > 0)));
                    if !positive {
                        continue;
                    }
                    let q = [
                        2.0 * PI * kx as f64 / side_length,
                        2.0 * PI * ky as f64 / side_length,
                        2.0 * PI * kz as f64 / side_length,
                    ];
                    let q2 = q[0] * q[0] + q[1] * q[1] + q[2] * q[2];
                    let damping = (-q2 / (4.0 * alpha * alpha)).exp();
                    if damping < DAMPING_FLOOR {
                        continue;
                    }
                    modes.push(Mode {
                        k: [kx, ky, kz],
                        weight: 2.0 * damping / (q2 * volume),
                        q,
                    });
                }
            }
        }
        let mut kernel = EwaldKernel {
            side_length,
            k_cutoff: params.k_cutoff,
            splitting_alpha: alpha,
            r_at_zero: 0.0,
            real_cutoff: REAL_SPACE_EXTENT / alpha,
            background: 1.0 / (4.0 * alpha * alpha * volume),
            modes,
        };
        kernel.r_at_zero = kernel.regular_part([0.0; 3]);
        Ok(kernel)
    }

    /// Kernel with the default splitting `α = 5/ℓ` and `k_cutoff = 12`.
    pub fn with_defaults(side_length: f64) -> Result<Self> {
        Self::new(side_length, KernelParams::default())
    }

    pub fn side_length(&self) -> f64 {
        self.side_length
    }

    pub fn volume(&self) -> f64 {
        self.side_length.powi(3)
    }

    pub fn k_cutoff(&self) -> usize {
        self.k_cutoff
    }

    pub fn splitting_alpha(&self) -> f64 {
        self.splitting_alpha
    }

    /// `R(0)`, the finite part of `G` at the origin.
    pub fn r_at_zero(&self) -> f64 {
        self.r_at_zero
    }

    /// Real-space cutoff beyond which `erfc(αr)` is negligible.
    pub fn real_cutoff(&self) -> f64 {
        self.real_cutoff
    }

    /// `1/(4α²V)`, subtracted so that `G` has zero mean.
    pub fn background_constant(&self) -> f64 {
        self.background
    }

    pub fn params(&self) -> KernelParams {
        KernelParams {
            k_cutoff: self.k_cutoff,
            alpha_factor: self.splitting_alpha * self.side_length,
        }
    }

    /// Half-space reciprocal modes as `(q, 2/V·exp(−q²/4α²)/q²)`.
    pub fn modes(&self) -> impl Iterator<Item = (Point, f64)> + '_ {
        self.modes.iter().map(|m| (m.q, m.weight))
    }

    /// Lattice images `d + nℓ` with `|d + nℓ| < real_cutoff + extra`, for a
    /// displacement already reduced to the minimum image.
    pub fn images(&self, d: Point, extra: f64) -> Vec<Point> {
        let l = self.side_length;
        let reach = self.real_cutoff + extra;
        let m = ((reach / l) + 0.5).ceil() as i32;
        let mut out = Vec::new();
        for nx in -m..=m {
            for ny in -m..=m {
                for nz in -m..=m {
                    let z = [d[0] + nx as f64 * l, d[1] + ny as f64 * l, d[2] + nz as f64 * l];
                    if norm(z) < reach {
                        out.push(z);
                    }
                }
            }
        }
        out
    }

    /// Periodic Green's function `G_ℓ(x)`.
    pub fn green_eval(&self, x: Point) -> Result<f64> {
        let y = self.canonical(x);
        let rho = norm(y);
        if rho < SINGULAR_FRACTION * self.side_length {
            return Err(Error::Singular { distance: rho });
        }
        Ok(self.regular_canonical(y) + 1.0 / (4.0 * PI * rho))
    }

    /// Regular part `R_ℓ(x) = G_ℓ(x) − 1/(4π|x|)`, `|x|` the minimum-image
    /// distance. Continuous at the origin with value [`Self::r_at_zero`].
    pub fn regular_part(&self, x: Point) -> f64 {
        self.regular_canonical(self.canonical(x))
    }

    /// Far/near decomposition `(η_ρ G, G − η_ρ G)` of the kernel.
    pub fn split_kernel(&self, trunc: &TruncationProfile, x: Point) -> Result<(f64, f64)> {
        if !(trunc.rho > 0.0 && trunc.rho < 0.5 * self.side_length) {
            return Err(Error::param(format!(
                "truncation radius {} outside (0, {})",
                trunc.rho,
                0.5 * self.side_length
            )));
        }
        let g = self.green_eval(x)?;
        let r = norm(min_image(x, self.side_length));
        let w = trunc.far_weight(r);
        let far = if w == 0.0 {
            0.0
        } else if w == 1.0 {
            g
        } else {
            w * g
        };
        Ok(exact_split(g, far))
    }

    /// Minimum image with absolute, sorted components. `G` is invariant
    /// under the cubic point group, so this is exact and makes the
    /// evaluation bit-identical across symmetric arguments.
    fn canonical(&self, x: Point) -> Point {
        let d = min_image(x, self.side_length);
        let mut y = [d[0].abs(), d[1].abs(), d[2].abs()];
        y.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
        y
    }

    fn regular_canonical(&self, y: Point) -> f64 {
        let alpha = self.splitting_alpha;
        let l = self.side_length;
        let rho = norm(y);

        // Nearest image: −erf(αρ)/(4πρ), with its series near the origin.
        let ar = alpha * rho;
        let near = if ar < 1e-4 {
            -alpha / (2.0 * PI.powf(1.5)) * (1.0 - ar * ar / 3.0)
        } else {
            -libm::erf(ar) / (4.0 * PI * rho)
        };

        let mut real = 0.0;
        let m = ((self.real_cutoff / l) + 0.5).ceil() as i32;
        for nx in -m..=m {
            for ny in -m..=m {
                for nz in -m..=m {
                    if nx == 0 && ny == 0 && nz == 0 {
                        continue;
                    }
                    let z = [y[0] + nx as f64 * l, y[1] + ny as f64 * l, y[2] + nz as f64 * l];
                    let r = norm(z);
                    if r < self.real_cutoff {
                        real += libm::erfc(alpha * r) / (4.0 * PI * r);
                    }
                }
            }
        }

        near + real + self.reciprocal_sum(y) - self.background
    }

    fn reciprocal_sum(&self, y: Point) -> f64 {
        let kc = self.k_cutoff;
        let w = 2.0 * PI / self.side_length;
        let table = |c: f64| -> Vec<Complex64> {
            let step = Complex64::from_polar(1.0, w * c);
            let mut t = Vec::with_capacity(kc + 1);
            let mut z = Complex64::new(1.0, 0.0);
            for k in 0..=kc {
                // Recompute exactly every few steps to limit drift.
                if k % 8 == 0 {
                    z = Complex64::from_polar(1.0, w * c * k as f64);
                }
                t.push(z);
                z *= step;
            }
            t
        };
        let tx = table(y[0]);
        let ty = table(y[1]);
        let tz = table(y[2]);
        let phase = |t: &[Complex64], k: i32| -> Complex64 {
            if k >= 0 {
                t[k as usize]
            } else {
                t[(-k) as usize].conj()
            }
        };
        self.modes
            .iter()
            .map(|m| {
                let p = tx[m.k[0] as usize] * phase(&ty, m.k[1]) * phase(&tz, m.k[2]);
                m.weight * p.re
            })
            .sum()
    }
}

/// Returns `(far, near)` with `far + near == g` in floating point, nudging
/// `far` by at most a few ulps.
fn exact_split(g: f64, far: f64) -> (f64, f64) {
    let mut far = far;
    for _ in 0..8 {
        let near = g - far;
        let sum = far + near;
        if sum == g {
            return (far, near);
        }
        far = if sum < g { far.next_up() } else { far.next_down() };
    }
    (g, 0.0)
}

/// Which of the two cutoff conventions a [`TruncationProfile`] follows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CutoffConvention {
    /// `η(t) = 1` for `t ≤ 1`, `η(t) = 0` for `t ≥ 2`; used to truncate the
    /// whole-space interaction range.
    Truncation,
    /// `η(t) = 0` for `t ≤ 1/2`, `η(t) = 1` for `t ≥ 1`; extracts the far
    /// field of the periodic kernel.
    FarField,
}

/// Smooth monotone radial cutoff `η_ρ(x) = η(|x|/ρ)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruncationProfile {
    pub rho: f64,
    pub convention: CutoffConvention,
}

impl TruncationProfile {
    /// Non-increasing cutoff: one inside `ρ`, zero beyond `2ρ`.
    pub fn truncation(rho: f64) -> Self {
        TruncationProfile {
            rho,
            convention: CutoffConvention::Truncation,
        }
    }

    /// Non-decreasing cutoff: zero inside `ρ/2`, one beyond `ρ`.
    pub fn far_field(rho: f64) -> Self {
        TruncationProfile {
            rho,
            convention: CutoffConvention::FarField,
        }
    }

    /// Profile value `η(t)` at the dimensionless radius `t = |x|/ρ`.
    pub fn eta(&self, t: f64) -> f64 {
        match self.convention {
            CutoffConvention::Truncation => 1.0 - smooth_step(t - 1.0),
            CutoffConvention::FarField => smooth_step(2.0 * t - 1.0),
        }
    }

    /// `η_ρ` evaluated at distance `r`.
    pub fn at(&self, r: f64) -> f64 {
        self.eta(r / self.rho)
    }

    /// Weight of the far-field part at distance `r`: vanishes near the
    /// origin and equals one far away, under either convention.
    pub fn far_weight(&self, r: f64) -> f64 {
        match self.convention {
            CutoffConvention::Truncation => 1.0 - self.at(r),
            CutoffConvention::FarField => self.at(r),
        }
    }

    /// Radius beyond which the profile is constant.
    pub fn outer_radius(&self) -> f64 {
        match self.convention {
            CutoffConvention::Truncation => 2.0 * self.rho,
            CutoffConvention::FarField => self.rho,
        }
    }

    /// Radius below which the profile is constant.
    pub fn inner_radius(&self) -> f64 {
        match self.convention {
            CutoffConvention::Truncation => self.rho,
            CutoffConvention::FarField => 0.5 * self.rho,
        }
    }
}

/// C^∞ step: 0 for `s ≤ 0`, 1 for `s ≥ 1`, built from `exp(−1/s)`.
pub fn smooth_step(s: f64) -> f64 {
    if s <= 0.0 {
        return 0.0;
    }
    if s >= 1.0 {
        return 1.0;
    }
    let a = (-1.0 / s).exp();
    let b = (-1.0 / (1.0 - s)).exp();
    a / (a + b)
}

/// Normalized Fourier transform of a uniform ball,
/// `F(u) = 3(sin u − u cos u)/u³` with `u = k·radius`.
pub fn ball_form_factor(k_magnitude: f64, radius: f64) -> f64 {
    let u = k_magnitude * radius;
    if u < 0.3 {
        // Series avoids the cancellation in sin u − u cos u.
        let u2 = u * u;
        1.0 - u2 / 10.0 * (1.0 - u2 / 28.0 * (1.0 - u2 / 54.0 * (1.0 - u2 / 88.0)))
    } else {
        3.0 * (u.sin() - u * u.cos()) / (u * u * u)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn unit() -> EwaldKernel {
        EwaldKernel::with_defaults(1.0).unwrap()
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(EwaldKernel::new(1.0, KernelParams { k_cutoff: 0, alpha_factor: 5.0 }).is_err());
        assert!(EwaldKernel::new(1.0, KernelParams { k_cutoff: 4, alpha_factor: 0.0 }).is_err());
        assert!(EwaldKernel::new(-1.0, KernelParams::default()).is_err());
    }

    #[test]
    fn singular_at_lattice_points() {
        let k = unit();
        assert!(matches!(k.green_eval([0.0; 3]), Err(Error::Singular { .. })));
        assert!(matches!(k.green_eval([1.0, -2.0, 3.0]), Err(Error::Singular { .. })));
        assert!(k.green_eval([1e-6, 0.0, 0.0]).is_ok());
    }

    #[test]
    fn evenness_is_exact() {
        let k = unit();
        let x = [0.123, -0.271, 0.402];
        let g = k.green_eval(x).unwrap();
        assert_eq!(g, k.green_eval([-0.123, 0.271, -0.402]).unwrap());
        assert_eq!(k.regular_part(x), k.regular_part([-0.123, 0.271, -0.402]));
        // permutations are also bit-identical
        assert_eq!(g, k.green_eval([-0.271, 0.402, 0.123]).unwrap());
    }

    #[test]
    fn lattice_periodicity() {
        let k = unit();
        let x = [0.31, 0.07, -0.22];
        let g = k.green_eval(x).unwrap();
        for z in [[1.0, 0.0, 0.0], [0.0, -2.0, 1.0], [3.0, 3.0, -3.0]] {
            let gz = k.green_eval([x[0] + z[0], x[1] + z[1], x[2] + z[2]]).unwrap();
            assert!((g - gz).abs() < 1e-12);
        }
    }

    #[test]
    fn scaling_between_sides() {
        // G_ℓ(x) = G_1(x/ℓ)/ℓ
        let k1 = unit();
        let k7 = EwaldKernel::with_defaults(7.0).unwrap();
        let x = [0.2, 0.35, -0.1];
        let g1 = k1.green_eval(x).unwrap();
        let g7 = k7.green_eval([7.0 * x[0], 7.0 * x[1], 7.0 * x[2]]).unwrap();
        assert_relative_eq!(g7, g1 / 7.0, max_relative = 1e-12);
        assert_relative_eq!(k7.r_at_zero(), k1.r_at_zero() / 7.0, max_relative = 1e-12);
    }

    #[test]
    fn alpha_independence() {
        let a = EwaldKernel::new(1.0, KernelParams { k_cutoff: 16, alpha_factor: 4.0 }).unwrap();
        let b = EwaldKernel::new(1.0, KernelParams { k_cutoff: 16, alpha_factor: 6.5 }).unwrap();
        for x in [[0.1, 0.2, 0.3], [0.5, 0.5, 0.5], [0.01, 0.0, 0.0], [0.44, -0.13, 0.27]] {
            let ga = a.green_eval(x).unwrap();
            let gb = b.green_eval(x).unwrap();
            assert!((ga - gb).abs() < 1e-10, "{x:?}: {ga} vs {gb}");
        }
        assert!((a.r_at_zero() - b.r_at_zero()).abs() < 1e-10);
    }

    #[test]
    fn k_cutoff_refinement_is_stable() {
        let a = EwaldKernel::new(1.0, KernelParams { k_cutoff: 12, alpha_factor: 5.0 }).unwrap();
        let b = EwaldKernel::new(1.0, KernelParams { k_cutoff: 20, alpha_factor: 5.0 }).unwrap();
        let x = [0.3, -0.2, 0.15];
        assert!((a.green_eval(x).unwrap() - b.green_eval(x).unwrap()).abs() < 1e-14);
    }

    #[test]
    fn regular_part_continuous_at_origin() {
        let k = unit();
        let r0 = k.r_at_zero();
        assert_eq!(k.regular_part([0.0; 3]), r0);
        let near = k.regular_part([1e-7, 0.0, 0.0]);
        assert!((near - r0).abs() < 1e-10);
        // limit of G − 1/(4π|x|)
        let x = 1e-4;
        let g = k.green_eval([x, 0.0, 0.0]).unwrap();
        assert!((g - 1.0 / (4.0 * PI * x) - r0).abs() < 1e-6);
    }

    #[test]
    fn split_kernel_support_and_sum() {
        let k = unit();
        let far_profile = TruncationProfile::far_field(0.2);
        let (far, near) = k.split_kernel(&far_profile, [0.05, 0.0, 0.0]).unwrap();
        assert_eq!(far, 0.0);
        assert_eq!(near, k.green_eval([0.05, 0.0, 0.0]).unwrap());
        let (far, near) = k.split_kernel(&far_profile, [0.3, 0.1, 0.0]).unwrap();
        assert_eq!(near, 0.0);
        assert_eq!(far, k.green_eval([0.3, 0.1, 0.0]).unwrap());

        let cut = TruncationProfile::truncation(0.1);
        let (far, near) = k.split_kernel(&cut, [0.25, 0.0, 0.0]).unwrap();
        assert_eq!(near, 0.0);
        assert_eq!(far, k.green_eval([0.25, 0.0, 0.0]).unwrap());

        assert!(k.split_kernel(&TruncationProfile::far_field(0.6), [0.1, 0.0, 0.0]).is_err());
        assert!(k.split_kernel(&TruncationProfile::far_field(0.0), [0.1, 0.0, 0.0]).is_err());
    }

    #[test]
    fn profiles_are_monotone_and_bounded() {
        let cut = TruncationProfile::truncation(1.0);
        let far = TruncationProfile::far_field(1.0);
        let mut prev_cut = 1.0;
        let mut prev_far = 0.0;
        for i in 0..=300 {
            let t = i as f64 / 100.0;
            let (c, f) = (cut.eta(t), far.eta(t));
            assert!((0.0..=1.0).contains(&c) && (0.0..=1.0).contains(&f));
            assert!(c <= prev_cut && f >= prev_far);
            prev_cut = c;
            prev_far = f;
        }
        assert_eq!(cut.eta(1.0), 1.0);
        assert_eq!(cut.eta(2.0), 0.0);
        assert_eq!(far.eta(0.5), 0.0);
        assert_eq!(far.eta(1.0), 1.0);
    }

    #[test]
    fn form_factor_values() {
        assert_eq!(ball_form_factor(0.0, 1.0), 1.0);
        assert_relative_eq!(ball_form_factor(PI, 1.0), 3.0 / (PI * PI), max_relative = 1e-14);
        // series and closed form agree across the switch
        let u: f64 = 0.3;
        let closed = 3.0 * (u.sin() - u * u.cos()) / (u * u * u);
        assert_relative_eq!(ball_form_factor(u - 1e-12, 1.0), closed, max_relative = 1e-13);
        let u = 1e-5;
        assert_relative_eq!(ball_form_factor(u, 1.0), 1.0 - u * u / 10.0, max_relative = 1e-15);
    }

    #[test]
    fn form_factor_envelope() {
        for i in 0..2000 {
            let u = 10.0 + i as f64 * 0.137;
            let f = ball_form_factor(u, 1.0);
            assert!(f.abs() <= 3.1 / (u * u));
        }
        for i in 0..1000 {
            let u = i as f64 * 0.01;
            assert!(ball_form_factor(u, 1.0).abs() <= 1.0);
        }
    }
}
