//! Gauss–Legendre rules and the distance distributions of uniform balls.
//!
//! Averages of radial kernels over one or two uniformly filled balls reduce
//! to 1D integrals against the density of the mutual distance `t = |x − y|`.
//! Both densities are piecewise polynomial, so composite Gauss–Legendre
//! quadrature on the polynomial pieces is exact up to the smoothness of the
//! kernel.

use std::collections::HashMap;
use std::num::NonZeroUsize;
use std::sync::{Mutex, OnceLock};

use gauss_quad::legendre::GaussLegendre;

/// Node count used for ball–ball averages of smooth kernels.
pub const BALL_AVERAGE_NODES: usize = 64;

/// Cached Gauss–Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> &'static [(f64, f64)] {
    static RULES: OnceLock<Mutex<HashMap<usize, &'static [(f64, f64)]>>> = OnceLock::new();
    let rules = RULES.get_or_init(|| Mutex::new(HashMap::new()));
    let mut guard = rules.lock().expect("quadrature cache poisoned");
    guard.entry(n).or_insert_with(|| {
        let degree = NonZeroUsize::new(n.max(1)).expect("nonzero");
        let rule = GaussLegendre::new(degree);
        Box::leak(rule.into_node_weight_pairs())
    })
}

/// Integrates `f` over `[a, b]` with an `n`-point Gauss–Legendre rule.
pub fn integrate<F: FnMut(f64) -> f64>(a: f64, b: f64, n: usize, mut f: F) -> f64 {
    if b <= a {
        return 0.0;
    }
    let half = 0.5 * (b - a);
    let mid = 0.5 * (b + a);
    let s: f64 = gauss_legendre(n)
        .iter()
        .map(|&(x, w)| w * f(mid + half * x))
        .sum();
    s * half
}

/// Density of the distance between two independent uniform points of one
/// ball of radius `r`; supported on `[0, 2r]`.
pub fn self_distance_density(t: f64, r: f64) -> f64 {
    if !(0.0..=2.0 * r).contains(&t) {
        return 0.0;
    }
    let s = t / r;
    3.0 * s * s / r * (1.0 - 0.75 * s + s * s * s / 16.0)
}

/// Density of the distance between uniform points of two disjoint balls of
/// radii `a` and `b` whose centers are `d ≥ a + b` apart.
pub fn pair_distance_density(t: f64, d: f64, a: f64, b: f64) -> f64 {
    let lo = (d - a).max(t - b);
    let hi = (d + a).min(t + b);
    if hi <= lo || t <= 0.0 {
        return 0.0;
    }
    // The integrand is a quartic in ρ: three Gauss points are exact.
    const X: [f64; 3] = [-0.774_596_669_241_483_4, 0.0, 0.774_596_669_241_483_4];
    const W: [f64; 3] = [5.0 / 9.0, 8.0 / 9.0, 5.0 / 9.0];
    let half = 0.5 * (hi - lo);
    let mid = 0.5 * (hi + lo);
    let inner: f64 = X
        .iter()
        .zip(W.iter())
        .map(|(&x, &w)| {
            let rho = mid + half * x;
            w * (a * a - (d - rho).powi(2)) * (b * b - (rho - t).powi(2))
        })
        .sum::<f64>()
        * half;
    9.0 * t * inner / (16.0 * d * a.powi(3) * b.powi(3))
}

/// Average of the radial kernel `f(t)` over pairs of points in one ball.
pub fn ball_self_average<F: FnMut(f64) -> f64>(r: f64, n: usize, f: F) -> f64 {
    ball_self_average_split(r, n, &[], f)
}

/// As [`ball_self_average`], with extra breakpoints where `f` has kinks.
pub fn ball_self_average_split<F: FnMut(f64) -> f64>(r: f64, n: usize, breaks: &[f64], mut f: F) -> f64 {
    piecewise(&[0.0, 2.0 * r], breaks, n, |t| f(t) * self_distance_density(t, r))
}

/// Average of the radial kernel `f(t)` over point pairs drawn from two
/// disjoint balls (radii `a`, `b`, center distance `d ≥ a + b`).
pub fn ball_pair_average<F: FnMut(f64) -> f64>(d: f64, a: f64, b: f64, n: usize, f: F) -> f64 {
    ball_pair_average_split(d, a, b, n, &[], f)
}

/// As [`ball_pair_average`], with extra breakpoints where `f` has kinks.
pub fn ball_pair_average_split<F: FnMut(f64) -> f64>(
    d: f64,
    a: f64,
    b: f64,
    n: usize,
    breaks: &[f64],
    mut f: F,
) -> f64 {
    let gap = (a - b).abs();
    let knots = [d - a - b, d - gap, d + gap, d + a + b];
    piecewise(&knots, breaks, n, |t| f(t) * pair_distance_density(t, d, a, b))
}

/// Composite rule over the pieces cut by `knots` and the `breaks` that fall
/// strictly inside `[knots[0], knots.last()]`.
fn piecewise<F: FnMut(f64) -> f64>(knots: &[f64], breaks: &[f64], n: usize, mut f: F) -> f64 {
    let (lo, hi) = (knots[0], knots[knots.len() - 1]);
    let mut points: Vec<f64> = knots.to_vec();
    points.extend(breaks.iter().copied().filter(|&b| b > lo && b < hi));
    points.sort_by(|a, b| a.partial_cmp(b).expect("finite breakpoints"));
    points.dedup();
    points
        .windows(2)
        .map(|w| integrate(w[0], w[1], n, &mut f))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn densities_normalize() {
        let r = 1.3;
        assert_relative_eq!(ball_self_average(r, 16, |_| 1.0), 1.0, epsilon = 1e-14);
        for &(d, a, b) in &[(3.0, 1.0, 1.0), (2.5, 0.5, 2.0), (10.0, 0.3, 0.7), (1.7, 1.0, 0.7)] {
            assert_relative_eq!(ball_pair_average(d, a, b, 16, |_| 1.0), 1.0, epsilon = 1e-13);
        }
    }

    #[test]
    fn newton_theorem_for_pairs() {
        // ⟨1/t⟩ over two disjoint balls equals 1/d.
        for &(d, a, b) in &[(3.0, 1.0, 1.0), (2.5, 0.5, 2.0), (1.7, 1.0, 0.7)] {
            let avg = ball_pair_average(d, a, b, 64, |t| 1.0 / t);
            assert_relative_eq!(avg, 1.0 / d, max_relative = 1e-10);
        }
    }

    #[test]
    fn self_inverse_distance() {
        // ⟨1/t⟩ over one ball is 6/(5r).
        let r = 0.8;
        assert_relative_eq!(ball_self_average(r, 32, |t| 1.0 / t), 1.2 / r, max_relative = 1e-13);
    }

    #[test]
    fn mean_square_distance_matches_moments() {
        // E|x − y|² = d² + 3(a² + b²)/5 for independent uniform points.
        let (d, a, b) = (4.0, 1.2, 0.9);
        let avg = ball_pair_average(d, a, b, 16, |t| t * t);
        assert_relative_eq!(avg, d * d + 0.6 * (a * a + b * b), max_relative = 1e-13);
    }
}
