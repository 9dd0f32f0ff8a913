//! Integrals over the intersection of a ball with an axis-aligned box.
//!
//! Coordinates are relative to the ball center; the box is `[a, b]`. The
//! innermost coordinate is integrated exactly for quadratic integrands, the
//! outer two with Gauss–Legendre after a sine substitution that removes the
//! square-root behaviour at the rim, split at every kink of the clipped
//! cross-sections and graded towards the kinks.

use std::f64::consts::PI;

use crate::geometry::Point;
use crate::quadrature::gauss_legendre;

const OUTER_NODES: usize = 20;
const INNER_NODES: usize = 4;

/// Whether the box `[a, b]` contains the whole ball of radius `r`.
pub(crate) fn box_contains_ball(r: f64, a: Point, b: Point) -> bool {
    (0..3).all(|k| a[k] <= -r && b[k] >= r)
}

/// Whether the box `[a, b]` misses the ball of radius `r` entirely.
pub(crate) fn box_misses_ball(r: f64, a: Point, b: Point) -> bool {
    let mut d2 = 0.0;
    for k in 0..3 {
        let c = 0.0f64.clamp(a[k], b[k]);
        d2 += c * c;
    }
    d2 >= r * r
}

/// Integrates `t ↦ g(t)` over `[lo, hi] ⊂ [−s, s]` with `t = s sin θ`,
/// split at `breaks`.
fn rim_integral<G: FnMut(f64) -> f64>(s: f64, lo: f64, hi: f64, breaks: &[f64], n: usize, mut g: G) -> f64 {
    if hi <= lo || s <= 0.0 {
        return 0.0;
    }
    let angle = |t: f64| (t / s).clamp(-1.0, 1.0).asin();
    // (angle, is_kink)
    let mut pts = vec![(angle(lo), false), (angle(hi), false)];
    pts.extend(breaks.iter().filter(|&&t| t > lo && t < hi).map(|&t| (angle(t), true)));
    pts.sort_by(|x, y| x.0.total_cmp(&y.0));
    pts.dedup_by(|x, y| x.0 == y.0);
    let rule = gauss_legendre(n);
    let mut acc = 0.0;
    for w in pts.windows(2) {
        let ((p, left), (q, right)) = (w[0], w[1]);
        for &(x, wt) in rule {
            // Grade the nodes towards kinks, where the clipped
            // cross-sections have fractional-power behaviour.
            let u = 0.5 * (x + 1.0);
            let (psi, dpsi) = match (left, right) {
                (false, false) => (u, 1.0),
                (true, false) => (u * u * u, 3.0 * u * u),
                (false, true) => (1.0 - (1.0 - u).powi(3), 3.0 * (1.0 - u) * (1.0 - u)),
                (true, true) => (
                    u * u * u * (10.0 - 15.0 * u + 6.0 * u * u),
                    30.0 * u * u * (1.0 - u) * (1.0 - u),
                ),
            };
            let th = p + (q - p) * psi;
            acc += 0.5 * wt * (q - p) * dpsi * s * th.cos() * g(s * th.sin());
        }
    }
    acc
}

fn kinks(s2: f64, offsets: &[f64]) -> Vec<f64> {
    let mut v = Vec::new();
    for &c in offsets {
        if c < s2 {
            let t = (s2 - c).sqrt();
            v.push(t);
            v.push(-t);
        }
    }
    v
}

/// `∫_{B_r ∩ [a,b]} f` for an integrand that is quadratic in the last
/// coordinate. Two integrands are carried at once.
pub(crate) fn ball_box_integrals<F: FnMut(Point) -> [f64; 2]>(r: f64, a: Point, b: Point, mut f: F) -> [f64; 2] {
    let mut out = [0.0; 2];
    if box_misses_ball(r, a, b) {
        return out;
    }
    let (a1, b1, a2, b2) = (a[1], b[1], a[2], b[2]);
    let outer_offsets = [
        a1 * a1,
        b1 * b1,
        a2 * a2,
        b2 * b2,
        a1 * a1 + a2 * a2,
        a1 * a1 + b2 * b2,
        b1 * b1 + a2 * a2,
        b1 * b1 + b2 * b2,
    ];
    let outer_breaks = kinks(r * r, &outer_offsets);
    let inner_rule = gauss_legendre(INNER_NODES);
    for k in 0..2 {
        out[k] = rim_integral(r, a[0].max(-r), b[0].min(r), &outer_breaks, OUTER_NODES, |x| {
            let s2 = (r * r - x * x).max(0.0);
            let s = s2.sqrt();
            let mid_breaks = kinks(s2, &[a2 * a2, b2 * b2]);
            rim_integral(s, a1.max(-s), b1.min(s), &mid_breaks, OUTER_NODES, |y| {
                let h = (s2 - y * y).max(0.0).sqrt();
                let (lo, hi) = (a2.max(-h), b2.min(h));
                if hi <= lo {
                    return 0.0;
                }
                let half = 0.5 * (hi - lo);
                let mid = 0.5 * (hi + lo);
                inner_rule
                    .iter()
                    .map(|&(z, w)| w * f([x, y, mid + half * z])[k])
                    .sum::<f64>()
                    * half
            })
        });
    }
    out
}

/// Angular measure of the circle of radius `rho` (centered at the origin)
/// lying inside the rectangle `[a0, b0] × [a1, b1]`.
fn arc_in_rectangle(rho: f64, a0: f64, b0: f64, a1: f64, b1: f64) -> f64 {
    let inside = |x: f64, y: f64| x >= a0 && x <= b0 && y >= a1 && y <= b1;
    if rho <= 0.0 {
        return if inside(0.0, 0.0) { 2.0 * PI } else { 0.0 };
    }
    let mut angles = vec![0.0, 2.0 * PI];
    let norm = |t: f64| t.rem_euclid(2.0 * PI);
    for c in [a0, b0] {
        if c.abs() < rho {
            let t = (c / rho).acos();
            angles.push(norm(t));
            angles.push(norm(-t));
        }
    }
    for c in [a1, b1] {
        if c.abs() < rho {
            let t = (c / rho).asin();
            angles.push(norm(t));
            angles.push(norm(PI - t));
        }
    }
    angles.sort_by(|x, y| x.total_cmp(y));
    angles
        .windows(2)
        .filter(|w| w[1] > w[0])
        .filter(|w| {
            let m = 0.5 * (w[0] + w[1]);
            inside(rho * m.cos(), rho * m.sin())
        })
        .map(|w| w[1] - w[0])
        .sum()
}

/// Area of the sphere of radius `r` inside the box `[a, b]`.
pub(crate) fn sphere_box_area(r: f64, a: Point, b: Point) -> f64 {
    if box_misses_ball(r, a, b) {
        return 0.0;
    }
    let (a0, b0, a1, b1) = (a[0], b[0], a[1], b[1]);
    let offsets = [
        a0 * a0,
        b0 * b0,
        a1 * a1,
        b1 * b1,
        a0 * a0 + a1 * a1,
        a0 * a0 + b1 * b1,
        b0 * b0 + a1 * a1,
        b0 * b0 + b1 * b1,
    ];
    let breaks = kinks(r * r, &offsets);
    // Archimedes: dA = r dφ dz.
    r * rim_integral(r, a[2].max(-r), b[2].min(r), &breaks, OUTER_NODES, |z| {
        let rho = (r * r - z * z).max(0.0).sqrt();
        arc_in_rectangle(rho, a0, b0, a1, b1)
    })
}
