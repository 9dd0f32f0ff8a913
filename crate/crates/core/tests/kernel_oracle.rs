//! Cross-checks of the Ewald kernel against a direct real-space image sum.

use std::f64::consts::PI;

use okdrop_core::kernel::{EwaldKernel, KernelParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const WINDOW_RADIUS: f64 = 30.0;
const WINDOW_WIDTH: f64 = 0.08;

/// Radial window in units of the image radius: one near the origin, zero
/// beyond one, Gaussian-smooth in between.
fn window(s: f64) -> f64 {
    0.5 * libm::erfc((s - 0.5) / WINDOW_WIDTH)
}

fn simpson<F: Fn(f64) -> f64>(a: f64, b: f64, n: usize, f: F) -> f64 {
    let h = (b - a) / n as f64;
    let mut acc = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(a + i as f64 * h);
    }
    acc * h / 3.0
}

/// Unit torus: Σ_n w(|x+n|/L)/(4π|x+n|) minus the integral of the same
/// windowed kernel, which is the uniform background.
fn image_sum_green(x: [f64; 3], background: f64) -> f64 {
    let m = WINDOW_RADIUS.ceil() as i32 + 1;
    let mut acc = 0.0;
    for nx in -m..=m {
        for ny in -m..=m {
            for nz in -m..=m {
                let z = [x[0] + nx as f64, x[1] + ny as f64, x[2] + nz as f64];
                let r = (z[0] * z[0] + z[1] * z[1] + z[2] * z[2]).sqrt();
                let s = r / WINDOW_RADIUS;
                if s < 1.0 {
                    acc += window(s) / (4.0 * PI * r);
                }
            }
        }
    }
    acc - background
}

fn window_background() -> f64 {
    WINDOW_RADIUS * WINDOW_RADIUS * simpson(0.0, 1.2, 4000, |s| window(s) * s)
}

#[test]
fn ewald_matches_image_sum_at_random_points() {
    let kernel = EwaldKernel::with_defaults(1.0).unwrap();
    let bg = window_background();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let x = [
            rng.random_range(-0.5..0.5),
            rng.random_range(-0.5..0.5),
            rng.random_range(-0.5..0.5),
        ];
        let ewald = kernel.green_eval(x).unwrap();
        let direct = image_sum_green(x, bg);
        worst = worst.max((ewald - direct).abs());
    }
    assert!(worst < 1e-6, "worst deviation {worst:e}");
}

#[test]
fn regular_part_at_origin_matches_image_sum() {
    let kernel = EwaldKernel::with_defaults(1.0).unwrap();
    let bg = window_background();
    // The origin term w(0)/(4π·0) is the removed Newtonian part; with w flat
    // near zero the remaining images give R(0) directly.
    let m = WINDOW_RADIUS.ceil() as i32 + 1;
    let mut acc = 0.0;
    for nx in -m..=m {
        for ny in -m..=m {
            for nz in -m..=m {
                if nx == 0 && ny == 0 && nz == 0 {
                    continue;
                }
                let r = ((nx * nx + ny * ny + nz * nz) as f64).sqrt();
                let s = r / WINDOW_RADIUS;
                if s < 1.0 {
                    acc += window(s) / (4.0 * PI * r);
                }
            }
        }
    }
    let direct = acc - bg;
    let r0 = kernel.r_at_zero();
    assert!((r0 - direct).abs() < 1e-6, "R(0) = {r0}, image sum {direct}");
    // Madelung-type constant of the simple cubic lattice, 4π·R(0).
    println!("R(0) on the unit torus = {r0:.12}, 4πR(0) = {:.10}", 4.0 * PI * r0);
}

#[test]
fn regular_part_limit_extrapolation() {
    let kernel = EwaldKernel::with_defaults(1.0).unwrap();
    let dir = [0.6, -0.48, 0.64];
    let at = |h: f64| {
        let x = [dir[0] * h, dir[1] * h, dir[2] * h];
        kernel.green_eval(x).unwrap() - 1.0 / (4.0 * PI * h)
    };
    // G − 1/(4π|x|) = R(0) + O(|x|²); Richardson removes the quadratic term.
    let (h1, h2) = (2e-2, 1e-2);
    let limit = (4.0 * at(h2) - at(h1)) / 3.0;
    assert!((limit - kernel.r_at_zero()).abs() < 1e-6);
}

fn unit_cube_inverse_distance() -> f64 {
    // ∫_{[-½,½]³} dx/|x| = (3/2)∫_{[-½,½]²} dA/√(¼+u²+v²) by the divergence theorem.
    let n = 400;
    let inner = |u: f64| simpson(-0.5, 0.5, n, |v| 1.0 / (0.25 + u * u + v * v).sqrt());
    1.5 * simpson(-0.5, 0.5, n, inner)
}

#[test]
fn green_has_zero_mean() {
    let kernel = EwaldKernel::with_defaults(1.0).unwrap();
    let n = 32;
    let h = 1.0 / n as f64;
    let mut acc = 0.0;
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                if i == 0 && j == 0 && k == 0 {
                    continue;
                }
                let x = [i as f64 * h, j as f64 * h, k as f64 * h];
                acc += kernel.green_eval(x).unwrap();
            }
        }
    }
    let origin_cell = h * h * unit_cube_inverse_distance() / (4.0 * PI) + kernel.r_at_zero() * h.powi(3);
    let mean = acc * h.powi(3) + origin_cell;
    // Midpoint error is h²/24 · ΔG, with ΔG = 1 away from the origin.
    assert!(mean.abs() < 2e-4, "mean {mean:e}");
}

#[test]
fn regular_part_scales_inversely_with_side() {
    let mut products = Vec::new();
    for side in [1.0, 2.0, 4.0, 8.0] {
        let kernel = EwaldKernel::new(side, KernelParams::default()).unwrap();
        let n = 9;
        let mut max_r: f64 = 0.0;
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    let x = [
                        side * (i as f64 / n as f64 - 0.5),
                        side * (j as f64 / n as f64 - 0.5),
                        side * (k as f64 / n as f64 - 0.5),
                    ];
                    max_r = max_r.max(kernel.regular_part(x).abs());
                }
            }
        }
        products.push(side * max_r);
    }
    let (lo, hi) = products
        .iter()
        .fold((f64::MAX, f64::MIN), |(lo, hi), &p| (lo.min(p), hi.max(p)));
    assert!(hi < 1.0 && hi - lo < 1e-10, "{products:?}");
}

#[test]
fn far_near_reconstruction_at_random_points() {
    use okdrop_core::kernel::TruncationProfile;
    let kernel = EwaldKernel::with_defaults(1.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for profile in [TruncationProfile::far_field(0.3), TruncationProfile::truncation(0.2)] {
        for _ in 0..100 {
            let x = [
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
            ];
            let (far, near) = kernel.split_kernel(&profile, x).unwrap();
            assert_eq!(far + near, kernel.green_eval(x).unwrap());
        }
    }
}
