use std::f64::consts::PI;

use approx::assert_relative_eq;
use okdrop_core::drop_model::e_ball;
use okdrop_core::kernel::EwaldKernel;
use okdrop_core::torus_energy::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Equal droplets on a BCC lattice with `n` cells per side.
fn bcc(spec: TorusSpec, n: usize, offset: f64) -> DropletConfig {
    let side = spec.side_length();
    let a = side / n as f64;
    let mut centers = Vec::new();
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                let base = [i as f64 * a + offset, j as f64 * a + offset, k as f64 * a + offset];
                centers.push(base);
                centers.push([base[0] + 0.5 * a, base[1] + 0.5 * a, base[2] + 0.5 * a]);
            }
        }
    }
    let mut masses = vec![spec.mass_budget() / centers.len() as f64; centers.len()];
    balance_masses(&mut masses, spec.mass_budget());
    let droplets = centers.into_iter().zip(masses).map(|(center, mass)| Droplet { center, mass }).collect();
    DropletConfig::new(spec, droplets).unwrap()
}

const WIDTH: f64 = 0.08;

fn window(s: f64) -> f64 {
    0.5 * libm::erfc((s - 0.5) / WIDTH)
}

fn window_dd(s: f64) -> f64 {
    let u = (s - 0.5) / WIDTH;
    2.0 * u / (WIDTH * WIDTH * PI.sqrt()) * (-u * u).exp()
}

fn simpson<F: Fn(f64) -> f64>(a: f64, b: f64, n: usize, f: F) -> f64 {
    let h = (b - a) / n as f64;
    let mut acc = f(a) + f(b);
    for i in 1..n {
        acc += if i % 2 == 1 { 4.0 } else { 2.0 } * f(a + i as f64 * h);
    }
    acc * h / 3.0
}

/// Windowed image sum of the ball–ball average of `1/(4π|z|)` over images
/// `z = d + nℓ`, `n ≠ 0` when `skip_origin`, minus the windowed background.
/// Far images use the second-order mean-value expansion
/// `f(D) + (r_a² + r_b²)/10 · Δf(D)`.
fn windowed_images(d: [f64; 3], ra: f64, rb: f64, side: f64, radius: f64, skip_origin: bool) -> f64 {
    let m = (radius / side).ceil() as i64 + 1;
    let mut acc = 0.0;
    for nx in -m..=m {
        for ny in -m..=m {
            for nz in -m..=m {
                if skip_origin && nx == 0 && ny == 0 && nz == 0 {
                    continue;
                }
                let z = [d[0] + nx as f64 * side, d[1] + ny as f64 * side, d[2] + nz as f64 * side];
                let t = (z[0] * z[0] + z[1] * z[1] + z[2] * z[2]).sqrt();
                let s = t / radius;
                if s >= 1.0 {
                    continue;
                }
                let f = window(s) / (4.0 * PI * t);
                let lap = window_dd(s) / (radius * radius * 4.0 * PI * t);
                acc += f + (ra * ra + rb * rb) / 10.0 * lap;
            }
        }
    }
    let background = radius * radius * simpson(0.0, 1.2, 6000, |s| window(s) * s) / side.powi(3);
    acc - background
}

#[test]
fn single_ball_matches_image_oracle() {
    let side = 8.0;
    let spec = TorusSpec::from_side(side, 1.5).unwrap();
    let m = spec.mass_budget();
    let config = DropletConfig::new(spec, vec![Droplet { center: [1.0, 2.0, 3.0], mass: m }]).unwrap();
    let kernel = EwaldKernel::with_defaults(side).unwrap();
    let r = (3.0 * m / (4.0 * PI)).cbrt();
    let oracle = 0.5 * m * m * (6.0 / (5.0 * 4.0 * PI * r) + windowed_images([0.0; 3], r, r, side, 20.0 * side, true));
    let e = coulomb_energy(&config, &kernel).unwrap();
    assert_relative_eq!(e, oracle, max_relative = 1e-6);
}

#[test]
fn potential_center_minus_antipode_matches_oracle() {
    let side = 8.0;
    let spec = TorusSpec::from_side(side, 1.5).unwrap();
    let m = spec.mass_budget();
    let c = [1.0, 2.0, 3.0];
    let config = DropletConfig::new(spec, vec![Droplet { center: c, mass: m }]).unwrap();
    let kernel = EwaldKernel::with_defaults(side).unwrap();
    let r = (3.0 * m / (4.0 * PI)).cbrt();
    let field = potential_field(&config, &kernel, 32).unwrap();
    // grid point nearest the center and its antipode
    let n = 32;
    let h = side / n as f64;
    let gi: [usize; 3] = std::array::from_fn(|a| (c[a] / h).round() as usize);
    let ga: [usize; 3] = std::array::from_fn(|a| (gi[a] + n / 2) % n);
    let idx = |g: [usize; 3]| (g[0] * n + g[1]) * n + g[2];
    let grid_diff = field.values[idx(gi)] - field.values[idx(ga)];

    let p_in: [f64; 3] = std::array::from_fn(|a| gi[a] as f64 * h);
    let p_out: [f64; 3] = std::array::from_fn(|a| ga[a] as f64 * h);
    let d_in: [f64; 3] = std::array::from_fn(|a| p_in[a] - c[a]);
    let d_out: [f64; 3] = std::array::from_fn(|a| p_out[a] - c[a]);
    let rho_in = (d_in[0] * d_in[0] + d_in[1] * d_in[1] + d_in[2] * d_in[2]).sqrt();
    let v_in = m * ((3.0 * r * r - rho_in * rho_in) / (8.0 * PI * r.powi(3))
        + windowed_images(d_in, r, 0.0, side, 20.0 * side, true));
    let v_out = m * windowed_images(d_out, r, 0.0, side, 20.0 * side, false);
    assert!((grid_diff - (v_in - v_out)).abs() < 1e-4, "{grid_diff} vs {}", v_in - v_out);
}

#[test]
fn field_samples_match_exact_potential() {
    let spec = TorusSpec::from_side(20.0, 9.2).unwrap();
    let config = bcc(spec, 2, 1.3);
    let kernel = EwaldKernel::with_defaults(20.0).unwrap();
    let field = potential_field(&config, &kernel, 32).unwrap();
    assert!(field.mean().abs() < 1e-10);
    assert!(field.removed_alias_mean.abs() < 1e-4, "{}", field.removed_alias_mean);
    let n = 32;
    let h = 20.0 / n as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let g: [usize; 3] = std::array::from_fn(|_| rng.random_range(0..n));
        let x: [f64; 3] = std::array::from_fn(|a| g[a] as f64 * h);
        let exact = potential_at(&config, &kernel, x).unwrap();
        // samples are the exact potential shifted by the removed grid mean
        let sampled = field.values[(g[0] * n + g[1]) * n + g[2]] + field.removed_alias_mean;
        assert!((exact - sampled).abs() < 1e-9, "{exact} vs {sampled}");
    }
}

#[test]
fn dirichlet_identity_on_64_grid() {
    let spec = TorusSpec::new(1.25e-4, 9.2).unwrap();
    let config = bcc(spec, 2, 0.7);
    assert_eq!(config.len(), 16);
    let kernel = EwaldKernel::with_defaults(spec.side_length()).unwrap();
    let field = potential_field(&config, &kernel, 64).unwrap();
    assert!(field.resolution_warning.is_none());
    let coulomb = coulomb_energy(&config, &kernel).unwrap();
    assert_relative_eq!(field.dirichlet_energy(), coulomb, max_relative = 1e-3);
}

#[test]
fn translation_and_point_group_invariance() {
    let spec = TorusSpec::from_side(12.0, 4.0).unwrap();
    let kernel = EwaldKernel::with_defaults(12.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let base: Vec<Droplet> = {
        let mut masses = vec![16.0, 12.0, 20.0];
        balance_masses(&mut masses, spec.mass_budget());
        let centers = [[1.0, 2.0, 2.5], [6.5, 3.0, 8.0], [3.0, 9.0, 5.5]];
        centers.iter().zip(masses).map(|(&center, mass)| Droplet { center, mass }).collect()
    };
    let e0 = coulomb_energy(&DropletConfig::new(spec, base.clone()).unwrap(), &kernel).unwrap();
    for _ in 0..5 {
        let shift: [f64; 3] = std::array::from_fn(|_| rng.random_range(-20.0..20.0));
        let moved: Vec<Droplet> = base
            .iter()
            .map(|d| Droplet { center: std::array::from_fn(|a| d.center[a] + shift[a]), mass: d.mass })
            .collect();
        let e = coulomb_energy(&DropletConfig::new(spec, moved).unwrap(), &kernel).unwrap();
        assert_relative_eq!(e, e0, max_relative = 1e-10);
    }
    // axis permutation combined with a reflection
    let mapped: Vec<Droplet> = base
        .iter()
        .map(|d| Droplet { center: [d.center[2], -d.center[0], d.center[1]], mass: d.mass })
        .collect();
    let e = coulomb_energy(&DropletConfig::new(spec, mapped).unwrap(), &kernel).unwrap();
    assert_relative_eq!(e, e0, max_relative = 1e-10);
}

#[test]
fn coulomb_energy_is_positive_for_random_configs() {
    let spec = TorusSpec::from_side(15.0, 3.0).unwrap();
    let kernel = EwaldKernel::with_defaults(15.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut found = 0;
    while found < 20 {
        let n = rng.random_range(1..6);
        let mut masses: Vec<f64> = (0..n).map(|_| rng.random_range(1.0..10.0)).collect();
        let s: f64 = masses.iter().sum();
        masses.iter_mut().for_each(|m| *m *= spec.mass_budget() / s);
        balance_masses(&mut masses, spec.mass_budget());
        let droplets = masses
            .into_iter()
            .map(|mass| Droplet { center: std::array::from_fn(|_| rng.random_range(0.0..15.0)), mass })
            .collect();
        if let Ok(config) = DropletConfig::new(spec, droplets) {
            assert!(coulomb_energy(&config, &kernel).unwrap() >= 0.0);
            found += 1;
        }
    }
}

#[test]
fn frame_consistency_with_unit_torus() {
    // evaluate ε^{-4/3}E_ε directly on the unit torus with volumes m/ℓ³
    let spec = TorusSpec::new(2e-4, 2.0).unwrap();
    let side = spec.side_length();
    let config = bcc(spec, 1, 0.4);
    let kernel = EwaldKernel::with_defaults(side).unwrap();
    let b = total_energy(&config, &kernel).unwrap();

    let unit = EwaldKernel::with_defaults(1.0).unwrap();
    let ds = config.droplets();
    let mut e = 0.0;
    for (i, di) in ds.iter().enumerate() {
        let (mi, ri) = (di.mass / side.powi(3), di.radius() / side);
        e += spec.epsilon * 4.0 * PI * ri * ri;
        e += self_term(&unit, mi, ri);
        for dj in &ds[i + 1..] {
            let d: [f64; 3] = std::array::from_fn(|a| (di.center[a] - dj.center[a]) / side);
            e += pair_term(&unit, d, mi, ri, dj.mass / side.powi(3), dj.radius() / side);
        }
    }
    let scaled = spec.epsilon.powf(-4.0 / 3.0) * e;
    assert_relative_eq!(b.scaled_total, scaled, max_relative = 1e-10);
}

#[test]
fn lone_droplet_on_huge_torus() {
    let spec = TorusSpec::from_side(1000.0, 0.01).unwrap();
    let m = spec.mass_budget();
    let config = DropletConfig::new(spec, vec![Droplet { center: [0.0; 3], mass: m }]).unwrap();
    let kernel = EwaldKernel::with_defaults(1000.0).unwrap();
    let b = total_energy(&config, &kernel).unwrap();
    let expected = spec.epsilon.cbrt() * e_ball(m).unwrap();
    assert!((b.scaled_total - expected).abs() < 0.05 * expected);
}

#[test]
fn heuristic_balance_of_components() {
    // droplets of mass 10π at ε = 1e-6 on a BCC lattice whose unit-frame
    // lattice constant is the balanced spacing ε^{1/9}
    let epsilon: f64 = 1e-6;
    let n = epsilon.powf(-1.0 / 9.0).round() as usize;
    assert_eq!(n, 5);
    let side = epsilon.powf(-1.0 / 3.0);
    let lambda = (2 * n.pow(3)) as f64 * 10.0 * PI / side;
    let spec = TorusSpec::new(epsilon, lambda).unwrap();
    let config = bcc(spec, n, 5.0);
    for d in config.droplets() {
        assert_relative_eq!(d.mass, 10.0 * PI, max_relative = 1e-12);
    }
    let kernel = EwaldKernel::with_defaults(spec.side_length()).unwrap();
    let b = total_energy(&config, &kernel).unwrap();
    let d = b.per_droplet[0];
    let mags = [d.surface.abs(), d.self_energy.abs(), d.interaction.abs()];
    let hi = mags.iter().cloned().fold(0.0, f64::max);
    let lo = mags.iter().cloned().fold(f64::MAX, f64::min);
    assert!(hi / lo < 10.0, "{d:?}");
    let sum: f64 = b.per_droplet.iter().map(|p| p.surface + p.self_energy + p.interaction).sum();
    assert_relative_eq!(sum, b.total, max_relative = 1e-10);
}

#[test]
fn sup_norm_decreases_with_droplet_count() {
    let spec = TorusSpec::from_side(30.0, 3.0).unwrap();
    let kernel = EwaldKernel::with_defaults(30.0).unwrap();
    let mut prev = f64::MAX;
    for n in 1..=3 {
        let config = bcc(spec, n, 0.5);
        let field = potential_field(&config, &kernel, 48).unwrap();
        assert!(field.sup_abs < prev, "n = {n}: {} >= {prev}", field.sup_abs);
        prev = field.sup_abs;
    }
}

#[test]
fn octants_of_symmetric_arrangement_are_equal() {
    // droplets sitting on the octant corners are cut into eight pieces
    let spec = TorusSpec::from_side(16.0, 4.0).unwrap();
    let kernel = EwaldKernel::with_defaults(16.0).unwrap();
    let config = {
        let mut centers = Vec::new();
        for i in 0..2 {
            for j in 0..2 {
                for k in 0..2 {
                    centers.push([8.0 * i as f64, 8.0 * j as f64, 8.0 * k as f64]);
                }
            }
        }
        let mut masses = vec![spec.mass_budget() / 8.0; 8];
        balance_masses(&mut masses, spec.mass_budget());
        DropletConfig::new(spec, centers.into_iter().zip(masses).map(|(center, mass)| Droplet { center, mass }).collect())
            .unwrap()
    };
    let report = energy_measure(&config, &kernel, 2).unwrap();
    for &m in &report.mass {
        assert_relative_eq!(m, spec.lambda / 8.0, max_relative = 1e-9);
    }
    let e0 = report.energy[0];
    for &e in &report.energy {
        assert_relative_eq!(e, e0, max_relative = 1e-9);
    }
    assert!((report.mass_total - spec.lambda).abs() < 1e-9);
}

#[test]
fn measure_totals_match_energy() {
    let spec = TorusSpec::from_side(20.0, 9.2).unwrap();
    let config = bcc(spec, 2, 1.9);
    let kernel = EwaldKernel::with_defaults(20.0).unwrap();
    let b = total_energy(&config, &kernel).unwrap();
    for s in [2, 3, 5] {
        let report = energy_measure(&config, &kernel, s).unwrap();
        assert!((report.mass_total - spec.lambda).abs() < 1e-9);
        assert_relative_eq!(report.energy_total, b.scaled_total, max_relative = 1e-6);
        assert!(report.mass.iter().all(|&m| m >= 0.0));
    }
    assert!(energy_measure(&config, &kernel, 1).is_err());
    assert!(energy_measure(&config, &kernel, 17).is_err());
}

#[test]
fn energy_shares_follow_the_quadratic_potential() {
    // a droplet cut in half by a subcube face: the two halves of its
    // Coulomb share differ by the potential gradient across it
    let spec = TorusSpec::from_side(20.0, 1.5).unwrap();
    let kernel = EwaldKernel::with_defaults(20.0).unwrap();
    let mut masses = [10.0, 0.0];
    masses[1] = spec.mass_budget() - 10.0;
    let config = DropletConfig::new(
        spec,
        vec![
            Droplet { center: [10.0, 5.0, 5.0], mass: masses[0] },
            Droplet { center: [15.0, 15.0, 15.0], mass: masses[1] },
        ],
    )
    .unwrap();
    let report = energy_measure(&config, &kernel, 2).unwrap();
    // first droplet straddles x = 10 between cubes (0,0,0) and (1,0,0)
    let left = report.energy[0];
    let right = report.energy[4];
    assert!(left > 0.0 && right > 0.0);
    let second = report.energy[7];
    let b = total_energy(&config, &kernel).unwrap();
    let p = b.per_droplet[1];
    assert_relative_eq!(second, (p.surface + p.self_energy + p.interaction) / 20.0, max_relative = 1e-12);
}
