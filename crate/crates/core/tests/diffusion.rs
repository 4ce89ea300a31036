use revcap::diffusion::{DiffusionModel, PairOptions};

fn fast(d0: f64) -> DiffusionModel {
    DiffusionModel::gbm(0.0, 2f64.sqrt(), 6.0, d0).unwrap()
}

fn mild() -> DiffusionModel {
    DiffusionModel::gbm(0.05, 0.3, 1.0, 1.0).unwrap()
}

/// GBM coefficients fed through the generic (numerically integrated) path.
fn mild_as_generic() -> DiffusionModel {
    DiffusionModel::generic(|d| 0.05 * d, |d| 0.3 * d, 0.0, f64::INFINITY, 1.0, 1.0).unwrap()
}

fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| (lo.ln() + (hi / lo).ln() * i as f64 / (n - 1) as f64).exp())
        .collect()
}

#[test]
fn scale_density_power_law() {
    let m = mild();
    let expected = 2f64.powf(-2.0 * 0.05 / 0.09);
    assert!((m.scale_density(2.0).unwrap() - expected).abs() < 1e-14);
    assert!((expected - 0.4629).abs() < 1e-4);
    // quadrature path agrees with the closed form
    let g = mild_as_generic();
    assert!((g.scale_density(2.0).unwrap() - expected).abs() < 1e-12);
}

#[test]
fn speed_density_examples() {
    assert!((fast(1.0).speed_density(3.0).unwrap() - 1.0 / 9.0).abs() < 1e-15);
    let s = mild().speed_density(2.0).unwrap();
    let expected = 2.0 / (0.09 * 4.0 * 2f64.powf(-2.0 * 0.05 / 0.09));
    assert!((s - expected).abs() < 1e-12);
    assert!((s - 12.0007).abs() < 1e-4);
}

#[test]
fn driftless_scale_is_one() {
    let m = fast(1.0);
    for d in [0.01, 1.0, 7.5, 300.0] {
        assert_eq!(m.scale_density(d).unwrap(), 1.0);
    }
}

#[test]
fn fast_pair_is_cube_and_inverse_square() {
    let p = fast(1.0).fundamental_pair().unwrap();
    for d in [0.3, 1.0, 2.0, 9.0] {
        assert!((p.psi(d) - d.powi(3)).abs() < 1e-12 * d.powi(3));
        assert!((p.phi(d) - d.powi(-2)).abs() < 1e-12 * d.powi(-2));
    }
    assert!((p.wronskian() - 5.0).abs() < 1e-14);
}

#[test]
fn repr_flux_identity_exact_case() {
    // ψ'/S' = 3d² and ρ∫_0^d ξ³ ξ^{-2} dξ = 3d²
    let p = fast(1.0).fundamental_pair().unwrap();
    for d in [0.5, 1.0, 4.0] {
        let integral = p.integrate(|x| p.at(x).psi_speed, 0.0, d).unwrap();
        assert!((6.0 * integral - 3.0 * d * d).abs() < 1e-11 * d * d);
        assert!((p.psi_flux(d) - 3.0 * d * d).abs() < 1e-12 * d * d);
    }
}

fn check_wronskian(model: &DiffusionModel, pts: &[f64], tol: f64) {
    let p = model.fundamental_pair().unwrap();
    let w = p.wronskian();
    for &d in pts {
        let a = p.at(d);
        let wd = (a.dpsi * a.phi - a.psi * a.dphi) / a.scale;
        assert!(((wd - w) / w).abs() < tol, "wronskian drift at {d}: {wd} vs {w}");
    }
}

#[test]
fn wronskian_constant_gbm() {
    check_wronskian(&mild(), &log_grid(1e-3, 1e3, 50), 1e-8);
    check_wronskian(&fast(10.0), &log_grid(1e-2, 1e4, 50), 1e-8);
}

#[test]
fn wronskian_constant_generic() {
    check_wronskian(&mild_as_generic(), &log_grid(0.05, 20.0, 50), 1e-5);
    let ou = DiffusionModel::ornstein_uhlenbeck(0.5, 1.0, 0.3, 0.1, 1.0).unwrap();
    let pts: Vec<f64> = (0..50).map(|i| -0.5 + 3.0 * i as f64 / 49.0).collect();
    check_wronskian(&ou, &pts, 1e-5);
}

#[test]
fn generic_pair_matches_power_pair() {
    let exact = mild().fundamental_pair().unwrap();
    let num = mild_as_generic().fundamental_pair().unwrap();
    for d in log_grid(0.05, 20.0, 25) {
        let (a, b) = (exact.at(d), num.at(d));
        assert!(((a.psi - b.psi) / a.psi).abs() < 1e-7, "psi at {d}");
        assert!(((a.phi - b.phi) / a.phi).abs() < 1e-7, "phi at {d}");
        assert!(((a.dpsi - b.dpsi) / a.dpsi).abs() < 1e-7);
        assert!(((a.scale - b.scale) / a.scale).abs() < 1e-9);
    }
}

#[test]
fn pair_normalisation_and_monotonicity() {
    for model in [mild(), mild_as_generic()] {
        let p = model.fundamental_pair().unwrap();
        assert!((p.psi(1.0) - 1.0).abs() < 1e-12);
        assert!((p.phi(1.0) - 1.0).abs() < 1e-12);
        let grid = log_grid(0.05, 20.0, 60);
        for w in grid.windows(2) {
            assert!(p.psi(w[1]) > p.psi(w[0]));
            assert!(p.phi(w[1]) < p.phi(w[0]));
        }
    }
}

#[test]
fn boundary_limits_by_sampling() {
    let p = mild().fundamental_pair().unwrap();
    let down = log_grid(1e-8, 1.0, 20);
    for w in down.windows(2) {
        assert!(p.psi(w[0]) < p.psi(w[1]));
        assert!(p.phi(w[0]) > p.phi(w[1]));
    }
    assert!(p.psi(1e-8) < 1e-6);
    assert!(p.phi(1e-8) > 1e6);
    assert!(p.psi(1e8) > 1e6);
    assert!(p.phi(1e8) < 1e-6);
}

#[test]
fn repr_identities_hold() {
    for model in [mild(), fast(10.0)] {
        let p = model.fundamental_pair().unwrap();
        let rho = model.rho();
        for d in log_grid(0.01, 100.0, 50) {
            let l = p.integrate(|x| p.at(x).psi_speed, 0.0, d).unwrap();
            let r = p.integrate(|x| p.at(x).phi_speed, d, f64::INFINITY).unwrap();
            let s1 = p.psi_flux(d);
            let s2 = p.phi_flux(d);
            assert!((s1 - rho * l).abs() < 1e-9 * s1.abs().max(1.0));
            assert!((s2 + rho * r).abs() < 1e-9 * s2.abs().max(1.0));
        }
    }
}

#[test]
fn resolvent_examples() {
    let p = fast(1.0).fundamental_pair().unwrap();
    assert!((p.resolvent(|_| 1.0, 1.7).unwrap() - 1.0 / 6.0).abs() < 1e-12);
    assert!((p.resolvent(|x| x, 3.0).unwrap() - 0.5).abs() < 1e-12);
    assert!((p.resolvent(|x| x * x, 2.0).unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn resolvent_polynomials_closed_forms() {
    let (mu, s2, rho) = (0.05, 0.09, 1.0);
    let p = mild().fundamental_pair().unwrap();
    for d in log_grid(0.1, 10.0, 7) {
        let (r0, r1, r2) = (
            p.resolvent(|_| 1.0, d).unwrap(),
            p.resolvent(|x| x, d).unwrap(),
            p.resolvent(|x| x * x, d).unwrap(),
        );
        assert!((r0 - 1.0 / rho).abs() < 1e-10);
        assert!((r1 - d / (rho - mu)).abs() < 1e-10 * d);
        assert!((r2 - d * d / (rho - 2.0 * mu - s2)).abs() < 1e-10 * d * d);
    }
}

#[test]
fn resolvent_generic_matches() {
    let p = mild_as_generic().fundamental_pair().unwrap();
    for d in [0.5, 1.0, 3.0] {
        let r1 = p.resolvent(|x| x, d).unwrap();
        assert!((r1 / (d / 0.95) - 1.0).abs() < 1e-6, "generic resolvent at {d}: {r1}");
    }
}

#[test]
fn resolvent_derivatives_match_closed_form() {
    let p = mild().fundamental_pair().unwrap();
    let (u, du, ddu) = p.resolvent_with_derivatives(|x| x * x, 2.0).unwrap();
    let k = 1.0 / (1.0 - 0.1 - 0.09);
    assert!((u - 4.0 * k).abs() < 1e-10);
    assert!((du - 4.0 * k).abs() < 1e-9);
    assert!((ddu - 2.0 * k).abs() < 1e-8);
}

#[test]
fn green_symmetry_with_speed() {
    let p = mild().fundamental_pair().unwrap();
    for (d, h) in [(0.5, 2.0), (1.0, 1.5), (3.0, 0.2)] {
        let g1 = p.green(d, h).unwrap() * p.speed_density(h);
        let g2 = p.green(h, d).unwrap() * p.speed_density(d);
        let ratio = g1 / g2;
        assert!(ratio.is_finite() && ratio > 0.0);
        assert_eq!(p.green(d, h).unwrap(), p.green(h, d).unwrap());
    }
    assert!(p.green(0.0, 1.0).is_err());
}

#[test]
fn bounded_resolvent_bounds() {
    let p = mild().fundamental_pair().unwrap();
    for d in [0.1, 1.0, 10.0] {
        let r = p.resolvent(|x| 1.0 / (1.0 + x * x), d).unwrap();
        assert!((0.0..=1.0).contains(&r));
    }
}

#[test]
fn explicit_window_is_honoured() {
    let opts = PairOptions {
        window: Some((0.01, 50.0)),
        ..PairOptions::default()
    };
    let p = mild_as_generic().fundamental_pair_with(&opts).unwrap();
    assert_eq!(p.window(), (0.01, 50.0));
    assert!(p.psi(60.0).is_nan());
}

#[test]
fn constant_path_without_noise() {
    let m = DiffusionModel::generic(|_| 0.0, |_| 1e-300, -1.0, 1.0, 1.0, 0.25).unwrap();
    let path = m.sample_path(0.25, 0.01, 1.0, 5).unwrap();
    assert!(path.values.iter().all(|&d| d == 0.25));
}
