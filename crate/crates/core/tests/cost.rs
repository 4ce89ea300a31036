use proptest::prelude::*;
use revcap::cost::{Profile, QuadraticCost, ResolventCoeffs};
use revcap::diffusion::DiffusionModel;

fn fast() -> DiffusionModel {
    DiffusionModel::gbm(0.0, 2f64.sqrt(), 6.0, 1.0).unwrap()
}

fn cost(q_minus: f64) -> QuadraticCost {
    QuadraticCost::new(Profile::Square, Profile::Identity, 1.0, q_minus).unwrap()
}

#[test]
fn coefficients_of_fast_instance() {
    let pair = fast().fundamental_pair().unwrap();
    let rc = ResolventCoeffs::new(&pair, &cost(1.0));
    for d in [0.05, 0.7, 2.0, 13.0, 400.0] {
        let s = rc.at(d).unwrap();
        assert!((s.beta - d / 6.0).abs() < 1e-12 * d);
        assert!((s.beta_p - 1.0 / 6.0).abs() < 1e-11);
        assert!(s.beta_pp.abs() < 1e-9 / d);
        assert!((s.alpha - d * d / 4.0).abs() < 1e-12 * d * d);
        assert!((s.alpha_p - d / 2.0).abs() < 1e-11 * d);
        assert!((s.alpha_pp - 0.5).abs() < 1e-9);
    }
}

#[test]
fn constant_alpha_gives_constant_over_rho() {
    let pair = fast().fundamental_pair().unwrap();
    let c = QuadraticCost::new(Profile::Constant(3.0), Profile::Identity, 1.0, 1.0).unwrap();
    let rc = ResolventCoeffs::new(&pair, &c);
    for d in [0.3, 3.0, 30.0] {
        assert!((rc.alpha(d).unwrap() - 0.5).abs() < 1e-12);
    }
}

#[test]
fn vhat_examples() {
    let pair = fast().fundamental_pair().unwrap();
    let rc = ResolventCoeffs::new(&pair, &cost(1.0));
    let v = rc.vhat(0.0, 2.0).unwrap();
    assert!((v.value - 0.5).abs() < 1e-12);
    let d = 5.0;
    let beta = rc.beta(d).unwrap();
    let v = rc.vhat(6.0 * beta, d).unwrap();
    assert!(v.c.abs() < 1e-12);
    assert!((v.cd + 1.0 / 6.0).abs() < 1e-11);
}

#[test]
fn vhat_nonnegative_on_grid() {
    let pair = fast().fundamental_pair().unwrap();
    let rc = ResolventCoeffs::new(&pair, &cost(1.0));
    for i in 0..20 {
        let d = 0.1 * 1.4f64.powi(i);
        let s = rc.at(d).unwrap();
        for j in -10..30 {
            let c = j as f64 * 0.5;
            assert!(s.vhat(6.0, c).value >= -1e-12);
        }
    }
}

#[test]
fn ou_beta_matches_mean_reversion() {
    let (kappa, theta, rho) = (0.5, 1.0, 0.1);
    let model = DiffusionModel::ornstein_uhlenbeck(kappa, theta, 0.3, rho, 1.0).unwrap();
    let pair = model.fundamental_pair().unwrap();
    let c = QuadraticCost::new(Profile::Square, Profile::Identity, 1.0, 1.0).unwrap();
    let rc = ResolventCoeffs::new(&pair, &c);
    for d in [0.2, 1.0, 1.8] {
        let s = rc.at(d).unwrap();
        let beta = theta / rho + (d - theta) / (rho + kappa);
        assert!((s.beta - beta).abs() < 1e-6 * beta.abs(), "beta({d}) = {} vs {beta}", s.beta);
        assert!((s.beta_p - 1.0 / (rho + kappa)).abs() < 1e-6);
    }
}

#[test]
fn marginal_cost_nonincreasing_in_demand() {
    let c = cost(1.0);
    for k in 0..50 {
        let d = 0.1 + 0.2 * k as f64;
        assert!(c.marginal_cost(2.0, d + 0.2) <= c.marginal_cost(2.0, d));
    }
}

proptest! {
    #[test]
    fn thresholds_are_consistent(d in 0.01f64..100.0, qp in 0.01f64..5.0, qm in 0.01f64..5.0, rho in 0.5f64..10.0) {
        let model = DiffusionModel::gbm(0.0, 0.5, rho, 1.0).unwrap();
        let c = QuadraticCost::new(Profile::Square, Profile::Identity, qp, qm).unwrap();
        let t = c.thresholds(&model);
        let plus = t.chat_plus_g(d);
        let minus = t.chat_minus_g(d);
        prop_assert!(plus < minus);
        prop_assert!((c.marginal_cost(plus, d) + rho * qp).abs() <= 1e-12 * (1.0 + d));
        prop_assert!((c.marginal_cost(minus, d) - rho * qm).abs() <= 1e-12 * (1.0 + d));
    }

    #[test]
    fn dstar_minus_below_dstar_plus(cap in -20.0f64..40.0, qp in 0.1f64..3.0, qm in 0.1f64..3.0) {
        let model = DiffusionModel::gbm(0.0, 0.5, 2.0, 1.0).unwrap();
        let c = QuadraticCost::new(Profile::Square, Profile::Identity, qp, qm).unwrap();
        let t = c.thresholds(&model);
        let (p, m) = (t.dstar_plus(cap).unwrap(), t.dstar_minus(cap).unwrap());
        if p > 0.0 && m > 0.0 && p.is_finite() && m.is_finite() {
            prop_assert!(m < p);
        }
    }
}
