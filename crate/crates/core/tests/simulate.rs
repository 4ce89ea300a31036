use std::sync::OnceLock;

use proptest::prelude::*;
use revcap::boundary::{Region, TableSpec};
use revcap::cost::{Profile, QuadraticCost};
use revcap::diffusion::DiffusionModel;
use revcap::simulate::{
    compare_policies, dynkin_payoff, mc_dynkin, mc_value, reflect_step, simulate_policy, tail_horizon, trace_policy,
    McParams, PolicySpec,
};
use revcap::value::ValueFunction;

const RHO: f64 = 6.0;

fn model() -> DiffusionModel {
    DiffusionModel::gbm(0.0, 2f64.sqrt(), RHO, 1.0).unwrap()
}

fn cost(q_minus: f64) -> QuadraticCost {
    QuadraticCost::new(Profile::Square, Profile::Identity, 1.0, q_minus).unwrap()
}

/// ĉ₊(d) = 2d/3 − 6 on this instance.
fn irreversible() -> &'static ValueFunction {
    static VF: OnceLock<ValueFunction> = OnceLock::new();
    VF.get_or_init(|| {
        let spec = TableSpec::new((0.05, 2000.0), (-5.9, 1300.0));
        ValueFunction::solve(&model().fundamental_pair().unwrap(), &cost(f64::INFINITY), &spec).unwrap()
    })
}

fn reversible() -> &'static ValueFunction {
    static VF: OnceLock<ValueFunction> = OnceLock::new();
    VF.get_or_init(|| {
        let spec = TableSpec::new((0.05, 200.0), (-5.0, 60.0));
        ValueFunction::solve(&model().fundamental_pair().unwrap(), &cost(1.0), &spec).unwrap()
    })
}

fn vhat_closed(c: f64, d: f64) -> f64 {
    0.5 * (c * c / RHO - 2.0 * (d / 6.0) * c + d * d / 4.0)
}

fn v_closed(c: f64, d: f64) -> f64 {
    let a = |c: f64| -(2.0 / 81.0) / (c + 6.0);
    let chat = 2.0 * d / 3.0 - 6.0;
    if c <= chat {
        a(chat) * d.powi(3) + vhat_closed(chat, d) + (chat - c)
    } else {
        a(c) * d.powi(3) + vhat_closed(c, d)
    }
}

fn horizon(scale: f64) -> f64 {
    tail_horizon(&model(), scale, 1e-5)
}

#[test]
fn reflect_step_examples() {
    let table = irreversible().table();
    let opt = PolicySpec::optimal(table);
    let s = reflect_step(&opt, 0.0, 10.0);
    assert!((s.c - 2.0 / 3.0).abs() < 1e-8, "{}", s.c);
    assert!((s.invest - 2.0 / 3.0).abs() < 1e-8);
    assert_eq!(s.disinvest, 0.0);

    let s = reflect_step(&opt, 3.0, 4.0);
    assert_eq!((s.c, s.invest, s.disinvest), (3.0, 0.0, 0.0));

    let rev = PolicySpec::optimal(reversible().table());
    let upper = reversible().table().chat_minus(1.0);
    let s = reflect_step(&rev, upper + 2.0, 1.0);
    assert!((s.c - upper).abs() < 1e-12);
    assert!((s.disinvest - 2.0).abs() < 1e-12);
    assert_eq!(s.invest, 0.0);
}

#[test]
fn do_nothing_estimates_vhat() {
    let (c0, d0) = (1.0, 2.0);
    let oracle = vhat_closed(c0, d0);
    let params = McParams::new(2e-3, horizon(oracle), 20_000, 11);
    let r = mc_value(&PolicySpec::do_nothing(irreversible().table()), &model(), &cost(f64::INFINITY), c0, d0, &params).unwrap();
    assert_eq!((r.total_invest, r.total_disinvest), (0.0, 0.0));
    assert!((r.discounted_cost - oracle).abs() < 3.0 * r.std_error, "{} vs {oracle} (se {})", r.discounted_cost, r.std_error);
}

#[test]
fn reflect_without_action_equals_do_nothing() {
    let table = irreversible().table();
    let (m, k) = (model(), cost(f64::INFINITY));
    // d̂₊(15) = 31.5: far out of reach over 0.05 time units from d = 1.
    let a = simulate_policy(&PolicySpec::optimal(table), &m, &k, 15.0, 1.0, 1e-3, 0.05, 3).unwrap();
    let b = simulate_policy(&PolicySpec::do_nothing(table), &m, &k, 15.0, 1.0, 1e-3, 0.05, 3).unwrap();
    assert_eq!(a.total_invest, 0.0);
    assert_eq!(a.discounted_cost, b.discounted_cost);
}

#[test]
fn optimal_policy_cost_matches_value() {
    let vf = irreversible();
    let (c0, d0) = (0.0, 10.0);
    let v = v_closed(c0, d0);
    assert!((vf.value_at(c0, d0).unwrap() - v).abs() < 1e-8);
    let params = McParams::new(1e-3, horizon(v), 6000, 5);
    let r = mc_value(&PolicySpec::optimal(vf.table()), &model(), &cost(f64::INFINITY), c0, d0, &params).unwrap();
    assert!((r.discounted_cost - v).abs() < 3.0 * r.std_error, "{} vs {v} (se {})", r.discounted_cost, r.std_error);
    assert!(r.total_invest > 2.0 / 3.0);
    assert_eq!(r.total_disinvest, 0.0);
}

#[test]
fn path_stays_in_the_closed_continuation_region() {
    let vf = reversible();
    let table = vf.table();
    let (m, k) = (model(), cost(1.0));
    for bridge in [true, false] {
        let mut params = McParams::new(1e-3, 3.0, 1, 17);
        params.bridge = bridge;
        let path = trace_policy(&PolicySpec::optimal(table), &m, &k, (-2.0, 3.0), &params, 4).unwrap();
        let mut acted = (0, 0);
        for (i, r) in path.iter().enumerate() {
            assert!(r.d_invest * r.d_disinvest == 0.0);
            assert!(r.c >= table.chat_plus(r.d) - 1e-9, "below ĉ₊ at {}", r.t);
            assert!(r.c <= table.chat_minus(r.d) + 1e-9, "above ĉ₋ at {}", r.t);
            if i > 0 && !bridge {
                // Control is only exerted when the pre-action state is outside the band.
                let c_prev = path[i - 1].c;
                if r.d_invest > 0.0 {
                    assert!(c_prev < table.chat_plus(r.d));
                    acted.0 += 1;
                }
                if r.d_disinvest > 0.0 {
                    assert!(c_prev > table.chat_minus(r.d));
                    acted.1 += 1;
                }
                if r.d_invest == 0.0 && r.d_disinvest == 0.0 {
                    assert_eq!(r.c, c_prev);
                }
            }
            assert_ne!(table.classify(r.c + 1e-9, r.d), Region::Invest);
        }
        if !bridge {
            assert!(acted.0 > 0 && acted.1 > 0, "{acted:?}");
        }
    }
}

#[test]
fn runs_are_deterministic_and_share_paths() {
    let table = irreversible().table();
    let (m, k) = (model(), cost(f64::INFINITY));
    let params = McParams::new(2e-3, 1.0, 500, 99);
    let opt = PolicySpec::optimal(table);
    let a = mc_value(&opt, &m, &k, 0.0, 5.0, &params).unwrap();
    let b = mc_value(&opt, &m, &k, 0.0, 5.0, &params).unwrap();
    assert_eq!(a, b);
    let rows = compare_policies(&[opt, opt], &m, &k, 0.0, 5.0, &params).unwrap();
    assert_eq!(rows[0].mean, rows[1].mean);
    assert_eq!(rows[1].excess, 0.0);
    assert_eq!(rows[0].mean, a.discounted_cost);
}

#[test]
fn dearer_investment_costs_more() {
    let table = irreversible().table();
    let m = model();
    let k = cost(f64::INFINITY);
    let params = McParams::new(2e-3, 1.0, 500, 8);
    let opt = PolicySpec::optimal(table);
    let base = mc_value(&opt, &m, &k, 0.0, 10.0, &params).unwrap();
    let dear = mc_value(&opt, &m, &k.with_q_plus(2.0).unwrap(), 0.0, 10.0, &params).unwrap();
    assert!(base.total_invest > 0.0);
    assert_eq!(base.total_invest, dear.total_invest);
    assert!(dear.discounted_cost > base.discounted_cost);
}

#[test]
fn shifted_and_idle_policies_cost_more() {
    let table = irreversible().table();
    let (m, k) = (model(), cost(f64::INFINITY));
    let (c0, d0) = (-5.0, 20.0);
    let params = McParams::new(2e-3, horizon(v_closed(c0, d0)), 2000, 21);
    let specs = [
        PolicySpec::optimal(table),
        PolicySpec::shifted(table, 0.6, 0.0),
        PolicySpec::shifted(table, -0.6, 0.0),
        PolicySpec::do_nothing(table),
    ];
    let rows = compare_policies(&specs, &m, &k, c0, d0, &params).unwrap();
    assert_eq!(rows[0].rank, 1, "{rows:?}");
    for r in &rows[1..] {
        assert!(r.excess > 0.0, "{r:?}");
    }
    assert!(rows[3].excess > 3.0 * rows[3].excess_se);
    assert!(rows[3].mean - rows[0].mean > 3.0 * rows[3].std_error.max(rows[0].std_error));
}

#[test]
fn game_stops_immediately_beyond_the_triggers() {
    let (m, k) = (model(), cost(1.0));
    let table = reversible().table();
    // Disinvestment only starts above c = 6 on this instance.
    let c = 10.0;
    let (up, down) = (table.dhat_plus(c), table.dhat_minus(c));
    assert!(0.0 < down && down < up, "{down} {up}");
    assert_eq!(dynkin_payoff(&m, &k, c, up * 1.01, table, 1e-3, 1.0, 1).unwrap(), -1.0);
    assert_eq!(dynkin_payoff(&m, &k, c, down * 0.99, table, 1e-3, 1.0, 1).unwrap(), 1.0);
}

#[test]
fn game_value_matches_marginal_value() {
    let vf = irreversible();
    let (m, k) = (model(), cost(f64::INFINITY));
    let (c, d): (f64, f64) = (2.0, 6.0);
    // v_c = A'(c)ψ(d) + V̂_c with A' = (2/81)/(c+6)².
    let oracle = (2.0 / 81.0) / (c + 6.0).powi(2) * d.powi(3) + c / RHO - d / 6.0;
    assert!((vf.value_c_at(c, d).unwrap() - oracle).abs() < 1e-8);
    let params = McParams::new(1e-3, horizon(10.0), 10_000, 13);
    let est = mc_dynkin(&m, &k, c, d, vf.table(), &params).unwrap();
    assert!((est.mean - oracle).abs() < 3.0 * est.std_error, "{} vs {oracle} (se {})", est.mean, est.std_error);
    assert!(est.mean >= -1.0 - 3.0 * est.std_error);
}

#[test]
fn reversible_game_respects_price_bounds() {
    let vf = reversible();
    let (m, k) = (model(), cost(1.0));
    let params = McParams::new(2e-3, 2.0, 2000, 3);
    for (c, d) in [(0.0, 2.0), (2.0, 5.0), (5.0, 3.0)] {
        let est = mc_dynkin(&m, &k, c, d, vf.table(), &params).unwrap();
        assert!(est.mean >= -1.0 - 3.0 * est.std_error && est.mean <= 1.0 + 3.0 * est.std_error, "{est:?}");
    }
}

#[test]
fn rejects_degenerate_parameters() {
    let table = irreversible().table();
    let (m, k) = (model(), cost(f64::INFINITY));
    let opt = PolicySpec::optimal(table);
    assert!(mc_value(&opt, &m, &k, 0.0, 1.0, &McParams::new(0.0, 1.0, 10, 1)).is_err());
    assert!(mc_value(&opt, &m, &k, 0.0, 1.0, &McParams::new(1e-3, 1.0, 0, 1)).is_err());
    assert!(mc_value(&opt, &m, &k, 0.0, -1.0, &McParams::new(1e-3, 1.0, 10, 1)).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn reflection_is_minimal_and_idempotent(c in -10.0f64..40.0, d in 0.1f64..100.0) {
        let table = reversible().table();
        let p = PolicySpec::optimal(table);
        let s = reflect_step(&p, c, d);
        prop_assert!(s.invest * s.disinvest == 0.0);
        prop_assert!((s.c - c - s.invest + s.disinvest).abs() < 1e-12 * (1.0 + c.abs()));
        prop_assert!(s.c >= table.chat_plus(d) - 1e-12 && s.c <= table.chat_minus(d) + 1e-12);
        let again = reflect_step(&p, s.c, d);
        prop_assert_eq!((again.invest, again.disinvest), (0.0, 0.0));
    }
}
