use crowdflux::rules::{
    decide_omega, pair_omega, phi_response, sigma_threshold, steepest_descent_omega, target_cost_at,
};
use crowdflux::{AvoidanceParams, DecisionCase, PairIndicators, TargetCostParams, UnitDir, Vec2};
use proptest::prelude::*;

#[test]
fn frozen_response_values() {
    let p = AvoidanceParams::default();
    // 0.6 / (1 + 0.2)^1.5
    assert!((sigma_threshold(1.0, &p) - 0.456_435_464_587_638).abs() < 1e-12);
    assert!((phi_response(0.1, 1.0, &p) - 0.356_435_464_587_638).abs() < 1e-12);
    assert_eq!(phi_response(0.5, 1.0, &p), 0.0);
}

#[test]
fn steepest_descent_of_a_cosine() {
    let cost = |t: f64| 2.0 * (t - 0.3).cos();
    for theta in [-2.0, 0.0, 0.3, 1.1, 3.0] {
        let omega = steepest_descent_omega(cost, theta, 1e-4).unwrap();
        assert!((omega - 2.0 * (theta - 0.3).sin()).abs() < 1e-8);
    }
    assert!(steepest_descent_omega(|_| f64::NAN, 0.0, 1e-4).is_err());
}

#[test]
fn pair_turns_against_the_bearing_rate() {
    let p = AvoidanceParams::default();
    let (x, u) = (Vec2::ZERO, UnitDir::E1);
    let (y, v) = (
        Vec2::new(3.0, 0.3),
        UnitDir::from_angle(std::f64::consts::PI),
    );
    let ind = PairIndicators::compute(x, u, y, v, p.speed, p.r_safe).unwrap();
    assert!(ind.interacting && ind.dba > 0.0);
    let omega = pair_omega(&ind, &p);
    assert!(omega < 0.0);
    assert!((omega + phi_response(ind.dba, ind.tti, &p)).abs() < 1e-15);
}

proptest! {
    #[test]
    fn response_is_nonnegative_and_nonincreasing(a in 0.0..3.0f64, b in 0.0..3.0f64, t1 in 0.0..20.0f64, t2 in 0.0..20.0f64) {
        let p = AvoidanceParams::default();
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        prop_assert!(phi_response(hi, t1, &p) >= 0.0);
        prop_assert!(phi_response(lo, t1, &p) >= phi_response(hi, t1, &p));
        let (near, far) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
        prop_assert!(phi_response(a, near, &p) >= phi_response(a, far, &p));
    }

    #[test]
    fn decision_cases_and_mirror_symmetry(pp in 0.0..2.0f64, pm in 0.0..2.0f64, g in -3.0..3.0f64) {
        prop_assume!(g != 0.0);
        let d = decide_omega(pp, pm, g);
        if -pm <= g && g <= pp {
            prop_assert_eq!(d.case, DecisionCase::SmallDeviation);
            prop_assert!(d.omega == -pp || d.omega == pm);
        } else {
            prop_assert_eq!(d.case, DecisionCase::LargeDeviation);
            prop_assert_eq!(d.omega, g);
        }
        let m = decide_omega(pm, pp, -g);
        prop_assert_eq!(m.case, d.case);
        prop_assert_eq!(m.omega, -d.omega);
    }

    #[test]
    fn heading_at_the_goal_minimizes_the_goal_cost(gx in -20.0..20.0f64, gy in -20.0..20.0f64, theta in -3.1..3.1f64) {
        let goal = Vec2::new(gx, gy);
        prop_assume!(goal.norm() > 0.5);
        let p = TargetCostParams::default();
        let toward = UnitDir::new(goal).unwrap();
        let best = target_cost_at(Vec2::ZERO, toward, goal, 1.34, &p);
        prop_assert!(best.abs() < 1e-12);
        prop_assert!(target_cost_at(Vec2::ZERO, UnitDir::from_angle(theta), goal, 1.34, &p) >= best - 1e-12);
    }
}
