use crowdflux::indicators::{dba, goal_dba, min_distance, scaled_dba, scaled_md, scaled_tti, tti};
use crowdflux::{PairIndicators, UnitDir, Vec2};
use proptest::prelude::*;

const C: f64 = 1.34;

fn bearing(d: Vec2) -> f64 {
    d.y.atan2(d.x)
}

fn wrap(a: f64) -> f64 {
    (a + std::f64::consts::PI).rem_euclid(std::f64::consts::TAU) - std::f64::consts::PI
}

#[test]
fn frozen_crossing_example() {
    // relative position (4, 3), relative heading (-2, 0)
    let (x, u) = (Vec2::ZERO, UnitDir::E1);
    let (y, v) = (
        Vec2::new(4.0, 3.0),
        UnitDir::from_angle(std::f64::consts::PI),
    );
    let ind = PairIndicators::compute(x, u, y, v, C, 0.6).unwrap();
    assert!((ind.dba - 0.321_6).abs() < 1e-12);
    assert!((ind.tti - 1.492_537_313_432_836).abs() < 1e-12);
    assert!((ind.md - 3.0).abs() < 1e-12);
    assert!(!ind.interacting);
}

#[test]
fn dba_is_the_bearing_rate_of_straight_line_motion() {
    let (x, u) = (Vec2::new(1.0, -2.0), UnitDir::from_angle(0.4));
    let (y, v) = (Vec2::new(6.0, 1.5), UnitDir::from_angle(2.9));
    let h = 1e-6;
    let at = |t: f64| (y + v.vec() * (C * t)) - (x + u.vec() * (C * t));
    let fd = wrap(bearing(at(h)) - bearing(at(-h))) / (2.0 * h);
    assert!((dba(x, u, y, v, C).unwrap() - fd).abs() < 1e-8);
}

#[test]
fn goal_dba_is_the_bearing_rate_of_a_fixed_point() {
    let (x, u, goal) = (
        Vec2::new(0.5, 0.5),
        UnitDir::from_angle(-0.7),
        Vec2::new(9.0, 4.0),
    );
    let h = 1e-6;
    let at = |t: f64| goal - (x + u.vec() * (C * t));
    let fd = wrap(bearing(at(h)) - bearing(at(-h))) / (2.0 * h);
    assert!((goal_dba(x, u, goal, C).unwrap() - fd).abs() < 1e-8);
}

#[test]
fn tti_and_md_match_a_scan_of_the_distance() {
    let (x, u) = (Vec2::new(-3.0, 0.2), UnitDir::from_angle(0.1));
    let (y, v) = (Vec2::new(4.0, -1.0), UnitDir::from_angle(2.5));
    let ind = PairIndicators::compute(x, u, y, v, C, 0.6).unwrap();
    let (mut best_t, mut best) = (0.0, f64::INFINITY);
    for k in 0..=200_000 {
        let t = k as f64 * 1e-4;
        let d = ((y + v.vec() * (C * t)) - (x + u.vec() * (C * t))).norm();
        if d < best {
            best = d;
            best_t = t;
        }
    }
    assert!((ind.tti - best_t).abs() < 1e-4);
    assert!((ind.md - best).abs() < 1e-6);
}

fn point() -> impl Strategy<Value = Vec2> {
    (-10.0..10.0f64, -10.0..10.0f64).prop_map(|(a, b)| Vec2::new(a, b))
}

fn heading() -> impl Strategy<Value = UnitDir> {
    (0.0..std::f64::consts::TAU).prop_map(UnitDir::from_angle)
}

proptest! {
    #[test]
    fn invariant_under_rigid_motions(
        x in point(), y in point(), u in heading(), v in heading(),
        shift in point(), angle in -3.0..3.0f64,
    ) {
        prop_assume!((y - x).norm() > 0.1 && (v.vec() - u.vec()).norm() > 0.05);
        let a = PairIndicators::compute(x, u, y, v, C, 0.6).unwrap();
        let m = |p: Vec2| (p + shift).rotate(angle);
        let b = PairIndicators::compute(m(x), u.rotate(angle), m(y), v.rotate(angle), C, 0.6).unwrap();
        prop_assert!((a.dba - b.dba).abs() <= 1e-9 * (1.0 + a.dba.abs()));
        prop_assert!((a.tti - b.tti).abs() <= 1e-9 * (1.0 + a.tti.abs()));
        prop_assert!((a.md - b.md).abs() <= 1e-9 * (1.0 + a.md));
        prop_assert_eq!(a.interacting, b.interacting);
    }

    #[test]
    fn symmetric_under_exchange_of_the_pair(x in point(), y in point(), u in heading(), v in heading()) {
        prop_assume!((y - x).norm() > 0.1 && (v.vec() - u.vec()).norm() > 0.05);
        let a = PairIndicators::compute(x, u, y, v, C, 0.6).unwrap();
        let b = PairIndicators::compute(y, v, x, u, C, 0.6).unwrap();
        prop_assert!((a.dba - b.dba).abs() <= 1e-12 * (1.0 + a.dba.abs()));
        prop_assert!((a.tti - b.tti).abs() <= 1e-12 * (1.0 + a.tti.abs()));
        prop_assert!((a.md - b.md).abs() <= 1e-12 * (1.0 + a.md));
    }

    #[test]
    fn closest_approach_is_consistent(x in point(), y in point(), u in heading(), v in heading()) {
        prop_assume!((y - x).norm() > 0.1 && (v.vec() - u.vec()).norm() > 0.05);
        let rel = y - x;
        let w = v.vec() - u.vec();
        let tau = tti(x, u, y, v, C).unwrap();
        let md = min_distance(x, u, y, v).unwrap();
        prop_assert!(md <= rel.norm() + 1e-12);
        prop_assert!(((rel + w * (C * tau)).norm() - md).abs() <= 1e-9 * (1.0 + md));
        // the identity |dba| |y - x|^2 = c |v - u| md
        let lhs = dba(x, u, y, v, C).unwrap().abs() * rel.norm2();
        prop_assert!((lhs - C * w.norm() * md).abs() <= 1e-12 * (1.0 + lhs));
    }

    #[test]
    fn scaled_forms_are_homogeneous(zx in -5.0..5.0f64, zy in -5.0..5.0f64, u in heading(), v in heading(), k in 0.1..10.0f64) {
        let zeta = Vec2::new(zx, zy);
        let w = v.vec() - u.vec();
        prop_assume!(zeta.norm() > 0.1 && w.norm() > 0.05);
        prop_assert!((scaled_dba(zeta * k, w, C).unwrap() * k - scaled_dba(zeta, w, C).unwrap()).abs() < 1e-9);
        prop_assert!((scaled_tti(zeta * k, w, C).unwrap() - k * scaled_tti(zeta, w, C).unwrap()).abs() < 1e-9 * k);
        prop_assert!((scaled_md(zeta * k, w).unwrap() - k * scaled_md(zeta, w).unwrap()).abs() < 1e-9 * k);
    }
}
