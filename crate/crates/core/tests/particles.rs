use crowdflux::kernels::tabulate;
use crowdflux::particles::{advance, ForceMode};
use crowdflux::*;
use std::f64::consts::PI;

fn table() -> KernelTable {
    tabulate(&AvoidanceParams::default(), &QuadratureSpec::default(), 16).unwrap()
}

/// Minimum separation of two walkers crossing at `2 ang` from opposite
/// sides, either interacting or simulated independently.
fn min_separation(
    mode: ForceMode,
    sign: CollisionCostSign,
    interacting: bool,
    table: &KernelTable,
    offset: f64,
    ang: f64,
) -> f64 {
    let grid = Grid2D::new(40, 40, 1.0, 1.0, Vec2::new(-20.0, -20.0), Boundary::Outflow).unwrap();
    let p = ModelParams {
        noise: 0.0,
        collision_sign: sign,
        ..ModelParams::default()
    };
    let (c, s) = (ang.cos(), ang.sin());
    let a = AgentState {
        pos: Vec2::new(-5.0 * c, offset - 5.0 * s),
        heading: UnitDir::from_angle(ang),
        target_id: 0,
    };
    let b = AgentState {
        pos: Vec2::new(5.0 * c, -offset - 5.0 * s),
        heading: UnitDir::from_angle(PI - ang),
        target_id: 1,
    };
    let targets = vec![
        Vec2::new(15.0 * c, offset + 15.0 * s),
        Vec2::new(-15.0 * c, -offset + 15.0 * s),
    ];
    let mut runs = if interacting {
        vec![Ensemble::new(vec![a, b], targets, p, 1, grid).unwrap()]
    } else {
        vec![
            Ensemble::new(vec![a], targets.clone(), p, 1, grid).unwrap(),
            Ensemble::new(vec![b], targets, p, 1, grid).unwrap(),
        ]
    };
    let mut dmin = f64::INFINITY;
    for _ in 0..800 {
        for e in runs.iter_mut() {
            advance(e, 0.01, mode, Some(table), 12).unwrap();
        }
        let pa = runs[0].agents[0].pos;
        let pb = runs.last().unwrap().agents.last().unwrap().pos;
        dmin = dmin.min((pa - pb).norm());
    }
    dmin
}

#[test]
fn repulsive_collision_cost_increases_separation() {
    let t = table();
    // head-on with a small lateral offset
    let free = min_separation(
        ForceMode::PotentialNonlocal,
        CollisionCostSign::Repulsive,
        false,
        &t,
        0.1,
        0.0,
    );
    let with = min_separation(
        ForceMode::PotentialNonlocal,
        CollisionCostSign::Repulsive,
        true,
        &t,
        0.1,
        0.0,
    );
    assert!(with > free, "{with} vs {free}");
    assert!(with > 1.0);
    // the local cost only sees relative headings, so use an oblique crossing
    let free = min_separation(
        ForceMode::PotentialLocal,
        CollisionCostSign::Repulsive,
        false,
        &t,
        0.0,
        0.5,
    );
    let with = min_separation(
        ForceMode::PotentialLocal,
        CollisionCostSign::Repulsive,
        true,
        &t,
        0.0,
        0.5,
    );
    assert!(with > free, "{with} vs {free}");
}

#[test]
fn literal_collision_cost_pulls_walkers_together() {
    let t = table();
    let free = min_separation(
        ForceMode::PotentialNonlocal,
        CollisionCostSign::Literal,
        false,
        &t,
        0.1,
        0.0,
    );
    let with = min_separation(
        ForceMode::PotentialNonlocal,
        CollisionCostSign::Literal,
        true,
        &t,
        0.1,
        0.0,
    );
    assert!(with < free, "{with} vs {free}");
    let free = min_separation(
        ForceMode::PotentialLocal,
        CollisionCostSign::Literal,
        false,
        &t,
        0.0,
        0.5,
    );
    let with = min_separation(
        ForceMode::PotentialLocal,
        CollisionCostSign::Literal,
        true,
        &t,
        0.0,
        0.5,
    );
    assert!(with < free, "{with} vs {free}");
}

#[test]
fn antiparallel_walkers_feel_no_local_potential() {
    // d/dtheta Psi(|v - u|) vanishes at |v - u| = 2
    let t = table();
    let free = min_separation(
        ForceMode::PotentialLocal,
        CollisionCostSign::Repulsive,
        false,
        &t,
        0.1,
        0.0,
    );
    let with = min_separation(
        ForceMode::PotentialLocal,
        CollisionCostSign::Repulsive,
        true,
        &t,
        0.1,
        0.0,
    );
    assert!((with - free).abs() < 1e-6);
}
