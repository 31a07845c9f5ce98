use crowdflux::fluid::FieldSet;
use crowdflux::hydro::{
    lte_from_potential, mean_velocity_from_lte, AngularGrid, CellProblem, HydroConfig, HydroSolver,
};
use crowdflux::kernels::{tabulate, CircleKernel};
use crowdflux::{
    AvoidanceParams, Boundary, Grid2D, KernelTable, ModelParams, QuadratureSpec, Side, Vec2,
};
use proptest::prelude::*;
use std::sync::OnceLock;

fn table() -> &'static KernelTable {
    static TABLE: OnceLock<KernelTable> = OnceLock::new();
    TABLE.get_or_init(|| {
        tabulate(&AvoidanceParams::default(), &QuadratureSpec::default(), 64).unwrap()
    })
}

fn noisy() -> ModelParams {
    ModelParams {
        noise: 0.1,
        ..ModelParams::default()
    }
}

#[test]
fn lte_velocity_matches_quadrature_of_the_goal_cost() {
    // cell centre (0.5, 0.5), goal 5 m east: cost 0.0718 sin^2 + 0.05 (1 - cos)
    let grid = Grid2D::new(4, 4, 1.0, 1.0, Vec2::ZERO, Boundary::Outflow).unwrap();
    let cfg = HydroConfig {
        n_theta: 256,
        ..HydroConfig::default()
    };
    let solver = HydroSolver::new(
        grid,
        vec![Vec2::new(5.5, 0.5)],
        noisy(),
        cfg,
        &KernelTable::zero(),
    )
    .unwrap();
    let mut f = FieldSet::zeros(1, grid.len());
    f.rho[0][0] = 1.0;
    let st = solver.solve_cell(&f, 0).unwrap();
    let u = mean_velocity_from_lte(&st.m[0], solver.angles());
    assert!((u.x - 0.282_833_997_311_051_64).abs() < 1e-12, "{u:?}");
    assert!(u.y.abs() < 1e-14);
}

#[test]
fn converged_state_is_a_fixed_point_with_a_shared_collision_cost() {
    let angles = AngularGrid::new(128).unwrap();
    let kernel = CircleKernel::new(table(), Side::Both, 128);
    let params = noisy();
    let rho = [0.8, 1.7, 0.4];
    let goals = [
        Vec2::new(30.0, 2.0),
        Vec2::new(-25.0, 10.0),
        Vec2::new(3.0, -40.0),
    ];
    let prob = CellProblem::new(&angles, &kernel, &params, &rho, Vec2::new(1.0, 1.0), &goals);
    let st = prob.solve(&HydroConfig::default()).unwrap();
    assert!(st.residual() < 1e-8);
    let (next, _) = prob.map(&st.phi).unwrap();
    let sup = next
        .iter()
        .flatten()
        .zip(st.phi.iter().flatten())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(sup < 1e-8);
    let shared: Vec<f64> = (0..angles.len())
        .map(|i| st.phi[0][i] - prob.phi_t[0][i])
        .collect();
    for (phi, phi_t) in st.phi.iter().zip(&prob.phi_t).skip(1) {
        for ((p, t), s) in phi.iter().zip(phi_t).zip(&shared) {
            assert!((p - t - s).abs() < 1e-12);
        }
    }
    for k in 0..3 {
        let mass: f64 = st.m[k].iter().sum::<f64>() * angles.weight();
        assert!((mass - 1.0).abs() < 1e-12);
    }
}

#[test]
fn zero_kernel_converges_in_one_step() {
    let angles = AngularGrid::new(64).unwrap();
    let kernel = CircleKernel::new(&KernelTable::zero(), Side::Both, 64);
    let params = noisy();
    let rho = [1.0, 2.0];
    let goals = [Vec2::new(9.0, 0.0), Vec2::new(0.0, 9.0)];
    let prob = CellProblem::new(&angles, &kernel, &params, &rho, Vec2::ZERO, &goals);
    let st = prob.solve(&HydroConfig::default()).unwrap();
    assert!(st.iterations <= 1, "{}", st.iterations);
    assert_eq!(st.phi, prob.phi_t);
}

proptest! {
    #[test]
    fn lte_is_normalized_and_shift_invariant(
        coeffs in proptest::collection::vec(-1.0..1.0f64, 4),
        shift in -50.0..50.0f64,
        d in 0.05..2.0f64,
    ) {
        let angles = AngularGrid::new(64).unwrap();
        let phi: Vec<f64> = angles
            .theta()
            .iter()
            .map(|&t| coeffs.iter().enumerate().map(|(n, a)| a * ((n + 1) as f64 * t).cos()).sum())
            .collect();
        let m = lte_from_potential(&phi, d, &angles).unwrap();
        let mass: f64 = m.iter().sum::<f64>() * angles.weight();
        prop_assert!((mass - 1.0).abs() < 1e-12);
        let shifted: Vec<f64> = phi.iter().map(|p| p + shift).collect();
        let m2 = lte_from_potential(&shifted, d, &angles).unwrap();
        for (a, b) in m.iter().zip(&m2) {
            prop_assert!((a - b).abs() <= 1e-10 * a.max(1.0));
        }
        prop_assert!(mean_velocity_from_lte(&m, &angles).norm() < 1.0);
    }
}
