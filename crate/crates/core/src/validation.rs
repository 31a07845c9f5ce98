//! Property and oracle suites run by `crowdflux validate` and the acceptance
//! tests. Each suite measures its properties against independent oracles and
//! reports the measured values next to their thresholds.

use crate::fluid::{
    cfl_dt, potential_force_by_parts, Closure, ClosureKind, FieldSet, FluidConfig, FluidSolver,
    ForceVariant, CFL_MAX,
};
use crate::geometry::{UnitDir, Vec2};
use crate::grid::{Boundary, Grid2D};
use crate::hydro::{mean_velocity_from_lte, HydroConfig, HydroSolver};
use crate::indicators::{goal_dba, PairIndicators};
use crate::kernels::{psi_monte_carlo, psi_pm, tabulate, KernelTable, QuadratureSpec, Side};
use crate::params::ModelParams;
use crate::particles::{
    advance, compute_omega, extract_moments, run, AgentState, Ensemble, ForceMode, MomentKernel,
    RunControls, StreamSink,
};
use crate::quadrature::CircleRule;
use crate::rules::{pair_omega, AvoidanceParams};
use crate::scenario::{Domain, InitialCondition, Region, RunSpec, Scenario, Target, SCHEMA};
use crate::vmf::{
    invert_beta, mean_resultant, stress_coeffs, stress_tensor, vmf_pdf, Sym2, VmfParams,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::f64::consts::{PI, TAU};
use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;
use std::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Suite {
    Indicators,
    Avoidance,
    Kernels,
    Vmf,
    Gradients,
    Conservation,
    CrossLevel,
    HydroOracle,
    HydroFixedPoint,
    Determinism,
}

impl Suite {
    pub const ALL: [Suite; 10] = [
        Suite::Indicators,
        Suite::Avoidance,
        Suite::Kernels,
        Suite::Vmf,
        Suite::Gradients,
        Suite::Conservation,
        Suite::CrossLevel,
        Suite::HydroOracle,
        Suite::HydroFixedPoint,
        Suite::Determinism,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Suite::Indicators => "indicators",
            Suite::Avoidance => "avoidance",
            Suite::Kernels => "kernels",
            Suite::Vmf => "vmf",
            Suite::Gradients => "gradients",
            Suite::Conservation => "conservation",
            Suite::CrossLevel => "cross-level",
            Suite::HydroOracle => "hydro-oracle",
            Suite::HydroFixedPoint => "hydro-fixed-point",
            Suite::Determinism => "determinism",
        }
    }

    /// Wall-clock budget in seconds.
    pub fn budget(self) -> f64 {
        match self {
            Suite::Indicators => 10.0,
            Suite::Avoidance => 30.0,
            Suite::Kernels => 300.0,
            Suite::Vmf => 5.0,
            Suite::Gradients => 10.0,
            Suite::Conservation => 120.0,
            Suite::CrossLevel => 300.0,
            Suite::HydroOracle => 120.0,
            Suite::HydroFixedPoint => 300.0,
            Suite::Determinism => 120.0,
        }
    }

    /// Suites selected by a tag; `all` selects every suite.
    pub fn parse_selection(tag: &str) -> Result<Vec<Suite>, String> {
        if tag == "all" {
            return Ok(Suite::ALL.to_vec());
        }
        tag.split(',').map(|t| t.trim().parse()).collect()
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Suite {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Suite::ALL
            .into_iter()
            .find(|x| x.tag() == s)
            .ok_or_else(|| {
                let tags: Vec<&str> = Suite::ALL.iter().map(|x| x.tag()).collect();
                format!(
                    "unknown suite \"{s}\" (expected all or one of {})",
                    tags.join(", ")
                )
            })
    }
}

/// Deliberate defects used to check that the suites detect failures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fault {
    /// Scales the Bessel ratio by `1 + 1e-6`.
    Bessel,
}

impl FromStr for Fault {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "bessel" => Ok(Fault::Bessel),
            _ => Err(format!("unknown fault \"{s}\" (expected bessel)")),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub property: String,
    pub measured: f64,
    pub threshold: f64,
    pub pass: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl Check {
    /// Passes when `measured <= threshold`; NaN fails.
    pub fn at_most(property: impl Into<String>, measured: f64, threshold: f64) -> Self {
        Self {
            property: property.into(),
            measured,
            threshold,
            pass: measured <= threshold,
            note: None,
        }
    }

    pub fn with_note(mut self, note: impl Into<String>) -> Self {
        self.note = Some(note.into());
        self
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    pub suite: Suite,
    pub checks: Vec<Check>,
    pub seconds: f64,
}

impl SuiteReport {
    pub fn pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    /// Names of the failed properties.
    pub fn failures(&self) -> Vec<&str> {
        self.checks
            .iter()
            .filter(|c| !c.pass)
            .map(|c| c.property.as_str())
            .collect()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ValidationReport {
    pub suites: Vec<SuiteReport>,
    pub seconds: f64,
    pub pass: bool,
}

/// Lazily built shared state of the suites.
#[derive(Default)]
pub struct Validator {
    fault: Option<Fault>,
    table: OnceLock<KernelTable>,
}

/// Kernel-table nodes used by the suites.
pub const TABLE_NODES: usize = 64;

impl Validator {
    pub fn new(fault: Option<Fault>) -> Self {
        Self {
            fault,
            table: OnceLock::new(),
        }
    }

    /// Uses `table` instead of tabulating the default kernels.
    pub fn with_table(fault: Option<Fault>, table: KernelTable) -> Self {
        let v = Self::new(fault);
        let _ = v.table.set(table);
        v
    }

    /// Kernel table of the default avoidance parameters.
    pub fn table(&self) -> &KernelTable {
        self.table.get_or_init(|| {
            tabulate(
                &AvoidanceParams::default(),
                &QuadratureSpec::default(),
                TABLE_NODES,
            )
            .expect("default kernels tabulate")
        })
    }

    pub fn run(&self, suite: Suite) -> SuiteReport {
        let start = Instant::now();
        let mut checks = match suite {
            Suite::Indicators => indicators(),
            Suite::Avoidance => avoidance(),
            Suite::Kernels => kernels(self),
            Suite::Vmf => vmf(self.fault),
            Suite::Gradients => gradients(self),
            Suite::Conservation => conservation(self),
            Suite::CrossLevel => cross_level(self),
            Suite::HydroOracle => hydro_oracle(),
            Suite::HydroFixedPoint => hydro_fixed_point(self),
            Suite::Determinism => determinism(),
        };
        let seconds = start.elapsed().as_secs_f64();
        checks.push(Check::at_most("runtime_s", seconds, suite.budget()));
        SuiteReport {
            suite,
            checks,
            seconds,
        }
    }

    /// Runs the suites in order. When every suite is selected the total
    /// runtime is checked as well.
    pub fn run_all(&self, suites: &[Suite]) -> ValidationReport {
        let start = Instant::now();
        let mut reports: Vec<SuiteReport> = suites.iter().map(|&s| self.run(s)).collect();
        let seconds = start.elapsed().as_secs_f64();
        if suites.len() == Suite::ALL.len() {
            if let Some(det) = reports.iter_mut().find(|r| r.suite == Suite::Determinism) {
                det.checks
                    .push(Check::at_most("full_suite_runtime_s", seconds, 1200.0));
            }
        }
        let pass = reports.iter().all(|r| r.pass());
        ValidationReport {
            suites: reports,
            seconds,
            pass,
        }
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_dir<R: Rng>(r: &mut R) -> UnitDir {
    UnitDir::from_angle(r.random_range(0.0..TAU))
}

fn indicators() -> Vec<Check> {
    let p = AvoidanceParams::default();
    let c = p.speed;
    let mut r = rng(1);
    let (mut e_tti, mut e_md, mut e_identity) = (0.0f64, 0.0f64, 0.0f64);
    let (mut e_dba_fd, mut e_goal_fd) = (0.0f64, 0.0f64);
    let mut pairs = 0;
    const DT: f64 = 1e-4;
    const STEPS: usize = 1_000_000;
    while pairs < 1000 {
        let x = Vec2::new(r.random_range(-5.0..5.0), r.random_range(-5.0..5.0));
        let y = Vec2::new(r.random_range(-5.0..5.0), r.random_range(-5.0..5.0));
        let (u, v) = (random_dir(&mut r), random_dir(&mut r));
        let Ok(ind) = PairIndicators::compute(x, u, y, v, c, p.r_safe) else {
            continue;
        };
        let rel = y - x;
        let w = v.vec() - u.vec();
        if rel.norm() < 0.5 || w.norm() < 0.05 || !(ind.tti > 0.01 && ind.tti < 99.0) {
            continue;
        }
        pairs += 1;
        let vel = w * c;
        let (mut best_t, mut best_d2) = (0.0, f64::INFINITY);
        for k in 0..=STEPS {
            let t = k as f64 * DT;
            let d2 = (rel + vel * t).norm2();
            if d2 < best_d2 {
                best_d2 = d2;
                best_t = t;
            }
        }
        e_tti = e_tti.max((best_t - ind.tti).abs());
        e_md = e_md.max((best_d2.sqrt() - ind.md).abs());
        let lhs = ind.dba.abs() * rel.norm2();
        let rhs = c * w.norm() * ind.md;
        if rhs > 0.0 {
            e_identity = e_identity.max((lhs - rhs).abs() / rhs);
        }
        // bearing of the partner relative to a fixed heading, differentiated numerically
        let h = 1e-6;
        let bearing = |t: f64| {
            let d = rel + vel * t;
            d.y.atan2(d.x)
        };
        let fd = crate::geometry::wrap_angle(bearing(h) - bearing(-h)) / (2.0 * h);
        e_dba_fd = e_dba_fd.max((fd - ind.dba).abs() / ind.dba.abs().max(1e-3));
        let goal = y;
        let g = goal_dba(x, u, goal, c).expect("separated goal");
        let gb = |t: f64| {
            let d = goal - (x + u.vec() * (c * t));
            d.y.atan2(d.x)
        };
        let fd = crate::geometry::wrap_angle(gb(h) - gb(-h)) / (2.0 * h);
        e_goal_fd = e_goal_fd.max((fd - g).abs() / g.abs().max(1e-3));
    }
    vec![
        Check::at_most("tti_matches_brute_force_s", e_tti, 2e-4),
        Check::at_most("min_distance_matches_brute_force_m", e_md, 1e-4),
        Check::at_most("dba_md_identity_rel", e_identity, 1e-12),
        Check::at_most("dba_matches_bearing_derivative_rel", e_dba_fd, 1e-6),
        Check::at_most("goal_dba_matches_bearing_derivative_rel", e_goal_fd, 1e-6),
    ]
}

/// Positions and heading angles of two walkers.
#[derive(Clone, Copy)]
struct PairState([f64; 6]);

impl PairState {
    fn parts(&self) -> (Vec2, UnitDir, Vec2, UnitDir) {
        let s = &self.0;
        (
            Vec2::new(s[0], s[1]),
            UnitDir::from_angle(s[2]),
            Vec2::new(s[3], s[4]),
            UnitDir::from_angle(s[5]),
        )
    }

    fn indicators(&self, p: &AvoidanceParams) -> Option<PairIndicators> {
        let (x, u, y, v) = self.parts();
        PairIndicators::compute(x, u, y, v, p.speed, p.r_safe).ok()
    }

    /// Both walkers turn at the common rate of the pair.
    fn rate(&self, p: &AvoidanceParams) -> PairState {
        let (_, u, _, v) = self.parts();
        let omega = self.indicators(p).map(|i| pair_omega(&i, p)).unwrap_or(0.0);
        let c = p.speed;
        PairState([
            c * u.vec().x,
            c * u.vec().y,
            omega,
            c * v.vec().x,
            c * v.vec().y,
            omega,
        ])
    }

    fn axpy(&self, k: f64, d: &PairState) -> PairState {
        let mut out = self.0;
        for (o, dv) in out.iter_mut().zip(&d.0) {
            *o += k * dv;
        }
        PairState(out)
    }

    fn rk4(&self, dt: f64, p: &AvoidanceParams) -> PairState {
        let k1 = self.rate(p);
        let k2 = self.axpy(0.5 * dt, &k1).rate(p);
        let k3 = self.axpy(0.5 * dt, &k2).rate(p);
        let k4 = self.axpy(dt, &k3).rate(p);
        let mut out = self.0;
        for i in 0..6 {
            out[i] += dt / 6.0 * (k1.0[i] + 2.0 * k2.0[i] + 2.0 * k3.0[i] + k4.0[i]);
        }
        PairState(out)
    }
}

fn avoidance() -> Vec<Check> {
    let p = AvoidanceParams::default();
    let c = p.speed;
    let dt = 1e-3;
    let mut r = rng(2);
    let (mut worst_ratio, mut encounters, mut turning) = (0.0f64, 0, 0);
    let mut samples = 0usize;
    while encounters < 100 {
        let (u, v) = (random_dir(&mut r), random_dir(&mut r));
        let w = v.vec() - u.vec();
        if w.norm() < 0.3 {
            continue;
        }
        let tau = r.random_range(1.0..4.0);
        let md = r.random_range(0.0..0.9 * p.r_safe);
        let side = if r.random::<bool>() { 1.0 } else { -1.0 };
        let wn = UnitDir::new(w).expect("relative heading");
        let rel = w * (-c * tau) + wn.perp().vec() * (side * md);
        if !p.perceives(rel) {
            continue;
        }
        encounters += 1;
        let mut s = PairState([0.0, 0.0, u.angle(), rel.x, rel.y, v.angle()]);
        let mut series = Vec::new();
        let mut turned = false;
        for _ in 0..30_000 {
            let Some(ind) = s.indicators(&p) else { break };
            if !ind.interacting {
                break;
            }
            turned |= pair_omega(&ind, &p) != 0.0;
            series.push(ind.dba.abs());
            s = s.rk4(dt, &p);
        }
        turning += turned as usize;
        samples += series.len();
        if series.len() < 3 {
            continue;
        }
        let curv = series
            .windows(3)
            .map(|w| (w[2] - 2.0 * w[1] + w[0]).abs() / (dt * dt))
            .fold(0.0, f64::max);
        let tol = (10.0 * dt * dt * curv).max(1e-14 * series.iter().cloned().fold(0.0, f64::max));
        let drop = series.windows(2).map(|w| w[0] - w[1]).fold(0.0, f64::max);
        worst_ratio = worst_ratio.max(drop / tol);
    }
    vec![Check::at_most(
        "dba_magnitude_nondecreasing_drop_over_tolerance",
        worst_ratio,
        1.0,
    )
    .with_note(format!(
        "{encounters} encounters, {turning} with active turning, {samples} gated samples"
    ))]
}

fn kernels(v: &Validator) -> Vec<Check> {
    let p = AvoidanceParams::default();
    let q = QuadratureSpec::default();
    let table = v.table();
    let sym = table
        .psi_plus
        .iter()
        .zip(&table.psi_minus)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let mut out = vec![Check::at_most("psi_plus_equals_psi_minus", sym, 1e-6)];
    let mut worst_z = 0.0f64;
    let mut notes = Vec::new();
    for (i, s) in [0.5, 1.0, 2.0].into_iter().enumerate() {
        let direct = psi_pm(s, Side::Both, &p, &q).expect("kernel sample").value;
        let mc = psi_monte_carlo(
            s,
            0.3 + i as f64,
            Side::Both,
            &p,
            10_000_000,
            100 + i as u64,
        )
        .expect("finite perception");
        let z = (mc.mean - direct).abs() / mc.std_err;
        notes.push(format!(
            "s={s}: quadrature {direct:.6}, mc {:.6} +- {:.1e}",
            mc.mean, mc.std_err
        ));
        worst_z = worst_z.max(z);
    }
    out.push(
        Check::at_most("quadrature_vs_monte_carlo_std_errors", worst_z, 3.0)
            .with_note(notes.join("; ")),
    );
    let fine = tabulate(&p, &q.refined(), TABLE_NODES).expect("refined kernels tabulate");
    let peak = table.psi_both.iter().cloned().fold(0.0, f64::max);
    let drift = table
        .psi_both
        .iter()
        .zip(&fine.psi_both)
        .filter(|(_, f)| **f > 1e-3 * peak)
        .map(|(a, f)| (a - f).abs() / f)
        .fold(0.0, f64::max);
    out.push(Check::at_most(
        "self_convergence_under_refinement_rel",
        drift,
        5e-3,
    ));
    out
}

/// Independent concentration for an order parameter by bisection on a
/// quadrature of the first moment.
fn oracle_beta(order: f64, rule: &CircleRule) -> f64 {
    let first = |beta: f64| {
        let z = rule.integrate(|u| (beta * (u.vec().x - 1.0)).exp());
        rule.integrate(|u| u.vec().x * (beta * (u.vec().x - 1.0)).exp()) / z
    };
    let (mut lo, mut hi) = (0.0, 1.0);
    while first(hi) < order {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if first(mid) < order {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn vmf(fault: Option<Fault>) -> Vec<Check> {
    let ratio = |beta: f64| {
        let a = mean_resultant(beta);
        if fault == Some(Fault::Bessel) {
            a * (1.0 + 1e-6)
        } else {
            a
        }
    };
    let rule = CircleRule::new(4096);
    let betas = [0.0, 0.01, 0.3, 1.0, 2.0, 5.0, 10.0, 20.0, 50.0, 100.0];
    let (mut e_norm, mut e_flux) = (0.0f64, 0.0f64);
    for (i, &beta) in betas.iter().enumerate() {
        let dir = UnitDir::from_angle(0.4 + i as f64);
        let m = VmfParams::new(beta, dir).expect("valid concentration");
        e_norm = e_norm.max((rule.integrate(|u| vmf_pdf(u, &m)) - 1.0).abs());
        let mean = rule
            .dirs
            .iter()
            .fold(Vec2::ZERO, |acc, &u| acc + u.vec() * vmf_pdf(u, &m))
            * rule.weight;
        e_flux = e_flux.max((mean - dir.vec() * ratio(beta)).norm());
    }
    let mut e_beta = 0.0f64;
    for &beta in &betas[..9] {
        let back = invert_beta(ratio(beta)).unwrap_or(f64::NAN);
        e_beta = e_beta.max((back - beta).abs() / beta.max(1.0));
    }
    let mut e_order = 0.0f64;
    for k in 0..=99 {
        let m = k as f64 / 100.0;
        e_order = e_order.max((ratio(invert_beta(m).expect("order in range")) - m).abs());
    }
    let (mut e_gamma, mut e_stress) = (0.0f64, 0.0f64);
    for k in 1..=19 {
        let order = k as f64 * 0.05;
        let g = stress_coeffs(order).expect("order in range");
        let target = 1.0 / (order * order);
        e_gamma = e_gamma.max((g.gamma_par + g.gamma_perp - target).abs() / target);
        let dir = UnitDir::from_angle(1.3 * k as f64);
        let rho = 0.5 + 0.1 * k as f64;
        let s = stress_tensor(rho, dir.vec() * order).expect("order in range");
        let beta = oracle_beta(order, &rule);
        let m = VmfParams::new(beta, dir).expect("valid concentration");
        let direct = rule
            .dirs
            .iter()
            .fold(Sym2::default(), |acc, &u| {
                acc + Sym2::outer(u.vec()).scale(vmf_pdf(u, &m))
            })
            .scale(rho * rule.weight);
        e_stress = e_stress.max(
            (s.xx - direct.xx)
                .abs()
                .max((s.xy - direct.xy).abs())
                .max((s.yy - direct.yy).abs()),
        );
    }
    vec![
        Check::at_most("normalization", e_norm, 1e-10),
        Check::at_most("flux_equals_bessel_ratio_times_direction", e_flux, 1e-10),
        Check::at_most("beta_round_trip_rel", e_beta, 1e-10),
        Check::at_most("order_round_trip", e_order, 1e-10),
        Check::at_most("gamma_sum_equals_inverse_order_squared_rel", e_gamma, 1e-10),
        Check::at_most("stress_tensor_vs_quadrature", e_stress, 1e-8),
    ]
}

/// A cluster of walkers around the origin on a periodic box, all of them
/// within perception range of each other.
fn cluster(seed: u64, params: ModelParams) -> Ensemble {
    let grid = Grid2D::new(
        32,
        32,
        1.0,
        1.0,
        Vec2::new(-16.0, -16.0),
        Boundary::Periodic,
    )
    .expect("grid");
    let mut r = rng(seed);
    let agents = (0..6)
        .map(|i| AgentState {
            pos: Vec2::new(r.random_range(-2.5..2.5), r.random_range(-2.5..2.5)),
            heading: random_dir(&mut r),
            target_id: i % 2,
        })
        .collect();
    let targets = vec![Vec2::new(9.0, 3.0), Vec2::new(-8.0, -5.0)];
    Ensemble::new(agents, targets, params, seed, grid).expect("ensemble")
}

/// Sup-norm relative distance of two turning-rate fields.
fn field_rel(a: &[f64], b: &[f64]) -> f64 {
    let num = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    let den = b.iter().map(|y| y.abs()).fold(0.0, f64::max);
    num / den.max(1e-12)
}

fn gradients(v: &Validator) -> Vec<Check> {
    let table = v.table();
    let mut out = Vec::new();
    for mode in [ForceMode::PotentialNonlocal, ForceMode::PotentialLocal] {
        let mut worst = 0.0f64;
        let mut evals = 0;
        for seed in 0..40 {
            let base = ModelParams::default();
            let ens = cluster(seed, base);
            let fine = cluster(
                seed,
                ModelParams {
                    gradient_step: base.gradient_step / 10.0,
                    ..base
                },
            );
            let omega = |e: &Ensemble| -> Vec<f64> {
                (0..e.len())
                    .map(|i| compute_omega(e, i, mode, Some(table)).expect("omega"))
                    .collect()
            };
            worst = worst.max(field_rel(&omega(&ens), &omega(&fine)));
            evals += ens.len();
        }
        out.push(
            Check::at_most(
                format!("{}_omega_vs_refined_difference_rel", mode.name()),
                worst,
                1e-5,
            )
            .with_note(format!("{evals} walkers")),
        );
    }
    out.extend(fluid_slope_checks(table));
    out.push(vmf_force_check());
    out
}

/// Monokinetic potential-local turning rates: the difference step against a
/// tenfold smaller one on two counter-flowing streams, and the smaller one
/// against the derivative of the cost written out with the analytic slope of
/// the kernel interpolant on arbitrary headings.
fn fluid_slope_checks(table: &KernelTable) -> [Check; 2] {
    let grid = Grid2D::new(4, 4, 1.0, 1.0, Vec2::ZERO, Boundary::Outflow).expect("grid");
    let targets = vec![
        Vec2::new(12.0, 5.0),
        Vec2::new(-7.0, 1.0),
        Vec2::new(2.0, -9.0),
    ];
    let params = ModelParams::default();
    let fine_params = ModelParams {
        gradient_step: params.gradient_step / 10.0,
        ..params
    };
    let kind = ClosureKind {
        closure: Closure::Monokinetic,
        variant: ForceVariant::PotentialLocal,
    };
    let solver = |p: ModelParams| {
        FluidSolver::new(
            grid,
            targets.clone(),
            FluidConfig::new(kind, p),
            Some(table.clone()),
        )
        .expect("solver")
    };
    let (coarse, fine) = (solver(params), solver(fine_params));
    let mut r = rng(5);
    let (mut worst_fd, mut worst_slope) = (0.0f64, 0.0f64);
    let (c, tp) = (params.speed(), params.target);
    let cell = grid.index(1, 2);
    let x = grid.center_of(cell);
    for _ in 0..50 {
        let mut f = FieldSet::zeros(3, grid.len());
        let rho: Vec<f64> = (0..3).map(|_| r.random_range(0.2..2.0)).collect();
        for k in 0..3 {
            f.rho[k][cell] = rho[k];
            f.u[k][cell] = random_dir(&mut r).vec();
        }
        let total: f64 = rho.iter().sum();
        let (mut at_fine, mut exact) = (Vec::new(), Vec::new());
        for k in 0..3 {
            let u = UnitDir::new(f.u[k][cell]).expect("unit heading");
            let up = u.perp().vec();
            let mut dmean = 0.0;
            for (eta, &re) in rho.iter().enumerate() {
                let other = f.u[eta][cell];
                let s = (other - u.vec()).norm();
                if s > 1e-9 {
                    let ds = -other.dot(up) / s;
                    dmean += re / total * table.slope(s, Side::Both) * ds;
                }
            }
            let to = targets[k] - x;
            let g = goal_dba(x, u, targets[k], c).expect("goal away");
            let dg = -c * to.dot(u.vec()) / to.norm2();
            let dcost = params.collision_sign.apply(-dmean) + 2.0 * tp.b_t * g * dg
                - tp.align_gain() * up.dot(to) / to.norm();
            exact.push(-dcost);
            at_fine.push(fine.mono_force(&f, cell, k).expect("force").omega);
        }
        worst_slope = worst_slope.max(field_rel(&at_fine, &exact));

        let mut f = FieldSet::zeros(3, grid.len());
        let base = r.random_range(0.0..TAU);
        for k in 0..2 {
            f.rho[k][cell] = r.random_range(0.2..2.0);
            let heading = base + PI * k as f64 + r.random_range(-0.3..0.3);
            f.u[k][cell] = UnitDir::from_angle(heading).vec();
        }
        let omega = |s: &FluidSolver| -> Vec<f64> {
            (0..2)
                .map(|k| s.mono_force(&f, cell, k).expect("force").omega)
                .collect()
        };
        worst_fd = worst_fd.max(field_rel(&omega(&coarse), &omega(&fine)));
    }
    [
        Check::at_most(
            "fluid_potential_local_omega_vs_refined_difference_rel",
            worst_fd,
            1e-5,
        ),
        Check::at_most("fluid_refined_omega_vs_kernel_slope_rel", worst_slope, 1e-5),
    ]
}

/// By-parts force of the VMF potential closure against direct quadrature of
/// `-dPhi/dtheta u_perp M`.
fn vmf_force_check() -> Check {
    let mut r = rng(6);
    let rule = CircleRule::new(256);
    let fine = CircleRule::new(8192);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let a: Vec<f64> = (0..4).map(|_| r.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..4).map(|_| r.random_range(-1.0..1.0)).collect();
        let phi = |t: f64| {
            (0..4)
                .map(|n| a[n] * ((n + 1) as f64 * t).cos() + b[n] * ((n + 1) as f64 * t).sin())
                .sum::<f64>()
        };
        let dphi = |t: f64| {
            (0..4)
                .map(|n| {
                    let k = (n + 1) as f64;
                    k * (b[n] * (k * t).cos() - a[n] * (k * t).sin())
                })
                .sum::<f64>()
        };
        let m = VmfParams::new(r.random_range(0.0..8.0), random_dir(&mut r))
            .expect("valid concentration");
        let nodes: Vec<f64> = rule.angles.iter().map(|&t| phi(t)).collect();
        let by_parts = potential_force_by_parts(&nodes, &rule, &m);
        let direct = fine
            .dirs
            .iter()
            .zip(&fine.angles)
            .fold(Vec2::ZERO, |acc, (u, &t)| {
                acc + u.perp().vec() * (-dphi(t) * vmf_pdf(*u, &m))
            })
            * fine.weight;
        worst = worst.max((by_parts - direct).norm() / direct.norm().max(1.0));
    }
    Check::at_most("vmf_by_parts_force_vs_direct_quadrature", worst, 1e-6)
}

/// Smooth positive densities of two crossing streams on a periodic grid.
fn periodic_streams(grid: &Grid2D, order: f64) -> FieldSet {
    let mut f = FieldSet::zeros(2, grid.len());
    let (lx, ly) = (grid.size().x, grid.size().y);
    for cell in 0..grid.len() {
        let x = grid.center_of(cell);
        let (a, b) = (TAU * x.x / lx, TAU * x.y / ly);
        f.rho[0][cell] = 1.0 + 0.5 * a.sin() * b.cos();
        f.rho[1][cell] = 1.0 + 0.4 * (a + b).cos();
        f.u[0][cell] = Vec2::new(order, 0.0);
        f.u[1][cell] = Vec2::new(0.0, order);
    }
    f
}

fn drift_check(name: &str, before: &[f64], after: &[f64]) -> Check {
    let d = before
        .iter()
        .zip(after)
        .map(|(a, b)| (b - a).abs() / a)
        .fold(0.0, f64::max);
    Check::at_most(name, d, 1e-12)
}

fn conservation(v: &Validator) -> Vec<Check> {
    const STEPS: usize = 1000;
    let grid = Grid2D::new(64, 64, 1.0, 1.0, Vec2::ZERO, Boundary::Periodic).expect("grid");
    let mut params = ModelParams::default();
    // streams cross the box without converging on a point
    params.target.b_t = 0.0;
    params.target.k_align = Some(0.0);
    let targets = vec![Vec2::new(32.0, 32.0), Vec2::new(32.0, 32.0)];
    let dt = cfl_dt(&grid, CFL_MAX, params.speed());
    let mut out = Vec::new();
    for (name, closure, order, nodes) in [
        ("monokinetic_mass_drift_rel", Closure::Monokinetic, 1.0, 64),
        ("vmf_mass_drift_rel", Closure::Vmf, 0.6, 32),
    ] {
        let kind = ClosureKind {
            closure,
            variant: ForceVariant::PotentialLocal,
        };
        let mut cfg = FluidConfig::new(kind, params);
        cfg.force_nodes = nodes;
        let mut solver =
            FluidSolver::new(grid, targets.clone(), cfg, Some(v.table().clone())).expect("solver");
        let mut f = periodic_streams(&grid, order);
        let before: Vec<f64> = (0..2).map(|k| f.mass(k, &grid)).collect();
        let result = (0..STEPS).try_for_each(|_| solver.step(&mut f, dt));
        let after: Vec<f64> = (0..2).map(|k| f.mass(k, &grid)).collect();
        let mut chk = drift_check(name, &before, &after);
        if let Err(e) = result {
            chk.pass = false;
            chk.note = Some(format!("solver error: {e}"));
        } else {
            let d = solver.diagnostics();
            chk.note = Some(format!(
                "{} floor events, {} clip events",
                d.floor_events, d.clip_events
            ));
        }
        out.push(chk);
    }
    let mut hp = ModelParams::default();
    hp.target.b_t = 0.0;
    hp.target.k_align = Some(0.2);
    let cfg = HydroConfig {
        n_theta: 64,
        ..HydroConfig::default()
    };
    let targets = vec![Vec2::new(10.0, 20.0), Vec2::new(50.0, 40.0)];
    let mut solver =
        HydroSolver::new(grid, targets, hp, cfg, &KernelTable::zero()).expect("solver");
    let mut f = periodic_streams(&grid, 0.0);
    let before: Vec<f64> = (0..2).map(|k| f.mass(k, &grid)).collect();
    let result = (0..STEPS).try_for_each(|_| solver.step(&mut f, dt).map(|_| ()));
    let after: Vec<f64> = (0..2).map(|k| f.mass(k, &grid)).collect();
    let mut chk =
        drift_check("hydro_mass_drift_rel", &before, &after).with_note("interaction kernel off");
    if let Err(e) = result {
        chk.pass = false;
        chk.note = Some(format!("solver error: {e}"));
    }
    out.push(chk);
    out
}

/// Two Gaussian streams crossing at right angles on an open 64 m box.
pub fn crossing_streams_scenario() -> Scenario {
    let params = ModelParams {
        noise: 0.0,
        ..ModelParams::default()
    };
    Scenario {
        schema: SCHEMA.into(),
        name: "two-crossing-streams".into(),
        domain: Domain {
            nx: 64,
            ny: 64,
            dx: 1.0,
            dy: 1.0,
            origin: [0.0, 0.0],
            boundary: Boundary::Outflow,
        },
        targets: vec![
            Target {
                label: "east".into(),
                position: [1000.0, 32.0],
            },
            Target {
                label: "north".into(),
                position: [32.0, 1000.0],
            },
        ],
        initial: vec![
            InitialCondition {
                target: "east".into(),
                regions: vec![Region::Gaussian {
                    center: [18.0, 32.0],
                    sigma: 6.0,
                    count: 5000,
                }],
                heading: None,
                concentration: None,
            },
            InitialCondition {
                target: "north".into(),
                regions: vec![Region::Gaussian {
                    center: [32.0, 18.0],
                    sigma: 6.0,
                    count: 5000,
                }],
                heading: None,
                concentration: None,
            },
        ],
        params,
        run: RunSpec {
            t_end: 10.0,
            dt: 0.05,
            cfl: CFL_MAX,
            snapshot_every: Some(2.0),
            seed: Some(7),
        },
        particles: crate::scenario::ParticleSpec {
            force_mode: ForceMode::PotentialLocal,
            max_halvings: 4,
        },
        fluid: crate::scenario::FluidSpec::default(),
        hydro: HydroConfig::default(),
        kernel_table: None,
    }
}

/// Relative L1 distance of two per-target density sets, optionally after
/// summing over square blocks of `block` cells per side.
pub fn relative_l1(grid: &Grid2D, a: &[Vec<f64>], b: &[Vec<f64>], block: usize) -> f64 {
    let (bx, by) = (grid.nx / block, grid.ny / block);
    let (mut num, mut den) = (0.0, 0.0);
    for (ak, bk) in a.iter().zip(b) {
        let mut sa = vec![0.0; bx * by];
        let mut sb = vec![0.0; bx * by];
        for j in 0..by * block {
            for i in 0..bx * block {
                let c = grid.index(i, j);
                let k = (j / block) * bx + i / block;
                sa[k] += ak[c];
                sb[k] += bk[c];
            }
        }
        num += sa.iter().zip(&sb).map(|(x, y)| (x - y).abs()).sum::<f64>();
        den += sb.iter().sum::<f64>();
    }
    num / den
}

fn cross_level(v: &Validator) -> Vec<Check> {
    let sc = crossing_streams_scenario();
    let table = v.table();
    let grid = sc.grid().expect("grid");
    let mut ens = sc
        .build_ensemble(sc.run.seed.unwrap_or(0))
        .expect("ensemble");
    let mode = sc.particles.force_mode;
    let n_steps = (sc.run.t_end / sc.run.dt).round() as usize;
    let mut particle_error = None;
    for _ in 0..n_steps {
        if let Err(e) = advance(
            &mut ens,
            sc.run.dt,
            mode,
            Some(table),
            sc.particles.max_halvings,
        ) {
            particle_error = Some(e.to_string());
            break;
        }
    }
    let moments = extract_moments(&ens, &grid, MomentKernel::Bin);
    let kind = ClosureKind {
        closure: Closure::Monokinetic,
        variant: ForceVariant::PotentialLocal,
    };
    let mut solver = FluidSolver::new(
        grid,
        sc.target_points(),
        FluidConfig::new(kind, sc.params),
        Some(table.clone()),
    )
    .expect("solver");
    let mut f = sc.build_fields(Closure::Monokinetic).expect("fields");
    let limit = cfl_dt(&grid, sc.run.cfl, sc.params.speed());
    let steps = (sc.run.t_end / limit).ceil() as usize;
    let h = sc.run.t_end / steps as f64;
    let fluid_error = (0..steps).try_for_each(|_| solver.step(&mut f, h)).err();
    let native = relative_l1(&grid, &moments.rho, &f.rho, 1);
    let blocks = relative_l1(&grid, &moments.rho, &f.rho, 8);
    let mut chk = Check::at_most("monokinetic_vs_particles_density_l1_rel", native, 0.10)
        .with_note(format!(
            "64x64 cells; 8x8-cell blocks give {blocks:.4}; {} agents left the box",
            moments.outside
        ));
    if let Some(e) = particle_error.or(fluid_error.map(|e| e.to_string())) {
        chk.pass = false;
        chk.note = Some(format!("solver error: {e}"));
    }
    vec![chk]
}

fn hydro_oracle() -> Vec<Check> {
    let kappa = 2.0;
    let mut params = ModelParams::default();
    params.target.b_t = 0.0;
    params.target.k_align = Some(kappa * params.noise);
    let cfg = HydroConfig {
        n_theta: 256,
        ..HydroConfig::default()
    };
    let order = mean_resultant(kappa);
    let grid = Grid2D::new(16, 16, 1.0, 1.0, Vec2::ZERO, Boundary::Outflow).expect("grid");
    let goal = Vec2::new(40.0, 7.3);
    let solver =
        HydroSolver::new(grid, vec![goal], params, cfg, &KernelTable::zero()).expect("solver");
    let mut f = FieldSet::zeros(1, grid.len());
    f.rho[0].fill(1.0);
    let mut e_u = 0.0f64;
    for cell in 0..grid.len() {
        let st = solver.solve_cell(&f, cell).expect("fixed point");
        let u = mean_velocity_from_lte(&st.m[0], solver.angles());
        let x = grid.center_of(cell);
        let expect = UnitDir::new(goal - x).expect("goal away").vec() * order;
        e_u = e_u.max((u - expect).norm());
    }
    let strip = Grid2D::new(64, 4, 1.0, 1.0, Vec2::ZERO, Boundary::Outflow).expect("grid");
    let cfg = HydroConfig {
        n_theta: 128,
        ..HydroConfig::default()
    };
    let mut solver = HydroSolver::new(
        strip,
        vec![Vec2::new(1e7, 2.0)],
        params,
        cfg,
        &KernelTable::zero(),
    )
    .expect("solver");
    let x0 = 16.0;
    let mut f = FieldSet::zeros(1, strip.len());
    for cell in 0..strip.len() {
        if strip.center_of(cell).x < x0 {
            f.rho[0][cell] = 1.0;
        }
    }
    let t_end = 10.0;
    let limit = cfl_dt(&strip, CFL_MAX, params.speed());
    let steps = (t_end / limit).ceil() as usize;
    let h = t_end / steps as f64;
    let stepped = (0..steps).try_for_each(|_| solver.step(&mut f, h).map(|_| ()));
    let row = 1;
    let front = (0..strip.nx - 1)
        .rev()
        .find_map(|i| {
            let (a, b) = (
                f.rho[0][strip.index(i, row)],
                f.rho[0][strip.index(i + 1, row)],
            );
            (a >= 0.5 && b < 0.5)
                .then(|| strip.center_of(strip.index(i, row)).x + (a - 0.5) / (a - b) * strip.dx)
        })
        .unwrap_or(f64::NAN);
    let exact = x0 + params.speed() * order * t_end;
    let mut front_chk = Check::at_most(
        "front_position_error_cells",
        (front - exact).abs() / strip.dx,
        1.0,
    )
    .with_note(format!("front at {front:.3} m, closed form {exact:.3} m"));
    if let Err(e) = stepped {
        front_chk.pass = false;
        front_chk.note = Some(format!("solver error: {e}"));
    }
    vec![
        Check::at_most("lte_velocity_vs_bessel_ratio", e_u, 1e-8),
        front_chk,
    ]
}

fn hydro_fixed_point(v: &Validator) -> Vec<Check> {
    let grid = Grid2D::new(32, 32, 1.0, 1.0, Vec2::ZERO, Boundary::Outflow).expect("grid");
    let axis = 16.0;
    let targets = vec![
        Vec2::new(16.0, axis + 1000.0),
        Vec2::new(16.0, axis - 1000.0),
    ];
    let params = ModelParams::default();
    let cfg = HydroConfig::default();
    let solver = HydroSolver::new(grid, targets, params, cfg, v.table()).expect("solver");
    let mut f = FieldSet::zeros(2, grid.len());
    for cell in 0..grid.len() {
        let x = grid.center_of(cell);
        let bump = |c: Vec2| 2.0 * (-(x - c).norm2() / 50.0).exp();
        f.rho[0][cell] = 0.05 + bump(Vec2::new(13.0, axis - 6.0));
        f.rho[1][cell] = 0.05 + bump(Vec2::new(13.0, axis + 6.0));
    }
    use rayon::prelude::*;
    let states: Vec<_> = (0..grid.len())
        .into_par_iter()
        .map(|c| solver.solve_cell(&f, c))
        .collect();
    let mut failures = 0usize;
    let (mut worst_res, mut iters) = (0.0f64, Vec::new());
    for s in &states {
        match s {
            Ok(s) => {
                worst_res = worst_res.max(s.residual());
                iters.push(s.iterations);
            }
            Err(_) => failures += 1,
        }
    }
    let angles = solver.angles();
    let mut asym = 0.0f64;
    for j in 0..grid.ny {
        for i in 0..grid.nx {
            let (Ok(a), Ok(b)) = (
                &states[grid.index(i, j)],
                &states[grid.index(i, grid.ny - 1 - j)],
            ) else {
                continue;
            };
            for n in 0..angles.len() {
                asym = asym.max((a.phi[0][n] - b.phi[1][angles.mirror(n)]).abs());
            }
        }
    }
    let mean_it = iters.iter().sum::<usize>() as f64 / iters.len().max(1) as f64;
    let min_it = iters.iter().copied().min().unwrap_or(0);
    let max_it = iters.iter().copied().max().unwrap_or(0);
    let mut res =
        Check::at_most("fixed_point_residual_sup", worst_res, cfg.tol).with_note(format!(
            "{} cells, iterations min {min_it} mean {mean_it:.1} max {max_it}",
            iters.len()
        ));
    if failures > 0 {
        res.pass = false;
        res.note = Some(format!("{failures} cells did not converge"));
    }
    vec![
        res,
        Check::at_most("reflection_symmetry_sup", asym, 10.0 * cfg.tol),
    ]
}

fn determinism_run(threads: usize) -> Vec<u8> {
    let grid = Grid2D::new(32, 32, 1.0, 1.0, Vec2::ZERO, Boundary::Periodic).expect("grid");
    let mut r = rng(9);
    let targets = vec![Vec2::new(30.0, 16.0), Vec2::new(2.0, 16.0)];
    let agents = (0..600)
        .map(|i| AgentState {
            pos: Vec2::new(r.random_range(0.0..32.0), r.random_range(0.0..32.0)),
            heading: random_dir(&mut r),
            target_id: i % 2,
        })
        .collect();
    let mut ens =
        Ensemble::new(agents, targets, ModelParams::default(), 42, grid).expect("ensemble");
    let controls = RunControls {
        t_end: 5.0,
        dt: 0.05,
        snapshot_every: 1.0,
        max_halvings: 4,
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .expect("thread pool");
    let mut sink = StreamSink::new(Vec::new(), Vec::new());
    pool.install(|| run(&mut ens, ForceMode::OriginalMax, None, &controls, &mut sink))
        .expect("particle run");
    let (mut snaps, series) = sink.into_inner();
    snaps.extend(series);
    snaps
}

fn determinism() -> Vec<Check> {
    let a = determinism_run(2);
    let b = determinism_run(2);
    let c = determinism_run(1);
    let differ = |x: &[u8], y: &[u8]| if x == y { 0.0 } else { 1.0 };
    vec![
        Check::at_most(
            "identical_seed_and_threads_bitwise_equal",
            differ(&a, &b),
            0.0,
        )
        .with_note(format!("{} bytes of output", a.len())),
        Check::at_most("thread_count_does_not_change_output", differ(&a, &c), 0.0),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_tags_round_trip() {
        for s in Suite::ALL {
            assert_eq!(s.tag().parse::<Suite>().unwrap(), s);
        }
        assert_eq!(Suite::parse_selection("all").unwrap().len(), 10);
        assert_eq!(
            Suite::parse_selection("vmf,indicators").unwrap(),
            vec![Suite::Vmf, Suite::Indicators]
        );
        assert!(Suite::parse_selection("nope").is_err());
    }

    #[test]
    fn check_rejects_nan() {
        assert!(!Check::at_most("x", f64::NAN, 1.0).pass);
        assert!(Check::at_most("x", 1.0, 1.0).pass);
    }

    #[test]
    fn relative_l1_of_blocks() {
        let g = Grid2D::new(4, 4, 1.0, 1.0, Vec2::ZERO, Boundary::Outflow).unwrap();
        let a = vec![vec![1.0; 16]];
        let mut b = a.clone();
        b[0][0] = 0.0;
        b[0][1] = 2.0;
        assert!((relative_l1(&g, &b, &a, 1) - 2.0 / 16.0).abs() < 1e-15);
        assert_eq!(relative_l1(&g, &b, &a, 2), 0.0);
    }

    #[test]
    fn vmf_suite_detects_an_injected_fault() {
        let good = Validator::new(None).run(Suite::Vmf);
        assert!(good.pass(), "{:?}", good.checks);
        let bad = Validator::new(Some(Fault::Bessel)).run(Suite::Vmf);
        assert!(!bad.pass());
        assert!(bad
            .failures()
            .contains(&"flux_equals_bessel_ratio_times_direction"));
    }
}
