//! Hydrodynamic limit: per-cell local equilibria `M = exp(-Phi/d)/Z`, the
//! self-consistent potential coupling all targets, and density transport
//! with the induced mean velocity.

use crate::fluid::{cfl_dt, transport_upwind, FieldSet, MassLedger, CFL_MAX};
use crate::geometry::{UnitDir, Vec2};
use crate::grid::Grid2D;
use crate::kernels::{CircleKernel, KernelTable, Side};
use crate::params::ModelParams;
use crate::quadrature::CircleRule;
use crate::rules::{target_cost_at, ParamError};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::{self, Write};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HydroError {
    #[error("angular grid needs an even count of at least 32 nodes, got {0}")]
    AngularGrid(usize),
    #[error("the equilibrium needs noise d > 0, got {0}")]
    NoNoise(f64),
    #[error("relaxation factor must lie in (0, 1], got {0}")]
    Relax(f64),
    #[error("fixed point did not converge in {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("fixed point failed at cell ({i}, {j}): {source}")]
    Cell {
        i: usize,
        j: usize,
        #[source]
        source: Box<HydroError>,
    },
    #[error("time step {dt} s exceeds the CFL limit {limit} s")]
    Cfl { dt: f64, limit: f64 },
    #[error(transparent)]
    Params(#[from] ParamError),
}

/// Uniform nodes on the circle.
#[derive(Debug, Clone)]
pub struct AngularGrid {
    rule: CircleRule,
}

impl AngularGrid {
    pub fn new(n_theta: usize) -> Result<Self, HydroError> {
        if n_theta < 32 || !n_theta.is_multiple_of(2) {
            return Err(HydroError::AngularGrid(n_theta));
        }
        Ok(Self {
            rule: CircleRule::new(n_theta),
        })
    }

    pub fn len(&self) -> usize {
        self.rule.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rule.is_empty()
    }

    pub fn theta(&self) -> &[f64] {
        &self.rule.angles
    }

    pub fn dirs(&self) -> &[UnitDir] {
        &self.rule.dirs
    }

    pub fn weight(&self) -> f64 {
        self.rule.weight
    }

    /// Node index of `-theta_i`.
    pub fn mirror(&self, i: usize) -> usize {
        (self.len() - i) % self.len()
    }
}

/// Equilibrium weights `exp(-Phi/d) / Z` on the nodes, normalized so that
/// `sum M dtheta = 1`.
pub fn lte_from_potential(phi: &[f64], d: f64, grid: &AngularGrid) -> Result<Vec<f64>, HydroError> {
    if !(d > 0.0 && d.is_finite()) {
        return Err(HydroError::NoNoise(d));
    }
    let lo = phi.iter().copied().fold(f64::INFINITY, f64::min);
    let mut m: Vec<f64> = phi.iter().map(|&p| (-(p - lo) / d).exp()).collect();
    let z: f64 = m.iter().sum::<f64>() * grid.weight();
    m.iter_mut().for_each(|v| *v /= z);
    Ok(m)
}

/// `int M u du`.
pub fn mean_velocity_from_lte(m: &[f64], grid: &AngularGrid) -> Vec2 {
    grid.dirs()
        .iter()
        .zip(m)
        .fold(Vec2::ZERO, |acc, (u, &w)| acc + u.vec() * w)
        * grid.weight()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HydroConfig {
    pub n_theta: usize,
    /// Damping of the fixed-point update.
    pub relax: f64,
    pub tol: f64,
    pub max_iter: usize,
    /// Retries with the damping halved after a failed solve.
    pub retries: u32,
}

impl Default for HydroConfig {
    fn default() -> Self {
        Self {
            n_theta: 128,
            relax: 0.5,
            tol: 1e-8,
            max_iter: 2000,
            retries: 3,
        }
    }
}

/// Converged equilibrium at one cell.
#[derive(Debug, Clone, PartialEq)]
pub struct LteState {
    /// `phi[k][i]`
    pub phi: Vec<Vec<f64>>,
    /// `m[k][i]`
    pub m: Vec<Vec<f64>>,
    pub iterations: usize,
    /// Sup-norm residual of the defining equation after each iteration.
    pub residuals: Vec<f64>,
    /// Relaxation factor that succeeded.
    pub relax: f64,
    /// The residual rose again after the third iteration.
    pub nonmonotone: bool,
}

impl LteState {
    pub fn residual(&self) -> f64 {
        self.residuals.last().copied().unwrap_or(0.0)
    }
}

/// Per-target values at the angular nodes, indexed `[k][i]`.
pub type NodeValues = Vec<Vec<f64>>;

/// The fixed-point problem at one cell: target costs and the interaction
/// kernel on the angular grid.
pub struct CellProblem<'a> {
    pub grid: &'a AngularGrid,
    pub kernel: &'a CircleKernel,
    pub params: &'a ModelParams,
    pub rho: &'a [f64],
    /// `phi_t[k][i]`
    pub phi_t: Vec<Vec<f64>>,
}

impl<'a> CellProblem<'a> {
    pub fn new(
        grid: &'a AngularGrid,
        kernel: &'a CircleKernel,
        params: &'a ModelParams,
        rho: &'a [f64],
        x: Vec2,
        goals: &[Vec2],
    ) -> Self {
        let c = params.speed();
        let phi_t = goals
            .iter()
            .map(|&g| {
                grid.dirs()
                    .iter()
                    .map(|&u| target_cost_at(x, u, g, c, &params.target))
                    .collect()
            })
            .collect();
        Self {
            grid,
            kernel,
            params,
            rho,
            phi_t,
        }
    }

    /// Collision cost at the nodes induced by the equilibria `m`. It is the
    /// same for every target.
    pub fn collision_cost(&self, m: &[Vec<f64>]) -> Vec<f64> {
        let n = self.grid.len();
        let total: f64 = self.rho.iter().sum();
        let mut acc = vec![0.0; n];
        if total <= 0.0 || self.kernel.is_zero() {
            return acc;
        }
        for (k, mk) in m.iter().enumerate() {
            if self.rho[k] > 0.0 {
                self.kernel.apply_add(mk, self.rho[k] / total, &mut acc);
            }
        }
        acc.iter()
            .map(|&v| self.params.collision_sign.apply(-v))
            .collect()
    }

    /// Right-hand side `Phi_t + Phi_c[M(phi)]` and the equilibria of `phi`.
    pub fn map(&self, phi: &[Vec<f64>]) -> Result<(NodeValues, NodeValues), HydroError> {
        let d = self.params.noise;
        let m: Vec<Vec<f64>> = phi
            .iter()
            .map(|p| lte_from_potential(p, d, self.grid))
            .collect::<Result<_, _>>()?;
        let cc = self.collision_cost(&m);
        let out = self
            .phi_t
            .iter()
            .map(|pt| pt.iter().zip(&cc).map(|(a, b)| a + b).collect())
            .collect();
        Ok((out, m))
    }

    fn solve_with(&self, relax: f64, tol: f64, max_iter: usize) -> Result<LteState, HydroError> {
        let mut phi = self.phi_t.clone();
        let mut residuals = Vec::new();
        for it in 1..=max_iter {
            let (t, m) = self.map(&phi)?;
            let r = sup_diff(&phi, &t);
            if r < tol {
                residuals.push(r);
                let nonmonotone = residuals
                    .windows(2)
                    .skip(2)
                    .any(|w| w[1] > w[0] * (1.0 + 1e-12));
                return Ok(LteState {
                    phi,
                    m,
                    iterations: it,
                    residuals,
                    relax,
                    nonmonotone,
                });
            }
            residuals.push(r);
            for (p, tk) in phi.iter_mut().zip(&t) {
                for (a, b) in p.iter_mut().zip(tk) {
                    *a += relax * (b - *a);
                }
            }
        }
        Err(HydroError::NoConvergence {
            iterations: max_iter,
            residual: residuals.last().copied().unwrap_or(f64::NAN),
        })
    }

    /// Damped iteration from `Phi = Phi_t`, retrying with halved damping.
    /// The returned `phi` satisfies the equation to `tol` in sup norm.
    pub fn solve(&self, cfg: &HydroConfig) -> Result<LteState, HydroError> {
        if !(cfg.relax > 0.0 && cfg.relax <= 1.0) {
            return Err(HydroError::Relax(cfg.relax));
        }
        let mut relax = cfg.relax;
        let mut last = None;
        for _ in 0..=cfg.retries {
            match self.solve_with(relax, cfg.tol, cfg.max_iter) {
                Ok(s) => return Ok(s),
                Err(e @ HydroError::NoConvergence { .. }) => {
                    last = Some(e);
                    relax *= 0.5;
                }
                Err(e) => return Err(e),
            }
        }
        Err(last.expect("at least one attempt"))
    }
}

fn sup_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).abs()))
        .fold(0.0, f64::max)
}

/// Solves the fixed point for the per-target densities `rho` at `x`.
#[allow(clippy::too_many_arguments)]
pub fn fixed_point_potential(
    rho: &[f64],
    goals: &[Vec2],
    x: Vec2,
    params: &ModelParams,
    kernel: &CircleKernel,
    grid: &AngularGrid,
    cfg: &HydroConfig,
) -> Result<LteState, HydroError> {
    CellProblem::new(grid, kernel, params, rho, x, goals).solve(cfg)
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct HydroDiagnostics {
    pub steps: u64,
    pub solves: u64,
    pub total_iterations: u64,
    pub max_iterations: usize,
    pub max_residual: f64,
    /// Solves that needed a smaller damping factor.
    pub damped_retries: u64,
    /// Solves whose residual history was not monotone after iteration 3.
    pub nonmonotone: u64,
    pub ledger: Vec<MassLedger>,
}

/// Per-cell output of the last velocity evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct CellSolve {
    pub iterations: usize,
    pub residual: f64,
}

pub struct HydroSolver {
    pub grid: Grid2D,
    pub targets: Vec<Vec2>,
    pub params: ModelParams,
    pub cfg: HydroConfig,
    angles: AngularGrid,
    kernel: CircleKernel,
    diag: HydroDiagnostics,
}

impl HydroSolver {
    pub fn new(
        grid: Grid2D,
        targets: Vec<Vec2>,
        params: ModelParams,
        cfg: HydroConfig,
        table: &KernelTable,
    ) -> Result<Self, HydroError> {
        params.validate()?;
        if !(params.noise > 0.0) {
            return Err(HydroError::NoNoise(params.noise));
        }
        let angles = AngularGrid::new(cfg.n_theta)?;
        let kernel = CircleKernel::new(table, Side::Both, cfg.n_theta);
        Ok(Self {
            grid,
            targets,
            params,
            cfg,
            angles,
            kernel,
            diag: HydroDiagnostics::default(),
        })
    }

    pub fn diagnostics(&self) -> &HydroDiagnostics {
        &self.diag
    }

    pub fn angles(&self) -> &AngularGrid {
        &self.angles
    }

    pub fn start_ledger(&mut self, fields: &FieldSet) {
        self.diag.ledger = (0..fields.n_targets())
            .map(|k| {
                let m = fields.mass(k, &self.grid);
                MassLedger {
                    initial: m,
                    current: m,
                    ..MassLedger::default()
                }
            })
            .collect();
    }

    pub fn solve_cell(&self, fields: &FieldSet, cell: usize) -> Result<LteState, HydroError> {
        let x = self.grid.center_of(cell);
        let goals: Vec<Vec2> = self
            .targets
            .iter()
            .map(|&t| x + self.grid.min_image(t - x))
            .collect();
        let rho: Vec<f64> = fields.rho.iter().map(|r| r[cell]).collect();
        fixed_point_potential(
            &rho,
            &goals,
            x,
            &self.params,
            &self.kernel,
            &self.angles,
            &self.cfg,
        )
        .map_err(|e| {
            let (i, j) = self.grid.coords(cell);
            HydroError::Cell {
                i,
                j,
                source: Box::new(e),
            }
        })
    }

    /// Solves every cell and stores the mean velocities in `fields.u`.
    pub fn update_velocity(&mut self, fields: &mut FieldSet) -> Result<Vec<CellSolve>, HydroError> {
        let solves: Vec<LteState> = (0..self.grid.len())
            .into_par_iter()
            .map(|cell| self.solve_cell(fields, cell))
            .collect::<Result<_, _>>()?;
        let mut out = Vec::with_capacity(solves.len());
        for (cell, s) in solves.iter().enumerate() {
            for k in 0..fields.n_targets() {
                let u = mean_velocity_from_lte(&s.m[k], &self.angles);
                assert!(
                    u.norm() < 1.0,
                    "mean velocity {u:?} not strictly inside the disk"
                );
                fields.u[k][cell] = u;
            }
            self.diag.solves += 1;
            self.diag.total_iterations += s.iterations as u64;
            self.diag.max_iterations = self.diag.max_iterations.max(s.iterations);
            self.diag.max_residual = self.diag.max_residual.max(s.residual());
            self.diag.damped_retries += (s.relax < self.cfg.relax) as u64;
            if s.nonmonotone {
                self.diag.nonmonotone += 1;
            }
            out.push(CellSolve {
                iterations: s.iterations,
                residual: s.residual(),
            });
        }
        Ok(out)
    }

    /// Recomputes `U` from the per-cell fixed point, then transports the
    /// densities one upwind step.
    pub fn step(&mut self, fields: &mut FieldSet, dt: f64) -> Result<Vec<CellSolve>, HydroError> {
        let c = self.params.speed();
        let limit = cfl_dt(&self.grid, CFL_MAX, c);
        if !(dt > 0.0 && dt <= limit * (1.0 + 1e-12)) {
            return Err(HydroError::Cfl { dt, limit });
        }
        if self.diag.ledger.len() != fields.n_targets() {
            self.start_ledger(fields);
        }
        let solves = self.update_velocity(fields)?;
        if self.diag.nonmonotone > 0 && self.diag.steps == 0 {
            log::warn!("fixed-point residual was not monotone after iteration 3 in some cells");
        }
        for k in 0..fields.n_targets() {
            let vel: Vec<Vec2> = fields.u[k].iter().map(|&u| u * c).collect();
            let (rho, out) = transport_upwind(&self.grid, &fields.rho[k], &vel, dt);
            fields.rho[k] = rho;
            self.diag.ledger[k].outflow += out;
            self.diag.ledger[k].current = fields.mass(k, &self.grid);
        }
        self.diag.steps += 1;
        Ok(solves)
    }
}

/// Field CSV with the fixed-point columns:
/// `x,y,k,rho,Ux,Uy,iterations,residual`.
pub fn write_hydro_csv<W: Write>(
    mut w: W,
    grid: &Grid2D,
    fields: &FieldSet,
    solves: &[CellSolve],
) -> io::Result<()> {
    writeln!(w, "x,y,k,rho,Ux,Uy,iterations,residual")?;
    for k in 0..fields.n_targets() {
        for cell in 0..grid.len() {
            let x = grid.center_of(cell);
            let u = fields.u[k][cell];
            let (it, r) = solves
                .get(cell)
                .map(|s| (s.iterations, s.residual))
                .unwrap_or((0, 0.0));
            writeln!(
                w,
                "{},{},{},{},{},{},{},{}",
                x.x, x.y, k, fields.rho[k][cell], u.x, u.y, it, r
            )?;
        }
    }
    Ok(())
}
