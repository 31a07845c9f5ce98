//! First-order finite-volume solvers for the monokinetic and von Mises-Fisher
//! closures, one density and mean heading per target point.

use crate::geometry::{UnitDir, Vec2};
use crate::grid::Grid2D;
use crate::indicators::goal_dba;
use crate::kernels::{h_kernels, CircleKernel, KernelError, KernelTable, Side};
use crate::params::ModelParams;
use crate::quadrature::CircleRule;
use crate::rules::{
    decide_omega, partner_indicators, phi_response, steepest_descent_omega, target_cost_at,
    ParamError, RulesError,
};
use crate::vmf::{invert_beta, stress_tensor_beta, vmf_pdf, Sym2, VmfError, VmfParams};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::{self, Write};
use thiserror::Error;

/// Courant number bound for both closures.
pub const CFL_MAX: f64 = 0.45;
/// `|U|` is kept at or below `1 - EPS_CLIP` in the VMF closure.
pub const EPS_CLIP: f64 = 1e-6;
/// Largest mass the density floor may add in one step, relative to the total.
pub const MAX_MASS_REPAIR: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum FluidError {
    #[error("time step {dt} s exceeds the CFL limit {limit} s")]
    Cfl { dt: f64, limit: f64 },
    #[error("density {rho} 1/m^2 of target {k} at cell ({i}, {j}) exceeds the ceiling {ceiling}")]
    DensityCeiling {
        rho: f64,
        ceiling: f64,
        k: usize,
        i: usize,
        j: usize,
    },
    #[error("density floor added {fraction:e} of the mass of target {k} in one step")]
    MassRepair { k: usize, fraction: f64 },
    #[error("force variant {0:?} needs a kernel table")]
    KernelRequired(ForceVariant),
    #[error("field set has {found} cells per target, grid has {expected}")]
    Shape { expected: usize, found: usize },
    #[error(transparent)]
    Params(#[from] ParamError),
    #[error(transparent)]
    Rules(#[from] RulesError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Vmf(#[from] VmfError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Closure {
    #[default]
    Monokinetic,
    Vmf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ForceVariant {
    OriginalNonlocal,
    OriginalLocal,
    PotentialNonlocal,
    #[default]
    PotentialLocal,
}

impl ForceVariant {
    pub fn is_local(self) -> bool {
        matches!(
            self,
            ForceVariant::OriginalLocal | ForceVariant::PotentialLocal
        )
    }

    pub fn is_potential(self) -> bool {
        matches!(
            self,
            ForceVariant::PotentialNonlocal | ForceVariant::PotentialLocal
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct ClosureKind {
    pub closure: Closure,
    pub variant: ForceVariant,
}

/// Density and mean heading per target and cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldSet {
    /// `rho[k][cell]`, 1/m^2
    pub rho: Vec<Vec<f64>>,
    /// `u[k][cell]`
    pub u: Vec<Vec<Vec2>>,
}

impl FieldSet {
    pub fn zeros(n_targets: usize, n_cells: usize) -> Self {
        Self {
            rho: vec![vec![0.0; n_cells]; n_targets],
            u: vec![vec![Vec2::ZERO; n_cells]; n_targets],
        }
    }

    pub fn n_targets(&self) -> usize {
        self.rho.len()
    }

    pub fn mass(&self, k: usize, grid: &Grid2D) -> f64 {
        self.rho[k].iter().sum::<f64>() * grid.cell_area()
    }

    pub fn total_density(&self, cell: usize) -> f64 {
        self.rho.iter().map(|r| r[cell]).sum()
    }
}

/// Mass bookkeeping for one target.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MassLedger {
    pub initial: f64,
    pub current: f64,
    /// Net mass that left through outflow boundaries.
    pub outflow: f64,
    /// Mass removed by the density floor (negative when the floor adds mass).
    pub repaired: f64,
}

impl MassLedger {
    /// `initial - outflow - repaired - current`.
    pub fn imbalance(&self) -> f64 {
        self.initial - self.outflow - self.repaired - self.current
    }

    pub fn relative_drift(&self) -> f64 {
        if self.initial > 0.0 {
            (self.current - self.initial).abs() / self.initial
        } else {
            self.current.abs()
        }
    }
}

/// Cumulative solver diagnostics.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FluidDiagnostics {
    pub steps: u64,
    /// Cells where `|U|` was clipped to `1 - EPS_CLIP`.
    pub clip_events: u64,
    /// Cells where the density floor was applied.
    pub floor_events: u64,
    /// Small-deviation decisions settled by the tie-break.
    pub ties: u64,
    pub ledger: Vec<MassLedger>,
}

/// `cfl * min(dx, dy) / speed`.
pub fn cfl_dt(grid: &Grid2D, cfl: f64, speed: f64) -> f64 {
    cfl * grid.dx.min(grid.dy) / speed
}

/// VMF second-moment flux `rho (g_par U U + g_perp U_perp U_perp)`. Headings
/// with `|U| >= 1 - EPS_CLIP` are clipped; the flag reports it.
pub fn vmf_flux(rho: f64, u: Vec2) -> (Sym2, bool) {
    let (m, clipped) = clip_order(u.norm());
    let beta = invert_beta(m).expect("order clipped into range");
    let dir = UnitDir::new(u).unwrap_or(UnitDir::E1);
    (stress_tensor_beta(rho, beta, dir), clipped)
}

fn clip_order(m: f64) -> (f64, bool) {
    if m > 1.0 - EPS_CLIP {
        (1.0 - EPS_CLIP, true)
    } else {
        (m, false)
    }
}

/// VMF parameters of a mean heading, with the order clipped.
fn vmf_of(u: Vec2) -> VmfParams {
    let (m, _) = clip_order(u.norm());
    VmfParams {
        beta: invert_beta(m).expect("order clipped into range"),
        mean_dir: UnitDir::new(u).unwrap_or(UnitDir::E1),
    }
}

/// Tangential force of the VMF potential closure, integrated by parts:
/// `int -dPhi/dtheta u_perp M du = beta <Phi> W - int Phi M (1 + beta u.W) u du`.
pub fn potential_force_by_parts(phi: &[f64], rule: &CircleRule, m: &VmfParams) -> Vec2 {
    let w = m.mean_dir.vec();
    let mut mean_phi = 0.0;
    let mut rest = Vec2::ZERO;
    for (u, &ph) in rule.dirs.iter().zip(phi) {
        let den = vmf_pdf(*u, m) * rule.weight;
        mean_phi += ph * den;
        rest += u.vec() * (ph * den * (1.0 + m.beta * u.vec().dot(w)));
    }
    w * (m.beta * mean_phi) - rest
}

#[derive(Debug, Clone)]
pub struct FluidConfig {
    pub kind: ClosureKind,
    pub params: ModelParams,
    /// The monokinetic solver halts above this density, 1/m^2.
    pub density_ceiling: f64,
    /// Circle nodes for heading integrals.
    pub force_nodes: usize,
}

impl FluidConfig {
    pub fn new(kind: ClosureKind, params: ModelParams) -> Self {
        Self {
            kind,
            params,
            density_ceiling: 50.0,
            force_nodes: 64,
        }
    }
}

/// Force evaluation and stepping for a fixed grid and target set.
pub struct FluidSolver {
    pub grid: Grid2D,
    pub targets: Vec<Vec2>,
    pub cfg: FluidConfig,
    table: Option<KernelTable>,
    rule: CircleRule,
    circ: Option<[CircleKernel; 3]>,
    offsets: Vec<(isize, isize, Vec2)>,
    diag: FluidDiagnostics,
}

/// Turning rate and force at one cell for one target.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellForce {
    pub omega: f64,
    pub force: Vec2,
    pub tie: bool,
}

impl FluidSolver {
    pub fn new(
        grid: Grid2D,
        targets: Vec<Vec2>,
        cfg: FluidConfig,
        table: Option<KernelTable>,
    ) -> Result<Self, FluidError> {
        cfg.params.validate()?;
        if cfg.kind.variant.is_local() && table.is_none() {
            return Err(FluidError::KernelRequired(cfg.kind.variant));
        }
        let rule = CircleRule::new(cfg.force_nodes);
        let circ = table.as_ref().map(|t| {
            [Side::Plus, Side::Minus, Side::Both].map(|s| CircleKernel::new(t, s, cfg.force_nodes))
        });
        let offsets = match cfg.params.avoidance.perception_radius {
            Some(r) if !cfg.kind.variant.is_local() => stencil(&grid, r),
            None if !cfg.kind.variant.is_local() => stencil(&grid, grid.size().norm()),
            _ => Vec::new(),
        };
        Ok(Self {
            grid,
            targets,
            cfg,
            table,
            rule,
            circ,
            offsets,
            diag: FluidDiagnostics::default(),
        })
    }

    pub fn diagnostics(&self) -> &FluidDiagnostics {
        &self.diag
    }

    /// Records the initial masses so that the ledger can be balanced.
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

    fn check_shape(&self, fields: &FieldSet) -> Result<(), FluidError> {
        for r in &fields.rho {
            if r.len() != self.grid.len() {
                return Err(FluidError::Shape {
                    expected: self.grid.len(),
                    found: r.len(),
                });
            }
        }
        Ok(())
    }

    fn goal(&self, k: usize, x: Vec2) -> Vec2 {
        x + self.grid.min_image(self.targets[k] - x)
    }

    fn neighbor_cell(&self, cell: usize, di: isize, dj: isize) -> Option<usize> {
        let (i, j) = self.grid.coords(cell);
        let (nx, ny) = (self.grid.nx as isize, self.grid.ny as isize);
        let (mut a, mut b) = (i as isize + di, j as isize + dj);
        if self.grid.is_periodic() {
            a = a.rem_euclid(nx);
            b = b.rem_euclid(ny);
        } else if a < 0 || b < 0 || a >= nx || b >= ny {
            return None;
        }
        Some(self.grid.index(a as usize, b as usize))
    }

    /// Density-weighted mean response over the gated cells, per DBA side, for
    /// an observer at cell `cell` heading `u`. With `positive_only`, only
    /// partners with a positive response count (the mean-field sets).
    fn nonlocal_mono_means(&self, fields: &FieldSet, cell: usize, u: UnitDir) -> (f64, f64, f64) {
        let p = &self.cfg.params.avoidance;
        let x = self.grid.center_of(cell);
        let (mut np, mut dp, mut nm, mut dm) = (0.0, 0.0, 0.0, 0.0);
        for &(di, dj, d) in &self.offsets {
            let Some(y) = self.neighbor_cell(cell, di, dj) else {
                continue;
            };
            for eta in 0..fields.n_targets() {
                let rho = fields.rho[eta][y];
                if rho <= 0.0 {
                    continue;
                }
                let Some(v) = UnitDir::new(fields.u[eta][y]) else {
                    continue;
                };
                let Some(ind) = partner_indicators(x, u, x + d, v, p) else {
                    continue;
                };
                if !ind.interacting {
                    continue;
                }
                let phi = phi_response(ind.dba.abs(), ind.tti.abs(), p);
                if phi <= 0.0 {
                    continue;
                }
                if ind.dba > 0.0 {
                    np += rho * phi;
                    dp += rho;
                } else if ind.dba < 0.0 {
                    nm += rho * phi;
                    dm += rho;
                }
            }
        }
        let q = |n: f64, d: f64| if d > 0.0 { n / d } else { 0.0 };
        (q(np, dp), q(nm, dm), q(np + nm, dp + dm))
    }

    fn local_mono_mean(&self, fields: &FieldSet, cell: usize, u: UnitDir, side: Side) -> f64 {
        let table = self.table.as_ref().expect("checked at construction");
        let (mut num, mut den) = (0.0, 0.0);
        for eta in 0..fields.n_targets() {
            let rho = fields.rho[eta][cell];
            if rho > 0.0 {
                num += rho * table.eval((fields.u[eta][cell] - u.vec()).norm(), side);
                den += rho;
            }
        }
        if den > 0.0 {
            num / den
        } else {
            0.0
        }
    }

    /// Monokinetic turning rate and force `omega U_perp`.
    pub fn mono_force(
        &self,
        fields: &FieldSet,
        cell: usize,
        k: usize,
    ) -> Result<CellForce, FluidError> {
        let p = &self.cfg.params;
        let c = p.speed();
        let x = self.grid.center_of(cell);
        let goal = self.goal(k, x);
        let u = UnitDir::new(fields.u[k][cell]).unwrap_or(UnitDir::E1);
        let g = goal_dba(x, u, goal, c).unwrap_or(0.0);
        let (omega, tie) = match self.cfg.kind.variant {
            ForceVariant::OriginalNonlocal | ForceVariant::OriginalLocal => {
                let (pp, pm) = if self.cfg.kind.variant == ForceVariant::OriginalLocal {
                    (
                        self.local_mono_mean(fields, cell, u, Side::Plus),
                        self.local_mono_mean(fields, cell, u, Side::Minus),
                    )
                } else {
                    let (pp, pm, _) = self.nonlocal_mono_means(fields, cell, u);
                    (pp, pm)
                };
                let d = decide_omega(pp, pm, g);
                (d.omega, d.tie && (pp > 0.0 || pm > 0.0))
            }
            ForceVariant::PotentialLocal | ForceVariant::PotentialNonlocal => {
                let local = self.cfg.kind.variant == ForceVariant::PotentialLocal;
                let cost = |theta: f64| {
                    let v = UnitDir::from_angle(theta);
                    let mean = if local {
                        self.local_mono_mean(fields, cell, v, Side::Both)
                    } else {
                        self.nonlocal_mono_means(fields, cell, v).2
                    };
                    p.collision_sign.apply(-mean) + target_cost_at(x, v, goal, c, &p.target)
                };
                (
                    steepest_descent_omega(cost, u.angle(), p.gradient_step)?,
                    false,
                )
            }
        };
        let uu = fields.u[k][cell];
        Ok(CellForce {
            omega,
            force: uu.perp() * omega,
            tie,
        })
    }

    /// Heading-averaged responses `Phi_pm(u_i)` (or the combined kernel for
    /// `side = Both`) at the circle nodes, for cell `cell`.
    fn vmf_responses(
        &self,
        fields: &FieldSet,
        cell: usize,
        side: Side,
    ) -> Result<Vec<f64>, FluidError> {
        let n = self.rule.len();
        let mut out = vec![0.0; n];
        match self.cfg.kind.variant {
            ForceVariant::OriginalLocal | ForceVariant::PotentialLocal => {
                let circ = self.circ.as_ref().expect("checked at construction");
                let kern = match side {
                    Side::Plus => &circ[0],
                    Side::Minus => &circ[1],
                    Side::Both => &circ[2],
                };
                let total = fields.total_density(cell);
                if total <= 0.0 {
                    return Ok(out);
                }
                for eta in 0..fields.n_targets() {
                    let rho = fields.rho[eta][cell];
                    if rho <= 0.0 {
                        continue;
                    }
                    let m = vmf_of(fields.u[eta][cell]);
                    let dens: Vec<f64> = self.rule.dirs.iter().map(|&v| vmf_pdf(v, &m)).collect();
                    kern.apply_add(&dens, rho / total, &mut out);
                }
            }
            ForceVariant::OriginalNonlocal | ForceVariant::PotentialNonlocal => {
                let p = &self.cfg.params.avoidance;
                let x = self.grid.center_of(cell);
                let mut den = vec![0.0; n];
                for &(di, dj, d) in &self.offsets {
                    let Some(y) = self.neighbor_cell(cell, di, dj) else {
                        continue;
                    };
                    for eta in 0..fields.n_targets() {
                        let rho = fields.rho[eta][y];
                        if rho <= 0.0 {
                            continue;
                        }
                        let (mean, _) = clip_order(fields.u[eta][y].norm());
                        let mdir = UnitDir::new(fields.u[eta][y])
                            .map(|w| w.vec() * mean)
                            .unwrap_or(Vec2::ZERO);
                        for (i, &u) in self.rule.dirs.iter().enumerate() {
                            let (h, h0) = h_kernels(x, u, x + d, mdir, side, p, &self.rule)?;
                            out[i] += rho * h;
                            den[i] += rho * h0;
                        }
                    }
                }
                for (o, d) in out.iter_mut().zip(&den) {
                    *o = if *d > 0.0 { *o / d } else { 0.0 };
                }
            }
        }
        Ok(out)
    }

    /// VMF momentum source per unit density, `F` in `d(rho U)/dt = rho F`.
    pub fn vmf_force(
        &self,
        fields: &FieldSet,
        cell: usize,
        k: usize,
    ) -> Result<CellForce, FluidError> {
        let p = &self.cfg.params;
        let c = p.speed();
        let x = self.grid.center_of(cell);
        let goal = self.goal(k, x);
        let m = vmf_of(fields.u[k][cell]);
        if self.cfg.kind.variant.is_potential() {
            let coll = self.vmf_responses(fields, cell, Side::Both)?;
            let phi: Vec<f64> = self
                .rule
                .dirs
                .iter()
                .zip(&coll)
                .map(|(&u, &cc)| {
                    p.collision_sign.apply(-cc) + target_cost_at(x, u, goal, c, &p.target)
                })
                .collect();
            return Ok(CellForce {
                omega: 0.0,
                force: potential_force_by_parts(&phi, &self.rule, &m),
                tie: false,
            });
        }
        let plus = self.vmf_responses(fields, cell, Side::Plus)?;
        let minus = self.vmf_responses(fields, cell, Side::Minus)?;
        let mut f = Vec2::ZERO;
        let mut tie = false;
        for (i, &u) in self.rule.dirs.iter().enumerate() {
            let g = goal_dba(x, u, goal, c).unwrap_or(0.0);
            let d = decide_omega(plus[i], minus[i], g);
            tie |= d.tie && (plus[i] > 0.0 || minus[i] > 0.0);
            f += u.perp().vec() * (d.omega * vmf_pdf(u, &m) * self.rule.weight);
        }
        Ok(CellForce {
            omega: 0.0,
            force: f,
            tie,
        })
    }

    fn check_dt(&self, dt: f64) -> Result<(), FluidError> {
        let limit = cfl_dt(&self.grid, CFL_MAX, self.cfg.params.speed());
        if !(dt > 0.0 && dt <= limit * (1.0 + 1e-12)) {
            return Err(FluidError::Cfl { dt, limit });
        }
        Ok(())
    }

    fn forces(&self, fields: &FieldSet) -> Result<Vec<Vec<CellForce>>, FluidError> {
        let n = self.grid.len();
        (0..fields.n_targets())
            .map(|k| {
                (0..n)
                    .into_par_iter()
                    .map(|cell| match self.cfg.kind.closure {
                        Closure::Monokinetic => self.mono_force(fields, cell, k),
                        Closure::Vmf => self.vmf_force(fields, cell, k),
                    })
                    .collect()
            })
            .collect()
    }

    /// One step of the configured closure.
    pub fn step(&mut self, fields: &mut FieldSet, dt: f64) -> Result<(), FluidError> {
        self.check_shape(fields)?;
        self.check_dt(dt)?;
        if self.diag.ledger.len() != fields.n_targets() {
            self.start_ledger(fields);
        }
        match self.cfg.kind.closure {
            Closure::Monokinetic => self.mono_step(fields, dt),
            Closure::Vmf => self.vmf_step(fields, dt),
        }
    }

    fn mono_step(&mut self, fields: &mut FieldSet, dt: f64) -> Result<(), FluidError> {
        let forces = self.forces(fields)?;
        let c = self.cfg.params.speed();
        let mut next = fields.clone();
        for k in 0..fields.n_targets() {
            let vel: Vec<Vec2> = fields.u[k].iter().map(|&u| u * c).collect();
            let (rho, out) = transport_upwind(&self.grid, &fields.rho[k], &vel, dt);
            next.rho[k] = rho;
            self.diag.ledger[k].outflow += out;
            let u = advect_heading(&self.grid, &fields.u[k], c, dt);
            for (cell, (un, f)) in u.into_iter().zip(&forces[k]).enumerate() {
                let w = un + f.force * dt;
                next.u[k][cell] = UnitDir::new(w)
                    .or_else(|| UnitDir::new(fields.u[k][cell]))
                    .unwrap_or(UnitDir::E1)
                    .vec();
            }
            self.diag.ties += forces[k].iter().filter(|f| f.tie).count() as u64;
        }
        for k in 0..next.n_targets() {
            if let Some((cell, &rho)) = next.rho[k]
                .iter()
                .enumerate()
                .find(|(_, &r)| r > self.cfg.density_ceiling)
            {
                let (i, j) = self.grid.coords(cell);
                return Err(FluidError::DensityCeiling {
                    rho,
                    ceiling: self.cfg.density_ceiling,
                    k,
                    i,
                    j,
                });
            }
        }
        *fields = next;
        self.finish_step(fields);
        Ok(())
    }

    fn vmf_step(&mut self, fields: &mut FieldSet, dt: f64) -> Result<(), FluidError> {
        let forces = self.forces(fields)?;
        let c = self.cfg.params.speed();
        let relax = (-self.cfg.params.noise * dt).exp();
        let n = self.grid.len();
        let mut next = fields.clone();
        for k in 0..fields.n_targets() {
            let rho = &fields.rho[k];
            let mut stress = Vec::with_capacity(n);
            for cell in 0..n {
                let (s, clipped) = vmf_flux(rho[cell], fields.u[k][cell]);
                self.diag.clip_events += clipped as u64;
                stress.push(s);
            }
            let (mom_u, _) = clipped_headings(&fields.u[k]);
            let q: Vec<Vec2> = rho.iter().zip(&mom_u).map(|(&r, &u)| u * r).collect();
            let adv = rusanov(&self.grid, rho, &q, &stress, c, dt);
            self.diag.ledger[k].outflow += adv.outflow;
            let total: f64 = rho.iter().sum::<f64>() * self.grid.cell_area();
            let mut added = 0.0;
            for cell in 0..n {
                let mut r = adv.rho[cell];
                if r < 0.0 {
                    added += -r * self.grid.cell_area();
                    self.diag.floor_events += 1;
                    r = 0.0;
                }
                let mut m = (adv.q[cell] + forces[k][cell].force * (rho[cell] * dt)) * relax;
                let u = if r > 0.0 {
                    let w = m * (1.0 / r);
                    let norm = w.norm();
                    if norm > 1.0 - EPS_CLIP {
                        self.diag.clip_events += 1;
                        w * ((1.0 - EPS_CLIP) / norm)
                    } else {
                        w
                    }
                } else {
                    m = Vec2::ZERO;
                    m
                };
                next.rho[k][cell] = r;
                next.u[k][cell] = u;
            }
            self.diag.ledger[k].repaired -= added;
            if total > 0.0 && added / total > MAX_MASS_REPAIR {
                return Err(FluidError::MassRepair {
                    k,
                    fraction: added / total,
                });
            }
            self.diag.ties += forces[k].iter().filter(|f| f.tie).count() as u64;
        }
        *fields = next;
        self.finish_step(fields);
        Ok(())
    }

    fn finish_step(&mut self, fields: &FieldSet) {
        self.diag.steps += 1;
        for (k, l) in self.diag.ledger.iter_mut().enumerate() {
            l.current = fields.mass(k, &self.grid);
        }
    }
}

fn clipped_headings(u: &[Vec2]) -> (Vec<Vec2>, u64) {
    let mut n = 0;
    let v = u
        .iter()
        .map(|&w| {
            let m = w.norm();
            if m > 1.0 - EPS_CLIP {
                n += 1;
                w * ((1.0 - EPS_CLIP) / m)
            } else {
                w
            }
        })
        .collect();
    (v, n)
}

/// Cells whose centres lie within `radius` of a cell centre, as index
/// offsets with displacements (the cell itself excluded).
fn stencil(grid: &Grid2D, radius: f64) -> Vec<(isize, isize, Vec2)> {
    let ri = (radius / grid.dx).ceil() as isize;
    let rj = (radius / grid.dy).ceil() as isize;
    let (hx, hy) = (grid.nx as isize / 2, grid.ny as isize / 2);
    let mut out = Vec::new();
    for dj in -rj..=rj {
        for di in -ri..=ri {
            if di == 0 && dj == 0 {
                continue;
            }
            // on a periodic grid keep one image of every cell
            if grid.is_periodic()
                && (di < -hx
                    || di >= grid.nx as isize - hx
                    || dj < -hy
                    || dj >= grid.ny as isize - hy)
            {
                continue;
            }
            let d = Vec2::new(di as f64 * grid.dx, dj as f64 * grid.dy);
            if d.norm() < radius {
                out.push((di, dj, d));
            }
        }
    }
    out
}

/// Neighbor across the face in direction `(di, dj)`, or `None` at an outflow
/// boundary.
fn across(grid: &Grid2D, i: usize, j: usize, di: isize, dj: isize) -> Option<usize> {
    let (a, b) = (i as isize + di, j as isize + dj);
    let (nx, ny) = (grid.nx as isize, grid.ny as isize);
    if grid.is_periodic() {
        Some(grid.index(a.rem_euclid(nx) as usize, b.rem_euclid(ny) as usize))
    } else if a < 0 || b < 0 || a >= nx || b >= ny {
        None
    } else {
        Some(grid.index(a as usize, b as usize))
    }
}

/// Donor-cell update of `d rho/dt + div(rho v) = 0` with face velocities
/// averaged from the two cells. Outflow boundaries let mass leave and admit
/// none. Returns the new density and the mass that left.
pub fn transport_upwind(grid: &Grid2D, rho: &[f64], vel: &[Vec2], dt: f64) -> (Vec<f64>, f64) {
    let n = grid.len();
    let mut out = rho.to_vec();
    let mut left = 0.0;
    let (lx, ly) = (dt / grid.dx, dt / grid.dy);
    for j in 0..grid.ny {
        for i in 0..grid.nx {
            let a = grid.index(i, j);
            // east and north faces of each cell, plus west/south outflow faces
            for (di, dj, lam, len) in [(1isize, 0isize, lx, grid.dy), (0, 1, ly, grid.dx)] {
                let comp = |v: Vec2| if di == 1 { v.x } else { v.y };
                match across(grid, i, j, di, dj) {
                    Some(b) => {
                        let s = 0.5 * (comp(vel[a]) + comp(vel[b]));
                        let flux = if s > 0.0 { s * rho[a] } else { s * rho[b] };
                        out[a] -= lam * flux;
                        out[b] += lam * flux;
                    }
                    None => {
                        let s = comp(vel[a]).max(0.0);
                        out[a] -= lam * s * rho[a];
                        left += dt * s * rho[a] * len;
                    }
                }
            }
            if !grid.is_periodic() {
                if i == 0 {
                    let s = (-vel[a].x).max(0.0);
                    out[a] -= lx * s * rho[a];
                    left += dt * s * rho[a] * grid.dy;
                }
                if j == 0 {
                    let s = (-vel[a].y).max(0.0);
                    out[a] -= ly * s * rho[a];
                    left += dt * s * rho[a] * grid.dx;
                }
            }
        }
    }
    debug_assert_eq!(out.len(), n);
    (out, left)
}

/// Upwind differencing of `dU/dt + c U.grad U = 0` (zero-gradient at
/// outflow boundaries).
fn advect_heading(grid: &Grid2D, u: &[Vec2], c: f64, dt: f64) -> Vec<Vec2> {
    (0..grid.len())
        .map(|a| {
            let (i, j) = grid.coords(a);
            let w = u[a];
            let pick = |di: isize, dj: isize| across(grid, i, j, di, dj).map(|b| u[b]).unwrap_or(w);
            let gx = if w.x > 0.0 {
                (w - pick(-1, 0)) * (1.0 / grid.dx)
            } else {
                (pick(1, 0) - w) * (1.0 / grid.dx)
            };
            let gy = if w.y > 0.0 {
                (w - pick(0, -1)) * (1.0 / grid.dy)
            } else {
                (pick(0, 1) - w) * (1.0 / grid.dy)
            };
            w - (gx * w.x + gy * w.y) * (c * dt)
        })
        .collect()
}

struct Advected {
    rho: Vec<f64>,
    q: Vec<Vec2>,
    outflow: f64,
}

/// Local Lax-Friedrichs update of `(rho, q)` with physical fluxes
/// `c (q_n, S n)` and wave-speed bound `c`.
fn rusanov(grid: &Grid2D, rho: &[f64], q: &[Vec2], s: &[Sym2], c: f64, dt: f64) -> Advected {
    let mut r = rho.to_vec();
    let mut m = q.to_vec();
    let mut left = 0.0;
    let (lx, ly) = (dt / grid.dx, dt / grid.dy);
    // physical flux through a face with normal e_x (dir 0) or e_y (dir 1)
    let flux = |a: usize, dir: usize| -> (f64, Vec2) {
        if dir == 0 {
            (c * q[a].x, Vec2::new(c * s[a].xx, c * s[a].xy))
        } else {
            (c * q[a].y, Vec2::new(c * s[a].xy, c * s[a].yy))
        }
    };
    for j in 0..grid.ny {
        for i in 0..grid.nx {
            let a = grid.index(i, j);
            for (dir, di, dj, lam, len) in [
                (0usize, 1isize, 0isize, lx, grid.dy),
                (1, 0, 1, ly, grid.dx),
            ] {
                let (fa, ga) = flux(a, dir);
                match across(grid, i, j, di, dj) {
                    Some(b) => {
                        let (fb, gb) = flux(b, dir);
                        let fr = 0.5 * (fa + fb) - 0.5 * c * (rho[b] - rho[a]);
                        let fq = (ga + gb) * 0.5 - (q[b] - q[a]) * (0.5 * c);
                        r[a] -= lam * fr;
                        r[b] += lam * fr;
                        m[a] -= fq * lam;
                        m[b] += fq * lam;
                    }
                    None => {
                        if fa > 0.0 {
                            r[a] -= lam * fa;
                            m[a] -= ga * lam;
                            left += dt * fa * len;
                        }
                    }
                }
            }
            if !grid.is_periodic() {
                for (dir, edge, lam, len) in
                    [(0usize, i == 0, lx, grid.dy), (1, j == 0, ly, grid.dx)]
                {
                    if !edge {
                        continue;
                    }
                    let (fa, ga) = flux(a, dir);
                    if fa < 0.0 {
                        r[a] += lam * fa;
                        m[a] += ga * lam;
                        left -= dt * fa * len;
                    }
                }
            }
        }
    }
    Advected {
        rho: r,
        q: m,
        outflow: left,
    }
}

/// Cell-centred field CSV: `x,y,k,rho,Ux,Uy`.
pub fn write_fields_csv<W: Write>(mut w: W, grid: &Grid2D, fields: &FieldSet) -> io::Result<()> {
    writeln!(w, "x,y,k,rho,Ux,Uy")?;
    for k in 0..fields.n_targets() {
        for cell in 0..grid.len() {
            let x = grid.center_of(cell);
            let u = fields.u[k][cell];
            writeln!(
                w,
                "{},{},{},{},{},{}",
                x.x, x.y, k, fields.rho[k][cell], u.x, u.y
            )?;
        }
    }
    Ok(())
}
