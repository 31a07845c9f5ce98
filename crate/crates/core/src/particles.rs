//! The stochastic N-walker simulator, which doubles as the Monte-Carlo
//! approximation of the kinetic equation.

use crate::geometry::{UnitDir, Vec2};
use crate::grid::Grid2D;
use crate::indicators::goal_dba;
use crate::kernels::{KernelTable, Side};
use crate::neighbors::Neighbors;
use crate::params::ModelParams;
use crate::rules::{
    decide_omega, discrete_collision_cost, partner_indicators, phi_response,
    steepest_descent_omega, target_cost_at, worst_case_pm, ParamError, RulesError,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::io::{self, Write};
use std::str::FromStr;
use thiserror::Error;

/// Largest heading change allowed in one step, rad.
pub const MAX_TURN_PER_STEP: f64 = 0.5;

/// Words of the per-agent stream reserved for each step.
const WORDS_PER_STEP: u128 = 64;

#[derive(Debug, Error)]
pub enum ParticleError {
    #[error("invalid ensemble: {0}")]
    Ensemble(String),
    #[error(transparent)]
    Params(#[from] ParamError),
    #[error(transparent)]
    Rules(#[from] RulesError),
    #[error("time step must be positive and finite, got {0}")]
    BadStep(f64),
    #[error("step {dt} s too large: max turning rate {max_turn} rad/s exceeds 0.5 rad per step")]
    StepTooLarge { dt: f64, max_turn: f64 },
    #[error("force mode {0} needs a kernel table")]
    KernelRequired(ForceMode),
    #[error("writing particle output: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub pos: Vec2,
    pub heading: UnitDir,
    pub target_id: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ForceMode {
    #[default]
    OriginalMax,
    MeanfieldAverage,
    LocalKernel,
    PotentialNonlocal,
    PotentialLocal,
}

impl ForceMode {
    pub const ALL: [ForceMode; 5] = [
        ForceMode::OriginalMax,
        ForceMode::MeanfieldAverage,
        ForceMode::LocalKernel,
        ForceMode::PotentialNonlocal,
        ForceMode::PotentialLocal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ForceMode::OriginalMax => "original-max",
            ForceMode::MeanfieldAverage => "meanfield-average",
            ForceMode::LocalKernel => "local-kernel",
            ForceMode::PotentialNonlocal => "potential-nonlocal",
            ForceMode::PotentialLocal => "potential-local",
        }
    }

    pub fn needs_kernel(self) -> bool {
        matches!(self, ForceMode::LocalKernel | ForceMode::PotentialLocal)
    }

    pub fn is_potential(self) -> bool {
        matches!(
            self,
            ForceMode::PotentialNonlocal | ForceMode::PotentialLocal
        )
    }
}

impl fmt::Display for ForceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ForceMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        ForceMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = ForceMode::ALL.iter().map(|m| m.name()).collect();
                format!(
                    "unknown force mode {s:?}, expected one of {}",
                    names.join(", ")
                )
            })
    }
}

#[derive(Debug, Clone)]
pub struct Ensemble {
    pub agents: Vec<AgentState>,
    pub targets: Vec<Vec2>,
    pub params: ModelParams,
    pub rng_seed: u64,
    /// s
    pub time: f64,
    pub grid: Grid2D,
    active: Vec<bool>,
    steps: u64,
}

impl Ensemble {
    pub fn new(
        agents: Vec<AgentState>,
        targets: Vec<Vec2>,
        params: ModelParams,
        rng_seed: u64,
        grid: Grid2D,
    ) -> Result<Self, ParticleError> {
        params.validate()?;
        if targets.is_empty() {
            return Err(ParticleError::Ensemble("target list is empty".into()));
        }
        if let Some((i, a)) = agents
            .iter()
            .enumerate()
            .find(|(_, a)| a.target_id >= targets.len())
        {
            return Err(ParticleError::Ensemble(format!(
                "agent {i} references target {} of {}",
                a.target_id,
                targets.len()
            )));
        }
        if let Some(i) = agents.iter().position(|a| !a.pos.is_finite()) {
            return Err(ParticleError::Ensemble(format!(
                "agent {i} has a non-finite position"
            )));
        }
        let agents: Vec<AgentState> = agents
            .into_iter()
            .map(|a| AgentState {
                pos: grid.wrap(a.pos),
                ..a
            })
            .collect();
        let mut ens = Self {
            active: vec![true; agents.len()],
            agents,
            targets,
            params,
            rng_seed,
            time: 0.0,
            grid,
            steps: 0,
        };
        ens.update_arrivals();
        Ok(ens)
    }

    pub fn len(&self) -> usize {
        self.agents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.agents.is_empty()
    }

    /// Agents that have not reached their target.
    pub fn is_active(&self, i: usize) -> bool {
        self.active[i]
    }

    pub fn active_count(&self) -> usize {
        self.active.iter().filter(|&&a| a).count()
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Displacement from agent `i` to its target.
    pub fn to_goal(&self, i: usize) -> Vec2 {
        let a = &self.agents[i];
        self.grid.min_image(self.targets[a.target_id] - a.pos)
    }

    fn update_arrivals(&mut self) {
        let reach = 2.0 * self.params.avoidance.r_safe;
        for i in 0..self.agents.len() {
            if self.active[i] && self.to_goal(i).norm() < reach {
                self.active[i] = false;
            }
        }
    }

    /// Neighbor index over the active agents at the current positions.
    pub fn neighbors(&self) -> Neighbors {
        let pos: Vec<Vec2> = self.agents.iter().map(|a| a.pos).collect();
        Neighbors::build(
            &pos,
            &self.active,
            self.params.avoidance.perception_radius,
            &self.grid,
        )
    }
}

/// Per-agent local mixture weights from cloud-in-cell deposits on the grid.
#[derive(Debug, Clone)]
struct LocalMixture {
    start: Vec<usize>,
    items: Vec<(usize, f64)>,
}

impl LocalMixture {
    fn build(ens: &Ensemble) -> Self {
        let n = ens.grid.len();
        let mut start = vec![0usize; n + 1];
        let deposits: Vec<Option<[(usize, f64); 4]>> = ens
            .agents
            .iter()
            .enumerate()
            .map(|(j, a)| ens.active[j].then(|| ens.grid.cic(a.pos)))
            .collect();
        for d in deposits.iter().flatten() {
            for &(c, _) in d {
                start[c + 1] += 1;
            }
        }
        for c in 0..n {
            start[c + 1] += start[c];
        }
        let mut fill = start.clone();
        let mut items = vec![(0usize, 0.0); start[n]];
        for (j, d) in deposits.iter().enumerate() {
            if let Some(d) = d {
                for &(c, w) in d {
                    items[fill[c]] = (j, w);
                    fill[c] += 1;
                }
            }
        }
        Self { start, items }
    }

    /// Pair weights `sum_n W_in W_jn` with the partner headings, self included.
    fn weights(&self, ens: &Ensemble, i: usize) -> Vec<(f64, UnitDir)> {
        let mut out = Vec::with_capacity(32);
        for (c, wi) in ens.grid.cic(ens.agents[i].pos) {
            if wi == 0.0 {
                continue;
            }
            for &(j, wj) in &self.items[self.start[c]..self.start[c + 1]] {
                if wj != 0.0 {
                    out.push((wi * wj, ens.agents[j].heading));
                }
            }
        }
        out
    }
}

fn mixture_mean(weights: &[(f64, UnitDir)], u: UnitDir, table: &KernelTable, side: Side) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for &(w, v) in weights {
        num += w * table.eval((v.vec() - u.vec()).norm(), side);
        den += w;
    }
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

/// Immutable per-step data shared by all force evaluations.
pub struct ForceContext<'a> {
    ens: &'a Ensemble,
    mode: ForceMode,
    neighbors: Neighbors,
    table: Option<&'a KernelTable>,
    mixture: Option<LocalMixture>,
}

/// A turning rate and whether the Heaviside tie-break decided it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OmegaEval {
    pub omega: f64,
    pub tie: bool,
}

impl<'a> ForceContext<'a> {
    pub fn new(
        ens: &'a Ensemble,
        mode: ForceMode,
        table: Option<&'a KernelTable>,
    ) -> Result<Self, ParticleError> {
        if mode.needs_kernel() && table.is_none() {
            return Err(ParticleError::KernelRequired(mode));
        }
        Ok(Self {
            ens,
            mode,
            neighbors: ens.neighbors(),
            table,
            mixture: mode.needs_kernel().then(|| LocalMixture::build(ens)),
        })
    }

    pub fn neighbors(&self) -> &Neighbors {
        &self.neighbors
    }

    fn partners(&self, i: usize) -> Vec<(Vec2, UnitDir)> {
        let x = self.ens.agents[i].pos;
        let mut v = Vec::new();
        self.neighbors
            .for_each(i, |j, d| v.push((x + d, self.ens.agents[j].heading)));
        v
    }

    /// Turning rate of agent `i` under the configured mode.
    pub fn omega(&self, i: usize) -> Result<OmegaEval, ParticleError> {
        let ens = self.ens;
        if !ens.active[i] {
            return Ok(OmegaEval {
                omega: 0.0,
                tie: false,
            });
        }
        let a = ens.agents[i];
        let p = &ens.params;
        let av = &p.avoidance;
        let c = p.speed();
        let x = a.pos;
        let goal = x + ens.to_goal(i);
        let g = goal_dba(x, a.heading, goal, c).unwrap_or(0.0);
        let decided = |pp: f64, pm: f64| {
            let d = decide_omega(pp, pm, g);
            OmegaEval {
                omega: d.omega,
                tie: d.tie && (pp > 0.0 || pm > 0.0),
            }
        };
        let clean = |omega: f64| OmegaEval { omega, tie: false };
        let goal_cost = |u: UnitDir| target_cost_at(x, u, goal, c, &p.target);
        match self.mode {
            ForceMode::OriginalMax => {
                let (pp, pm) = worst_case_pm(x, a.heading, self.partners(i), av);
                Ok(decided(pp, pm))
            }
            ForceMode::MeanfieldAverage => {
                let (mut sp, mut np, mut sm, mut nm) = (0.0, 0usize, 0.0, 0usize);
                for (y, v) in self.partners(i) {
                    let Some(ind) = partner_indicators(x, a.heading, y, v, av) else {
                        continue;
                    };
                    if !ind.interacting {
                        continue;
                    }
                    let phi = phi_response(ind.dba.abs(), ind.tti.abs(), av);
                    if phi <= 0.0 {
                        continue;
                    }
                    if ind.dba > 0.0 {
                        sp += phi;
                        np += 1;
                    } else if ind.dba < 0.0 {
                        sm += phi;
                        nm += 1;
                    }
                }
                let mean = |s: f64, n: usize| if n > 0 { s / n as f64 } else { 0.0 };
                Ok(decided(mean(sp, np), mean(sm, nm)))
            }
            ForceMode::LocalKernel => {
                let table = self.table.expect("checked at construction");
                let w = self.mixture.as_ref().unwrap().weights(ens, i);
                let pp = mixture_mean(&w, a.heading, table, Side::Plus);
                let pm = mixture_mean(&w, a.heading, table, Side::Minus);
                Ok(decided(pp, pm))
            }
            ForceMode::PotentialNonlocal => {
                let partners = self.partners(i);
                let cost = |theta: f64| {
                    let u = UnitDir::from_angle(theta);
                    p.collision_sign.apply(discrete_collision_cost(
                        x,
                        u,
                        partners.iter().copied(),
                        av,
                    )) + goal_cost(u)
                };
                Ok(clean(steepest_descent_omega(
                    cost,
                    a.heading.angle(),
                    p.gradient_step,
                )?))
            }
            ForceMode::PotentialLocal => {
                let table = self.table.expect("checked at construction");
                let w = self.mixture.as_ref().unwrap().weights(ens, i);
                let cost = |theta: f64| {
                    let u = UnitDir::from_angle(theta);
                    p.collision_sign
                        .apply(-mixture_mean(&w, u, table, Side::Both))
                        + goal_cost(u)
                };
                Ok(clean(steepest_descent_omega(
                    cost,
                    a.heading.angle(),
                    p.gradient_step,
                )?))
            }
        }
    }
}

/// Turning rate of agent `i` against the current snapshot.
pub fn compute_omega(
    ens: &Ensemble,
    i: usize,
    mode: ForceMode,
    table: Option<&KernelTable>,
) -> Result<f64, ParticleError> {
    Ok(ForceContext::new(ens, mode, table)?.omega(i)?.omega)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct StepStats {
    pub max_turn: f64,
    pub ties: u64,
    pub arrivals: u64,
}

/// One simultaneous Euler-Maruyama step.
pub fn step(
    ens: &mut Ensemble,
    dt: f64,
    mode: ForceMode,
    table: Option<&KernelTable>,
) -> Result<StepStats, ParticleError> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(ParticleError::BadStep(dt));
    }
    let evals: Vec<OmegaEval> = {
        let ctx = ForceContext::new(ens, mode, table)?;
        (0..ens.len())
            .into_par_iter()
            .map(|i| ctx.omega(i))
            .collect::<Result<_, _>>()?
    };
    let max_turn = evals.iter().map(|e| e.omega.abs()).fold(0.0, f64::max);
    if dt * max_turn >= MAX_TURN_PER_STEP {
        return Err(ParticleError::StepTooLarge { dt, max_turn });
    }
    let c = ens.params.speed();
    let noise = (2.0 * ens.params.noise * dt).sqrt();
    let step_index = ens.steps;
    let seed = ens.rng_seed;
    for (i, (a, e)) in ens.agents.iter_mut().zip(&evals).enumerate() {
        if !ens.active[i] {
            continue;
        }
        let old = a.heading;
        let mut theta = old.angle() + e.omega * dt;
        if noise > 0.0 {
            theta += noise * normal_draw(seed, i as u64, step_index);
        }
        a.heading = UnitDir::from_angle(theta);
        a.pos = ens.grid.wrap(a.pos + old.vec() * (c * dt));
    }
    let before = ens.active_count();
    ens.update_arrivals();
    ens.time += dt;
    ens.steps += 1;
    Ok(StepStats {
        max_turn,
        ties: evals.iter().filter(|e| e.tie).count() as u64,
        arrivals: (before - ens.active_count()) as u64,
    })
}

/// Standard normal draw of agent `agent` at step `step`, independent of the
/// order in which agents are processed.
pub fn normal_draw(seed: u64, agent: u64, step: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(agent);
    rng.set_word_pos(step as u128 * WORDS_PER_STEP);
    rng.sample(StandardNormal)
}

/// Advances by `dt`, halving the step where the stability guard trips.
/// Returns the stats summed over the sub-steps and the sub-step count.
pub fn advance(
    ens: &mut Ensemble,
    dt: f64,
    mode: ForceMode,
    table: Option<&KernelTable>,
    max_halvings: u32,
) -> Result<(StepStats, u64), ParticleError> {
    match step(ens, dt, mode, table) {
        Ok(s) => Ok((s, 1)),
        Err(ParticleError::StepTooLarge { .. }) if max_halvings > 0 => {
            let (a, na) = advance(ens, 0.5 * dt, mode, table, max_halvings - 1)?;
            let (b, nb) = advance(ens, 0.5 * dt, mode, table, max_halvings - 1)?;
            Ok((
                StepStats {
                    max_turn: a.max_turn.max(b.max_turn),
                    ties: a.ties + b.ties,
                    arrivals: a.arrivals + b.arrivals,
                },
                na + nb,
            ))
        }
        Err(e) => Err(e),
    }
}

/// How agents are spread onto cells when taking moments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum MomentKernel {
    /// Nearest cell.
    #[default]
    Bin,
    /// Bilinear weights on the four nearest cell centres (bandwidth = cell).
    Cic,
}

#[derive(Debug, Clone)]
pub struct MomentField {
    pub grid: Grid2D,
    /// `rho[k][cell]`, 1/m^2
    pub rho: Vec<Vec<f64>>,
    /// `u[k][cell]`, mean heading
    pub u: Vec<Vec<Vec2>>,
    /// Agents outside an outflow grid, not deposited.
    pub outside: usize,
}

impl MomentField {
    pub fn mass(&self, k: usize) -> f64 {
        self.rho[k].iter().sum::<f64>() * self.grid.cell_area()
    }
}

/// Density and mean heading per target and cell, over all agents (arrived
/// agents included so that mass is accounted exactly).
pub fn extract_moments(ens: &Ensemble, grid: &Grid2D, kernel: MomentKernel) -> MomentField {
    let nk = ens.targets.len();
    let n = grid.len();
    let mut mass = vec![vec![0.0; n]; nk];
    let mut mom = vec![vec![Vec2::ZERO; n]; nk];
    let mut outside = 0;
    for a in &ens.agents {
        let k = a.target_id;
        match kernel {
            MomentKernel::Bin => match grid.locate(a.pos) {
                Some(c) => {
                    mass[k][c] += 1.0;
                    mom[k][c] += a.heading.vec();
                }
                None => outside += 1,
            },
            MomentKernel::Cic => {
                if !grid.is_periodic() && !grid.contains(a.pos) {
                    outside += 1;
                    continue;
                }
                for (c, w) in grid.cic(a.pos) {
                    mass[k][c] += w;
                    mom[k][c] += a.heading.vec() * w;
                }
            }
        }
    }
    let area = grid.cell_area();
    let mut u = mom;
    for k in 0..nk {
        for c in 0..n {
            u[k][c] = if mass[k][c] > 0.0 {
                let m = u[k][c] * (1.0 / mass[k][c]);
                let r = m.norm();
                if r > 1.0 {
                    m * (1.0 / r)
                } else {
                    m
                }
            } else {
                Vec2::ZERO
            };
        }
    }
    let rho = mass
        .into_iter()
        .map(|m| m.into_iter().map(|v| v / area).collect())
        .collect();
    MomentField {
        grid: *grid,
        rho,
        u,
        outside,
    }
}

/// One time-series record.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesRow {
    pub t: f64,
    /// Mean of `c u . e_goal` over active agents, per target (NaN if none).
    pub speed_to_goal: Vec<f64>,
    /// Smallest distance between two active agents within perception range
    /// (`inf` if no pair is that close).
    pub min_distance: f64,
}

pub fn series_row(ens: &Ensemble, neighbors: &Neighbors) -> SeriesRow {
    let nk = ens.targets.len();
    let c = ens.params.speed();
    let (mut sum, mut cnt) = (vec![0.0; nk], vec![0usize; nk]);
    let mut dmin = f64::INFINITY;
    for (i, a) in ens.agents.iter().enumerate() {
        if !ens.active[i] {
            continue;
        }
        let e = ens.to_goal(i);
        let n = e.norm();
        if n > 0.0 {
            sum[a.target_id] += c * a.heading.vec().dot(e) / n;
            cnt[a.target_id] += 1;
        }
        neighbors.for_each(i, |j, d| {
            if j > i {
                dmin = dmin.min(d.norm());
            }
        });
    }
    SeriesRow {
        t: ens.time,
        speed_to_goal: sum
            .iter()
            .zip(&cnt)
            .map(|(s, &n)| if n > 0 { s / n as f64 } else { f64::NAN })
            .collect(),
        min_distance: dmin,
    }
}

/// Receives particle snapshots and time-series rows.
pub trait ParticleSink {
    fn snapshot(&mut self, ens: &Ensemble) -> io::Result<()>;
    fn series(&mut self, n_targets: usize, row: &SeriesRow) -> io::Result<()>;
}

/// Writes NDJSON snapshots and a CSV time series.
pub struct StreamSink<S: Write, T: Write> {
    snapshots: S,
    series: T,
    header_written: bool,
}

impl<S: Write, T: Write> StreamSink<S, T> {
    pub fn new(snapshots: S, series: T) -> Self {
        Self {
            snapshots,
            series,
            header_written: false,
        }
    }

    pub fn into_inner(self) -> (S, T) {
        (self.snapshots, self.series)
    }
}

#[derive(Serialize)]
struct AgentRecord {
    id: usize,
    x: f64,
    y: f64,
    theta: f64,
    target_id: usize,
}

#[derive(Serialize)]
struct SnapshotRecord {
    t: f64,
    agents: Vec<AgentRecord>,
}

impl<S: Write, T: Write> ParticleSink for StreamSink<S, T> {
    fn snapshot(&mut self, ens: &Ensemble) -> io::Result<()> {
        let rec = SnapshotRecord {
            t: ens.time,
            agents: ens
                .agents
                .iter()
                .enumerate()
                .map(|(id, a)| AgentRecord {
                    id,
                    x: a.pos.x,
                    y: a.pos.y,
                    theta: a.heading.angle(),
                    target_id: a.target_id,
                })
                .collect(),
        };
        serde_json::to_writer(&mut self.snapshots, &rec)?;
        self.snapshots.write_all(b"\n")
    }

    fn series(&mut self, n_targets: usize, row: &SeriesRow) -> io::Result<()> {
        if !self.header_written {
            write!(self.series, "t")?;
            for k in 0..n_targets {
                write!(self.series, ",speed_to_goal_{k}")?;
            }
            writeln!(self.series, ",min_pair_distance")?;
            self.header_written = true;
        }
        write!(self.series, "{}", row.t)?;
        for v in &row.speed_to_goal {
            write!(self.series, ",{v}")?;
        }
        writeln!(self.series, ",{}", row.min_distance)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunControls {
    pub t_end: f64,
    pub dt: f64,
    /// Simulated seconds between snapshots.
    pub snapshot_every: f64,
    /// Guard-triggered halvings allowed per step.
    pub max_halvings: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct ParticleRunStats {
    pub steps: u64,
    pub substeps: u64,
    pub snapshots: u64,
    pub ties: u64,
    pub arrivals: u64,
    pub max_turn: f64,
}

/// Integrates to `t_end`, emitting a snapshot and a series row at `t = 0`
/// and after every `snapshot_every` seconds of simulated time.
pub fn run<K: ParticleSink>(
    ens: &mut Ensemble,
    mode: ForceMode,
    table: Option<&KernelTable>,
    controls: &RunControls,
    sink: &mut K,
) -> Result<ParticleRunStats, ParticleError> {
    if !(controls.dt > 0.0 && controls.dt.is_finite()) {
        return Err(ParticleError::BadStep(controls.dt));
    }
    if mode.needs_kernel() && table.is_none() {
        return Err(ParticleError::KernelRequired(mode));
    }
    if mode == ForceMode::LocalKernel {
        log::warn!(
            "local-kernel mode: the kernel halves coincide, so decisions within the \
             small-deviation case fall to the tie-break"
        );
    }
    let nk = ens.targets.len();
    let mut stats = ParticleRunStats::default();
    let emit = |ens: &Ensemble, sink: &mut K, stats: &mut ParticleRunStats| -> io::Result<()> {
        sink.snapshot(ens)?;
        sink.series(nk, &series_row(ens, &ens.neighbors()))?;
        stats.snapshots += 1;
        Ok(())
    };
    emit(ens, sink, &mut stats)?;
    let n_steps = (controls.t_end / controls.dt - 1e-9).ceil().max(0.0) as u64;
    let cadence = controls.snapshot_every;
    let mut next_snapshot = cadence;
    for s in 0..n_steps {
        let t0 = s as f64 * controls.dt;
        let h = (controls.t_end - t0).min(controls.dt);
        let (st, sub) = advance(ens, h, mode, table, controls.max_halvings)?;
        ens.time = t0 + h;
        stats.steps += 1;
        stats.substeps += sub;
        stats.ties += st.ties;
        stats.arrivals += st.arrivals;
        stats.max_turn = stats.max_turn.max(st.max_turn);
        if cadence > 0.0 && ens.time >= next_snapshot - 1e-9 * cadence {
            emit(ens, sink, &mut stats)?;
            while next_snapshot <= ens.time + 1e-9 * cadence {
                next_snapshot += cadence;
            }
        }
    }
    Ok(stats)
}
