//! Scenario files: domain, targets, initial conditions, parameters and run
//! controls shared by every model level.

use crate::fluid::{Closure, FieldSet, ForceVariant, CFL_MAX, EPS_CLIP};
use crate::geometry::{UnitDir, Vec2};
use crate::grid::{Boundary, Grid2D};
use crate::hydro::HydroConfig;
use crate::params::ModelParams;
use crate::particles::{AgentState, Ensemble, ForceMode};
use crate::vmf::{mean_resultant, vmf_sample, VmfParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erf;
use std::collections::HashSet;
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const SCHEMA: &str = "crowdflux.scenario/1";

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read scenario {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("scenario schema error at {pointer}: {msg}")]
    Schema { pointer: String, msg: String },
    #[error("invalid scenario value at {pointer}: {msg}")]
    Invalid { pointer: String, msg: String },
}

fn invalid(pointer: &str, msg: impl Into<String>) -> ScenarioError {
    ScenarioError::Invalid {
        pointer: pointer.into(),
        msg: msg.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub schema: String,
    #[serde(default)]
    pub name: String,
    pub domain: Domain,
    pub targets: Vec<Target>,
    pub initial: Vec<InitialCondition>,
    #[serde(default)]
    pub params: ModelParams,
    pub run: RunSpec,
    #[serde(default)]
    pub particles: ParticleSpec,
    #[serde(default)]
    pub fluid: FluidSpec,
    #[serde(default)]
    pub hydro: HydroConfig,
    /// Kernel table file, relative to the scenario file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel_table: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Domain {
    pub nx: usize,
    pub ny: usize,
    /// m
    pub dx: f64,
    /// m
    pub dy: f64,
    #[serde(default)]
    pub origin: [f64; 2],
    #[serde(default)]
    pub boundary: Boundary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Target {
    pub label: String,
    pub position: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialCondition {
    /// Target label.
    pub target: String,
    pub regions: Vec<Region>,
    /// Mean heading in radians; absent means towards the target.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heading: Option<f64>,
    /// Heading concentration. Particles draw headings from the matching
    /// distribution and the VMF closure starts at its order parameter.
    /// Absent means perfectly aligned.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub concentration: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Region {
    /// Isotropic Gaussian holding `count` agents.
    Gaussian {
        center: [f64; 2],
        /// m
        sigma: f64,
        count: u64,
    },
    /// Uniform density on an axis-aligned box.
    Box {
        min: [f64; 2],
        max: [f64; 2],
        /// 1/m^2
        density: f64,
    },
}

impl Region {
    /// Agents represented by the region.
    pub fn count(&self) -> u64 {
        match *self {
            Region::Gaussian { count, .. } => count,
            Region::Box { min, max, density } => {
                ((max[0] - min[0]) * (max[1] - min[1]) * density).round() as u64
            }
        }
    }

    /// Mass of the region inside the cell `[x0, x1] x [y0, y1]`.
    fn cell_mass(&self, x0: f64, x1: f64, y0: f64, y1: f64) -> f64 {
        match *self {
            Region::Gaussian {
                center,
                sigma,
                count,
            } => {
                let s = sigma * std::f64::consts::SQRT_2;
                let fx = 0.5 * (erf((x1 - center[0]) / s) - erf((x0 - center[0]) / s));
                let fy = 0.5 * (erf((y1 - center[1]) / s) - erf((y0 - center[1]) / s));
                count as f64 * fx * fy
            }
            Region::Box { min, max, density } => {
                let ox = (x1.min(max[0]) - x0.max(min[0])).max(0.0);
                let oy = (y1.min(max[1]) - y0.max(min[1])).max(0.0);
                density * ox * oy
            }
        }
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> Vec<Vec2> {
        match *self {
            Region::Gaussian {
                center,
                sigma,
                count,
            } => {
                let n = Normal::new(0.0, sigma).expect("validated sigma");
                (0..count)
                    .map(|_| Vec2::new(center[0] + n.sample(rng), center[1] + n.sample(rng)))
                    .collect()
            }
            Region::Box { min, max, .. } => (0..self.count())
                .map(|_| {
                    Vec2::new(
                        rng.random_range(min[0]..max[0]),
                        rng.random_range(min[1]..max[1]),
                    )
                })
                .collect(),
        }
    }
}

fn default_cfl() -> f64 {
    CFL_MAX
}

fn default_particle_dt() -> f64 {
    0.05
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    /// s
    pub t_end: f64,
    /// Particle time step, s.
    #[serde(default = "default_particle_dt")]
    pub dt: f64,
    /// Courant number of the fluid and hydrodynamic steppers.
    #[serde(default = "default_cfl")]
    pub cfl: f64,
    /// Simulated seconds between snapshots; absent means start and end only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snapshot_every: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

fn default_halvings() -> u32 {
    4
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ParticleSpec {
    pub force_mode: ForceMode,
    #[serde(default = "default_halvings")]
    pub max_halvings: u32,
}

impl Default for ParticleSpec {
    fn default() -> Self {
        Self {
            force_mode: ForceMode::default(),
            max_halvings: default_halvings(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FluidSpec {
    pub variant: ForceVariant,
    /// 1/m^2
    pub density_ceiling: f64,
    pub force_nodes: usize,
}

impl Default for FluidSpec {
    fn default() -> Self {
        Self {
            variant: ForceVariant::default(),
            density_ceiling: 50.0,
            force_nodes: 64,
        }
    }
}

fn pointer_of(path: &serde_path_to_error::Path) -> String {
    let mut out = String::new();
    for seg in path.iter() {
        out.push('/');
        match seg {
            serde_path_to_error::Segment::Seq { index } => out.push_str(&index.to_string()),
            serde_path_to_error::Segment::Map { key }
            | serde_path_to_error::Segment::Enum { variant: key } => {
                out.push_str(&key.replace('~', "~0").replace('/', "~1"))
            }
            serde_path_to_error::Segment::Unknown => out.push('?'),
        }
    }
    if out.is_empty() {
        out.push('/');
    }
    out
}

impl Scenario {
    /// Parses and validates a scenario. Relative kernel-table paths are
    /// resolved against `base`.
    pub fn parse_str(text: &str, base: Option<&Path>) -> Result<Self, ScenarioError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let mut sc: Scenario =
            serde_path_to_error::deserialize(de).map_err(|e| ScenarioError::Schema {
                pointer: pointer_of(e.path()),
                msg: e.inner().to_string(),
            })?;
        if let (Some(base), Some(t)) = (base, sc.kernel_table.as_ref()) {
            if t.is_relative() {
                sc.kernel_table = Some(base.join(t));
            }
        }
        sc.validate()?;
        Ok(sc)
    }

    pub fn from_path(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse_str(&text, path.parent())
    }

    /// Pretty JSON with every default written out.
    pub fn to_canonical_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.schema != SCHEMA {
            return Err(invalid(
                "/schema",
                format!("expected \"{SCHEMA}\", got \"{}\"", self.schema),
            ));
        }
        self.grid()?;
        if self.targets.is_empty() {
            return Err(invalid("/targets", "at least one target is required"));
        }
        let mut labels = HashSet::new();
        for (i, t) in self.targets.iter().enumerate() {
            if !labels.insert(t.label.as_str()) {
                return Err(invalid(
                    &format!("/targets/{i}/label"),
                    format!("duplicate label \"{}\"", t.label),
                ));
            }
            if !t.position.iter().all(|v| v.is_finite()) {
                return Err(invalid(&format!("/targets/{i}/position"), "must be finite"));
            }
        }
        for (i, ic) in self.initial.iter().enumerate() {
            let at = |f: &str| format!("/initial/{i}/{f}");
            if !labels.contains(ic.target.as_str()) {
                return Err(invalid(
                    &at("target"),
                    format!("unknown target \"{}\"", ic.target),
                ));
            }
            if let Some(h) = ic.heading {
                if !h.is_finite() {
                    return Err(invalid(&at("heading"), "must be finite"));
                }
            }
            if let Some(b) = ic.concentration {
                if !(b.is_finite() && b >= 0.0) {
                    return Err(invalid(&at("concentration"), "must be finite and >= 0"));
                }
            }
            for (j, r) in ic.regions.iter().enumerate() {
                let at = |f: &str| format!("/initial/{i}/regions/{j}/{f}");
                match *r {
                    Region::Gaussian { center, sigma, .. } => {
                        if !(sigma > 0.0 && sigma.is_finite()) {
                            return Err(invalid(&at("sigma"), "must be > 0"));
                        }
                        if !center.iter().all(|v| v.is_finite()) {
                            return Err(invalid(&at("center"), "must be finite"));
                        }
                    }
                    Region::Box { min, max, density } => {
                        if !(min[0] < max[0] && min[1] < max[1]) {
                            return Err(invalid(
                                &at("max"),
                                "box must have min < max on both axes",
                            ));
                        }
                        if !(density >= 0.0 && density.is_finite()) {
                            return Err(invalid(&at("density"), "must be finite and >= 0"));
                        }
                    }
                }
            }
        }
        self.params
            .validate()
            .map_err(|e| invalid("/params", e.to_string()))?;
        let r = &self.run;
        if !(r.t_end > 0.0 && r.t_end.is_finite()) {
            return Err(invalid("/run/t_end", "must be > 0"));
        }
        if !(r.dt > 0.0 && r.dt.is_finite()) {
            return Err(invalid("/run/dt", "must be > 0"));
        }
        if !(r.cfl > 0.0 && r.cfl <= CFL_MAX) {
            return Err(invalid("/run/cfl", format!("must lie in (0, {CFL_MAX}]")));
        }
        if let Some(s) = r.snapshot_every {
            if !(s > 0.0 && s.is_finite()) {
                return Err(invalid("/run/snapshot_every", "must be > 0"));
            }
        }
        if !(self.fluid.density_ceiling > 0.0) {
            return Err(invalid("/fluid/density_ceiling", "must be > 0"));
        }
        if self.fluid.force_nodes < 8 {
            return Err(invalid("/fluid/force_nodes", "must be at least 8"));
        }
        let h = &self.hydro;
        if h.n_theta < 32 || !h.n_theta.is_multiple_of(2) {
            return Err(invalid("/hydro/n_theta", "must be even and at least 32"));
        }
        if !(h.relax > 0.0 && h.relax <= 1.0) {
            return Err(invalid("/hydro/relax", "must lie in (0, 1]"));
        }
        if !(h.tol > 0.0) || h.max_iter == 0 {
            return Err(invalid("/hydro", "tol must be > 0 and max_iter >= 1"));
        }
        if let Some(t) = &self.kernel_table {
            if !t.is_file() {
                return Err(invalid(
                    "/kernel_table",
                    format!("file {} does not exist", t.display()),
                ));
            }
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<Grid2D, ScenarioError> {
        let d = &self.domain;
        Grid2D::new(
            d.nx,
            d.ny,
            d.dx,
            d.dy,
            Vec2::new(d.origin[0], d.origin[1]),
            d.boundary,
        )
        .map_err(|e| invalid("/domain", e.to_string()))
    }

    pub fn target_points(&self) -> Vec<Vec2> {
        self.targets
            .iter()
            .map(|t| Vec2::new(t.position[0], t.position[1]))
            .collect()
    }

    pub fn target_index(&self, label: &str) -> Option<usize> {
        self.targets.iter().position(|t| t.label == label)
    }

    /// Whether the particle run needs noise draws.
    pub fn is_stochastic(&self) -> bool {
        self.params.noise > 0.0 || self.initial.iter().any(|ic| ic.concentration.is_some())
    }

    fn mean_heading(&self, ic: &InitialCondition, k: usize, x: Vec2, grid: &Grid2D) -> UnitDir {
        match ic.heading {
            Some(a) => UnitDir::from_angle(a),
            None => {
                let t = self.target_points()[k];
                UnitDir::new(grid.min_image(t - x)).unwrap_or(UnitDir::E1)
            }
        }
    }

    /// Samples the agents of every initial condition.
    pub fn build_ensemble(&self, seed: u64) -> Result<Ensemble, ScenarioError> {
        let grid = self.grid()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // keep initial sampling apart from the per-agent noise streams
        rng.set_stream(u64::MAX);
        let mut agents = Vec::new();
        for ic in &self.initial {
            let k = self.target_index(&ic.target).expect("validated label");
            for r in &ic.regions {
                for pos in r.sample(&mut rng) {
                    let mean = self.mean_heading(ic, k, pos, &grid);
                    let heading = match ic.concentration {
                        Some(beta) => {
                            let p = VmfParams::new(beta, mean)
                                .map_err(|e| invalid("/initial", e.to_string()))?;
                            vmf_sample(&p, &mut rng)
                        }
                        None => mean,
                    };
                    agents.push(AgentState {
                        pos,
                        heading,
                        target_id: k,
                    });
                }
            }
        }
        Ensemble::new(agents, self.target_points(), self.params, seed, grid)
            .map_err(|e| invalid("/initial", e.to_string()))
    }

    /// Cell-averaged densities and mean headings of the initial conditions.
    /// Cells without mass carry the mean heading of the first condition of
    /// their target.
    pub fn build_fields(&self, closure: Closure) -> Result<FieldSet, ScenarioError> {
        let grid = self.grid()?;
        let nk = self.targets.len();
        let mut f = FieldSet::zeros(nk, grid.len());
        let mut mom = vec![vec![Vec2::ZERO; grid.len()]; nk];
        let mut fallback: Vec<Option<&InitialCondition>> = vec![None; nk];
        let area = grid.cell_area();
        for ic in &self.initial {
            let k = self.target_index(&ic.target).expect("validated label");
            fallback[k].get_or_insert(ic);
            let order = order_of(ic, closure);
            for cell in 0..grid.len() {
                let c = grid.center_of(cell);
                let (hx, hy) = (0.5 * grid.dx, 0.5 * grid.dy);
                let m: f64 = ic
                    .regions
                    .iter()
                    .map(|r| r.cell_mass(c.x - hx, c.x + hx, c.y - hy, c.y + hy))
                    .sum();
                if m > 0.0 {
                    f.rho[k][cell] += m / area;
                    mom[k][cell] += self.mean_heading(ic, k, c, &grid).vec() * (m * order);
                }
            }
        }
        for k in 0..nk {
            for cell in 0..grid.len() {
                let c = grid.center_of(cell);
                let rho = f.rho[k][cell];
                f.u[k][cell] = if rho > 0.0 {
                    mom[k][cell] * (1.0 / (rho * area))
                } else if let Some(ic) = fallback[k] {
                    self.mean_heading(ic, k, c, &grid).vec() * order_of(ic, closure)
                } else {
                    Vec2::ZERO
                };
                if closure == Closure::Monokinetic {
                    if let Some(u) = UnitDir::new(f.u[k][cell]) {
                        f.u[k][cell] = u.vec();
                    }
                }
            }
        }
        Ok(f)
    }
}

fn order_of(ic: &InitialCondition, closure: Closure) -> f64 {
    match closure {
        Closure::Monokinetic => 1.0,
        Closure::Vmf => ic
            .concentration
            .map(mean_resultant)
            .unwrap_or(1.0)
            .min(1.0 - EPS_CLIP),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "schema": "crowdflux.scenario/1",
        "domain": {"nx": 8, "ny": 8, "dx": 1.0, "dy": 1.0},
        "targets": [{"label": "exit", "position": [20.0, 4.0]}],
        "initial": [{"target": "exit", "regions": [{"shape": "gaussian", "center": [3.0, 4.0], "sigma": 1.0, "count": 50}]}],
        "run": {"t_end": 1.0}
    }"#;

    #[test]
    fn minimal_scenario_gets_defaults() {
        let sc = Scenario::parse_str(MINIMAL, None).unwrap();
        assert_eq!(sc.domain.boundary, Boundary::Periodic);
        assert_eq!(sc.params, ModelParams::default());
        assert_eq!(sc.run.cfl, CFL_MAX);
        assert_eq!(sc.run.dt, 0.05);
        assert_eq!(sc.hydro, HydroConfig::default());
        assert_eq!(sc.particles.force_mode, ForceMode::OriginalMax);
    }

    #[test]
    fn canonical_form_round_trips() {
        let sc = Scenario::parse_str(MINIMAL, None).unwrap();
        let text = sc.to_canonical_json();
        let again = Scenario::parse_str(&text, None).unwrap();
        assert_eq!(sc, again);
        assert_eq!(text, again.to_canonical_json());
    }

    #[test]
    fn unknown_key_names_the_key() {
        let text = MINIMAL.replace("\"t_end\"", "\"speeed\": 1.0, \"t_end\"");
        let err = Scenario::parse_str(&text, None).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("speeed"), "{msg}");
        assert!(msg.contains("/run"), "{msg}");
    }

    #[test]
    fn unknown_region_field_is_rejected() {
        let text = MINIMAL.replace("\"sigma\": 1.0", "\"sigma\": 1.0, \"radius\": 2");
        assert!(Scenario::parse_str(&text, None).is_err());
    }

    #[test]
    fn invariant_violations() {
        let text = MINIMAL.replace(
            "\"run\"",
            "\"params\": {\"avoidance\": {\"r_safe\": -1.0}}, \"run\"",
        );
        match Scenario::parse_str(&text, None) {
            Err(ScenarioError::Invalid { pointer, .. }) => assert_eq!(pointer, "/params"),
            other => panic!("{other:?}"),
        }
        let text = MINIMAL.replace("\"t_end\": 1.0", "\"t_end\": 0.0");
        assert!(matches!(
            Scenario::parse_str(&text, None),
            Err(ScenarioError::Invalid { .. })
        ));
        let text = MINIMAL.replace("\"target\": \"exit\"", "\"target\": \"nowhere\"");
        assert!(Scenario::parse_str(&text, None).is_err());
        let text = MINIMAL.replace("\"run\"", "\"kernel_table\": \"missing.csv\", \"run\"");
        assert!(Scenario::parse_str(&text, Some(Path::new("/nonexistent"))).is_err());
    }

    #[test]
    fn ensemble_and_fields_agree_on_mass() {
        let sc = Scenario::parse_str(MINIMAL, None).unwrap();
        let ens = sc.build_ensemble(3).unwrap();
        assert_eq!(ens.len(), 50);
        let again = sc.build_ensemble(3).unwrap();
        assert_eq!(ens.agents, again.agents);
        let grid = sc.grid().unwrap();
        let f = sc.build_fields(Closure::Monokinetic).unwrap();
        // the periodic grid holds the whole Gaussian up to its far tails
        assert!((f.mass(0, &grid) - 50.0).abs() < 0.5);
        for u in &f.u[0] {
            assert!((u.norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn box_region_density_is_exact_on_aligned_cells() {
        let text = MINIMAL.replace(
            r#"{"shape": "gaussian", "center": [3.0, 4.0], "sigma": 1.0, "count": 50}"#,
            r#"{"shape": "box", "min": [1.0, 1.0], "max": [3.0, 5.0], "density": 2.5}"#,
        );
        let sc = Scenario::parse_str(&text, None).unwrap();
        let grid = sc.grid().unwrap();
        let f = sc.build_fields(Closure::Vmf).unwrap();
        assert!((f.mass(0, &grid) - 20.0).abs() < 1e-12);
        assert_eq!(f.rho[0][grid.index(1, 1)], 2.5);
        assert_eq!(f.rho[0][grid.index(0, 1)], 0.0);
        assert!(f.u[0][grid.index(1, 1)].norm() < 1.0);
        assert_eq!(sc.build_ensemble(1).unwrap().len(), 20);
    }
}
