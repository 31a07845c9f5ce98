//! Shared fixtures for the benchmarks.

use crowdflux::fluid::{Closure, FieldSet};
use crowdflux::kernels::tabulate;
use crowdflux::scenario::{Region, Scenario};
use crowdflux::validation::crossing_streams_scenario;
use crowdflux::{AvoidanceParams, Ensemble, KernelTable, QuadratureSpec};

/// Kernel table of the default parameters.
pub fn default_table() -> KernelTable {
    tabulate(&AvoidanceParams::default(), &QuadratureSpec::default(), 64)
        .expect("default kernels tabulate")
}

/// The crossing-streams scenario with `per_stream` agents in each stream and
/// the given heading noise.
pub fn crossing(per_stream: u64, noise: f64) -> Scenario {
    let mut sc = crossing_streams_scenario();
    sc.params.noise = noise;
    for ic in &mut sc.initial {
        for r in &mut ic.regions {
            if let Region::Gaussian { count, .. } = r {
                *count = per_stream;
            }
        }
        ic.concentration = Some(8.0);
    }
    sc
}

pub fn crossing_ensemble(per_stream: u64) -> Ensemble {
    let sc = crossing(per_stream, 0.1);
    sc.build_ensemble(7).expect("ensemble")
}

pub fn crossing_fields(closure: Closure) -> (Scenario, FieldSet) {
    let sc = crossing(5000, 0.1);
    let f = sc.build_fields(closure).expect("fields");
    (sc, f)
}
