//! Vision-based pedestrian dynamics from individual agents to fluid closures.

#![allow(
    clippy::excessive_precision,
    clippy::neg_cmp_op_on_partial_ord,
    clippy::needless_range_loop
)]

pub mod fluid;
pub mod geometry;
pub mod grid;
pub mod hydro;
pub mod indicators;
pub mod kernels;
pub mod neighbors;
pub mod params;
pub mod particles;
pub mod quadrature;
pub mod rules;
pub mod scenario;
pub mod validation;
pub mod vmf;

pub use geometry::{UnitDir, Vec2};
pub use grid::{Boundary, Grid2D};
pub use indicators::{IndicatorError, PairIndicators};
pub use kernels::{KernelTable, QuadratureSpec, Side};
pub use params::{CollisionCostSign, ModelParams};
pub use particles::{AgentState, Ensemble, ForceMode, MomentField};
pub use rules::{AvoidanceParams, ChiVariant, DecisionCase, DecisionOutcome, TargetCostParams};
pub use vmf::{StressCoeffs, VmfParams};
