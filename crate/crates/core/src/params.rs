//! The full parameter record shared by all model levels.

use crate::rules::{AvoidanceParams, ParamError, TargetCostParams};
use serde::{Deserialize, Serialize};

/// Sign applied to the collision cost before it enters the total cost.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum CollisionCostSign {
    /// Cost `-Phi`: headings with a large threat response are cheap.
    #[default]
    Literal,
    /// Cost `+Phi`: threatening headings are penalized.
    Repulsive,
}

impl CollisionCostSign {
    /// Maps the literal (non-positive) collision cost to the configured one.
    #[inline]
    pub fn apply(self, literal_cost: f64) -> f64 {
        match self {
            CollisionCostSign::Literal => literal_cost,
            CollisionCostSign::Repulsive => -literal_cost,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelParams {
    pub avoidance: AvoidanceParams,
    pub target: TargetCostParams,
    /// Angular noise intensity `d`, rad^2/s.
    pub noise: f64,
    /// Heading step of the central difference in the potential modes, rad.
    pub gradient_step: f64,
    pub collision_sign: CollisionCostSign,
}

impl Default for ModelParams {
    fn default() -> Self {
        Self {
            avoidance: AvoidanceParams::default(),
            target: TargetCostParams::default(),
            noise: 0.1,
            gradient_step: 1e-4,
            collision_sign: CollisionCostSign::Literal,
        }
    }
}

impl ModelParams {
    pub fn validate(&self) -> Result<(), ParamError> {
        self.avoidance.validate()?;
        self.target.validate()?;
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return Err(ParamError::Invalid {
                field: "noise",
                reason: "must be finite and >= 0".into(),
            });
        }
        if !(self.gradient_step > 0.0 && self.gradient_step < 0.1) {
            return Err(ParamError::Invalid {
                field: "gradient_step",
                reason: "must lie in (0, 0.1)".into(),
            });
        }
        Ok(())
    }

    #[inline]
    pub fn speed(&self) -> f64 {
        self.avoidance.speed
    }
}
