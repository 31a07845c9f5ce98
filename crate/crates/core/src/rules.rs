//! Behavioural rules: turning response, goal seeking, N-walker combination
//! and the cost functions of the potential-driven variant.

use crate::geometry::{UnitDir, Vec2};
use crate::indicators::{self, PairIndicators};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ParamError {
    #[error("invalid parameter `{field}`: {reason}")]
    Invalid { field: &'static str, reason: String },
}

fn invalid(field: &'static str, reason: impl Into<String>) -> ParamError {
    ParamError::Invalid {
        field,
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RulesError {
    #[error("cost evaluation is not finite at heading {theta}")]
    NonFiniteCost { theta: f64 },
}

/// Constants of the collision-avoidance response.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AvoidanceParams {
    /// Gain of the turning response (dimensionless multiplier on rad/s).
    pub phi0: f64,
    /// Asymptotic threshold, rad/s.
    pub a: f64,
    /// Threshold amplitude, rad s^(sigma_exp - 1).
    pub b: f64,
    /// Threshold decay exponent.
    pub sigma_exp: f64,
    /// Threshold regularization time, s.
    pub tau0: f64,
    /// Safety distance, m.
    pub r_safe: f64,
    /// Walking speed, m/s.
    pub speed: f64,
    /// Partners farther than this are not perceived, m. `None` means unlimited,
    /// which only yields interaction regions of finite area when `a == 0` and
    /// `sigma_exp > 3`.
    pub perception_radius: Option<f64>,
}

impl Default for AvoidanceParams {
    fn default() -> Self {
        Self {
            phi0: 1.0,
            a: 0.0,
            b: 0.6,
            sigma_exp: 1.5,
            tau0: 0.2,
            r_safe: 0.6,
            speed: 1.34,
            perception_radius: Some(8.0),
        }
    }
}

impl AvoidanceParams {
    pub fn validate(&self) -> Result<(), ParamError> {
        let finite = [
            ("phi0", self.phi0),
            ("a", self.a),
            ("b", self.b),
            ("sigma_exp", self.sigma_exp),
            ("tau0", self.tau0),
            ("r_safe", self.r_safe),
            ("speed", self.speed),
        ];
        for (name, v) in finite {
            if !v.is_finite() {
                return Err(invalid(name, format!("{v} is not finite")));
            }
        }
        if self.phi0 <= 0.0 {
            return Err(invalid("phi0", "must be > 0"));
        }
        if self.a < 0.0 {
            return Err(invalid("a", "must be >= 0"));
        }
        if self.b <= 0.0 {
            return Err(invalid("b", "must be > 0"));
        }
        if self.sigma_exp <= 0.0 {
            return Err(invalid("sigma_exp", "must be > 0"));
        }
        if self.tau0 <= 0.0 {
            return Err(invalid("tau0", "must be > 0"));
        }
        if self.r_safe <= 0.0 {
            return Err(invalid("r_safe", "must be > 0"));
        }
        if self.speed <= 0.0 {
            return Err(invalid("speed", "must be > 0"));
        }
        match self.perception_radius {
            Some(rp) if !(rp.is_finite() && rp > self.r_safe) => Err(invalid(
                "perception_radius",
                format!("must be finite and larger than r_safe, got {rp}"),
            )),
            Some(_) => Ok(()),
            None if self.unlimited_perception_is_finite() => Ok(()),
            None => Err(invalid(
                "perception_radius",
                "unlimited perception needs a = 0 and sigma_exp > 3",
            )),
        }
    }

    /// Without a perception cutoff the threat region along the approach axis
    /// extends like `h^(-1/(sigma_exp - 2))` at lateral offset `h`, so its area
    /// is finite only for `sigma_exp > 3` (and `a = 0`).
    pub fn unlimited_perception_is_finite(&self) -> bool {
        self.a == 0.0 && self.sigma_exp > 3.0
    }

    /// Whether a partner at relative position `rel` is within perception range.
    #[inline]
    pub fn perceives(&self, rel: Vec2) -> bool {
        match self.perception_radius {
            Some(rp) => rel.norm2() < rp * rp,
            None => true,
        }
    }

    /// Upper bound of the threshold, reached at zero time to interaction.
    pub fn sigma_max(&self) -> f64 {
        self.a + self.b / self.tau0.powf(self.sigma_exp)
    }
}

/// Shape of the goal cost `chi`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ChiVariant {
    /// `b_t * g^2` plus an optional alignment penalty.
    #[default]
    Quadratic,
    /// `b_t / (|g| + alpha0)^c_t`.
    PowerLaw,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TargetCostParams {
    pub b_t: f64,
    pub c_t: f64,
    /// rad/s
    pub alpha0: f64,
    pub variant: ChiVariant,
    /// Gain of `k_align * (1 - u . e_goal)`; `None` means `0.05 * b_t`.
    /// Only used by the quadratic variant.
    pub k_align: Option<f64>,
}

impl Default for TargetCostParams {
    fn default() -> Self {
        Self {
            b_t: 1.0,
            c_t: 1.5,
            alpha0: 0.2,
            variant: ChiVariant::Quadratic,
            k_align: None,
        }
    }
}

impl TargetCostParams {
    pub fn validate(&self) -> Result<(), ParamError> {
        if !(self.b_t.is_finite() && self.b_t >= 0.0) {
            return Err(invalid("b_t", "must be finite and >= 0"));
        }
        if self.variant == ChiVariant::PowerLaw && !(self.alpha0 > 0.0) {
            return Err(invalid("alpha0", "must be > 0 for the power-law variant"));
        }
        if let Some(k) = self.k_align {
            if !(k.is_finite() && k >= 0.0) {
                return Err(invalid("k_align", "must be finite and >= 0"));
            }
        }
        Ok(())
    }

    pub fn align_gain(&self) -> f64 {
        match self.variant {
            ChiVariant::Quadratic => self.k_align.unwrap_or(0.05 * self.b_t),
            ChiVariant::PowerLaw => 0.0,
        }
    }
}

/// Whether the left or right worst case was selected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecisionCase {
    SmallDeviation,
    LargeDeviation,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecisionOutcome {
    /// rad/s
    pub omega: f64,
    pub case: DecisionCase,
    /// The two turning branches were equally close to the goal deviation.
    pub tie: bool,
}

/// `a + b / (|tau| + tau0)^sigma_exp`.
#[inline]
pub fn sigma_threshold(tau_abs: f64, p: &AvoidanceParams) -> f64 {
    p.a + p.b / (tau_abs + p.tau0).powf(p.sigma_exp)
}

/// `phi0 * max(sigma(|tau|) - |dba|, 0)`.
#[inline]
pub fn phi_response(dba_abs: f64, tau_abs: f64, p: &AvoidanceParams) -> f64 {
    p.phi0 * (sigma_threshold(tau_abs, p) - dba_abs).max(0.0)
}

/// Single-partner turning rate: opposite to the DBA, gated.
pub fn pair_omega(ind: &PairIndicators, p: &AvoidanceParams) -> f64 {
    if !ind.interacting || ind.dba == 0.0 {
        return 0.0;
    }
    -ind.dba.signum() * phi_response(ind.dba.abs(), ind.tti.abs(), p)
}

/// Indicators of a perceived, non-degenerate partner.
#[inline]
pub(crate) fn partner_indicators(
    x: Vec2,
    u: UnitDir,
    y: Vec2,
    v: UnitDir,
    p: &AvoidanceParams,
) -> Option<PairIndicators> {
    let rel = y - x;
    if !p.perceives(rel) {
        return None;
    }
    PairIndicators::from_relative(rel, v.vec() - u.vec(), p.speed, p.r_safe).ok()
}

/// Worst gated response among partners with positive and negative DBA.
/// Empty sides give 0.
pub fn worst_case_pm<I>(x: Vec2, u: UnitDir, partners: I, p: &AvoidanceParams) -> (f64, f64)
where
    I: IntoIterator<Item = (Vec2, UnitDir)>,
{
    let (mut plus, mut minus) = (0.0f64, 0.0f64);
    for (y, v) in partners {
        let Some(ind) = partner_indicators(x, u, y, v, p) else {
            continue;
        };
        if !ind.interacting {
            continue;
        }
        let phi = phi_response(ind.dba.abs(), ind.tti.abs(), p);
        if ind.dba > 0.0 {
            plus = plus.max(phi);
        } else if ind.dba < 0.0 {
            minus = minus.max(phi);
        }
    }
    (plus, minus)
}

/// Combines the worst cases with the goal DBA.
///
/// Inside `[-phi_minus, phi_plus]` the branch whose magnitude is closest to
/// `|goal_dba|` wins; ties turn with the sign of `goal_dba` (`-phi_plus` when
/// `goal_dba == 0`). Outside, the walker steers at `goal_dba`.
pub fn decide_omega(phi_plus: f64, phi_minus: f64, goal_dba: f64) -> DecisionOutcome {
    if -phi_minus <= goal_dba && goal_dba <= phi_plus {
        let g = goal_dba.abs();
        let dp = (phi_plus - g).abs();
        let dm = (phi_minus - g).abs();
        let (omega, tie) = if dp < dm {
            (-phi_plus, false)
        } else if dm < dp {
            (phi_minus, false)
        } else if goal_dba > 0.0 {
            (phi_minus, true)
        } else {
            (-phi_plus, true)
        };
        DecisionOutcome {
            omega,
            case: DecisionCase::SmallDeviation,
            tie,
        }
    } else {
        DecisionOutcome {
            omega: goal_dba,
            case: DecisionCase::LargeDeviation,
            tie: false,
        }
    }
}

/// The goal cost `chi` as a function of the goal DBA only.
pub fn target_cost(goal_dba: f64, p: &TargetCostParams) -> f64 {
    match p.variant {
        ChiVariant::Quadratic => p.b_t * goal_dba * goal_dba,
        ChiVariant::PowerLaw => p.b_t / (goal_dba.abs() + p.alpha0).powf(p.c_t),
    }
}

/// Full goal cost at heading `u`, including the alignment penalty of the
/// quadratic variant. A walker standing on its goal has zero cost.
pub fn target_cost_at(x: Vec2, u: UnitDir, goal: Vec2, speed: f64, p: &TargetCostParams) -> f64 {
    let Ok(g) = indicators::goal_dba(x, u, goal, speed) else {
        return 0.0;
    };
    let mut cost = target_cost(g, p);
    let k = p.align_gain();
    if k != 0.0 {
        let to_goal = goal - x;
        cost += k * (1.0 - u.vec().dot(to_goal) / to_goal.norm());
    }
    cost
}

/// Negative of the worst gated response at heading `u` (never positive).
pub fn discrete_collision_cost<I>(x: Vec2, u: UnitDir, partners: I, p: &AvoidanceParams) -> f64
where
    I: IntoIterator<Item = (Vec2, UnitDir)>,
{
    let mut worst = 0.0f64;
    for (y, v) in partners {
        if let Some(ind) = partner_indicators(x, u, y, v, p) {
            if ind.interacting {
                worst = worst.max(phi_response(ind.dba.abs(), ind.tti.abs(), p));
            }
        }
    }
    -worst
}

/// Turning rate from a central difference of the cost in the heading angle:
/// `-(cost(theta + h) - cost(theta - h)) / 2h`.
pub fn steepest_descent_omega<F>(cost_of_heading: F, theta: f64, h: f64) -> Result<f64, RulesError>
where
    F: Fn(f64) -> f64,
{
    let cp = cost_of_heading(theta + h);
    let cm = cost_of_heading(theta - h);
    if !cp.is_finite() {
        return Err(RulesError::NonFiniteCost { theta: theta + h });
    }
    if !cm.is_finite() {
        return Err(RulesError::NonFiniteCost { theta: theta - h });
    }
    Ok(-(cp - cm) / (2.0 * h))
}
