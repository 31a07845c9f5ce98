//! Collision-perception quantities for an ordered pair of walkers.
//!
//! All functions take the observer at `x` with heading `u` and the partner at
//! `y` with heading `v`; both walk at the common `speed`. The relative
//! position is `r = y - x` and the relative heading `w = v - u`:
//!
//! * bearing-angle derivative `dba = speed * (r x w) / |r|^2`
//! * time to interaction `tti = -(r . w) / (speed * |w|^2)`
//! * minimal distance `md = |r x w| / |w|`
//!
//! The scaled variants take `zeta` (relative position) and `w` directly and are
//! what the local kernels integrate over.

use crate::geometry::{UnitDir, Vec2, GEOM_EPS};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum IndicatorError {
    #[error("coincident positions (separation {0:e} m)")]
    DegenerateGeometry(f64),
    #[error("no relative motion (|v - u| = {0:e})")]
    NoRelativeMotion(f64),
}

/// Perception indicators of one ordered pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairIndicators {
    /// rad/s
    pub dba: f64,
    /// s
    pub tti: f64,
    /// m
    pub md: f64,
    pub interacting: bool,
}

impl PairIndicators {
    /// Evaluates all indicators and the gate at safety distance `r_safe`.
    pub fn compute(
        x: Vec2,
        u: UnitDir,
        y: Vec2,
        v: UnitDir,
        speed: f64,
        r_safe: f64,
    ) -> Result<Self, IndicatorError> {
        Self::from_relative(y - x, v.vec() - u.vec(), speed, r_safe)
    }

    /// Same as [`compute`](Self::compute) from the relative position and heading.
    pub fn from_relative(
        rel: Vec2,
        w: Vec2,
        speed: f64,
        r_safe: f64,
    ) -> Result<Self, IndicatorError> {
        let dba = scaled_dba(rel, w, speed)?;
        let tti = scaled_tti(rel, w, speed)?;
        let md = scaled_md(rel, w)?;
        let mut ind = PairIndicators {
            dba,
            tti,
            md,
            interacting: false,
        };
        ind.interacting = interaction_gate(&ind, r_safe);
        Ok(ind)
    }
}

pub fn dba(x: Vec2, u: UnitDir, y: Vec2, v: UnitDir, speed: f64) -> Result<f64, IndicatorError> {
    scaled_dba(y - x, v.vec() - u.vec(), speed)
}

pub fn tti(x: Vec2, u: UnitDir, y: Vec2, v: UnitDir, speed: f64) -> Result<f64, IndicatorError> {
    scaled_tti(y - x, v.vec() - u.vec(), speed)
}

pub fn min_distance(x: Vec2, u: UnitDir, y: Vec2, v: UnitDir) -> Result<f64, IndicatorError> {
    scaled_md(y - x, v.vec() - u.vec())
}

/// Bearing-angle derivative with respect to an immobile goal point.
pub fn goal_dba(x: Vec2, u: UnitDir, goal: Vec2, speed: f64) -> Result<f64, IndicatorError> {
    let r = goal - x;
    let d2 = r.norm2();
    if d2 < GEOM_EPS * GEOM_EPS {
        return Err(IndicatorError::DegenerateGeometry(d2.sqrt()));
    }
    Ok(-speed * r.cross(u.vec()) / d2)
}

/// `tti >= 0 && md <= r_safe`.
#[inline]
pub fn interaction_gate(ind: &PairIndicators, r_safe: f64) -> bool {
    ind.tti >= 0.0 && ind.md <= r_safe
}

#[inline]
pub fn scaled_dba(zeta: Vec2, w: Vec2, speed: f64) -> Result<f64, IndicatorError> {
    let d2 = zeta.norm2();
    if d2 < GEOM_EPS * GEOM_EPS {
        return Err(IndicatorError::DegenerateGeometry(d2.sqrt()));
    }
    Ok(speed * zeta.cross(w) / d2)
}

#[inline]
pub fn scaled_tti(zeta: Vec2, w: Vec2, speed: f64) -> Result<f64, IndicatorError> {
    let w2 = w.norm2();
    if w2 < GEOM_EPS * GEOM_EPS {
        return Err(IndicatorError::NoRelativeMotion(w2.sqrt()));
    }
    Ok(-zeta.dot(w) / (speed * w2))
}

#[inline]
pub fn scaled_md(zeta: Vec2, w: Vec2) -> Result<f64, IndicatorError> {
    let wn = w.norm();
    if wn < GEOM_EPS {
        return Err(IndicatorError::NoRelativeMotion(wn));
    }
    Ok(zeta.cross(w).abs() / wn)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(x: f64, y: f64) -> Vec2 {
        Vec2::new(x, y)
    }
    fn d(x: f64, y: f64) -> UnitDir {
        UnitDir::new(Vec2::new(x, y)).unwrap()
    }

    #[test]
    fn head_on_collinear() {
        let (x, u, y, v) = (p(0., 0.), d(1., 0.), p(4., 0.), d(-1., 0.));
        assert_eq!(dba(x, u, y, v, 1.0).unwrap(), 0.0);
        assert_eq!(tti(x, u, y, v, 1.0).unwrap(), 2.0);
        assert_eq!(min_distance(x, u, y, v).unwrap(), 0.0);
    }

    #[test]
    fn crossing_course_has_zero_dba() {
        assert_eq!(
            dba(p(0., 0.), d(1., 0.), p(1., 1.), d(0., -1.), 1.0).unwrap(),
            0.0
        );
    }

    #[test]
    fn receding_pair_negative_tti() {
        let t = tti(p(0., 0.), d(-1., 0.), p(1., 0.), d(1., 0.), 1.0).unwrap();
        assert_eq!(t, -0.5);
    }

    #[test]
    fn degenerate_inputs_are_errors() {
        let u = d(1., 0.);
        assert!(matches!(
            dba(p(1., 1.), u, p(1., 1.), d(0., 1.), 1.0),
            Err(IndicatorError::DegenerateGeometry(_))
        ));
        assert!(matches!(
            tti(p(0., 0.), u, p(1., 1.), u, 1.0),
            Err(IndicatorError::NoRelativeMotion(_))
        ));
        assert!(matches!(
            goal_dba(p(2., 3.), u, p(2., 3.), 1.0),
            Err(IndicatorError::DegenerateGeometry(_))
        ));
    }

    #[test]
    fn dba_zero_for_parallel_headings() {
        let u = d(0.3, 0.8);
        assert_eq!(dba(p(0., 0.), u, p(3., -1.), u, 1.3).unwrap(), 0.0);
    }

    #[test]
    fn goal_dba_aligned_and_reflected() {
        assert_eq!(goal_dba(p(0., 0.), d(1., 0.), p(5., 0.), 1.0).unwrap(), 0.0);
        let g = p(3., 1.);
        let a = goal_dba(p(0., 0.), d(1., 1.), g, 1.0).unwrap();
        // reflect (1,1) across the axis (3,1)
        let axis = d(3., 1.).vec();
        let h = d(1., 1.).vec();
        let refl = axis * (2.0 * h.dot(axis)) - h;
        let b = goal_dba(p(0., 0.), UnitDir::new(refl).unwrap(), g, 1.0).unwrap();
        assert!((a + b).abs() < 1e-14);
    }

    #[test]
    fn gate_cases() {
        let mk = |tti, md| PairIndicators {
            dba: 0.0,
            tti,
            md,
            interacting: false,
        };
        assert!(interaction_gate(&mk(2.0, 0.0), 0.6));
        assert!(!interaction_gate(&mk(-0.5, 0.0), 0.6));
        assert!(!interaction_gate(&mk(2.0, 0.7), 0.6));
    }
}
