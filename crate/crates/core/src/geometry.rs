//! Planar vectors and unit headings.

use serde::{Deserialize, Serialize};
use std::ops::{Add, AddAssign, Mul, Neg, Sub, SubAssign};

/// Tolerance used for unit-norm and degeneracy checks.
pub const GEOM_EPS: f64 = 1e-12;

/// A 2-vector. Positions are in metres, relative headings are dimensionless.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const ZERO: Vec2 = Vec2 { x: 0.0, y: 0.0 };

    #[inline]
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    #[inline]
    pub fn dot(self, o: Vec2) -> f64 {
        self.x * o.x + self.y * o.y
    }

    /// Scalar cross product `a1 b2 - a2 b1`.
    #[inline]
    pub fn cross(self, o: Vec2) -> f64 {
        self.x * o.y - self.y * o.x
    }

    #[inline]
    pub fn norm2(self) -> f64 {
        self.dot(self)
    }

    #[inline]
    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    /// Counter-clockwise rotation by a quarter turn, `(-y, x)`.
    #[inline]
    pub fn perp(self) -> Vec2 {
        Vec2::new(-self.y, self.x)
    }

    #[inline]
    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn rotate(self, angle: f64) -> Vec2 {
        let (s, c) = angle.sin_cos();
        Vec2::new(c * self.x - s * self.y, s * self.x + c * self.y)
    }

    /// Polar angle in `(-pi, pi]`.
    #[inline]
    pub fn angle(self) -> f64 {
        self.y.atan2(self.x)
    }
}

impl Add for Vec2 {
    type Output = Vec2;
    #[inline]
    fn add(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x + o.x, self.y + o.y)
    }
}

impl AddAssign for Vec2 {
    #[inline]
    fn add_assign(&mut self, o: Vec2) {
        self.x += o.x;
        self.y += o.y;
    }
}

impl Sub for Vec2 {
    type Output = Vec2;
    #[inline]
    fn sub(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x - o.x, self.y - o.y)
    }
}

impl SubAssign for Vec2 {
    #[inline]
    fn sub_assign(&mut self, o: Vec2) {
        self.x -= o.x;
        self.y -= o.y;
    }
}

impl Mul<f64> for Vec2 {
    type Output = Vec2;
    #[inline]
    fn mul(self, k: f64) -> Vec2 {
        Vec2::new(self.x * k, self.y * k)
    }
}

impl Mul<Vec2> for f64 {
    type Output = Vec2;
    #[inline]
    fn mul(self, v: Vec2) -> Vec2 {
        v * self
    }
}

impl Neg for Vec2 {
    type Output = Vec2;
    #[inline]
    fn neg(self) -> Vec2 {
        Vec2::new(-self.x, -self.y)
    }
}

/// A unit heading on the circle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec2", into = "Vec2")]
pub struct UnitDir(Vec2);

impl UnitDir {
    pub const E1: UnitDir = UnitDir(Vec2 { x: 1.0, y: 0.0 });
    pub const E2: UnitDir = UnitDir(Vec2 { x: 0.0, y: 1.0 });

    /// Normalizes `v`; returns `None` for non-finite or near-zero input.
    pub fn new(v: Vec2) -> Option<Self> {
        let n = v.norm();
        if !v.is_finite() || n < GEOM_EPS {
            return None;
        }
        Some(UnitDir(v * (1.0 / n)))
    }

    #[inline]
    pub fn from_angle(theta: f64) -> Self {
        let (s, c) = theta.sin_cos();
        UnitDir(Vec2::new(c, s))
    }

    #[inline]
    pub fn vec(self) -> Vec2 {
        self.0
    }

    #[inline]
    pub fn angle(self) -> f64 {
        self.0.angle()
    }

    #[inline]
    pub fn perp(self) -> UnitDir {
        UnitDir(self.0.perp())
    }

    pub fn rotate(self, angle: f64) -> UnitDir {
        UnitDir::new(self.0.rotate(angle)).unwrap_or(self)
    }
}

impl From<UnitDir> for Vec2 {
    fn from(u: UnitDir) -> Vec2 {
        u.0
    }
}

impl TryFrom<Vec2> for UnitDir {
    type Error = String;
    fn try_from(v: Vec2) -> Result<Self, String> {
        UnitDir::new(v).ok_or_else(|| format!("cannot normalize heading ({}, {})", v.x, v.y))
    }
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(theta: f64) -> f64 {
    use std::f64::consts::{PI, TAU};
    let mut t = theta.rem_euclid(TAU);
    if t > PI {
        t -= TAU;
    }
    t
}
