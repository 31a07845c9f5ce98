//! Uniform cell-centred grid shared by the particle moments and the fluid
//! solvers.

use crate::geometry::Vec2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Boundary {
    #[default]
    Periodic,
    Outflow,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GridError {
    #[error("grid needs at least 4 cells per axis, got {nx} x {ny}")]
    TooSmall { nx: usize, ny: usize },
    #[error("cell sizes must be positive and finite, got {dx} x {dy}")]
    BadSpacing { dx: f64, dy: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid2D {
    pub nx: usize,
    pub ny: usize,
    pub dx: f64,
    pub dy: f64,
    pub origin: Vec2,
    pub boundary: Boundary,
}

impl Grid2D {
    pub fn new(
        nx: usize,
        ny: usize,
        dx: f64,
        dy: f64,
        origin: Vec2,
        boundary: Boundary,
    ) -> Result<Self, GridError> {
        if nx < 4 || ny < 4 {
            return Err(GridError::TooSmall { nx, ny });
        }
        if !(dx > 0.0 && dy > 0.0 && dx.is_finite() && dy.is_finite()) {
            return Err(GridError::BadSpacing { dx, dy });
        }
        Ok(Self {
            nx,
            ny,
            dx,
            dy,
            origin,
            boundary,
        })
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize) -> usize {
        j * self.nx + i
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> (usize, usize) {
        (idx % self.nx, idx / self.nx)
    }

    #[inline]
    pub fn cell_area(&self) -> f64 {
        self.dx * self.dy
    }

    pub fn size(&self) -> Vec2 {
        Vec2::new(self.nx as f64 * self.dx, self.ny as f64 * self.dy)
    }

    pub fn cell_center(&self, i: usize, j: usize) -> Vec2 {
        Vec2::new(
            self.origin.x + (i as f64 + 0.5) * self.dx,
            self.origin.y + (j as f64 + 0.5) * self.dy,
        )
    }

    pub fn center_of(&self, idx: usize) -> Vec2 {
        let (i, j) = self.coords(idx);
        self.cell_center(i, j)
    }

    pub fn is_periodic(&self) -> bool {
        self.boundary == Boundary::Periodic
    }

    /// Shortest representative of a displacement (periodic), or `d` itself.
    #[inline]
    pub fn min_image(&self, d: Vec2) -> Vec2 {
        if !self.is_periodic() {
            return d;
        }
        let l = self.size();
        Vec2::new(
            d.x - l.x * (d.x / l.x).round(),
            d.y - l.y * (d.y / l.y).round(),
        )
    }

    /// Maps a position back into the box (periodic), or returns it unchanged.
    #[inline]
    pub fn wrap(&self, p: Vec2) -> Vec2 {
        if !self.is_periodic() {
            return p;
        }
        let l = self.size();
        let rel = p - self.origin;
        let mut x = rel.x.rem_euclid(l.x);
        let mut y = rel.y.rem_euclid(l.y);
        if x >= l.x {
            x = 0.0;
        }
        if y >= l.y {
            y = 0.0;
        }
        self.origin + Vec2::new(x, y)
    }

    /// Cell containing `p`, or `None` outside an outflow box.
    pub fn locate(&self, p: Vec2) -> Option<usize> {
        let p = self.wrap(p);
        let fx = ((p.x - self.origin.x) / self.dx).floor();
        let fy = ((p.y - self.origin.y) / self.dy).floor();
        if fx < 0.0 || fy < 0.0 || fx >= self.nx as f64 || fy >= self.ny as f64 {
            return None;
        }
        Some(self.index(fx as usize, fy as usize))
    }

    /// Bilinear (cloud-in-cell) weights of `p` on the four nearest cell centres.
    /// Outflow boundaries clamp to the edge cells, so weights always sum to 1.
    pub fn cic(&self, p: Vec2) -> [(usize, f64); 4] {
        let p = self.wrap(p);
        let gx = (p.x - self.origin.x) / self.dx - 0.5;
        let gy = (p.y - self.origin.y) / self.dy - 0.5;
        let (i0, fx) = (gx.floor(), gx - gx.floor());
        let (j0, fy) = (gy.floor(), gy - gy.floor());
        let axis = |k: f64, n: usize| -> (usize, usize, bool) {
            let n_i = n as i64;
            let k = k as i64;
            if self.is_periodic() {
                (
                    k.rem_euclid(n_i) as usize,
                    (k + 1).rem_euclid(n_i) as usize,
                    false,
                )
            } else if k < 0 {
                (0, 0, true)
            } else if k >= n_i - 1 {
                ((n_i - 1) as usize, (n_i - 1) as usize, true)
            } else {
                (k as usize, (k + 1) as usize, false)
            }
        };
        let (ia, ib, cx) = axis(i0, self.nx);
        let (ja, jb, cy) = axis(j0, self.ny);
        let fx = if cx { 0.0 } else { fx };
        let fy = if cy { 0.0 } else { fy };
        [
            (self.index(ia, ja), (1.0 - fx) * (1.0 - fy)),
            (self.index(ib, ja), fx * (1.0 - fy)),
            (self.index(ia, jb), (1.0 - fx) * fy),
            (self.index(ib, jb), fx * fy),
        ]
    }

    pub fn contains(&self, p: Vec2) -> bool {
        let rel = p - self.origin;
        let l = self.size();
        rel.x >= 0.0 && rel.y >= 0.0 && rel.x < l.x && rel.y < l.y
    }
}
