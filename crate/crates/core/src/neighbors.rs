//! Uniform spatial hash for fixed-radius neighbor queries, with an all-pairs
//! fallback for small ensembles or unlimited perception.

use crate::geometry::Vec2;
use crate::grid::Grid2D;

/// Ensembles at or below this size are searched exhaustively.
pub const ALL_PAIRS_MAX: usize = 512;

#[derive(Debug, Clone)]
pub struct Neighbors {
    positions: Vec<Vec2>,
    active: Vec<bool>,
    radius: Option<f64>,
    grid: Grid2D,
    hash: Option<SpatialHash>,
}

#[derive(Debug, Clone)]
struct SpatialHash {
    nbx: usize,
    nby: usize,
    cell: Vec2,
    start: Vec<usize>,
    items: Vec<usize>,
}

impl SpatialHash {
    fn bin_coords(&self, grid: &Grid2D, p: Vec2) -> (usize, usize) {
        let rel = grid.wrap(p) - grid.origin;
        let bx = ((rel.x / self.cell.x).floor().max(0.0) as usize).min(self.nbx - 1);
        let by = ((rel.y / self.cell.y).floor().max(0.0) as usize).min(self.nby - 1);
        (bx, by)
    }
}

impl Neighbors {
    /// Indexes the active positions. `radius = None` means every active
    /// agent perceives every other one.
    pub fn build(positions: &[Vec2], active: &[bool], radius: Option<f64>, grid: &Grid2D) -> Self {
        let n_active = active.iter().filter(|&&a| a).count();
        let hash = match radius {
            Some(r) if n_active > ALL_PAIRS_MAX => Self::build_hash(positions, active, r, grid),
            _ => None,
        };
        Self {
            positions: positions.to_vec(),
            active: active.to_vec(),
            radius,
            grid: *grid,
            hash,
        }
    }

    /// Exhaustive search regardless of ensemble size.
    pub fn all_pairs(
        positions: &[Vec2],
        active: &[bool],
        radius: Option<f64>,
        grid: &Grid2D,
    ) -> Self {
        Self {
            positions: positions.to_vec(),
            active: active.to_vec(),
            radius,
            grid: *grid,
            hash: None,
        }
    }

    fn build_hash(
        positions: &[Vec2],
        active: &[bool],
        r: f64,
        grid: &Grid2D,
    ) -> Option<SpatialHash> {
        let size = grid.size();
        let nbx = ((size.x / r).floor() as usize).max(1);
        let nby = ((size.y / r).floor() as usize).max(1);
        if grid.is_periodic() && (nbx < 3 || nby < 3) {
            return None;
        }
        let mut hash = SpatialHash {
            nbx,
            nby,
            cell: Vec2::new(size.x / nbx as f64, size.y / nby as f64),
            start: vec![0; nbx * nby + 1],
            items: Vec::new(),
        };
        let bins: Vec<Option<usize>> = positions
            .iter()
            .zip(active)
            .map(|(&p, &a)| {
                a.then(|| {
                    let (bx, by) = hash.bin_coords(grid, p);
                    by * nbx + bx
                })
            })
            .collect();
        for b in bins.iter().flatten() {
            hash.start[b + 1] += 1;
        }
        for k in 0..nbx * nby {
            hash.start[k + 1] += hash.start[k];
        }
        let mut fill = hash.start.clone();
        hash.items = vec![0; hash.start[nbx * nby]];
        for (i, b) in bins.iter().enumerate() {
            if let Some(b) = b {
                hash.items[fill[*b]] = i;
                fill[*b] += 1;
            }
        }
        Some(hash)
    }

    pub fn uses_hash(&self) -> bool {
        self.hash.is_some()
    }

    /// Calls `f(j, d)` for every active `j != i` within the perception radius,
    /// with `d` the (minimum-image) displacement from `i` to `j`.
    pub fn for_each<F: FnMut(usize, Vec2)>(&self, i: usize, mut f: F) {
        let xi = self.positions[i];
        let r2 = self.radius.map(|r| r * r);
        let mut visit = |j: usize| {
            if j == i || !self.active[j] {
                return;
            }
            let d = self.grid.min_image(self.positions[j] - xi);
            if r2.is_none_or(|r2| d.norm2() < r2) {
                f(j, d);
            }
        };
        match &self.hash {
            None => (0..self.positions.len()).for_each(&mut visit),
            Some(h) => {
                let (bx, by) = h.bin_coords(&self.grid, xi);
                let axis = |b: usize, n: usize| -> Vec<usize> {
                    let mut v: Vec<usize> = if self.grid.is_periodic() {
                        vec![(b + n - 1) % n, b, (b + 1) % n]
                    } else {
                        (b.saturating_sub(1)..=(b + 1).min(n - 1)).collect()
                    };
                    v.sort_unstable();
                    v.dedup();
                    v
                };
                for yb in axis(by, h.nby) {
                    for xb in axis(bx, h.nbx) {
                        let k = yb * h.nbx + xb;
                        h.items[h.start[k]..h.start[k + 1]]
                            .iter()
                            .for_each(|&j| visit(j));
                    }
                }
            }
        }
    }

    /// Sorted neighbor indices of `i`.
    pub fn list(&self, i: usize) -> Vec<usize> {
        let mut v = Vec::new();
        self.for_each(i, |j, _| v.push(j));
        v.sort_unstable();
        v
    }
}
