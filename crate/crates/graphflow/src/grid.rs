//! Regular cell-centered grids on a box, optionally periodic.
//!
//! Nodes are the cell centers in row-major order (axis 0 fastest). All
//! displacement geometry, including the minimum-image convention on the
//! torus, lives here so that graph construction and the finite-volume
//! solver agree about distances.

use crate::error::Error;
use crate::linalg::Point;

#[derive(Debug, Clone, PartialEq)]
pub struct SpatialGrid {
    dim: usize,
    lo: [f64; 2],
    hi: [f64; 2],
    cells: [usize; 2],
    periodic: bool,
}

impl SpatialGrid {
    /// `bounds` holds `[lo, hi)` per axis, `cells` the cell count per axis.
    pub fn new(
        dim: usize,
        bounds: &[[f64; 2]],
        cells: &[usize],
        periodic: bool,
    ) -> Result<Self, Error> {
        if dim != 1 && dim != 2 {
            return Err(Error::Grid(format!("dimension must be 1 or 2, got {}", dim)));
        }
        if bounds.len() != dim || cells.len() != dim {
            return Err(Error::Grid(format!(
                "expected {} bounds and cell counts, got {} and {}",
                dim,
                bounds.len(),
                cells.len()
            )));
        }
        let mut lo = [0.0; 2];
        let mut hi = [1.0; 2];
        let mut nc = [1usize; 2];
        for a in 0..dim {
            if !bounds[a][0].is_finite() || !bounds[a][1].is_finite() {
                return Err(Error::Grid(format!("axis {}: bounds must be finite", a)));
            }
            if bounds[a][1] <= bounds[a][0] {
                return Err(Error::Grid(format!(
                    "axis {}: upper bound {} must exceed lower bound {}",
                    a, bounds[a][1], bounds[a][0]
                )));
            }
            if cells[a] == 0 {
                return Err(Error::Grid(format!("axis {}: need at least one cell", a)));
            }
            lo[a] = bounds[a][0];
            hi[a] = bounds[a][1];
            nc[a] = cells[a];
        }
        Ok(SpatialGrid {
            dim,
            lo,
            hi,
            cells: nc,
            periodic,
        })
    }

    pub fn line(lo: f64, hi: f64, cells: usize, periodic: bool) -> Result<Self, Error> {
        Self::new(1, &[[lo, hi]], &[cells], periodic)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn periodic(&self) -> bool {
        self.periodic
    }

    pub fn cells(&self, axis: usize) -> usize {
        self.cells[axis]
    }

    pub fn node_count(&self) -> usize {
        self.cells[0] * self.cells[1]
    }

    pub fn extent(&self, axis: usize) -> f64 {
        self.hi[axis] - self.lo[axis]
    }

    pub fn spacing(&self, axis: usize) -> f64 {
        self.extent(axis) / self.cells[axis] as f64
    }

    pub fn cell_volume(&self) -> f64 {
        let mut v = 1.0;
        for a in 0..self.dim {
            v *= self.spacing(a);
        }
        v
    }

    pub fn min_extent(&self) -> f64 {
        (0..self.dim).map(|a| self.extent(a)).fold(f64::MAX, f64::min)
    }

    /// Multi-index of node `idx`, row-major with axis 0 fastest.
    pub fn coords(&self, idx: usize) -> [usize; 2] {
        [idx % self.cells[0], idx / self.cells[0]]
    }

    pub fn index(&self, c: [usize; 2]) -> usize {
        c[0] + self.cells[0] * c[1]
    }

    pub fn center(&self, idx: usize) -> Point {
        let c = self.coords(idx);
        let mut p = [0.0; 2];
        for a in 0..self.dim {
            p[a] = self.lo[a] + (c[a] as f64 + 0.5) * self.spacing(a);
        }
        p
    }

    pub fn centers(&self) -> Vec<Point> {
        (0..self.node_count()).map(|k| self.center(k)).collect()
    }

    /// Displacement `x - y`, reduced to the minimum image on the torus.
    pub fn displacement(&self, x: Point, y: Point) -> Point {
        let mut d = [0.0; 2];
        for a in 0..self.dim {
            let mut da = x[a] - y[a];
            if self.periodic {
                let len = self.extent(a);
                da -= len * (da / len).round();
            }
            d[a] = da;
        }
        d
    }

    /// Midpoint of the shortest segment from `y` to `x`, wrapped into the box.
    pub fn midpoint(&self, x: Point, y: Point) -> Point {
        let d = self.displacement(x, y);
        let mut m = [0.0; 2];
        for a in 0..self.dim {
            m[a] = y[a] + 0.5 * d[a];
        }
        self.wrap(m)
    }

    pub fn wrap(&self, p: Point) -> Point {
        let mut q = p;
        if self.periodic {
            for a in 0..self.dim {
                let len = self.extent(a);
                q[a] = self.lo[a] + (q[a] - self.lo[a]).rem_euclid(len);
            }
        }
        q
    }

    /// Neighbor of a node one cell over along `axis` in direction `step`
    /// (+1 or -1); `None` at a non-periodic boundary.
    pub fn neighbor(&self, idx: usize, axis: usize, step: isize) -> Option<usize> {
        let mut c = self.coords(idx);
        let n = self.cells[axis] as isize;
        let moved = c[axis] as isize + step;
        if self.periodic {
            c[axis] = moved.rem_euclid(n) as usize;
        } else if moved < 0 || moved >= n {
            return None;
        } else {
            c[axis] = moved as usize;
        }
        Some(self.index(c))
    }

    /// Distance from a point to the non-periodic boundary; infinite on the
    /// torus where there is no boundary.
    pub fn boundary_distance(&self, p: Point) -> f64 {
        if self.periodic {
            return f64::INFINITY;
        }
        let mut d = f64::MAX;
        for a in 0..self.dim {
            d = d.min(p[a] - self.lo[a]).min(self.hi[a] - p[a]);
        }
        d
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn centers_are_cell_midpoints() {
        let g = SpatialGrid::line(0.0, 1.0, 4, true).unwrap();
        assert_eq!(g.center(0), [0.125, 0.0]);
        assert_eq!(g.center(3), [0.875, 0.0]);
        assert_eq!(g.cell_volume(), 0.25);
    }

    #[test]
    fn periodic_displacement_takes_min_image() {
        let g = SpatialGrid::line(0.0, 1.0, 8, true).unwrap();
        let d = g.displacement([0.9375, 0.0], [0.0625, 0.0]);
        assert!((d[0] - (-0.125)).abs() < 1e-15);
        let open = SpatialGrid::line(0.0, 1.0, 8, false).unwrap();
        let d = open.displacement([0.9375, 0.0], [0.0625, 0.0]);
        assert!((d[0] - 0.875).abs() < 1e-15);
    }

    #[test]
    fn midpoint_respects_wrap() {
        let g = SpatialGrid::line(0.0, 1.0, 8, true).unwrap();
        let m = g.midpoint([0.9375, 0.0], [0.0625, 0.0]);
        // shortest path crosses the seam; midpoint lands at the seam
        assert!((m[0] - 0.0).abs() < 1e-15 || (m[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn two_dim_indexing_roundtrip() {
        let g = SpatialGrid::new(2, &[[0.0, 1.0], [0.0, 2.0]], &[4, 8], true).unwrap();
        for idx in 0..g.node_count() {
            assert_eq!(g.index(g.coords(idx)), idx);
        }
        assert_eq!(g.neighbor(0, 0, -1), Some(3));
        assert_eq!(g.neighbor(0, 1, -1), Some(28));
        let open = SpatialGrid::new(2, &[[0.0, 1.0], [0.0, 2.0]], &[4, 8], false).unwrap();
        assert_eq!(open.neighbor(0, 0, -1), None);
    }

    #[test]
    fn rejects_bad_boxes() {
        assert!(SpatialGrid::new(3, &[[0.0, 1.0]], &[4], true).is_err());
        assert!(SpatialGrid::line(1.0, 1.0, 4, true).is_err());
        assert!(SpatialGrid::line(0.0, 1.0, 0, true).is_err());
    }
}
