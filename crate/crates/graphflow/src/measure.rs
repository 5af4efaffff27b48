//! Base measure on the node set: a strictly positive density sampled at
//! cell centers, with node weights `m_k = density(x_k) * cell_volume`.
//! The weights are the reference measure every species density is taken
//! relative to.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Error;
use crate::grid::SpatialGrid;
use crate::linalg::{norm, Point};
use crate::report::{CheckResult, ValidationReport};

#[derive(Debug, Clone)]
pub struct BaseMeasure {
    grid: Option<SpatialGrid>,
    dim: usize,
    positions: Vec<Point>,
    density: Vec<f64>,
    weights: Vec<f64>,
}

/// Sample the density at every cell center of `grid`. Every value must be
/// finite and strictly positive; the offending node is named otherwise.
pub fn build_base_measure(
    grid: &SpatialGrid,
    density: impl Fn(Point) -> f64,
) -> Result<BaseMeasure, Error> {
    let vol = grid.cell_volume();
    let n = grid.node_count();
    let mut dens = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    for k in 0..n {
        let x = grid.center(k);
        let v = density(x);
        if !v.is_finite() || v <= 0.0 {
            return Err(Error::Measure(format!(
                "density at node {} (position {:?}) is {}; it must be finite and strictly positive",
                k,
                &x[..grid.dim()],
                v
            )));
        }
        dens.push(v);
        weights.push(v * vol);
    }
    Ok(BaseMeasure {
        grid: Some(grid.clone()),
        dim: grid.dim(),
        positions: grid.centers(),
        density: dens,
        weights,
    })
}

impl BaseMeasure {
    /// Free-form node set for analytic fixtures; `weights[k]` is the measure
    /// of node `k` directly.
    pub fn from_nodes(
        dim: usize,
        positions: Vec<Point>,
        density: Vec<f64>,
        weights: Vec<f64>,
    ) -> Result<Self, Error> {
        if positions.len() != density.len() || positions.len() != weights.len() {
            return Err(Error::Measure(format!(
                "positions/density/weights length mismatch: {}/{}/{}",
                positions.len(),
                density.len(),
                weights.len()
            )));
        }
        if positions.is_empty() {
            return Err(Error::Measure("empty node set".to_string()));
        }
        for (k, (d, w)) in density.iter().zip(&weights).enumerate() {
            if !d.is_finite() || *d <= 0.0 || !w.is_finite() || *w <= 0.0 {
                return Err(Error::Measure(format!(
                    "node {}: density {} and weight {} must be finite and positive",
                    k, d, w
                )));
            }
        }
        Ok(BaseMeasure {
            grid: None,
            dim,
            positions,
            density,
            weights,
        })
    }

    pub fn grid(&self) -> Option<&SpatialGrid> {
        self.grid.as_ref()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn node_count(&self) -> usize {
        self.positions.len()
    }

    pub fn positions(&self) -> &[Point] {
        &self.positions
    }

    pub fn position(&self, k: usize) -> Point {
        self.positions[k]
    }

    pub fn density(&self) -> &[f64] {
        &self.density
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn total_mass(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// Displacement `x_a - x_b` between node positions, minimum-image when
    /// the measure lives on a periodic grid.
    pub fn node_displacement(&self, a: usize, b: usize) -> Point {
        match &self.grid {
            Some(g) => g.displacement(self.positions[a], self.positions[b]),
            None => {
                let pa = self.positions[a];
                let pb = self.positions[b];
                [pa[0] - pb[0], pa[1] - pb[1]]
            }
        }
    }
}

/// Check the declared two-sided density bounds and estimate a modulus of
/// continuity from sampled node pairs. The modulus table is cumulative: entry
/// `(delta, omega)` is the largest density difference seen over sampled pairs
/// at distance at most `delta`.
pub fn validate_base_measure(
    bm: &BaseMeasure,
    density_min: f64,
    density_max: f64,
    sample_pairs: usize,
    seed: u64,
) -> ValidationReport {
    let mut report = ValidationReport::new("base measure");

    let mut worst_low = f64::MAX;
    let mut worst_high = f64::MIN;
    let mut low_node = 0;
    let mut high_node = 0;
    for (k, d) in bm.density.iter().enumerate() {
        if *d < worst_low {
            worst_low = *d;
            low_node = k;
        }
        if *d > worst_high {
            worst_high = *d;
            high_node = k;
        }
    }
    let low_ok = worst_low >= density_min;
    let high_ok = worst_high <= density_max;
    report.push(CheckResult::new(
        "density_lower_bound",
        low_ok,
        worst_low - density_min,
        format!("min density {} at node {}", worst_low, low_node),
    ));
    report.push(CheckResult::new(
        "density_upper_bound",
        high_ok,
        density_max - worst_high,
        format!("max density {} at node {}", worst_high, high_node),
    ));

    // Empirical modulus of continuity over sampled pairs.
    let n = bm.node_count();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples: Vec<(f64, f64)> = Vec::with_capacity(sample_pairs);
    let mut max_dist: f64 = 0.0;
    for _ in 0..sample_pairs {
        let a = rng.gen_range(0..n);
        let b = rng.gen_range(0..n);
        if a == b {
            continue;
        }
        let dist = norm(bm.node_displacement(a, b));
        let diff = (bm.density[a] - bm.density[b]).abs();
        max_dist = max_dist.max(dist);
        samples.push((dist, diff));
    }
    const BINS: usize = 8;
    let mut table = Vec::with_capacity(BINS);
    if max_dist > 0.0 {
        for j in 1..=BINS {
            let delta = max_dist * j as f64 / BINS as f64;
            let omega = samples
                .iter()
                .filter(|(dist, _)| *dist <= delta * (1.0 + 1e-12))
                .map(|(_, diff)| *diff)
                .fold(0.0, f64::max);
            table.push((delta, omega));
        }
    }
    let detail = table
        .iter()
        .map(|(d, o)| format!("omega({:.4}) = {:.6}", d, o))
        .collect::<Vec<_>>()
        .join(", ");
    report.push(CheckResult::new(
        "continuity_modulus",
        true,
        0.0,
        if detail.is_empty() {
            "not enough distinct pairs sampled".to_string()
        } else {
            detail
        },
    ));
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_are_density_times_cell_volume() {
        // 4 cells on [0,1), density 1 + x: centers 0.125..0.875.
        let g = SpatialGrid::line(0.0, 1.0, 4, true).unwrap();
        let bm = build_base_measure(&g, |p| 1.0 + p[0]).unwrap();
        let expect = [0.28125, 0.34375, 0.40625, 0.46875];
        for (w, e) in bm.weights().iter().zip(expect) {
            assert!((w - e).abs() < 1e-15);
        }
        assert!((bm.total_mass() - 1.5).abs() < 1e-15);
    }

    #[test]
    fn zero_density_is_rejected_with_node_id() {
        let g = SpatialGrid::line(0.0, 1.0, 4, true).unwrap();
        let err = build_base_measure(&g, |p| p[0] - 0.5).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("node 0"), "got: {}", msg);
    }

    #[test]
    fn bounds_validation_flags_violation() {
        let g = SpatialGrid::line(0.0, 1.0, 8, true).unwrap();
        let bm = build_base_measure(&g, |p| 1.0 + p[0]).unwrap();
        let good = validate_base_measure(&bm, 0.5, 2.5, 500, 7);
        assert!(good.passed());
        let bad = validate_base_measure(&bm, 1.2, 2.5, 500, 7);
        assert!(!bad.check("density_lower_bound").unwrap().passed);
        assert!(bad.check("density_upper_bound").unwrap().passed);
    }

    #[test]
    fn modulus_table_respects_lipschitz_density() {
        let g = SpatialGrid::line(0.0, 1.0, 64, false).unwrap();
        let bm = build_base_measure(&g, |p| 1.0 + p[0]).unwrap();
        let report = validate_base_measure(&bm, 0.5, 2.5, 4000, 11);
        let detail = &report.check("continuity_modulus").unwrap().detail;
        // density is 1-Lipschitz so every omega(delta) <= delta; spot check
        // by parsing the table entries back out.
        for part in detail.split(", ") {
            let inner = part
                .trim_start_matches("omega(")
                .replace(") = ", " ");
            let mut it = inner.split_whitespace();
            let delta: f64 = it.next().unwrap().parse().unwrap();
            let omega: f64 = it.next().unwrap().parse().unwrap();
            assert!(omega <= delta + 1e-9, "omega({}) = {}", delta, omega);
        }
    }
}
