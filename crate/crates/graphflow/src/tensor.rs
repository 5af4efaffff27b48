//! Mobility tensors of the neighborhood geometry. The graph carries the
//! per-node second-moment tensor
//!
//! ```text
//! T_eps(x_k) = 1/2 sum_l (x_k - x_l) (x_k - x_l)^T eta_eps(x_k, x_l) m_l,
//! ```
//!
//! which approaches the quadrature tensor
//!
//! ```text
//! T(x) = 1/2 mu(x) int w w^T theta(x, w) dw
//! ```
//!
//! as the neighborhood shrinks; `T` is the mobility of the limiting local
//! equation, so its spectrum must stay positive and bounded.

use rayon::prelude::*;

use crate::connectivity::Connectivity;
use crate::error::Error;
use crate::graph::Graph;
use crate::linalg::SmallMat;
use crate::measure::BaseMeasure;
use crate::report::{CheckResult, ValidationReport};

/// One symmetric d x d matrix per node.
#[derive(Debug, Clone)]
pub struct TensorField {
    dim: usize,
    tensors: Vec<SmallMat>,
}

impl TensorField {
    pub fn new(dim: usize, tensors: Vec<SmallMat>) -> Result<Self, Error> {
        if tensors.is_empty() {
            return Err(Error::Tensor("tensor field has no nodes".into()));
        }
        if tensors.iter().any(|t| t.dim != dim) {
            return Err(Error::Tensor(
                "tensor field entries disagree with the declared dimension".into(),
            ));
        }
        Ok(TensorField { dim, tensors })
    }

    /// The same tensor at every node.
    pub fn uniform(dim: usize, nodes: usize, t: SmallMat) -> Self {
        TensorField {
            dim,
            tensors: vec![t; nodes],
        }
    }

    pub fn identity(dim: usize, nodes: usize) -> Self {
        TensorField::uniform(dim, nodes, SmallMat::identity(dim))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn node_count(&self) -> usize {
        self.tensors.len()
    }

    pub fn tensor(&self, k: usize) -> &SmallMat {
        &self.tensors[k]
    }

    pub fn tensors(&self) -> &[SmallMat] {
        &self.tensors
    }
}

/// Second-moment tensor of one node's neighborhood.
pub fn epsilon_tensor(graph: &Graph, bm: &BaseMeasure, k: usize) -> SmallMat {
    graph.second_moment(bm, k)
}

/// Second-moment tensors of every node.
pub fn epsilon_tensor_field(graph: &Graph, bm: &BaseMeasure) -> TensorField {
    let tensors: Vec<SmallMat> = (0..graph.node_count())
        .into_par_iter()
        .map(|k| graph.second_moment(bm, k))
        .collect();
    TensorField {
        dim: bm.dim(),
        tensors,
    }
}

/// Quadrature of `1/2 mu int w w^T theta(z, w) dw` by the midpoint rule on a
/// `resolution`-per-axis grid over the support box.
pub fn limit_tensor(
    conn: &Connectivity,
    mu_value: f64,
    z: [f64; 2],
    resolution: usize,
) -> SmallMat {
    let dim = conn.dim();
    let c = conn.support_radius();
    let h = 2.0 * c / resolution as f64;
    let mut acc = SmallMat::zero(dim);
    match dim {
        1 => {
            for iw in 0..resolution {
                let w = [-c + (iw as f64 + 0.5) * h, 0.0];
                let t = conn.theta(z, w);
                if t != 0.0 {
                    acc.a[0][0] += w[0] * w[0] * t * h;
                }
            }
        }
        _ => {
            let cell = h * h;
            for iy in 0..resolution {
                let wy = -c + (iy as f64 + 0.5) * h;
                for ix in 0..resolution {
                    let w = [-c + (ix as f64 + 0.5) * h, wy];
                    let t = conn.theta(z, w);
                    if t != 0.0 {
                        let s = t * cell;
                        acc.a[0][0] += w[0] * w[0] * s;
                        acc.a[0][1] += w[0] * w[1] * s;
                        acc.a[1][1] += w[1] * w[1] * s;
                    }
                }
            }
            acc.a[1][0] = acc.a[0][1];
        }
    }
    acc.scale(0.5 * mu_value)
}

/// Limit tensors at every node of the measure. Profiles that ignore the
/// midpoint variable share a single quadrature.
pub fn limit_tensor_field(
    conn: &Connectivity,
    bm: &BaseMeasure,
    resolution: usize,
) -> TensorField {
    let n = bm.node_count();
    if !conn.z_dependent() {
        let base = limit_tensor(conn, 1.0, [0.0; 2], resolution);
        let tensors = bm
            .density()
            .iter()
            .map(|&mu| base.scale(mu))
            .collect();
        return TensorField {
            dim: bm.dim(),
            tensors,
        };
    }
    let tensors: Vec<SmallMat> = (0..n)
        .into_par_iter()
        .map(|k| limit_tensor(conn, bm.density()[k], bm.position(k), resolution))
        .collect();
    TensorField {
        dim: bm.dim(),
        tensors,
    }
}

/// Spectral bounds implied by the density bounds and the connectivity
/// constants: every eigenvalue of a neighborhood tensor must lie in
/// `[1/2 c_mu c_nd, 1/2 C_mu C_mom vol(B_supp)]`.
pub fn tensor_bounds(conn: &Connectivity, density_min: f64, density_max: f64) -> (f64, f64) {
    let ball = match conn.dim() {
        1 => 2.0 * conn.support_radius(),
        _ => std::f64::consts::PI * conn.support_radius() * conn.support_radius(),
    };
    (
        0.5 * density_min * conn.nondegeneracy(),
        0.5 * density_max * conn.moment_bound() * ball,
    )
}

/// Certify a tensor field: symmetric entries and eigenvalues inside the
/// declared spectral window.
pub fn validate_tensor_field(
    tf: &TensorField,
    lower: f64,
    upper: f64,
) -> ValidationReport {
    let mut report = ValidationReport::new("tensor field");
    let tol = 1e-9 * (1.0 + upper.abs());

    let mut worst_sym = 0.0;
    let mut worst_sym_node = 0;
    for (k, t) in tf.tensors.iter().enumerate() {
        let d = t.symmetry_defect();
        if d > worst_sym {
            worst_sym = d;
            worst_sym_node = k;
        }
    }
    let sym_tol = 1e-12 * (1.0 + upper.abs());
    report.push(CheckResult::new(
        "symmetry",
        worst_sym <= sym_tol,
        sym_tol - worst_sym,
        format!("largest defect {:.3e} at node {}", worst_sym, worst_sym_node),
    ));

    let mut min_eig = f64::INFINITY;
    let mut min_node = 0;
    let mut max_eig = f64::NEG_INFINITY;
    let mut max_node = 0;
    for (k, t) in tf.tensors.iter().enumerate() {
        let (lo, hi) = t.sym_eigenvalues();
        if lo < min_eig {
            min_eig = lo;
            min_node = k;
        }
        if hi > max_eig {
            max_eig = hi;
            max_node = k;
        }
    }
    report.push(CheckResult::new(
        "spectral_lower_bound",
        min_eig >= lower - tol,
        min_eig - (lower - tol),
        format!(
            "smallest eigenvalue {:.6} at node {} against bound {:.6}",
            min_eig, min_node, lower
        ),
    ));
    report.push(CheckResult::new(
        "spectral_upper_bound",
        max_eig <= upper + tol,
        upper + tol - max_eig,
        format!(
            "largest eigenvalue {:.6} at node {} against bound {:.6}",
            max_eig, max_node, upper
        ),
    ));
    report
}

/// Largest Frobenius distance between the graph tensors and the limit
/// tensors over the nodes unaffected by an open boundary.
pub fn max_interior_tensor_error(
    graph: &Graph,
    bm: &BaseMeasure,
    conn: &Connectivity,
    limit: &TensorField,
) -> f64 {
    let interior = graph.interior_nodes(bm, conn);
    interior
        .into_iter()
        .map(|k| {
            graph
                .second_moment(bm, k)
                .sub(limit.tensor(k))
                .frobenius_norm()
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::connectivity::ellipsoid_connectivity;
    use crate::graph::build_graph;
    use crate::grid::SpatialGrid;
    use crate::measure::build_base_measure;

    #[test]
    fn indicator_limit_tensor_is_unit() {
        let conn = Connectivity::indicator_ball(1, 3.0).unwrap();
        let t = limit_tensor(&conn, 1.0, [0.0; 2], 2048);
        assert!((t.a[0][0] - 1.0).abs() < 1e-3, "tensor {}", t.a[0][0]);
    }

    #[test]
    fn zero_profile_gives_zero_tensor() {
        let conn = Connectivity::from_expression(
            1,
            crate::expr::parse_expression("0").unwrap(),
            1.0,
            1.0,
            1.0,
        )
        .unwrap();
        let t = limit_tensor(&conn, 1.0, [0.0; 2], 256);
        assert_eq!(t.a[0][0], 0.0);
    }

    #[test]
    fn one_dim_ellipsoid_recovers_indicator_constants() {
        // D = 1 in one dimension: amplitude 3, support 1, tensor 1
        let conn = ellipsoid_connectivity(1, SmallMat::scalar(1, 1.0)).unwrap();
        assert!((conn.theta([0.0; 2], [0.5, 0.0]) - 3.0).abs() < 1e-12);
        let t = limit_tensor(&conn, 1.0, [0.0; 2], 2048);
        assert!((t.a[0][0] - 1.0).abs() < 1e-3);
    }

    #[test]
    fn two_dim_identity_ellipsoid_tensor() {
        let conn = ellipsoid_connectivity(2, SmallMat::identity(2)).unwrap();
        let t = limit_tensor(&conn, 1.0, [0.0; 2], 512);
        let defect = t.sub(&SmallMat::identity(2)).frobenius_norm();
        assert!(defect < 1e-2, "defect {}", defect);
    }

    #[test]
    fn anisotropic_ellipsoid_matches_its_shape() {
        let shape = SmallMat::diagonal(2, &[2.0, 1.0]);
        let conn = ellipsoid_connectivity(2, shape).unwrap();
        let t = limit_tensor(&conn, 1.0, [0.0; 2], 1024);
        let defect = t.sub(&SmallMat::diagonal(2, &[2.0, 1.0])).frobenius_norm();
        assert!(defect < 1e-2, "defect {}", defect);
    }

    #[test]
    fn ellipsoid_support_follows_semi_axes() {
        let conn = ellipsoid_connectivity(2, SmallMat::diagonal(2, &[4.0, 1.0])).unwrap();
        assert!(conn.theta([0.0; 2], [1.9, 0.0]) > 0.0);
        assert_eq!(conn.theta([0.0; 2], [2.05, 0.0]), 0.0);
        assert!(conn.theta([0.0; 2], [0.0, 0.95]) > 0.0);
        assert_eq!(conn.theta([0.0; 2], [0.0, 1.05]), 0.0);
    }

    #[test]
    fn rotated_ellipsoid_tensor_is_frame_covariant() {
        let angle: f64 = 0.5;
        let (s, c) = angle.sin_cos();
        let mut rot = SmallMat::zero(2);
        rot.a = [[c, -s], [s, c]];
        let d = SmallMat::diagonal(2, &[2.0, 1.0]);
        let rotated_shape = rot.mat_mul(&d).mat_mul(&rot.transpose());

        let conn = ellipsoid_connectivity(2, rotated_shape).unwrap();
        let t = limit_tensor(&conn, 1.0, [0.0; 2], 1024);
        let conn_axis = ellipsoid_connectivity(2, d).unwrap();
        let t_axis = limit_tensor(&conn_axis, 1.0, [0.0; 2], 1024);
        let expected = rot.mat_mul(&t_axis).mat_mul(&rot.transpose());
        let defect = t.sub(&expected).frobenius_norm();
        assert!(defect < 2e-2, "defect {}", defect);
    }

    #[test]
    fn graph_tensor_converges_on_a_fine_torus() {
        let grid = SpatialGrid::line(0.0, 1.0, 4096, true).unwrap();
        let bm = build_base_measure(&grid, |_| 1.0).unwrap();
        let conn = Connectivity::indicator_ball(1, 3.0).unwrap();
        let graph = build_graph(&bm, &conn, 1.0 / 64.0).unwrap();
        let t = epsilon_tensor(&graph, &bm, 0);
        assert!((t.a[0][0] - 1.0).abs() < 2e-2, "tensor {}", t.a[0][0]);
    }

    #[test]
    fn isolated_node_has_zero_tensor() {
        let bm = BaseMeasure::from_nodes(1, vec![[0.3, 0.0]], vec![1.0], vec![1.0]).unwrap();
        let graph = Graph::from_edges(1, 1.0, Vec::new()).unwrap();
        let t = epsilon_tensor(&graph, &bm, 0);
        assert_eq!(t.a[0][0], 0.0);
    }

    #[test]
    fn error_ladder_decreases_with_epsilon() {
        let grid = SpatialGrid::line(0.0, 1.0, 1024, true).unwrap();
        let bm = build_base_measure(&grid, |p| {
            1.0 + 0.5 * (2.0 * std::f64::consts::PI * p[0]).sin()
        })
        .unwrap();
        let conn = Connectivity::indicator_ball(1, 3.0).unwrap();
        let limit = limit_tensor_field(&conn, &bm, 2048);
        let mut errors = Vec::new();
        for eps in [1.0 / 8.0, 1.0 / 16.0, 1.0 / 32.0] {
            let graph = build_graph(&bm, &conn, eps).unwrap();
            errors.push(max_interior_tensor_error(&graph, &bm, &conn, &limit));
        }
        for w in errors.windows(2) {
            assert!(w[1] <= 1.1 * w[0], "ladder {:?}", errors);
        }
        assert!(errors[2] < 1e-2, "finest error {}", errors[2]);
    }

    #[test]
    fn midpoint_dependent_profile_varies_over_nodes() {
        let theta = crate::expr::parse_expression(
            "3 * (1 + 0.5 * z1) * indicator(1 - w1^2)",
        )
        .unwrap();
        let conn = Connectivity::from_expression(1, theta, 1.0, 4.5, 2.0).unwrap();
        let grid = SpatialGrid::line(0.0, 1.0, 4, false).unwrap();
        let bm = build_base_measure(&grid, |_| 1.0).unwrap();
        let tf = limit_tensor_field(&conn, &bm, 1024);
        // T(z) = 1 + z/2 at the cell centers 0.125 and 0.875
        assert!((tf.tensor(0).a[0][0] - 1.0625).abs() < 1e-2);
        assert!((tf.tensor(3).a[0][0] - 1.4375).abs() < 1e-2);
        let uniform = Connectivity::indicator_ball(1, 3.0).unwrap();
        let flat = limit_tensor_field(&uniform, &bm, 1024);
        assert_eq!(flat.tensor(0).a[0][0], flat.tensor(3).a[0][0]);
    }

    #[test]
    fn validation_certifies_good_fields_and_flags_bad_ones() {
        let conn = Connectivity::indicator_ball(1, 3.0).unwrap();
        let grid = SpatialGrid::line(0.0, 1.0, 64, true).unwrap();
        let bm = build_base_measure(&grid, |_| 1.0).unwrap();
        let graph = build_graph(&bm, &conn, 1.0 / 8.0).unwrap();
        let tf = epsilon_tensor_field(&graph, &bm);
        let (lo, hi) = tensor_bounds(&conn, 1.0, 1.0);
        let report = validate_tensor_field(&tf, lo, hi);
        assert!(report.passed(), "{}", report);

        let degenerate = TensorField::uniform(2, 3, SmallMat::zero(2));
        let report = validate_tensor_field(&degenerate, 0.5, 2.0);
        assert!(!report.check("spectral_lower_bound").unwrap().passed);

        let mut skew = SmallMat::identity(2);
        skew.a[0][1] = 0.3;
        let crooked = TensorField::uniform(2, 2, skew);
        let report = validate_tensor_field(&crooked, 0.0, 5.0);
        assert!(!report.check("symmetry").unwrap().passed);
    }
}
