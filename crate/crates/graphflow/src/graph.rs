//! Edge set over the node cloud of a base measure: all node pairs within
//! distance `epsilon * support_radius` whose scaled weight is positive.
//! Edges are undirected and stored once with a fixed orientation `a -> b`;
//! edge fields sign-flip when read against the orientation.

use crate::connectivity::{scaled_edge_weight_disp, Connectivity};
use crate::error::Error;
use crate::linalg::{norm, scale, Point, SmallMat};
use crate::measure::BaseMeasure;

#[derive(Debug, Clone)]
pub struct Edge {
    pub a: u32,
    pub b: u32,
    /// Scaled weight `eta_eps(x_a, x_b)`; strictly positive.
    pub weight: f64,
    /// Displacement `x_a - x_b` (minimum image on the torus).
    pub disp: Point,
}

#[derive(Debug, Clone)]
pub struct Graph {
    epsilon: f64,
    node_count: usize,
    edges: Vec<Edge>,
    /// CSR adjacency: for node k the incident edge indices are
    /// `adj_edges[adj_offsets[k]..adj_offsets[k+1]]`.
    adj_offsets: Vec<u32>,
    adj_edges: Vec<u32>,
}

/// Connect every node pair within the scaled support. On a periodic grid the
/// support diameter must stay under half the domain extent so the minimum
/// image is unambiguous.
pub fn build_graph(bm: &BaseMeasure, conn: &Connectivity, epsilon: f64) -> Result<Graph, Error> {
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(Error::GraphBuild(format!(
            "epsilon must be positive and finite, got {}",
            epsilon
        )));
    }
    if conn.dim() != bm.dim() {
        return Err(Error::GraphBuild(format!(
            "connectivity dimension {} does not match measure dimension {}",
            conn.dim(),
            bm.dim()
        )));
    }
    let reach = epsilon * conn.support_radius();
    let edges = match bm.grid() {
        Some(grid) if grid.periodic() => {
            for a in 0..grid.dim() {
                if reach >= 0.5 * grid.extent(a) {
                    return Err(Error::GraphBuild(format!(
                        "support diameter: epsilon * support_radius = {} must stay below half \
                         the domain extent {} on axis {} of a periodic grid",
                        reach,
                        0.5 * grid.extent(a),
                        a
                    )));
                }
            }
            collect_grid_edges(bm, conn, epsilon, reach)?
        }
        Some(_) => collect_grid_edges(bm, conn, epsilon, reach)?,
        None => collect_dense_edges(bm, conn, epsilon, reach)?,
    };

    let graph = Graph::from_edges(bm.node_count(), epsilon, edges)?;
    graph.check_second_moment(bm, conn)?;
    Ok(graph)
}

fn collect_grid_edges(
    bm: &BaseMeasure,
    conn: &Connectivity,
    epsilon: f64,
    reach: f64,
) -> Result<Vec<Edge>, Error> {
    let grid = bm.grid().expect("caller checked for a grid");
    let dim = grid.dim();
    let mut window = [0isize; 2];
    for a in 0..dim {
        // widest index offset that can still land inside the reach
        window[a] = (reach / grid.spacing(a) * (1.0 + 1e-12)).floor() as isize;
        window[a] = if grid.periodic() {
            // an offset of cells/2 would alias with its negative; the reach
            // guard already keeps real edges strictly inside half the extent
            window[a].min((grid.cells(a) as isize - 1) / 2)
        } else {
            window[a].min(grid.cells(a) as isize - 1)
        };
    }
    let reach_tol = reach * (1.0 + 1e-12);
    let mut edges = Vec::new();
    let mut offsets: Vec<[isize; 2]> = Vec::new();
    // half-space of offsets so each unordered pair appears once
    for oy in if dim == 2 { -window[1]..=window[1] } else { 0..=0 } {
        for ox in -window[0]..=window[0] {
            if oy > 0 || (oy == 0 && ox > 0) {
                offsets.push([ox, oy]);
            }
        }
    }
    for k in 0..bm.node_count() {
        let ck = grid.coords(k);
        let xk = bm.position(k);
        for off in &offsets {
            let mut cl = [0usize; 2];
            let mut valid = true;
            for a in 0..dim {
                let moved = ck[a] as isize + off[a];
                if grid.periodic() {
                    cl[a] = moved.rem_euclid(grid.cells(a) as isize) as usize;
                } else if moved < 0 || moved >= grid.cells(a) as isize {
                    valid = false;
                    break;
                } else {
                    cl[a] = moved as usize;
                }
            }
            if !valid {
                continue;
            }
            let l = grid.index(cl);
            if l == k {
                continue;
            }
            let xl = bm.position(l);
            let disp = grid.displacement(xk, xl);
            if norm(disp) > reach_tol {
                continue;
            }
            let mid = grid.midpoint(xk, xl);
            push_edge(&mut edges, conn, epsilon, k as u32, l as u32, mid, disp)?;
        }
    }
    Ok(edges)
}

fn collect_dense_edges(
    bm: &BaseMeasure,
    conn: &Connectivity,
    epsilon: f64,
    reach: f64,
) -> Result<Vec<Edge>, Error> {
    let reach_tol = reach * (1.0 + 1e-12);
    let mut edges = Vec::new();
    for k in 0..bm.node_count() {
        for l in (k + 1)..bm.node_count() {
            let disp = bm.node_displacement(k, l);
            if norm(disp) > reach_tol {
                continue;
            }
            let xk = bm.position(k);
            let mid = [
                xk[0] - 0.5 * disp[0],
                xk[1] - 0.5 * disp[1],
            ];
            push_edge(&mut edges, conn, epsilon, k as u32, l as u32, mid, disp)?;
        }
    }
    Ok(edges)
}

fn push_edge(
    edges: &mut Vec<Edge>,
    conn: &Connectivity,
    epsilon: f64,
    a: u32,
    b: u32,
    mid: Point,
    disp: Point,
) -> Result<(), Error> {
    let weight = scaled_edge_weight_disp(conn, epsilon, mid, disp);
    if weight < 0.0 || !weight.is_finite() {
        return Err(Error::GraphBuild(format!(
            "edge ({}, {}): weight {} is not a finite nonnegative number; \
             the connectivity profile is invalid",
            a, b, weight
        )));
    }
    if weight > 0.0 {
        edges.push(Edge {
            a,
            b,
            weight,
            disp,
        });
    }
    Ok(())
}

impl Graph {
    /// Assemble from an explicit edge list; fixtures use this to pin exact
    /// weights. Rejects self-loops, out-of-range endpoints, and duplicates.
    pub fn from_edges(node_count: usize, epsilon: f64, edges: Vec<Edge>) -> Result<Self, Error> {
        let mut seen = std::collections::HashSet::with_capacity(edges.len());
        for e in &edges {
            if e.a == e.b {
                return Err(Error::GraphBuild(format!("self loop at node {}", e.a)));
            }
            if e.a as usize >= node_count || e.b as usize >= node_count {
                return Err(Error::GraphBuild(format!(
                    "edge ({}, {}) exceeds node count {}",
                    e.a, e.b, node_count
                )));
            }
            if !(e.weight > 0.0) || !e.weight.is_finite() {
                return Err(Error::GraphBuild(format!(
                    "edge ({}, {}): weight {} must be positive and finite",
                    e.a, e.b, e.weight
                )));
            }
            let key = (e.a.min(e.b), e.a.max(e.b));
            if !seen.insert(key) {
                return Err(Error::GraphBuild(format!(
                    "duplicate edge between {} and {}",
                    e.a, e.b
                )));
            }
        }
        let mut degree = vec![0u32; node_count];
        for e in &edges {
            degree[e.a as usize] += 1;
            degree[e.b as usize] += 1;
        }
        let mut adj_offsets = vec![0u32; node_count + 1];
        for k in 0..node_count {
            adj_offsets[k + 1] = adj_offsets[k] + degree[k];
        }
        let mut cursor: Vec<u32> = adj_offsets[..node_count].to_vec();
        let mut adj_edges = vec![0u32; 2 * edges.len()];
        for (idx, e) in edges.iter().enumerate() {
            adj_edges[cursor[e.a as usize] as usize] = idx as u32;
            cursor[e.a as usize] += 1;
            adj_edges[cursor[e.b as usize] as usize] = idx as u32;
            cursor[e.b as usize] += 1;
        }
        Ok(Graph {
            epsilon,
            node_count,
            edges,
            adj_offsets,
            adj_edges,
        })
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    /// Indices of the edges incident to node `k`.
    pub fn incident_edges(&self, k: usize) -> &[u32] {
        &self.adj_edges[self.adj_offsets[k] as usize..self.adj_offsets[k + 1] as usize]
    }

    pub fn degree(&self, k: usize) -> usize {
        (self.adj_offsets[k + 1] - self.adj_offsets[k]) as usize
    }

    /// The endpoint of `edge` that is not `k`.
    pub fn other_end(&self, edge: &Edge, k: usize) -> usize {
        if edge.a as usize == k {
            edge.b as usize
        } else {
            edge.a as usize
        }
    }

    /// Second-moment accumulation at node `k`:
    /// `1/2 sum_l (x_k - x_l) ⊗ (x_k - x_l) eta m_l`.
    pub fn second_moment(&self, bm: &BaseMeasure, k: usize) -> SmallMat {
        let dim = bm.dim();
        let mut acc = SmallMat::zero(dim);
        for &ei in self.incident_edges(k) {
            let e = &self.edges[ei as usize];
            let other = self.other_end(e, k);
            // orientation does not matter under the outer product
            let outer = SmallMat::outer(dim, e.disp);
            acc.add_scaled(&outer, 0.5 * e.weight * bm.weights()[other]);
        }
        acc
    }

    /// Consistency guard: the second-moment accumulation must stay near its
    /// continuum bound `1/2 max_density * moment_bound * |B_support|`; a wild
    /// overshoot means the declared connectivity constants are dishonest.
    fn check_second_moment(&self, bm: &BaseMeasure, conn: &Connectivity) -> Result<(), Error> {
        let max_density = bm.density().iter().cloned().fold(0.0, f64::max);
        let ball = match bm.dim() {
            1 => 2.0 * conn.support_radius(),
            _ => std::f64::consts::PI * conn.support_radius() * conn.support_radius(),
        };
        let bound = 0.5 * max_density * conn.moment_bound() * ball;
        let slack = 1.5 * bound + 1e-9;
        for k in 0..self.node_count {
            let trace: f64 = {
                let m = self.second_moment(bm, k);
                (0..bm.dim()).map(|i| m.a[i][i]).sum()
            };
            if trace > slack {
                return Err(Error::GraphBuild(format!(
                    "second-moment accumulation {:.6} at node {} exceeds the consistency \
                     bound {:.6}; declared connectivity constants look wrong",
                    trace, k, bound
                )));
            }
        }
        Ok(())
    }

    /// Nodes at distance at least `epsilon * support` from any open boundary;
    /// on a torus that is every node.
    pub fn interior_nodes(&self, bm: &BaseMeasure, conn: &Connectivity) -> Vec<usize> {
        let reach = self.epsilon * conn.support_radius();
        (0..self.node_count)
            .filter(|&k| match bm.grid() {
                Some(g) => g.boundary_distance(bm.position(k)) >= reach,
                None => true,
            })
            .collect()
    }
}

/// Convenience for tests and fixtures: displacement computed from raw
/// positions, unit-free edge with explicit weight.
pub fn edge_between(bm: &BaseMeasure, a: usize, b: usize, weight: f64) -> Edge {
    Edge {
        a: a as u32,
        b: b as u32,
        weight,
        disp: bm.node_displacement(a, b),
    }
}

/// Two nodes at the given positions with unit density and the given node
/// weights, joined by a single edge of weight `eta`. The workhorse fixture
/// for hand-checked dynamics.
pub fn two_node_fixture(
    x0: f64,
    x1: f64,
    m0: f64,
    m1: f64,
    eta: f64,
) -> (BaseMeasure, Graph) {
    let bm = BaseMeasure::from_nodes(
        1,
        vec![[x0, 0.0], [x1, 0.0]],
        vec![1.0, 1.0],
        vec![m0, m1],
    )
    .expect("fixture weights are positive");
    let e = edge_between(&bm, 0, 1, eta);
    let graph = Graph::from_edges(2, (x1 - x0).abs().max(1.0), vec![e])
        .expect("fixture edge is valid");
    (bm, graph)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::SpatialGrid;
    use crate::measure::build_base_measure;

    fn unit_torus_measure(cells: usize) -> BaseMeasure {
        let g = SpatialGrid::line(0.0, 1.0, cells, true).unwrap();
        build_base_measure(&g, |_| 1.0).unwrap()
    }

    #[test]
    fn nearest_neighbor_ring() {
        // spacing 0.125 and reach 0.125: exactly the two nearest neighbors
        let bm = unit_torus_measure(8);
        let conn = Connectivity::indicator_ball(1, 3.0).unwrap();
        let graph = build_graph(&bm, &conn, 0.125).unwrap();
        assert_eq!(graph.edge_count(), 8);
        for k in 0..8 {
            assert_eq!(graph.degree(k), 2);
        }
        // distance-2 pairs excluded
        for e in graph.edges() {
            assert!(norm(e.disp) <= 0.125 + 1e-12);
        }
    }

    #[test]
    fn periodic_support_overflow_is_rejected() {
        let bm = unit_torus_measure(8);
        let conn = Connectivity::indicator_ball(1, 3.0).unwrap();
        let err = build_graph(&bm, &conn, 0.5).unwrap_err();
        assert!(err.to_string().contains("half the domain extent"));
    }

    #[test]
    fn weights_match_direct_evaluation() {
        let bm = unit_torus_measure(16);
        let conn = Connectivity::indicator_ball(1, 3.0).unwrap();
        let eps = 0.125;
        let graph = build_graph(&bm, &conn, eps).unwrap();
        for e in graph.edges() {
            let expected = eps.powi(-3) * conn.theta([0.0; 2], scale(e.disp, 1.0 / eps));
            assert!((e.weight - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn wrap_edges_cross_the_seam_once() {
        let bm = unit_torus_measure(8);
        let conn = Connectivity::indicator_ball(1, 3.0).unwrap();
        let graph = build_graph(&bm, &conn, 0.125).unwrap();
        let seam: Vec<_> = graph
            .edges()
            .iter()
            .filter(|e| (e.a, e.b) == (0, 7) || (e.a, e.b) == (7, 0))
            .collect();
        assert_eq!(seam.len(), 1);
        assert!((seam[0].disp[0].abs() - 0.125).abs() < 1e-15);
    }

    #[test]
    fn two_dim_window_counts() {
        let g = SpatialGrid::new(2, &[[0.0, 1.0], [0.0, 1.0]], &[16, 16], true).unwrap();
        let bm = build_base_measure(&g, |_| 1.0).unwrap();
        let conn = Connectivity::indicator_ball(2, 1.0).unwrap();
        // reach = 2 cells: offsets with |o| <= 2 staying in the disk
        let graph = build_graph(&bm, &conn, 0.125).unwrap();
        // per node: 4 at distance 1, 4 at sqrt(2), 4 at distance 2 = 12
        for k in 0..bm.node_count() {
            assert_eq!(graph.degree(k), 12, "node {}", k);
        }
    }

    #[test]
    fn from_edges_rejects_duplicates_and_loops() {
        let bm = unit_torus_measure(4);
        let e1 = edge_between(&bm, 0, 1, 1.0);
        let e2 = edge_between(&bm, 1, 0, 2.0);
        assert!(Graph::from_edges(4, 1.0, vec![e1.clone(), e2]).is_err());
        let mut loopy = e1;
        loopy.b = 0;
        assert!(Graph::from_edges(4, 1.0, vec![loopy]).is_err());
    }
}
