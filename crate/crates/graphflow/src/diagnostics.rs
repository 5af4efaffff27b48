//! Gradient-flow structure of the graph dynamics. The kinetic energy of a
//! velocity field v on the edge set is the upwind action
//!
//! ```text
//! A(r, v) = 1/2 sum_i sum_{(k,l) ordered}
//!           [ v_+(k,l)^2 r_i(k) m_k m_l + v_-(k,l)^2 r_i(l) m_l m_k ] eta(k,l),
//! ```
//!
//! the metric slope is the action at the steepest-descent velocity, and the
//! De Giorgi residual `G = E(T) - E(0) + 1/2 int (slope + action) dt`
//! vanishes along exact gradient-flow trajectories; the discrete stepper
//! leaves an O(dt) remainder.

use crate::dynamics::{upwind_velocity, EdgeFluxField, EdgeVelocityField, Trajectory};
use crate::energy::{KernelSet, KernelTables, PotentialSet, SpeciesState};
use crate::error::Error;
use crate::graph::Graph;
use crate::measure::BaseMeasure;

/// Upwind action of a velocity field. Both ordered directions of an edge
/// draw density from the same upwind node, so each unordered edge
/// contributes `eta v^2 r(source) m_a m_b`.
pub fn action_density(
    graph: &Graph,
    bm: &BaseMeasure,
    state: &SpeciesState,
    vel: &EdgeVelocityField,
) -> f64 {
    let m = bm.weights();
    let mut total = 0.0;
    for i in 0..state.species_count() {
        let r = state.density(i);
        for (e, &v) in graph.edges().iter().zip(vel.species(i)) {
            if v == 0.0 {
                continue;
            }
            let a = e.a as usize;
            let b = e.b as usize;
            let src = if v > 0.0 { r[a] } else { r[b] };
            total += e.weight * v * v * src * m[a] * m[b];
        }
    }
    total
}

/// Action of a realized flux: the kinetic energy of the velocity that moves
/// `j` through the upwind rule, `eta j^2 / (r(source) m_a m_b)` per edge.
/// Flux crossing an edge whose upwind density is (numerically) zero has no
/// finite kinetic cost and yields the infinity sentinel.
pub fn action_from_flux(
    graph: &Graph,
    bm: &BaseMeasure,
    state: &SpeciesState,
    flux: &EdgeFluxField,
) -> f64 {
    let m = bm.weights();
    let r_scale = state
        .densities()
        .iter()
        .flat_map(|d| d.iter())
        .fold(0.0f64, |acc, &v| acc.max(v));
    let j_scale = (0..flux.species_count())
        .flat_map(|i| flux.species(i).iter())
        .fold(0.0f64, |acc, &v| acc.max(v.abs()));
    let r_floor = 1e-14 * r_scale;
    let j_floor = 1e-14 * j_scale;
    let mut total = 0.0;
    for i in 0..state.species_count() {
        let r = state.density(i);
        for (e, &j) in graph.edges().iter().zip(flux.species(i)) {
            if j.abs() <= j_floor {
                continue;
            }
            let a = e.a as usize;
            let b = e.b as usize;
            let src = if j > 0.0 { r[a] } else { r[b] };
            if src <= r_floor {
                return f64::INFINITY;
            }
            total += e.weight * j * j / (src * m[a] * m[b]);
        }
    }
    total
}

/// Metric slope of the energy at `state`: the action of the steepest-descent
/// velocity field.
pub fn metric_slope(
    graph: &Graph,
    bm: &BaseMeasure,
    state: &SpeciesState,
    ks: &KernelSet,
    ps: &PotentialSet,
    tables: Option<&KernelTables>,
) -> Result<f64, Error> {
    let vel = upwind_velocity(ks, ps, state, graph, bm, tables)?;
    Ok(action_density(graph, bm, state, &vel))
}

/// De Giorgi residual of a trajectory from its per-step scalar records:
/// `E(T) - E(0) + 1/2 sum_n dt_n (slope_n + action_n)` with left-endpoint
/// sums matching the stepper order.
pub fn de_giorgi_residual(traj: &Trajectory) -> f64 {
    let recs = traj.records();
    let e0 = recs.first().map(|r| r.energy).unwrap_or(0.0);
    let e_t = recs.last().map(|r| r.energy).unwrap_or(0.0);
    let half: f64 = recs
        .iter()
        .map(|r| 0.5 * r.dt * (r.slope + r.action_realized))
        .sum();
    e_t - e0 + half
}

/// First-variation bilinear form of the upwind structure: with
/// `u = grad-bar phi` and `w = grad-bar psi` per edge,
///
/// ```text
/// l(phi)[psi] = 1/2 sum_i sum_{(k,l) ordered}
///               w(k,l) [ u_+(k,l) r_i(k) m_k m_l - u_-(k,l) r_i(l) m_l m_k ] eta.
/// ```
///
/// For `phi = psi` this is the action at velocity `u`.
pub fn first_variation_form(
    graph: &Graph,
    bm: &BaseMeasure,
    state: &SpeciesState,
    phis: &[Vec<f64>],
    psis: &[Vec<f64>],
) -> f64 {
    assert_eq!(phis.len(), state.species_count());
    assert_eq!(psis.len(), state.species_count());
    let m = bm.weights();
    let mut total = 0.0;
    for i in 0..state.species_count() {
        let r = state.density(i);
        let phi = &phis[i];
        let psi = &psis[i];
        for e in graph.edges() {
            let a = e.a as usize;
            let b = e.b as usize;
            let u = phi[b] - phi[a];
            let w = psi[b] - psi[a];
            let upwind = if u > 0.0 {
                u * r[a]
            } else {
                u * r[b]
            };
            total += e.weight * w * upwind * m[a] * m[b];
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::connectivity::Connectivity;
    use crate::dynamics::{evolve, upwind_flux, IntegratorConfig, StopRule};
    use crate::energy::{Kernel, Potential};
    use crate::graph::{build_graph, two_node_fixture};
    use crate::grid::SpatialGrid;
    use crate::measure::build_base_measure;
    use std::f64::consts::PI;

    fn point_mass_setup() -> (BaseMeasure, Graph, KernelSet, PotentialSet, SpeciesState) {
        let (bm, graph) = two_node_fixture(0.0, 1.0, 0.5, 0.5, 1.0);
        let ks = KernelSet::zero(1, 1);
        let ps = PotentialSet::new(1, vec![Potential::from_spec("x1", 1).unwrap()]).unwrap();
        let state = SpeciesState::new(vec![vec![0.0, 2.0]]).unwrap();
        (bm, graph, ks, ps, state)
    }

    #[test]
    fn action_of_zero_velocity_vanishes() {
        let (bm, graph, _, _, state) = point_mass_setup();
        let vel = EdgeVelocityField::zero(1, graph.edge_count());
        assert_eq!(action_density(&graph, &bm, &state, &vel), 0.0);
    }

    #[test]
    fn two_node_action_oracle() {
        // r = (0, 2), m = 1/2 each, eta = 1, flow toward node 0 at speed 1:
        // both ordered directions draw from node 1, total 1/2
        let (bm, graph, _, _, state) = point_mass_setup();
        let vel = EdgeVelocityField::from_values(vec![vec![-1.0]]);
        let a = action_density(&graph, &bm, &state, &vel);
        assert!((a - 0.5).abs() < 1e-15, "action {}", a);
        // doubling the velocity quadruples the action
        let vel2 = EdgeVelocityField::from_values(vec![vec![-2.0]]);
        assert!((action_density(&graph, &bm, &state, &vel2) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn slope_matches_action_at_descent_velocity() {
        let (bm, graph, ks, ps, state) = point_mass_setup();
        let vel = upwind_velocity(&ks, &ps, &state, &graph, &bm, None).unwrap();
        let slope = metric_slope(&graph, &bm, &state, &ks, &ps, None).unwrap();
        assert_eq!(slope, action_density(&graph, &bm, &state, &vel));
        assert!((slope - 0.5).abs() < 1e-15, "slope {}", slope);
    }

    #[test]
    fn critical_state_has_zero_slope() {
        let (bm, graph) = two_node_fixture(0.0, 1.0, 0.5, 0.5, 1.0);
        let ks = KernelSet::single(1, Kernel::quadratic(1.0));
        let ps = PotentialSet::zero(1, 1);
        let state = SpeciesState::new(vec![vec![1.0, 1.0]]).unwrap();
        assert_eq!(
            metric_slope(&graph, &bm, &state, &ks, &ps, None).unwrap(),
            0.0
        );
    }

    #[test]
    fn flux_action_agrees_with_velocity_action() {
        let (bm, graph, ks, ps, state) = point_mass_setup();
        let vel = upwind_velocity(&ks, &ps, &state, &graph, &bm, None).unwrap();
        let flux = upwind_flux(&state, &vel, &graph, &bm);
        let from_v = action_density(&graph, &bm, &state, &vel);
        let from_j = action_from_flux(&graph, &bm, &state, &flux);
        assert!((from_v - from_j).abs() < 1e-14, "{} vs {}", from_v, from_j);
    }

    #[test]
    fn flux_off_the_support_costs_infinity() {
        let (bm, graph, _, _, state) = point_mass_setup();
        // positive flux along (0, 1) draws from node 0 where the density is 0
        let flux = EdgeFluxField::from_values(vec![vec![0.25]]);
        assert!(action_from_flux(&graph, &bm, &state, &flux).is_infinite());
    }

    #[test]
    fn residual_vanishes_for_flat_landscape() {
        let (bm, graph) = two_node_fixture(0.0, 1.0, 0.5, 0.5, 1.0);
        let ks = KernelSet::zero(1, 1);
        let ps = PotentialSet::zero(1, 1);
        let state = SpeciesState::new(vec![vec![1.4, 0.6]]).unwrap();
        let cfg = IntegratorConfig {
            stop: StopRule::Steps(8),
            ..IntegratorConfig::default()
        };
        let traj = evolve(&state, &ks, &ps, &graph, &bm, &cfg).unwrap();
        assert_eq!(de_giorgi_residual(&traj), 0.0);
    }

    #[test]
    fn residual_shrinks_linearly_with_dt() {
        let (bm, graph) = two_node_fixture(0.0, 1.0, 0.5, 0.5, 1.0);
        let ks = KernelSet::single(1, Kernel::quadratic(1.0));
        let ps = PotentialSet::zero(1, 1);
        let state = SpeciesState::new(vec![vec![1.6, 0.4]]).unwrap();
        let run = |safety: f64| {
            let cfg = IntegratorConfig {
                stop: StopRule::TEnd(0.5),
                cfl_safety: safety,
                dt_max: safety * 0.5,
                ..IntegratorConfig::default()
            };
            de_giorgi_residual(&evolve(&state, &ks, &ps, &graph, &bm, &cfg).unwrap()).abs()
        };
        let coarse = run(0.8);
        let fine = run(0.4);
        assert!(coarse > 1e-12);
        let ratio = coarse / fine;
        assert!(
            ratio > 1.6 && ratio < 2.6,
            "expected first-order shrink, ratio {}",
            ratio
        );
    }

    #[test]
    fn constant_test_field_gives_zero_form() {
        let (bm, graph, _, _, state) = point_mass_setup();
        let phi = vec![vec![3.0, 3.0]];
        let psi = vec![vec![0.2, 0.9]];
        assert_eq!(first_variation_form(&graph, &bm, &state, &phi, &psi), 0.0);
    }

    #[test]
    fn diagonal_form_equals_action() {
        let (bm, graph, _, _, state) = point_mass_setup();
        let phi = vec![vec![0.3, 1.1]];
        // velocity equal to the nonlocal gradient of phi
        let vel = EdgeVelocityField::from_values(vec![graph
            .edges()
            .iter()
            .map(|e| phi[0][e.b as usize] - phi[0][e.a as usize])
            .collect()]);
        let form = first_variation_form(&graph, &bm, &state, &phi, &phi);
        let act = action_density(&graph, &bm, &state, &vel);
        assert!((form - act).abs() < 1e-15, "{} vs {}", form, act);
        assert!(form >= 0.0);
    }

    #[test]
    fn sine_form_approaches_continuum_pairing() {
        // phi = psi = sin(2 pi x), uniform density on the unit torus:
        // the form approaches 2 pi^2 as the neighborhood shrinks
        let grid = SpatialGrid::line(0.0, 1.0, 256, true).unwrap();
        let bm = build_base_measure(&grid, |_| 1.0).unwrap();
        let conn = Connectivity::indicator_ball(1, 3.0).unwrap();
        let graph = build_graph(&bm, &conn, 0.125).unwrap();
        let state = SpeciesState::new(vec![vec![1.0; 256]]).unwrap();
        let phi: Vec<f64> = bm
            .positions()
            .iter()
            .map(|p| (2.0 * PI * p[0]).sin())
            .collect();
        let fields = vec![phi];
        let form = first_variation_form(&graph, &bm, &state, &fields, &fields);
        let exact = 2.0 * PI * PI;
        assert!(
            (form - exact).abs() < 0.05 * exact,
            "form {} vs continuum {}",
            form,
            exact
        );
    }
}
