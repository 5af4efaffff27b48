//! Explicit upwind integration of the coupled transport system on a weighted
//! graph. Per species i the density r_i with respect to the node weights
//! follows
//!
//! ```text
//! d r_i(k)/dt = -div_i(k) / m_k,
//! div_i(k)    = sum_l eta(k,l) j_i(k,l),
//! j_i(k,l)    = v_+ r_i(k) m_k m_l - v_- r_i(l) m_l m_k,
//! v_i(k,l)    = phi_i(k) - phi_i(l),
//! ```
//!
//! where `phi_i` is the variational derivative of the interaction energy.
//! The upwind flux keeps densities nonnegative whenever
//! `dt * sum_l eta v_+ m_l <= 1` at every node, and the antisymmetric
//! stencil conserves mass to rounding.

use crate::diagnostics::{action_density, action_from_flux};
use crate::energy::{
    build_kernel_tables, energy_with, variational_derivative_all, KernelSet, KernelTables,
    PotentialSet, SpeciesState,
};
use crate::error::Error;
use crate::graph::Graph;
use crate::linalg::dot;
use crate::measure::BaseMeasure;

/// Signed edge velocities per species, stored once per unordered edge in the
/// graph's edge order and read against the edge orientation `a -> b`; the
/// reverse orientation is the exact negation.
#[derive(Debug, Clone)]
pub struct EdgeVelocityField {
    values: Vec<Vec<f64>>,
}

impl EdgeVelocityField {
    pub fn from_values(values: Vec<Vec<f64>>) -> Self {
        EdgeVelocityField { values }
    }

    pub fn zero(species: usize, edges: usize) -> Self {
        EdgeVelocityField {
            values: vec![vec![0.0; edges]; species],
        }
    }

    pub fn species_count(&self) -> usize {
        self.values.len()
    }

    /// Values along the stored orientation for one species.
    pub fn species(&self, i: usize) -> &[f64] {
        &self.values[i]
    }

    pub fn max_abs(&self) -> f64 {
        self.values
            .iter()
            .flat_map(|v| v.iter())
            .fold(0.0, |acc, v| acc.max(v.abs()))
    }
}

/// Signed edge fluxes per species, same storage convention as the velocity.
#[derive(Debug, Clone)]
pub struct EdgeFluxField {
    values: Vec<Vec<f64>>,
}

impl EdgeFluxField {
    pub fn from_values(values: Vec<Vec<f64>>) -> Self {
        EdgeFluxField { values }
    }

    pub fn zero(species: usize, edges: usize) -> Self {
        EdgeFluxField {
            values: vec![vec![0.0; edges]; species],
        }
    }

    pub fn species_count(&self) -> usize {
        self.values.len()
    }

    pub fn species(&self, i: usize) -> &[f64] {
        &self.values[i]
    }

    pub fn scale(&self, s: f64) -> EdgeFluxField {
        EdgeFluxField {
            values: self
                .values
                .iter()
                .map(|v| v.iter().map(|x| x * s).collect())
                .collect(),
        }
    }

    pub fn add(&self, other: &EdgeFluxField) -> EdgeFluxField {
        EdgeFluxField {
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect())
                .collect(),
        }
    }
}

/// Difference of a node field across an ordered node pair, `f(l) - f(k)`.
pub fn nonlocal_gradient(f: &[f64], k: usize, l: usize) -> f64 {
    f[l] - f[k]
}

/// Steepest-descent edge velocities `v_i(k,l) = -(phi_i(l) - phi_i(k))` for
/// the variational derivative `phi` of the energy.
pub fn upwind_velocity(
    ks: &KernelSet,
    ps: &PotentialSet,
    state: &SpeciesState,
    graph: &Graph,
    bm: &BaseMeasure,
    tables: Option<&KernelTables>,
) -> Result<EdgeVelocityField, Error> {
    let phis = variational_derivative_all(ks, ps, state, bm, tables)?;
    Ok(velocity_from_potentials(&phis, graph))
}

/// Edge velocities generated by explicit node potentials, one per species.
pub fn velocity_from_potentials(phis: &[Vec<f64>], graph: &Graph) -> EdgeVelocityField {
    let values = phis
        .iter()
        .map(|phi| {
            graph
                .edges()
                .iter()
                .map(|e| -nonlocal_gradient(phi, e.a as usize, e.b as usize))
                .collect()
        })
        .collect();
    EdgeVelocityField::from_values(values)
}

/// Upwind flux: mass leaves the node the velocity points away from,
/// `j = v_+ r(a) m_a m_b - v_- r(b) m_b m_a` along the edge orientation.
pub fn upwind_flux(
    state: &SpeciesState,
    vel: &EdgeVelocityField,
    graph: &Graph,
    bm: &BaseMeasure,
) -> EdgeFluxField {
    let m = bm.weights();
    let values = (0..state.species_count())
        .map(|i| {
            let r = state.density(i);
            let v = vel.species(i);
            graph
                .edges()
                .iter()
                .zip(v)
                .map(|(e, &v)| {
                    let a = e.a as usize;
                    let b = e.b as usize;
                    let mm = m[a] * m[b];
                    if v >= 0.0 {
                        v * r[a] * mm
                    } else {
                        v * r[b] * mm
                    }
                })
                .collect()
        })
        .collect();
    EdgeFluxField::from_values(values)
}

/// Weighted divergence `div_i(k) = sum_l eta(k,l) j_i(k,l)`; for the
/// antisymmetric fluxes produced here the node sums cancel pairwise, so the
/// total mass flux is zero.
pub fn nonlocal_divergence(flux: &EdgeFluxField, graph: &Graph) -> Vec<Vec<f64>> {
    (0..flux.species_count())
        .map(|i| {
            let j = flux.species(i);
            let mut div = vec![0.0; graph.node_count()];
            for (e, &jv) in graph.edges().iter().zip(j) {
                let w = e.weight;
                div[e.a as usize] += w * jv;
                div[e.b as usize] -= w * jv;
            }
            div
        })
        .collect()
}

/// Per-node outflow rates `sum_l eta v_+ m_l`; the positivity constraint is
/// `dt * rate <= 1` at every node and species.
fn outflow_rates(vel: &EdgeVelocityField, graph: &Graph, bm: &BaseMeasure) -> Vec<Vec<f64>> {
    let m = bm.weights();
    (0..vel.species_count())
        .map(|i| {
            let v = vel.species(i);
            let mut rate = vec![0.0; graph.node_count()];
            for (e, &v) in graph.edges().iter().zip(v) {
                if v > 0.0 {
                    rate[e.a as usize] += e.weight * v * m[e.b as usize];
                } else if v < 0.0 {
                    rate[e.b as usize] -= e.weight * v * m[e.a as usize];
                }
            }
            rate
        })
        .collect()
}

/// Largest stable time step scaled by `safety`: `safety / max_k rate(k)`.
/// Returns infinity when nothing flows; callers clamp by their `dt_max`.
pub fn stable_dt(
    vel: &EdgeVelocityField,
    graph: &Graph,
    bm: &BaseMeasure,
    safety: f64,
) -> f64 {
    let max_rate = outflow_rates(vel, graph, bm)
        .iter()
        .flat_map(|r| r.iter())
        .fold(0.0f64, |acc, &r| acc.max(r));
    if max_rate > 0.0 {
        safety / max_rate
    } else {
        f64::INFINITY
    }
}

/// One forward-Euler step at the given velocities. The update is written in
/// gain/loss form, `r' = r (1 - dt out) + dt in`, whose floating-point
/// evaluation cannot produce negative densities under the CFL bound.
fn euler_update(
    state: &SpeciesState,
    vel: &EdgeVelocityField,
    graph: &Graph,
    bm: &BaseMeasure,
    dt: f64,
) -> Result<SpeciesState, Error> {
    let m = bm.weights();
    let rates = outflow_rates(vel, graph, bm);
    for (i, rate) in rates.iter().enumerate() {
        for (k, &r) in rate.iter().enumerate() {
            if dt * r > 1.0 + 1e-12 {
                return Err(Error::Dynamics(format!(
                    "time step {} violates the positivity bound at species {} node {}: \
                     dt * outflow = {} > 1",
                    dt,
                    i,
                    k,
                    dt * r
                )));
            }
        }
    }
    let mut next = Vec::with_capacity(state.species_count());
    for i in 0..state.species_count() {
        let r = state.density(i);
        let v = vel.species(i);
        let mut inflow = vec![0.0; graph.node_count()];
        for (e, &v) in graph.edges().iter().zip(v) {
            let a = e.a as usize;
            let b = e.b as usize;
            if v > 0.0 {
                inflow[b] += e.weight * v * r[a] * m[a];
            } else if v < 0.0 {
                inflow[a] -= e.weight * v * r[b] * m[b];
            }
        }
        let updated: Vec<f64> = (0..graph.node_count())
            .map(|k| {
                let keep = (1.0 - dt * rates[i][k]).max(0.0);
                r[k] * keep + dt * inflow[k]
            })
            .collect();
        next.push(updated);
    }
    SpeciesState::new(next)
}

/// One explicit Euler step of the full system; returns the new state with
/// the velocity and flux that realized it.
pub fn step(
    state: &SpeciesState,
    ks: &KernelSet,
    ps: &PotentialSet,
    graph: &Graph,
    bm: &BaseMeasure,
    dt: f64,
    tables: Option<&KernelTables>,
) -> Result<(SpeciesState, EdgeFluxField, EdgeVelocityField), Error> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::Dynamics(format!("time step must be positive, got {}", dt)));
    }
    let vel = upwind_velocity(ks, ps, state, graph, bm, tables)?;
    let flux = upwind_flux(state, &vel, graph, bm);
    let next = euler_update(state, &vel, graph, bm, dt)?;
    Ok((next, flux, vel))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Euler,
    /// Predictor-corrector variant for convergence studies; positivity holds
    /// only through the CFL safety margin, not exactly.
    Heun,
}

/// When to stop: a physical horizon, or a fixed number of CFL-sized steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StopRule {
    TEnd(f64),
    Steps(usize),
}

#[derive(Debug, Clone)]
pub struct IntegratorConfig {
    pub method: Method,
    /// CFL safety factor in (0, 1].
    pub cfl_safety: f64,
    /// Step-size cap, also the step taken when nothing moves.
    pub dt_max: f64,
    pub stop: StopRule,
    /// Keep a full state/flux snapshot every this many steps (scalar
    /// diagnostics are kept every step regardless); 0 disables interior
    /// snapshots.
    pub record_every: usize,
    /// Cache kernel matrices up front; costs species-pair x n^2 memory.
    pub cache_kernels: bool,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        IntegratorConfig {
            method: Method::Euler,
            cfl_safety: 0.9,
            dt_max: 0.1,
            stop: StopRule::TEnd(1.0),
            record_every: 10,
            cache_kernels: true,
        }
    }
}

/// Scalar diagnostics kept for every step: recorded at the step's start,
/// with a trailing record (dt = 0) for the final state.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub step: usize,
    pub time: f64,
    pub dt: f64,
    pub energy: f64,
    /// Metric slope: action at the steepest-descent velocity.
    pub slope: f64,
    /// Action of the flux the step actually moved mass with.
    pub action_realized: f64,
    /// Energy drop plus half the accumulated slope/action integrals up to
    /// this record's time; the final record holds the full residual.
    pub de_giorgi_partial: f64,
    pub masses: Vec<f64>,
    pub min_density: f64,
    /// Second moment sum_k |x_k|^2 r_i(k) m_k per species.
    pub second_moments: Vec<f64>,
}

/// Full state capture at a recorded step.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub step: usize,
    pub time: f64,
    pub state: SpeciesState,
    pub velocity: EdgeVelocityField,
    pub flux: EdgeFluxField,
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    records: Vec<StepRecord>,
    snapshots: Vec<Snapshot>,
    final_state: SpeciesState,
    final_time: f64,
}

impl Trajectory {
    pub fn records(&self) -> &[StepRecord] {
        &self.records
    }

    pub fn snapshots(&self) -> &[Snapshot] {
        &self.snapshots
    }

    pub fn final_state(&self) -> &SpeciesState {
        &self.final_state
    }

    pub fn final_time(&self) -> f64 {
        self.final_time
    }

    pub fn step_count(&self) -> usize {
        self.records.len().saturating_sub(1)
    }

    /// Worst absolute per-species drift of total mass over the whole run.
    pub fn mass_drift(&self) -> f64 {
        let first = &self.records[0].masses;
        self.records
            .iter()
            .flat_map(|r| r.masses.iter().zip(first).map(|(m, m0)| (m - m0).abs()))
            .fold(0.0, f64::max)
    }

    pub fn min_density_seen(&self) -> f64 {
        self.records
            .iter()
            .fold(f64::INFINITY, |acc, r| acc.min(r.min_density))
    }
}

fn scalar_record(
    step: usize,
    time: f64,
    dt: f64,
    energy: f64,
    slope: f64,
    action_realized: f64,
    de_giorgi_partial: f64,
    state: &SpeciesState,
    bm: &BaseMeasure,
) -> StepRecord {
    let masses = (0..state.species_count())
        .map(|i| state.mass(i, bm))
        .collect();
    let min_density = state
        .densities()
        .iter()
        .flat_map(|d| d.iter())
        .fold(f64::INFINITY, |acc, &v| acc.min(v));
    let second_moments = (0..state.species_count())
        .map(|i| {
            state.density(i)
                .iter()
                .zip(bm.positions())
                .zip(bm.weights())
                .map(|((r, &x), m)| dot(x, x) * r * m)
                .sum()
        })
        .collect();
    StepRecord {
        step,
        time,
        dt,
        energy,
        slope,
        action_realized,
        de_giorgi_partial,
        masses,
        min_density,
        second_moments,
    }
}

/// Integrate the system from `initial` under `cfg`, recording scalar
/// diagnostics every step and full snapshots every `record_every` steps.
pub fn evolve(
    initial: &SpeciesState,
    ks: &KernelSet,
    ps: &PotentialSet,
    graph: &Graph,
    bm: &BaseMeasure,
    cfg: &IntegratorConfig,
) -> Result<Trajectory, Error> {
    if !(cfg.cfl_safety > 0.0 && cfg.cfl_safety <= 1.0) {
        return Err(Error::Dynamics(format!(
            "cfl_safety must lie in (0, 1], got {}",
            cfg.cfl_safety
        )));
    }
    if !(cfg.dt_max > 0.0) || !cfg.dt_max.is_finite() {
        return Err(Error::Dynamics(format!(
            "dt_max must be positive and finite, got {}",
            cfg.dt_max
        )));
    }
    match cfg.stop {
        StopRule::TEnd(t) if !(t > 0.0) || !t.is_finite() => {
            return Err(Error::Dynamics(format!(
                "t_end must be positive and finite, got {}",
                t
            )));
        }
        StopRule::Steps(0) => {
            return Err(Error::Dynamics("step count must be positive".into()));
        }
        _ => {}
    }
    if graph.node_count() != bm.node_count() {
        return Err(Error::Dynamics(format!(
            "graph has {} nodes, base measure has {}",
            graph.node_count(),
            bm.node_count()
        )));
    }
    initial.check_probability(bm, 1e-6)?;

    let owned_tables = if cfg.cache_kernels && !ks.is_zero() {
        Some(build_kernel_tables(ks, bm))
    } else {
        None
    };
    let tables = owned_tables.as_ref();

    let mut state = initial.clone();
    let mut t = 0.0;
    let mut half_sum = 0.0;
    let e0 = energy_with(ks, ps, &state, bm, tables)?;
    let mut records = Vec::new();
    let mut snapshots = Vec::new();
    let hard_cap = 10_000_000usize;

    let mut n = 0usize;
    loop {
        let vel = upwind_velocity(ks, ps, &state, graph, bm, tables)?;
        let dt_stable = stable_dt(&vel, graph, bm, cfg.cfl_safety);
        let mut dt = dt_stable.min(cfg.dt_max);
        let done = match cfg.stop {
            StopRule::TEnd(t_end) => {
                let remaining = t_end - t;
                if remaining <= 1e-12 * t_end {
                    true
                } else {
                    dt = dt.min(remaining);
                    false
                }
            }
            StopRule::Steps(count) => n >= count,
        };
        let energy_now = energy_with(ks, ps, &state, bm, tables)?;
        let slope = action_density(graph, bm, &state, &vel);

        if done {
            records.push(scalar_record(
                n,
                t,
                0.0,
                energy_now,
                slope,
                0.0,
                energy_now - e0 + half_sum,
                &state,
                bm,
            ));
            break;
        }
        if n >= hard_cap {
            return Err(Error::Dynamics(format!(
                "integration stalled: {} steps without reaching the stop rule",
                hard_cap
            )));
        }

        let flux = upwind_flux(&state, &vel, graph, bm);
        let (next, realized_flux) = match cfg.method {
            Method::Euler => {
                let next = euler_update(&state, &vel, graph, bm, dt)?;
                (next, flux.clone())
            }
            Method::Heun => {
                let predictor = euler_update(&state, &vel, graph, bm, dt)?;
                let vel_p = upwind_velocity(ks, ps, &predictor, graph, bm, tables)?;
                let flux_p = upwind_flux(&predictor, &vel_p, graph, bm);
                let mean_flux = flux.add(&flux_p).scale(0.5);
                let div = nonlocal_divergence(&mean_flux, graph);
                let mut next = state.densities().to_vec();
                let m = bm.weights();
                let scale = state
                    .densities()
                    .iter()
                    .flat_map(|d| d.iter())
                    .fold(0.0f64, |acc, &v| acc.max(v));
                for (i, d) in next.iter_mut().enumerate() {
                    for (k, v) in d.iter_mut().enumerate() {
                        *v -= dt * div[i][k] / m[k];
                        if *v < 0.0 {
                            // rounding-level undershoot is clamped; anything
                            // larger is a genuine stability failure
                            if *v > -1e-13 * (1.0 + scale) {
                                *v = 0.0;
                            } else {
                                return Err(Error::Dynamics(format!(
                                    "corrector step produced a negative density at species \
                                     {} node {}; reduce cfl_safety",
                                    i, k
                                )));
                            }
                        }
                    }
                }
                (SpeciesState::new(next)?, mean_flux)
            }
        };
        let action_realized = action_from_flux(graph, bm, &state, &realized_flux);
        records.push(scalar_record(
            n,
            t,
            dt,
            energy_now,
            slope,
            action_realized,
            energy_now - e0 + half_sum,
            &state,
            bm,
        ));
        if cfg.record_every > 0 && n % cfg.record_every == 0 {
            snapshots.push(Snapshot {
                step: n,
                time: t,
                state: state.clone(),
                velocity: vel,
                flux: realized_flux,
            });
        }
        half_sum += 0.5 * dt * (slope + action_realized);
        state = next;
        t += dt;
        n += 1;
    }

    Ok(Trajectory {
        records,
        snapshots,
        final_state: state,
        final_time: t,
    })
}
