//! Interaction energy over the node cloud,
//!
//! ```text
//! E[r] = sum_i sum_k P_i(x_k) r_i(k) m_k
//!      + 1/2 sum_{i,j} sum_{k,l} K_ij(x_k, x_l) r_i(k) m_k r_j(l) m_l,
//! ```
//!
//! together with its variational derivative
//! `phi_i(x_k) = P_i(x_k) + sum_j sum_l K_ij(x_k, x_l) r_j(l) m_l`.
//!
//! Kernels are general two-point functions, so convolutions are dense O(n^2)
//! sums; `KernelTables` caches the kernel matrices once per run when the
//! caller can afford the memory.

use rayon::prelude::*;

use crate::connectivity::SamplePlan;
use crate::error::Error;
use crate::expr::{parse_expression, EvalScope, Expression, Var, VarRole};
use crate::linalg::{norm, Point};
use crate::measure::BaseMeasure;
use crate::report::{CheckResult, ValidationReport};
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// One interaction kernel `K(x, y)` with an analytic spatial gradient in its
/// first argument.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel {
    form: KernelForm,
}

#[derive(Debug, Clone, PartialEq)]
enum KernelForm {
    Zero,
    /// `a |x - y|^2`
    Quadratic { a: f64 },
    /// `-a exp(-|x - y|^2 / (2 sigma^2))`
    Gaussian { a: f64, sigma: f64 },
    Expr {
        f: Expression,
        /// d/dx_a for each axis, precomputed symbolically.
        grad: Vec<Expression>,
    },
}

impl Kernel {
    pub fn zero() -> Self {
        Kernel {
            form: KernelForm::Zero,
        }
    }

    pub fn quadratic(a: f64) -> Self {
        Kernel {
            form: KernelForm::Quadratic { a },
        }
    }

    pub fn gaussian(a: f64, sigma: f64) -> Self {
        Kernel {
            form: KernelForm::Gaussian { a, sigma },
        }
    }

    /// Admit an expression in the variables `x1..xd, y1..yd`; the gradient in
    /// `x` is formed symbolically, so the expression must be differentiable
    /// in every `x` component.
    pub fn from_expression(f: Expression, dim: usize) -> Result<Self, Error> {
        for v in f.variables() {
            match v.role {
                VarRole::X | VarRole::Y => {}
                _ => {
                    return Err(Error::Energy(format!(
                        "kernel may only use x and y variables, found {}",
                        v
                    )))
                }
            }
            if v.index >= dim {
                return Err(Error::Energy(format!(
                    "kernel variable {} exceeds dimension {}",
                    v, dim
                )));
            }
        }
        let mut grad = Vec::with_capacity(dim);
        for a in 0..dim {
            let d = f
                .derivative(Var::new(VarRole::X, a))
                .map_err(|m| Error::Energy(format!("kernel gradient: {}", m)))?;
            grad.push(d);
        }
        Ok(Kernel {
            form: KernelForm::Expr { f, grad },
        })
    }

    /// Parse a kernel spec: `zero`, `quadratic(a)`, `gaussian(a, sigma)`, or
    /// an expression string in `x1..xd, y1..yd`.
    pub fn from_spec(src: &str, dim: usize) -> Result<Self, Error> {
        match parse_preset(src) {
            Some(("zero", args)) if args.is_empty() => return Ok(Kernel::zero()),
            Some(("quadratic", args)) if args.len() == 1 => {
                return Ok(Kernel::quadratic(args[0]));
            }
            Some(("gaussian", args)) if args.len() == 2 => {
                if !(args[1] > 0.0) {
                    return Err(Error::Energy(format!(
                        "gaussian kernel width must be positive, got {}",
                        args[1]
                    )));
                }
                return Ok(Kernel::gaussian(args[0], args[1]));
            }
            Some((name, args)) => {
                return Err(Error::Energy(format!(
                    "kernel preset {}/{} is not recognized; expected zero, \
                     quadratic(a), or gaussian(a, sigma)",
                    name,
                    args.len()
                )))
            }
            None => {}
        }
        let f = parse_expression(src).map_err(Error::Parse)?;
        Kernel::from_expression(f, dim)
    }

    pub fn is_zero(&self) -> bool {
        matches!(self.form, KernelForm::Zero)
    }

    pub fn eval(&self, dim: usize, x: Point, y: Point) -> f64 {
        match &self.form {
            KernelForm::Zero => 0.0,
            KernelForm::Quadratic { a } => {
                let d2 = sq_dist(dim, x, y);
                a * d2
            }
            KernelForm::Gaussian { a, sigma } => {
                let d2 = sq_dist(dim, x, y);
                -a * (-d2 / (2.0 * sigma * sigma)).exp()
            }
            KernelForm::Expr { f, .. } => f.eval(&EvalScope::xy(&x[..dim], &y[..dim])),
        }
    }

    /// Gradient in the first argument, `d/dx K(x, y)`.
    pub fn grad_x(&self, dim: usize, x: Point, y: Point) -> Point {
        let mut g = [0.0; 2];
        match &self.form {
            KernelForm::Zero => {}
            KernelForm::Quadratic { a } => {
                for c in 0..dim {
                    g[c] = 2.0 * a * (x[c] - y[c]);
                }
            }
            KernelForm::Gaussian { a, sigma } => {
                let s2 = sigma * sigma;
                let e = (-sq_dist(dim, x, y) / (2.0 * s2)).exp();
                for c in 0..dim {
                    g[c] = a * e * (x[c] - y[c]) / s2;
                }
            }
            KernelForm::Expr { grad, .. } => {
                let scope = EvalScope::xy(&x[..dim], &y[..dim]);
                for c in 0..dim {
                    g[c] = grad[c].eval(&scope);
                }
            }
        }
        g
    }
}

fn sq_dist(dim: usize, x: Point, y: Point) -> f64 {
    let mut d2 = 0.0;
    for c in 0..dim {
        let d = x[c] - y[c];
        d2 += d * d;
    }
    d2
}

/// Split `name(arg, arg)` into its parts; `None` when `src` does not look
/// like a preset call, so expression parsing can take over.
fn parse_preset(src: &str) -> Option<(&str, Vec<f64>)> {
    let s = src.trim();
    if s == "zero" {
        return Some(("zero", Vec::new()));
    }
    let open = s.find('(')?;
    let name = s[..open].trim();
    if !matches!(name, "quadratic" | "gaussian") || !s.ends_with(')') {
        return None;
    }
    let inner = &s[open + 1..s.len() - 1];
    let mut args = Vec::new();
    for part in inner.split(',') {
        args.push(part.trim().parse::<f64>().ok()?);
    }
    Some((name, args))
}

/// The N x N matrix of interaction kernels, stored row-major, together with
/// the declared growth constant (for the gradient bound
/// `|grad K| <= growth (1 + |x| + |y|)`) and the Lipschitz descriptor used by
/// the window validation.
#[derive(Debug, Clone)]
pub struct KernelSet {
    species: usize,
    dim: usize,
    entries: Vec<Kernel>,
    growth_constant: f64,
    lipschitz: f64,
}

impl KernelSet {
    pub fn new(
        dim: usize,
        rows: Vec<Vec<Kernel>>,
        growth_constant: f64,
        lipschitz: f64,
    ) -> Result<Self, Error> {
        let species = rows.len();
        if species == 0 {
            return Err(Error::Energy("kernel matrix has no species".into()));
        }
        for (i, row) in rows.iter().enumerate() {
            if row.len() != species {
                return Err(Error::Energy(format!(
                    "kernel matrix row {} has {} entries, expected {}",
                    i,
                    row.len(),
                    species
                )));
            }
        }
        if !(growth_constant > 0.0) || !(lipschitz > 0.0) {
            return Err(Error::Energy(
                "kernel growth and Lipschitz constants must be positive".into(),
            ));
        }
        Ok(KernelSet {
            species,
            dim,
            entries: rows.into_iter().flatten().collect(),
            growth_constant,
            lipschitz,
        })
    }

    /// Single-species set.
    pub fn single(dim: usize, k: Kernel) -> Self {
        KernelSet::new(dim, vec![vec![k]], 16.0, 16.0).expect("1x1 matrix is square")
    }

    pub fn zero(species: usize, dim: usize) -> Self {
        KernelSet::new(
            dim,
            vec![vec![Kernel::zero(); species]; species],
            16.0,
            16.0,
        )
        .expect("square by construction")
    }

    pub fn species_count(&self) -> usize {
        self.species
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn kernel(&self, i: usize, j: usize) -> &Kernel {
        &self.entries[i * self.species + j]
    }

    pub fn growth_constant(&self) -> f64 {
        self.growth_constant
    }

    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    pub fn eval(&self, i: usize, j: usize, x: Point, y: Point) -> f64 {
        self.kernel(i, j).eval(self.dim, x, y)
    }

    pub fn grad_x(&self, i: usize, j: usize, x: Point, y: Point) -> Point {
        self.kernel(i, j).grad_x(self.dim, x, y)
    }

    pub fn is_zero(&self) -> bool {
        self.entries.iter().all(Kernel::is_zero)
    }
}

/// One external potential `P(x)` with analytic gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Potential {
    form: PotentialForm,
}

#[derive(Debug, Clone, PartialEq)]
enum PotentialForm {
    Zero,
    /// `a |x|^2`
    Quadratic { a: f64 },
    /// `-a exp(-|x|^2 / (2 sigma^2))`
    Gaussian { a: f64, sigma: f64 },
    Expr { f: Expression, grad: Vec<Expression> },
}

impl Potential {
    pub fn zero() -> Self {
        Potential {
            form: PotentialForm::Zero,
        }
    }

    pub fn quadratic(a: f64) -> Self {
        Potential {
            form: PotentialForm::Quadratic { a },
        }
    }

    pub fn gaussian(a: f64, sigma: f64) -> Self {
        Potential {
            form: PotentialForm::Gaussian { a, sigma },
        }
    }

    /// Admit an expression in `x1..xd` only.
    pub fn from_expression(f: Expression, dim: usize) -> Result<Self, Error> {
        for v in f.variables() {
            if v.role != VarRole::X {
                return Err(Error::Energy(format!(
                    "potential may only use x variables, found {}",
                    v
                )));
            }
            if v.index >= dim {
                return Err(Error::Energy(format!(
                    "potential variable {} exceeds dimension {}",
                    v, dim
                )));
            }
        }
        let mut grad = Vec::with_capacity(dim);
        for a in 0..dim {
            let d = f
                .derivative(Var::new(VarRole::X, a))
                .map_err(|m| Error::Energy(format!("potential gradient: {}", m)))?;
            grad.push(d);
        }
        Ok(Potential {
            form: PotentialForm::Expr { f, grad },
        })
    }

    /// Parse a potential spec: `zero`, `quadratic(a)` for `a |x|^2`,
    /// `gaussian(a, sigma)`, or an expression in `x1..xd`.
    pub fn from_spec(src: &str, dim: usize) -> Result<Self, Error> {
        match parse_preset(src) {
            Some(("zero", args)) if args.is_empty() => return Ok(Potential::zero()),
            Some(("quadratic", args)) if args.len() == 1 => {
                return Ok(Potential::quadratic(args[0]));
            }
            Some(("gaussian", args)) if args.len() == 2 => {
                if !(args[1] > 0.0) {
                    return Err(Error::Energy(format!(
                        "gaussian potential width must be positive, got {}",
                        args[1]
                    )));
                }
                return Ok(Potential::gaussian(args[0], args[1]));
            }
            Some((name, args)) => {
                return Err(Error::Energy(format!(
                    "potential preset {}/{} is not recognized",
                    name,
                    args.len()
                )))
            }
            None => {}
        }
        let f = parse_expression(src).map_err(Error::Parse)?;
        Potential::from_expression(f, dim)
    }

    pub fn is_zero(&self) -> bool {
        matches!(self.form, PotentialForm::Zero)
    }

    pub fn eval(&self, dim: usize, x: Point) -> f64 {
        match &self.form {
            PotentialForm::Zero => 0.0,
            PotentialForm::Quadratic { a } => a * sq_dist(dim, x, [0.0; 2]),
            PotentialForm::Gaussian { a, sigma } => {
                -a * (-sq_dist(dim, x, [0.0; 2]) / (2.0 * sigma * sigma)).exp()
            }
            PotentialForm::Expr { f, .. } => f.eval(&EvalScope::x(&x[..dim])),
        }
    }

    pub fn grad(&self, dim: usize, x: Point) -> Point {
        let mut g = [0.0; 2];
        match &self.form {
            PotentialForm::Zero => {}
            PotentialForm::Quadratic { a } => {
                for c in 0..dim {
                    g[c] = 2.0 * a * x[c];
                }
            }
            PotentialForm::Gaussian { a, sigma } => {
                let s2 = sigma * sigma;
                let e = (-sq_dist(dim, x, [0.0; 2]) / (2.0 * s2)).exp();
                for c in 0..dim {
                    g[c] = a * e * x[c] / s2;
                }
            }
            PotentialForm::Expr { grad, .. } => {
                let scope = EvalScope::x(&x[..dim]);
                for c in 0..dim {
                    g[c] = grad[c].eval(&scope);
                }
            }
        }
        g
    }
}

/// One potential per species.
#[derive(Debug, Clone)]
pub struct PotentialSet {
    dim: usize,
    entries: Vec<Potential>,
}

impl PotentialSet {
    pub fn new(dim: usize, entries: Vec<Potential>) -> Result<Self, Error> {
        if entries.is_empty() {
            return Err(Error::Energy("potential set has no species".into()));
        }
        Ok(PotentialSet { dim, entries })
    }

    pub fn zero(species: usize, dim: usize) -> Self {
        PotentialSet {
            dim,
            entries: vec![Potential::zero(); species],
        }
    }

    pub fn species_count(&self) -> usize {
        self.entries.len()
    }

    pub fn potential(&self, i: usize) -> &Potential {
        &self.entries[i]
    }

    pub fn eval(&self, i: usize, x: Point) -> f64 {
        self.entries[i].eval(self.dim, x)
    }

    pub fn grad(&self, i: usize, x: Point) -> Point {
        self.entries[i].grad(self.dim, x)
    }

    pub fn is_zero(&self) -> bool {
        self.entries.iter().all(Potential::is_zero)
    }
}

/// Densities `r_i(x_k) >= 0` of every species with respect to the base
/// measure; a valid state carries unit mass per species,
/// `sum_k r_i(k) m_k = 1`.
#[derive(Debug, Clone)]
pub struct SpeciesState {
    densities: Vec<Vec<f64>>,
}

impl SpeciesState {
    pub fn new(densities: Vec<Vec<f64>>) -> Result<Self, Error> {
        if densities.is_empty() {
            return Err(Error::Energy("state has no species".into()));
        }
        let n = densities[0].len();
        for (i, d) in densities.iter().enumerate() {
            if d.len() != n {
                return Err(Error::Energy(format!(
                    "species {} has {} nodes, species 0 has {}",
                    i,
                    d.len(),
                    n
                )));
            }
            for (k, &v) in d.iter().enumerate() {
                if !v.is_finite() || v < 0.0 {
                    return Err(Error::Energy(format!(
                        "species {} density at node {} is {}; densities must be \
                         finite and nonnegative",
                        i, k, v
                    )));
                }
            }
        }
        Ok(SpeciesState { densities })
    }

    /// Sample per-species profiles on the nodes and normalize each to unit
    /// mass against `bm`.
    pub fn from_profiles(
        bm: &BaseMeasure,
        profiles: &[&dyn Fn(Point) -> f64],
    ) -> Result<Self, Error> {
        let mut densities = Vec::with_capacity(profiles.len());
        for f in profiles {
            let raw: Vec<f64> = bm.positions().iter().map(|&p| f(p)).collect();
            densities.push(raw);
        }
        let mut state = SpeciesState::new(densities)?;
        state.normalize(bm)?;
        Ok(state)
    }

    /// Scale every species to unit mass.
    pub fn normalize(&mut self, bm: &BaseMeasure) -> Result<(), Error> {
        for (i, d) in self.densities.iter_mut().enumerate() {
            let mass: f64 = d.iter().zip(bm.weights()).map(|(r, m)| r * m).sum();
            if !(mass > 0.0) || !mass.is_finite() {
                return Err(Error::Energy(format!(
                    "species {} has mass {}; cannot normalize",
                    i, mass
                )));
            }
            for v in d.iter_mut() {
                *v /= mass;
            }
        }
        Ok(())
    }

    pub fn species_count(&self) -> usize {
        self.densities.len()
    }

    pub fn node_count(&self) -> usize {
        self.densities[0].len()
    }

    pub fn density(&self, i: usize) -> &[f64] {
        &self.densities[i]
    }

    pub fn densities(&self) -> &[Vec<f64>] {
        &self.densities
    }

    pub fn densities_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.densities
    }

    pub fn mass(&self, i: usize, bm: &BaseMeasure) -> f64 {
        self.densities[i]
            .iter()
            .zip(bm.weights())
            .map(|(r, m)| r * m)
            .sum()
    }

    /// Probability contract: unit mass per species within `tol`.
    pub fn check_probability(&self, bm: &BaseMeasure, tol: f64) -> Result<(), Error> {
        for i in 0..self.species_count() {
            let mass = self.mass(i, bm);
            if (mass - 1.0).abs() > tol {
                return Err(Error::Energy(format!(
                    "species {} carries mass {} instead of 1 (tolerance {})",
                    i, mass, tol
                )));
            }
        }
        Ok(())
    }
}

fn check_shapes(ks: &KernelSet, ps: &PotentialSet, state: &SpeciesState, bm: &BaseMeasure) -> Result<(), Error> {
    let n_sp = state.species_count();
    if ks.species_count() != n_sp || ps.species_count() != n_sp {
        return Err(Error::Energy(format!(
            "species counts disagree: kernels {}, potentials {}, state {}",
            ks.species_count(),
            ps.species_count(),
            n_sp
        )));
    }
    if state.node_count() != bm.node_count() {
        return Err(Error::Energy(format!(
            "state has {} nodes, base measure has {}",
            state.node_count(),
            bm.node_count()
        )));
    }
    if ks.dim() != bm.dim() {
        return Err(Error::Energy(format!(
            "kernel dimension {} does not match measure dimension {}",
            ks.dim(),
            bm.dim()
        )));
    }
    Ok(())
}

/// Dense cache of the kernel matrices `K_ij(x_a, x_b)`. Cross-symmetric sets
/// need one table per unordered species pair; the table for `(i, j)` with
/// `i <= j` is shared with `(j, i)`.
#[derive(Debug, Clone)]
pub struct KernelTables {
    species: usize,
    nodes: usize,
    /// Per unordered pair, `None` for zero kernels.
    tables: Vec<Option<Vec<f64>>>,
}

impl KernelTables {
    fn pair_index(&self, i: usize, j: usize) -> usize {
        let (lo, hi) = if i <= j { (i, j) } else { (j, i) };
        lo * self.species - lo * (lo + 1) / 2 + hi
    }

    /// Row-major `nodes x nodes` table for the species pair, `None` if that
    /// kernel is zero.
    pub fn table(&self, i: usize, j: usize) -> Option<&[f64]> {
        self.tables[self.pair_index(i, j)].as_deref()
    }

    pub fn node_count(&self) -> usize {
        self.nodes
    }
}

/// Evaluate every kernel matrix once. Memory is `species pairs x n^2` floats;
/// the caller decides whether that trade is worth it.
pub fn build_kernel_tables(ks: &KernelSet, bm: &BaseMeasure) -> KernelTables {
    let species = ks.species_count();
    let nodes = bm.node_count();
    let dim = ks.dim();
    let mut tables = Vec::new();
    for i in 0..species {
        for j in i..species {
            let kern = ks.kernel(i, j);
            if kern.is_zero() {
                tables.push(None);
                continue;
            }
            let table: Vec<f64> = (0..nodes)
                .into_par_iter()
                .flat_map_iter(|a| {
                    let xa = bm.position(a);
                    (0..nodes).map(move |b| kern.eval(dim, xa, bm.position(b)))
                })
                .collect();
            tables.push(Some(table));
        }
    }
    KernelTables {
        species,
        nodes,
        tables,
    }
}

/// Total interaction energy, potential part plus the half-weighted double
/// convolution.
pub fn energy(
    ks: &KernelSet,
    ps: &PotentialSet,
    state: &SpeciesState,
    bm: &BaseMeasure,
) -> Result<f64, Error> {
    energy_with(ks, ps, state, bm, None)
}

pub fn energy_with(
    ks: &KernelSet,
    ps: &PotentialSet,
    state: &SpeciesState,
    bm: &BaseMeasure,
    tables: Option<&KernelTables>,
) -> Result<f64, Error> {
    check_shapes(ks, ps, state, bm)?;
    let n = bm.node_count();
    let n_sp = state.species_count();
    let dim = bm.dim();
    let m = bm.weights();
    let mut total = 0.0;
    for i in 0..n_sp {
        if !ps.potential(i).is_zero() {
            let ri = state.density(i);
            for k in 0..n {
                total += ps.eval(i, bm.position(k)) * ri[k] * m[k];
            }
        }
    }
    for i in 0..n_sp {
        for j in 0..n_sp {
            let kern = ks.kernel(i, j);
            if kern.is_zero() {
                continue;
            }
            let ri = state.density(i);
            let rj = state.density(j);
            let partials: Vec<f64> = (0..n)
                .into_par_iter()
                .map(|a| {
                    let wa = ri[a] * m[a];
                    if wa == 0.0 {
                        return 0.0;
                    }
                    let xa = bm.position(a);
                    let mut inner = 0.0;
                    match tables.and_then(|t| t.table(i, j)) {
                        Some(tab) => {
                            let row = &tab[a * n..(a + 1) * n];
                            for b in 0..n {
                                inner += row[b] * rj[b] * m[b];
                            }
                        }
                        None => {
                            for b in 0..n {
                                inner += kern.eval(dim, xa, bm.position(b)) * rj[b] * m[b];
                            }
                        }
                    }
                    wa * inner
                })
                .collect();
            // sequential fold keeps the sum bit-identical across thread counts
            total += 0.5 * partials.iter().sum::<f64>();
        }
    }
    Ok(total)
}

/// Variational derivative of the energy in species `i`:
/// `phi_i(x_k) = P_i(x_k) + sum_j sum_b K_ij(x_k, x_b) r_j(b) m_b`.
pub fn variational_derivative(
    ks: &KernelSet,
    ps: &PotentialSet,
    state: &SpeciesState,
    bm: &BaseMeasure,
    species: usize,
) -> Result<Vec<f64>, Error> {
    variational_derivative_with(ks, ps, state, bm, species, None)
}

pub fn variational_derivative_with(
    ks: &KernelSet,
    ps: &PotentialSet,
    state: &SpeciesState,
    bm: &BaseMeasure,
    species: usize,
    tables: Option<&KernelTables>,
) -> Result<Vec<f64>, Error> {
    check_shapes(ks, ps, state, bm)?;
    if species >= state.species_count() {
        return Err(Error::Energy(format!(
            "species index {} out of range for {} species",
            species,
            state.species_count()
        )));
    }
    let n = bm.node_count();
    let n_sp = state.species_count();
    let dim = bm.dim();
    let m = bm.weights();
    // premultiplied masses r_j(b) m_b shared across target nodes
    let weighted: Vec<Vec<f64>> = (0..n_sp)
        .map(|j| {
            state.density(j)
                .iter()
                .zip(m)
                .map(|(r, mm)| r * mm)
                .collect()
        })
        .collect();
    let field: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|k| {
            let xk = bm.position(k);
            let mut phi = ps.eval(species, xk);
            for j in 0..n_sp {
                let kern = ks.kernel(species, j);
                if kern.is_zero() {
                    continue;
                }
                let wj = &weighted[j];
                match tables.and_then(|t| t.table(species, j)) {
                    Some(tab) => {
                        let row = &tab[k * n..(k + 1) * n];
                        for b in 0..n {
                            phi += row[b] * wj[b];
                        }
                    }
                    None => {
                        for b in 0..n {
                            phi += kern.eval(dim, xk, bm.position(b)) * wj[b];
                        }
                    }
                }
            }
            phi
        })
        .collect();
    Ok(field)
}

/// All species' variational derivatives; the per-step workhorse of the
/// integrators.
pub fn variational_derivative_all(
    ks: &KernelSet,
    ps: &PotentialSet,
    state: &SpeciesState,
    bm: &BaseMeasure,
    tables: Option<&KernelTables>,
) -> Result<Vec<Vec<f64>>, Error> {
    (0..state.species_count())
        .map(|i| variational_derivative_with(ks, ps, state, bm, i, tables))
        .collect()
}

/// Sampled checks of the kernel assumptions: exchange symmetry in (x, y),
/// cross symmetry between species pairs, the windowed Lipschitz bound, the
/// gradient growth bound, and finite-difference consistency of the supplied
/// gradients.
pub fn validate_kernels(ks: &KernelSet, plan: &SamplePlan) -> ValidationReport {
    let mut report = ValidationReport::new("kernel set");
    let dim = ks.dim();
    let n_sp = ks.species_count();
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let sides: Vec<Uniform<f64>> = (0..dim)
        .map(|c| Uniform::new_inclusive(plan.z_box[c][0], plan.z_box[c][1]))
        .collect();
    let mut sample_point = |rng: &mut ChaCha8Rng| -> Point {
        let mut p = [0.0; 2];
        for (c, side) in sides.iter().enumerate() {
            p[c] = side.sample(rng);
        }
        p
    };
    let pairs: Vec<(Point, Point)> = (0..plan.w_samples)
        .map(|_| (sample_point(&mut rng), sample_point(&mut rng)))
        .collect();

    // exchange symmetry K(x, y) = K(y, x)
    let mut worst_ex = 0.0;
    let mut worst_ex_at = String::new();
    for i in 0..n_sp {
        for j in 0..n_sp {
            for (x, y) in &pairs {
                let fwd = ks.eval(i, j, *x, *y);
                let bwd = ks.eval(i, j, *y, *x);
                let defect = (fwd - bwd).abs() / (1.0 + fwd.abs().max(bwd.abs()));
                if defect > worst_ex {
                    worst_ex = defect;
                    worst_ex_at = format!(
                        "kernel ({}, {}) at x = {:?}, y = {:?}: {} vs {}",
                        i + 1,
                        j + 1,
                        &x[..dim],
                        &y[..dim],
                        fwd,
                        bwd
                    );
                }
            }
        }
    }
    let tol = 1e-10;
    report.push(CheckResult::new(
        "exchange_symmetry",
        worst_ex <= tol,
        tol - worst_ex,
        if worst_ex <= tol {
            format!("largest relative defect {:.3e}", worst_ex)
        } else {
            worst_ex_at
        },
    ));

    // cross symmetry between species pairs
    let mut worst_cross = 0.0;
    let mut worst_cross_at = String::new();
    for i in 0..n_sp {
        for j in (i + 1)..n_sp {
            for (x, y) in &pairs {
                let ij = ks.eval(i, j, *x, *y);
                let ji = ks.eval(j, i, *x, *y);
                let defect = (ij - ji).abs() / (1.0 + ij.abs().max(ji.abs()));
                if defect > worst_cross {
                    worst_cross = defect;
                    worst_cross_at = format!(
                        "K({},{}) = {} but K({},{}) = {} at x = {:?}, y = {:?}",
                        i + 1,
                        j + 1,
                        ij,
                        j + 1,
                        i + 1,
                        ji,
                        &x[..dim],
                        &y[..dim]
                    );
                }
            }
        }
    }
    report.push(CheckResult::new(
        "cross_symmetry",
        worst_cross <= tol,
        tol - worst_cross,
        if worst_cross <= tol {
            format!("largest relative defect {:.3e}", worst_cross)
        } else {
            worst_cross_at
        },
    ));

    // windowed Lipschitz bound |K(u) - K(u')| <= L (r v r^2)
    let mut worst_ratio = 0.0;
    let mut worst_lip_at = String::new();
    for i in 0..n_sp {
        for j in 0..n_sp {
            if ks.kernel(i, j).is_zero() {
                continue;
            }
            for idx in 0..pairs.len().saturating_sub(1) {
                let (x, y) = pairs[idx];
                let (xp, yp) = pairs[idx + 1];
                let dx = [x[0] - xp[0], x[1] - xp[1]];
                let dy = [y[0] - yp[0], y[1] - yp[1]];
                let r = (norm(dx).powi(2) + norm(dy).powi(2)).sqrt();
                if r < 1e-9 {
                    continue;
                }
                let dk = (ks.eval(i, j, x, y) - ks.eval(i, j, xp, yp)).abs();
                let ratio = dk / r.max(r * r);
                if ratio > worst_ratio {
                    worst_ratio = ratio;
                    worst_lip_at = format!(
                        "kernel ({}, {}): |dK| = {:.4} over displacement {:.4}",
                        i + 1,
                        j + 1,
                        dk,
                        r
                    );
                }
            }
        }
    }
    report.push(CheckResult::new(
        "lipschitz_window",
        worst_ratio <= ks.lipschitz(),
        ks.lipschitz() - worst_ratio,
        format!(
            "empirical constant {:.4} against declared {:.4}{}",
            worst_ratio,
            ks.lipschitz(),
            if worst_ratio <= ks.lipschitz() {
                String::new()
            } else {
                format!("; worst at {}", worst_lip_at)
            }
        ),
    ));

    // growth bound |grad K(x, y)| <= C (1 + |x| + |y|)
    let mut worst_growth = 0.0;
    let mut worst_growth_at = String::new();
    for i in 0..n_sp {
        for j in 0..n_sp {
            if ks.kernel(i, j).is_zero() {
                continue;
            }
            for (x, y) in &pairs {
                let g = norm(ks.grad_x(i, j, *x, *y));
                let cap = 1.0 + norm(*x) + norm(*y);
                let ratio = g / cap;
                if ratio > worst_growth {
                    worst_growth = ratio;
                    worst_growth_at = format!(
                        "kernel ({}, {}): |grad| = {:.4} at x = {:?}, y = {:?} (cap {:.4})",
                        i + 1,
                        j + 1,
                        g,
                        &x[..dim],
                        &y[..dim],
                        ks.growth_constant() * cap
                    );
                }
            }
        }
    }
    report.push(CheckResult::new(
        "gradient_growth",
        worst_growth <= ks.growth_constant(),
        ks.growth_constant() - worst_growth,
        format!(
            "empirical growth factor {:.4} against declared {:.4}{}",
            worst_growth,
            ks.growth_constant(),
            if worst_growth <= ks.growth_constant() {
                String::new()
            } else {
                format!("; worst at {}", worst_growth_at)
            }
        ),
    ));

    // finite differences against the supplied gradient
    let h = 1e-4;
    let mut worst_fd = 0.0;
    let mut worst_fd_at = String::new();
    for i in 0..n_sp {
        for j in 0..n_sp {
            if ks.kernel(i, j).is_zero() {
                continue;
            }
            for (x, y) in pairs.iter().take(64) {
                let g = ks.grad_x(i, j, *x, *y);
                for c in 0..dim {
                    let mut xp = *x;
                    let mut xm = *x;
                    xp[c] += h;
                    xm[c] -= h;
                    let fd = (ks.eval(i, j, xp, *y) - ks.eval(i, j, xm, *y)) / (2.0 * h);
                    let defect = (fd - g[c]).abs() / (1.0 + g[c].abs());
                    if defect > worst_fd {
                        worst_fd = defect;
                        worst_fd_at = format!(
                            "kernel ({}, {}) axis {}: analytic {} vs difference {}",
                            i + 1,
                            j + 1,
                            c + 1,
                            g[c],
                            fd
                        );
                    }
                }
            }
        }
    }
    let fd_tol = 5.0 * h;
    report.push(CheckResult::new(
        "gradient_consistency",
        worst_fd <= fd_tol,
        fd_tol - worst_fd,
        if worst_fd <= fd_tol {
            format!("largest relative defect {:.3e}", worst_fd)
        } else {
            worst_fd_at
        },
    ));

    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measure::BaseMeasure;

    fn two_nodes() -> BaseMeasure {
        BaseMeasure::from_nodes(
            1,
            vec![[0.0, 0.0], [1.0, 0.0]],
            vec![1.0, 1.0],
            vec![1.0, 1.0],
        )
        .unwrap()
    }

    #[test]
    fn zero_system_has_zero_energy() {
        let bm = two_nodes();
        let state = SpeciesState::new(vec![vec![0.5, 0.5]]).unwrap();
        let ks = KernelSet::zero(1, 1);
        let ps = PotentialSet::zero(1, 1);
        assert_eq!(energy(&ks, &ps, &state, &bm).unwrap(), 0.0);
    }

    #[test]
    fn half_half_quadratic_energy() {
        // 1/2 (1/4 * 0 + 1/4 * 1 + 1/4 * 1 + 1/4 * 0) = 0.25
        let bm = two_nodes();
        let state = SpeciesState::new(vec![vec![0.5, 0.5]]).unwrap();
        let ks = KernelSet::single(1, Kernel::quadratic(1.0));
        let ps = PotentialSet::zero(1, 1);
        let e = energy(&ks, &ps, &state, &bm).unwrap();
        assert!((e - 0.25).abs() < 1e-15, "energy {}", e);
    }

    #[test]
    fn cross_only_two_species_energy() {
        let bm = two_nodes();
        let state =
            SpeciesState::new(vec![vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let q = Kernel::quadratic(1.0);
        let ks = KernelSet::new(
            1,
            vec![
                vec![Kernel::zero(), q.clone()],
                vec![q, Kernel::zero()],
            ],
            16.0,
            16.0,
        )
        .unwrap();
        let ps = PotentialSet::zero(2, 1);
        let e = energy(&ks, &ps, &state, &bm).unwrap();
        assert!((e - 1.0).abs() < 1e-15, "energy {}", e);
    }

    #[test]
    fn point_mass_first_variation() {
        let bm = two_nodes();
        let state = SpeciesState::new(vec![vec![0.0, 1.0]]).unwrap();
        let ks = KernelSet::single(1, Kernel::quadratic(1.0));
        let ps = PotentialSet::zero(1, 1);
        let phi = variational_derivative(&ks, &ps, &state, &bm, 0).unwrap();
        assert!((phi[0] - 1.0).abs() < 1e-15);
        assert!(phi[1].abs() < 1e-15);
    }

    #[test]
    fn cross_kernel_first_variation() {
        let bm = two_nodes();
        let state =
            SpeciesState::new(vec![vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let q = Kernel::quadratic(1.0);
        let ks = KernelSet::new(
            1,
            vec![
                vec![Kernel::zero(), q.clone()],
                vec![q, Kernel::zero()],
            ],
            16.0,
            16.0,
        )
        .unwrap();
        let ps = PotentialSet::zero(2, 1);
        let phi = variational_derivative(&ks, &ps, &state, &bm, 0).unwrap();
        assert!((phi[0] - 1.0).abs() < 1e-15);
        assert!(phi[1].abs() < 1e-15);
    }

    #[test]
    fn energy_matches_half_pairing_identity() {
        // E = 1/2 <r m, conv part of phi> + <r m, P> for symmetric kernels
        let bm = BaseMeasure::from_nodes(
            1,
            vec![[0.0, 0.0], [0.3, 0.0], [0.7, 0.0], [1.0, 0.0]],
            vec![1.0; 4],
            vec![0.25; 4],
        )
        .unwrap();
        let mut state =
            SpeciesState::new(vec![vec![0.4, 1.3, 0.8, 1.5], vec![2.0, 0.1, 0.6, 1.3]])
                .unwrap();
        state.normalize(&bm).unwrap();
        let q = Kernel::from_spec("gaussian(0.8, 0.5)", 1).unwrap();
        let s = Kernel::from_spec("quadratic(0.7)", 1).unwrap();
        let ks = KernelSet::new(
            1,
            vec![vec![s.clone(), q.clone()], vec![q, Kernel::zero()]],
            16.0,
            16.0,
        )
        .unwrap();
        let ps = PotentialSet::new(
            1,
            vec![
                Potential::from_spec("sin(x1)", 1).unwrap(),
                Potential::quadratic(0.5),
            ],
        )
        .unwrap();
        let e = energy(&ks, &ps, &state, &bm).unwrap();

        let ps0 = PotentialSet::zero(2, 1);
        let mut recomposed = 0.0;
        for i in 0..2 {
            let conv = variational_derivative(&ks, &ps0, &state, &bm, i).unwrap();
            for k in 0..4 {
                let rm = state.density(i)[k] * bm.weights()[k];
                recomposed += 0.5 * conv[k] * rm + ps.eval(i, bm.position(k)) * rm;
            }
        }
        assert!(
            (e - recomposed).abs() <= 1e-12 * e.abs().max(1.0),
            "{} vs {}",
            e,
            recomposed
        );
    }

    #[test]
    fn first_variation_is_linear_in_state() {
        let bm = two_nodes();
        let a = SpeciesState::new(vec![vec![1.8, 0.2]]).unwrap();
        let b = SpeciesState::new(vec![vec![0.4, 1.6]]).unwrap();
        let alpha = 0.3;
        let mix = SpeciesState::new(vec![vec![
            alpha * 1.8 + (1.0 - alpha) * 0.4,
            alpha * 0.2 + (1.0 - alpha) * 1.6,
        ]])
        .unwrap();
        let ks = KernelSet::single(1, Kernel::gaussian(1.0, 0.7));
        let ps = PotentialSet::zero(1, 1);
        let fa = variational_derivative(&ks, &ps, &a, &bm, 0).unwrap();
        let fb = variational_derivative(&ks, &ps, &b, &bm, 0).unwrap();
        let fm = variational_derivative(&ks, &ps, &mix, &bm, 0).unwrap();
        for k in 0..2 {
            let lin = alpha * fa[k] + (1.0 - alpha) * fb[k];
            assert!((fm[k] - lin).abs() < 1e-12);
        }
    }

    #[test]
    fn tables_match_direct_evaluation() {
        let bm = BaseMeasure::from_nodes(
            1,
            vec![[0.1, 0.0], [0.4, 0.0], [0.9, 0.0]],
            vec![1.0; 3],
            vec![1.0 / 3.0; 3],
        )
        .unwrap();
        let mut state = SpeciesState::new(vec![vec![0.7, 1.9, 0.4]]).unwrap();
        state.normalize(&bm).unwrap();
        let ks = KernelSet::single(1, Kernel::from_spec("cos(x1 - y1)", 1).unwrap());
        let ps = PotentialSet::zero(1, 1);
        let tables = build_kernel_tables(&ks, &bm);
        let direct = energy(&ks, &ps, &state, &bm).unwrap();
        let cached = energy_with(&ks, &ps, &state, &bm, Some(&tables)).unwrap();
        assert_eq!(direct, cached);
        let phi_d = variational_derivative(&ks, &ps, &state, &bm, 0).unwrap();
        let phi_c =
            variational_derivative_with(&ks, &ps, &state, &bm, 0, Some(&tables)).unwrap();
        assert_eq!(phi_d, phi_c);
    }

    #[test]
    fn permutation_equivariance() {
        let bm = two_nodes();
        let mut state =
            SpeciesState::new(vec![vec![1.4, 0.6], vec![0.3, 1.7]]).unwrap();
        state.normalize(&bm).unwrap();
        let k11 = Kernel::quadratic(0.5);
        let k12 = Kernel::gaussian(1.0, 0.6);
        let k22 = Kernel::from_spec("cos(x1 - y1)", 1).unwrap();
        let ks = KernelSet::new(
            1,
            vec![
                vec![k11.clone(), k12.clone()],
                vec![k12.clone(), k22.clone()],
            ],
            16.0,
            16.0,
        )
        .unwrap();
        let ps = PotentialSet::new(
            1,
            vec![Potential::quadratic(1.0), Potential::gaussian(0.5, 1.0)],
        )
        .unwrap();
        let e = energy(&ks, &ps, &state, &bm).unwrap();

        let swapped = SpeciesState::new(vec![
            state.density(1).to_vec(),
            state.density(0).to_vec(),
        ])
        .unwrap();
        let ks_sw =
            KernelSet::new(1, vec![vec![k22, k12.clone()], vec![k12, k11]], 16.0, 16.0)
                .unwrap();
        let ps_sw = PotentialSet::new(
            1,
            vec![Potential::gaussian(0.5, 1.0), Potential::quadratic(1.0)],
        )
        .unwrap();
        let e_sw = energy(&ks_sw, &ps_sw, &swapped, &bm).unwrap();
        assert!((e - e_sw).abs() < 1e-14, "{} vs {}", e, e_sw);
    }

    #[test]
    fn validator_accepts_smooth_symmetric_kernels() {
        let ks = KernelSet::new(
            1,
            vec![vec![Kernel::quadratic(0.5)]],
            4.0,
            8.0,
        )
        .unwrap();
        let plan = SamplePlan::default();
        let report = validate_kernels(&ks, &plan);
        assert!(report.passed(), "{}", report);
    }

    #[test]
    fn validator_flags_antisymmetric_kernel() {
        let ks = KernelSet::single(1, Kernel::from_spec("x1 - y1", 1).unwrap());
        let report = validate_kernels(&ks, &SamplePlan::default());
        assert!(!report.check("exchange_symmetry").unwrap().passed);
    }

    #[test]
    fn validator_flags_cross_asymmetry() {
        let ks = KernelSet::new(
            1,
            vec![
                vec![Kernel::zero(), Kernel::quadratic(1.0)],
                vec![Kernel::quadratic(2.0), Kernel::zero()],
            ],
            16.0,
            16.0,
        )
        .unwrap();
        let report = validate_kernels(&ks, &SamplePlan::default());
        assert!(!report.check("cross_symmetry").unwrap().passed);
    }

    #[test]
    fn validator_flags_superlinear_gradient_growth() {
        // |x - y|^4 has cubic gradient growth, beyond any linear cap
        let ks = KernelSet::single(1, Kernel::from_spec("(x1 - y1)^4", 1).unwrap());
        let mut plan = SamplePlan::default();
        plan.z_box = [[-50.0, 50.0], [-50.0, 50.0]];
        let report = validate_kernels(&ks, &plan);
        assert!(!report.check("gradient_growth").unwrap().passed);
    }

    #[test]
    fn preset_parser_rejects_malformed_calls() {
        assert!(Kernel::from_spec("quadratic(1.0, 2.0)", 1).is_err());
        assert!(Kernel::from_spec("gaussian(1.0)", 1).is_err());
        assert!(Kernel::from_spec("gaussian(1.0, -0.5)", 1).is_err());
        // unknown names fall through to the expression parser
        assert!(Kernel::from_spec("notafunc(1.0)", 1).is_err());
    }

    #[test]
    fn kernel_rejects_foreign_variables() {
        assert!(Kernel::from_spec("z1 + w1", 1).is_err());
        assert!(Kernel::from_spec("x2 * y1", 1).is_err());
        assert!(Potential::from_spec("y1", 1).is_err());
    }

    #[test]
    fn expression_kernel_gradient_matches_closed_form() {
        let k = Kernel::from_spec("0.5*(x1 - y1)^2", 1).unwrap();
        let q = Kernel::quadratic(0.5);
        for &(x, y) in &[(0.2, 0.9), (-1.4, 0.3), (2.0, 2.0)] {
            let xe = [x, 0.0];
            let ye = [y, 0.0];
            assert!((k.eval(1, xe, ye) - q.eval(1, xe, ye)).abs() < 1e-14);
            assert!((k.grad_x(1, xe, ye)[0] - q.grad_x(1, xe, ye)[0]).abs() < 1e-14);
        }
    }

    #[test]
    fn probability_check_names_offending_species() {
        let bm = two_nodes();
        let state = SpeciesState::new(vec![vec![0.5, 0.5], vec![0.5, 0.9]]).unwrap();
        let err = state.check_probability(&bm, 1e-9).unwrap_err();
        assert!(err.to_string().contains("species 1"));
    }
}
