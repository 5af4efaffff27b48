//! Connectivity profiles: the kernel `theta(z, w)` that weights an edge by
//! the midpoint `z` of its endpoints and their separation `w`, together with
//! the structural constants every profile must declare (support radius,
//! second-moment bound, nondegeneracy constant).
//!
//! The epsilon-scaled edge weight is
//!
//! ```text
//! eta_eps(x, y) = eps^-(d+2) * theta((x + y)/2, (x - y)/eps)
//! ```
//!
//! Indicator-type presets evaluate to half their interior value exactly on
//! the support boundary. Grids used in practice place nodes exactly on that
//! sphere, and the halved value is the quadrature-consistent convention
//! there; the plain expression-language `indicator` stays sharp.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Error;
use crate::expr::{EvalScope, Expression, VarRole};
use crate::linalg::{dot, norm, Point, SmallMat};
use crate::report::{CheckResult, ValidationReport};

#[derive(Debug, Clone)]
pub(crate) enum Profile {
    /// `scale` on the open unit ball, `scale/2` on the sphere.
    IndicatorBall { scale: f64 },
    /// `amplitude` where `<w, D^-1 w> < 1`, half on the boundary.
    Ellipsoid {
        shape: SmallMat,
        shape_inv: SmallMat,
        amplitude: f64,
    },
    /// `exp(-|w|^2 / 2 sigma^2)` cut off at radius `radius` (half on the rim).
    GaussianCutoff { sigma: f64, radius: f64 },
    /// User expression in `z1..zd`, `w1..wd`.
    Custom { theta: Expression, z_dependent: bool },
}

#[derive(Debug, Clone)]
pub struct Connectivity {
    dim: usize,
    profile: Profile,
    support_radius: f64,
    moment_bound: f64,
    nondegeneracy: f64,
}

fn ball_volume(dim: usize, radius: f64) -> f64 {
    match dim {
        1 => 2.0 * radius,
        _ => std::f64::consts::PI * radius * radius,
    }
}

/// Indicator with the symmetric boundary convention: `inside` strictly
/// within the sublevel set, half of it exactly on the boundary.
fn half_indicator(level: f64, threshold: f64, inside: f64) -> f64 {
    if level < threshold {
        inside
    } else if level == threshold {
        0.5 * inside
    } else {
        0.0
    }
}

impl Connectivity {
    /// `scale * 1{|w| <= 1}`; support radius 1.
    pub fn indicator_ball(dim: usize, scale: f64) -> Result<Self, Error> {
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(Error::Connectivity(format!(
                "indicator_ball scale must be positive and finite, got {}",
                scale
            )));
        }
        // sup |w|^2 theta sits on the sphere; the directional second moment
        // is scale * int (w . xi)^2 over the unit ball.
        let nondegeneracy = scale * ball_volume(dim, 1.0) / (dim as f64 + 2.0);
        Ok(Connectivity {
            dim,
            profile: Profile::IndicatorBall { scale },
            support_radius: 1.0,
            moment_bound: scale,
            nondegeneracy,
        })
    }

    /// Gaussian profile truncated at `radius`.
    pub fn gaussian_cutoff(dim: usize, sigma: f64, radius: f64) -> Result<Self, Error> {
        if !(sigma > 0.0 && radius > 0.0) || !sigma.is_finite() || !radius.is_finite() {
            return Err(Error::Connectivity(format!(
                "gaussian_cutoff needs positive finite width and radius, got ({}, {})",
                sigma, radius
            )));
        }
        // max of r^2 exp(-r^2/2s^2) over [0, radius]
        let r_star = (2.0f64).sqrt() * sigma;
        let peak_r = r_star.min(radius);
        let moment_bound = peak_r * peak_r * (-peak_r * peak_r / (2.0 * sigma * sigma)).exp();
        let mut conn = Connectivity {
            dim,
            profile: Profile::GaussianCutoff { sigma, radius },
            support_radius: radius,
            moment_bound,
            nondegeneracy: 0.0,
        };
        conn.nondegeneracy = conn.directional_moment_min(512);
        Ok(conn)
    }

    /// Custom profile; the structural constants cannot be inferred from an
    /// arbitrary expression and must be declared by the caller. Whether the
    /// declaration is honest is checked by `validate_connectivity`.
    pub fn from_expression(
        dim: usize,
        theta: Expression,
        support_radius: f64,
        moment_bound: f64,
        nondegeneracy: f64,
    ) -> Result<Self, Error> {
        if !(support_radius > 0.0) || !support_radius.is_finite() {
            return Err(Error::Connectivity(format!(
                "support radius must be positive and finite, got {}",
                support_radius
            )));
        }
        if !(moment_bound > 0.0) || !(nondegeneracy > 0.0) {
            return Err(Error::Connectivity(
                "moment bound and nondegeneracy constant must be positive".to_string(),
            ));
        }
        let mut z_dependent = false;
        for v in theta.variables() {
            match v.role {
                VarRole::Z => z_dependent = true,
                VarRole::W => {}
                other => {
                    return Err(Error::Connectivity(format!(
                        "connectivity expression may only use z/w variables, found {}{}",
                        other.letter(),
                        v.index + 1
                    )))
                }
            }
            if v.index >= dim {
                return Err(Error::Connectivity(format!(
                    "variable index {} exceeds dimension {}",
                    v.index + 1,
                    dim
                )));
            }
        }
        Ok(Connectivity {
            dim,
            profile: Profile::Custom { theta, z_dependent },
            support_radius,
            moment_bound,
            nondegeneracy,
        })
    }

    pub(crate) fn from_profile(
        dim: usize,
        profile: Profile,
        support_radius: f64,
        moment_bound: f64,
        nondegeneracy: f64,
    ) -> Self {
        Connectivity {
            dim,
            profile,
            support_radius,
            moment_bound,
            nondegeneracy,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Support radius: `theta(z, .)` vanishes outside this ball.
    pub fn support_radius(&self) -> f64 {
        self.support_radius
    }

    /// Declared bound on `|w|^2 theta(z, w)`.
    pub fn moment_bound(&self) -> f64 {
        self.moment_bound
    }

    /// Declared lower bound on `int (w . xi)^2 theta(z, w) dw` over unit `xi`.
    pub fn nondegeneracy(&self) -> f64 {
        self.nondegeneracy
    }

    /// True when the profile actually reads its `z` argument; tensor
    /// assembly exploits independence to share one quadrature.
    pub fn z_dependent(&self) -> bool {
        match &self.profile {
            Profile::Custom { z_dependent, .. } => *z_dependent,
            _ => false,
        }
    }

    pub fn theta(&self, z: Point, w: Point) -> f64 {
        match &self.profile {
            Profile::IndicatorBall { scale } => half_indicator(dot(w, w), 1.0, *scale),
            Profile::Ellipsoid {
                shape_inv,
                amplitude,
                ..
            } => half_indicator(shape_inv.quadratic_form(w), 1.0, *amplitude),
            Profile::GaussianCutoff { sigma, radius } => {
                let r2 = dot(w, w);
                let g = (-r2 / (2.0 * sigma * sigma)).exp();
                half_indicator(r2, radius * radius, g)
            }
            Profile::Custom { theta, .. } => {
                theta.eval(&EvalScope::zw(&z[..self.dim], &w[..self.dim]))
            }
        }
    }

    /// min over directions and the origin point of the quadrature
    /// `int (w . xi)^2 theta(0, w) dw`; used to compute preset constants.
    fn directional_moment_min(&self, resolution: usize) -> f64 {
        let dirs: Vec<Point> = match self.dim {
            1 => vec![[1.0, 0.0]],
            _ => (0..8)
                .map(|k| {
                    let a = std::f64::consts::PI * k as f64 / 8.0;
                    [a.cos(), a.sin()]
                })
                .collect(),
        };
        let z = [0.0, 0.0];
        dirs.iter()
            .map(|xi| directional_moment(self, z, *xi, resolution))
            .fold(f64::MAX, f64::min)
    }
}

/// Midpoint quadrature of `int (w . xi)^2 theta(z, w) dw` over the support box.
pub(crate) fn directional_moment(
    conn: &Connectivity,
    z: Point,
    xi: Point,
    resolution: usize,
) -> f64 {
    let c = conn.support_radius();
    let h = 2.0 * c / resolution as f64;
    let mut total = 0.0;
    match conn.dim {
        1 => {
            for i in 0..resolution {
                let w = [-c + (i as f64 + 0.5) * h, 0.0];
                total += dot(w, xi) * dot(w, xi) * conn.theta(z, w) * h;
            }
        }
        _ => {
            for j in 0..resolution {
                let wy = -c + (j as f64 + 0.5) * h;
                let mut row = 0.0;
                for i in 0..resolution {
                    let w = [-c + (i as f64 + 0.5) * h, wy];
                    row += dot(w, xi) * dot(w, xi) * conn.theta(z, w);
                }
                total += row * h * h;
            }
        }
    }
    total
}

/// Ellipsoid profile normalised so the induced mobility tensor is exactly the
/// shape matrix `shape`: amplitude `2 / (C_d sqrt(det))` on the sublevel set
/// `<w, shape^-1 w> <= 1`, with `C_d = |B_1| / (d + 2)`.
pub fn ellipsoid_connectivity(dim: usize, shape: SmallMat) -> Result<Connectivity, Error> {
    if shape.dim != dim {
        return Err(Error::Connectivity(format!(
            "shape matrix dimension {} does not match spatial dimension {}",
            shape.dim, dim
        )));
    }
    if shape.symmetry_defect() > 1e-12 {
        return Err(Error::Connectivity(format!(
            "shape matrix must be symmetric; off-diagonal defect {}",
            shape.symmetry_defect()
        )));
    }
    let (lo, hi) = shape.sym_eigenvalues();
    if lo <= 0.0 {
        return Err(Error::Connectivity(format!(
            "shape matrix must be positive definite; smallest eigenvalue {}",
            lo
        )));
    }
    let det = shape.det();
    let c_d = ball_volume(dim, 1.0) / (dim as f64 + 2.0);
    let amplitude = 2.0 / (c_d * det.sqrt());
    let shape_inv = shape.inverse().expect("positive definite matrix inverts");
    Ok(Connectivity::from_profile(
        dim,
        Profile::Ellipsoid {
            shape,
            shape_inv,
            amplitude,
        },
        hi.sqrt(),
        amplitude * hi,
        2.0 * lo,
    ))
}

/// Edge weight between `x` and `y` at localisation scale `epsilon`,
/// `eps^-(d+2) theta((x+y)/2, (x-y)/eps)`. Plain Euclidean displacement;
/// graph assembly substitutes the minimum-image displacement on the torus.
pub fn scaled_edge_weight(conn: &Connectivity, epsilon: f64, x: Point, y: Point) -> f64 {
    let mid = [0.5 * (x[0] + y[0]), 0.5 * (x[1] + y[1])];
    let disp = [x[0] - y[0], x[1] - y[1]];
    scaled_edge_weight_disp(conn, epsilon, mid, disp)
}

pub(crate) fn scaled_edge_weight_disp(
    conn: &Connectivity,
    epsilon: f64,
    mid: Point,
    disp: Point,
) -> f64 {
    let w = [disp[0] / epsilon, disp[1] / epsilon];
    let prefactor = epsilon.powi(-(conn.dim as i32 + 2));
    prefactor * conn.theta(mid, w)
}

/// Sampling effort for `validate_connectivity`.
#[derive(Debug, Clone)]
pub struct SamplePlan {
    pub z_samples: usize,
    pub w_samples: usize,
    pub quadrature: usize,
    pub seed: u64,
    /// Box the `z` samples are drawn from, per-axis `[lo, hi]`.
    pub z_box: [[f64; 2]; 2],
}

impl Default for SamplePlan {
    fn default() -> Self {
        SamplePlan {
            z_samples: 16,
            w_samples: 512,
            quadrature: 512,
            seed: 0x7468_6574,
            z_box: [[0.0, 1.0], [0.0, 1.0]],
        }
    }
}

/// Check the structural assumptions on a profile by sampling: evenness in
/// `w`, continuity in `z` (reported as an empirical modulus), support
/// containment, the second-moment bound, and directional nondegeneracy.
pub fn validate_connectivity(conn: &Connectivity, plan: &SamplePlan) -> ValidationReport {
    let mut report = ValidationReport::new("connectivity");
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let c = conn.support_radius();
    let dim = conn.dim;

    let mut sample_point = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| -> Point {
        let mut p = [0.0; 2];
        for slot in p.iter_mut().take(dim) {
            *slot = rng.gen_range(lo..hi);
        }
        p
    };
    let zs: Vec<Point> = (0..plan.z_samples)
        .map(|_| {
            let mut p = [0.0; 2];
            for (a, slot) in p.iter_mut().enumerate().take(dim) {
                *slot = rng.gen_range(plan.z_box[a][0]..plan.z_box[a][1]);
            }
            p
        })
        .collect();

    // Evenness in w.
    let mut sym_defect: f64 = 0.0;
    let mut sup_theta: f64 = 0.0;
    let mut worst: (Point, Point) = ([0.0; 2], [0.0; 2]);
    for z in &zs {
        for _ in 0..plan.w_samples {
            let w = sample_point(&mut rng, -c, c);
            let a = conn.theta(*z, w);
            let b = conn.theta(*z, [-w[0], -w[1]]);
            sup_theta = sup_theta.max(a.abs()).max(b.abs());
            let d = (a - b).abs();
            if d > sym_defect {
                sym_defect = d;
                worst = (*z, w);
            }
        }
    }
    let sym_tol = 1e-10 * (1.0 + sup_theta);
    report.push(CheckResult::new(
        "symmetry_in_w",
        sym_defect <= sym_tol,
        sym_tol - sym_defect,
        format!(
            "max |theta(z,w) - theta(z,-w)| = {:.3e} at z {:?}, w {:?}",
            sym_defect,
            &worst.0[..dim],
            &worst.1[..dim]
        ),
    ));

    // Continuity in z: empirical modulus over nearby z pairs at shared w.
    const BINS: usize = 6;
    let z_span = (0..dim)
        .map(|a| plan.z_box[a][1] - plan.z_box[a][0])
        .fold(f64::MAX, f64::min);
    let mut omega = [0.0f64; BINS];
    for _ in 0..plan.z_samples * 8 {
        let z1 = {
            let mut p = [0.0; 2];
            for (a, slot) in p.iter_mut().enumerate().take(dim) {
                *slot = rng.gen_range(plan.z_box[a][0]..plan.z_box[a][1]);
            }
            p
        };
        let bin = rng.gen_range(0..BINS);
        let delta = z_span * 0.5 * (bin as f64 + 1.0) / BINS as f64;
        let mut z2 = z1;
        for slot in z2.iter_mut().take(dim) {
            *slot += rng.gen_range(-delta..delta) / (dim as f64).sqrt();
        }
        for _ in 0..16 {
            let w = sample_point(&mut rng, -c, c);
            let d = (conn.theta(z1, w) - conn.theta(z2, w)).abs();
            let dist = norm([z2[0] - z1[0], z2[1] - z1[1]]);
            for (b, slot) in omega.iter_mut().enumerate() {
                if dist <= z_span * 0.5 * (b as f64 + 1.0) / BINS as f64 {
                    *slot = slot.max(d);
                }
            }
        }
    }
    // enforce monotonicity of the cumulative table
    for b in 1..BINS {
        omega[b] = omega[b].max(omega[b - 1]);
    }
    let jumpy = sup_theta > 0.0 && omega[0] > 0.5 * sup_theta;
    let table = omega
        .iter()
        .enumerate()
        .map(|(b, o)| {
            format!(
                "omega({:.3}) = {:.4}",
                z_span * 0.5 * (b as f64 + 1.0) / BINS as f64,
                o
            )
        })
        .collect::<Vec<_>>()
        .join(", ");
    report.push(CheckResult::new(
        "z_continuity",
        !jumpy,
        if jumpy { -omega[0] } else { 0.0 },
        table,
    ));

    // Support containment: theta must vanish on a shell outside the ball.
    let mut overflow: f64 = 0.0;
    let mut overflow_w = [0.0; 2];
    for z in &zs {
        for _ in 0..plan.w_samples {
            // radius in (c, 2c], direction uniform on the sphere
            let r = c * (1.0 + rng.gen_range(1e-6..1.0f64));
            let dir: Point = match dim {
                1 => [if rng.gen_bool(0.5) { 1.0 } else { -1.0 }, 0.0],
                _ => {
                    let a = rng.gen_range(0.0..std::f64::consts::TAU);
                    [a.cos(), a.sin()]
                }
            };
            let w = [r * dir[0], r * dir[1]];
            let v = conn.theta(*z, w).abs();
            if v > overflow {
                overflow = v;
                overflow_w = w;
            }
        }
    }
    report.push(CheckResult::new(
        "support",
        overflow == 0.0,
        -overflow,
        if overflow == 0.0 {
            format!("theta vanishes on sampled shell (|w| in ({:.3}, {:.3}])", c, 2.0 * c)
        } else {
            format!(
                "theta = {:.3e} at |w| = {:.4} > support radius {:.4} (w {:?})",
                overflow,
                norm(overflow_w),
                c,
                &overflow_w[..dim]
            )
        },
    ));

    // Second-moment bound sup |w|^2 theta <= declared bound.
    let mut worst_moment: f64 = 0.0;
    for z in &zs {
        for _ in 0..plan.w_samples {
            let w = sample_point(&mut rng, -c, c);
            worst_moment = worst_moment.max(dot(w, w) * conn.theta(*z, w));
        }
    }
    let m_tol = 1e-9 * (1.0 + conn.moment_bound());
    report.push(CheckResult::new(
        "moment_bound",
        worst_moment <= conn.moment_bound() + m_tol,
        conn.moment_bound() - worst_moment,
        format!(
            "sup |w|^2 theta over samples = {:.6}, declared bound {:.6}",
            worst_moment,
            conn.moment_bound()
        ),
    ));

    // Directional nondegeneracy by quadrature; 2% slack absorbs the
    // midpoint-rule error on discontinuous profiles.
    let dirs: Vec<Point> = match dim {
        1 => vec![[1.0, 0.0]],
        _ => (0..8)
            .map(|k| {
                let a = std::f64::consts::PI * k as f64 / 8.0;
                [a.cos(), a.sin()]
            })
            .collect(),
    };
    let mut min_moment = f64::MAX;
    let mut min_at = ([0.0; 2], [0.0; 2]);
    for z in &zs {
        for xi in &dirs {
            let v = directional_moment(conn, *z, *xi, plan.quadrature);
            if v < min_moment {
                min_moment = v;
                min_at = (*z, *xi);
            }
        }
    }
    let nd_tol = 0.02 * conn.nondegeneracy();
    report.push(CheckResult::new(
        "nondegeneracy",
        min_moment >= conn.nondegeneracy() - nd_tol,
        min_moment - conn.nondegeneracy(),
        format!(
            "min directional moment {:.6} (declared {:.6}) at z {:?}, xi {:?}",
            min_moment,
            conn.nondegeneracy(),
            &min_at.0[..dim],
            &min_at.1[..dim]
        ),
    ));

    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::parse_expression;

    #[test]
    fn indicator_ball_weight_matches_hand_values() {
        let conn = Connectivity::indicator_ball(1, 3.0).unwrap();
        // eps = 1: |x - y| = 0.5 inside the ball
        let v = scaled_edge_weight(&conn, 1.0, [0.0, 0.0], [0.5, 0.0]);
        assert_eq!(v, 3.0);
        // eps = 0.5: prefactor 0.5^-3 = 8
        let v = scaled_edge_weight(&conn, 0.5, [0.0, 0.0], [0.25, 0.0]);
        assert_eq!(v, 24.0);
        // outside the scaled support
        let v = scaled_edge_weight(&conn, 1.0, [0.0, 0.0], [2.0, 0.0]);
        assert_eq!(v, 0.0);
    }

    #[test]
    fn boundary_of_indicator_ball_is_half_weighted() {
        let conn = Connectivity::indicator_ball(1, 3.0).unwrap();
        assert_eq!(conn.theta([0.0; 2], [1.0, 0.0]), 1.5);
        assert_eq!(conn.theta([0.0; 2], [1.0 - 1e-9, 0.0]), 3.0);
        assert_eq!(conn.theta([0.0; 2], [1.0 + 1e-9, 0.0]), 0.0);
    }

    #[test]
    fn indicator_ball_constants() {
        let c1 = Connectivity::indicator_ball(1, 3.0).unwrap();
        assert!((c1.nondegeneracy() - 2.0).abs() < 1e-14);
        assert_eq!(c1.moment_bound(), 3.0);
        let c2 = Connectivity::indicator_ball(2, 1.0).unwrap();
        assert!((c2.nondegeneracy() - std::f64::consts::PI / 4.0).abs() < 1e-14);
    }

    #[test]
    fn ellipsoid_reduces_to_ball_in_1d() {
        let conn = ellipsoid_connectivity(1, SmallMat::scalar(1, 1.0)).unwrap();
        // amplitude 2 / (C_1 * 1) with C_1 = 2/3
        assert!((conn.theta([0.0; 2], [0.5, 0.0]) - 3.0).abs() < 1e-14);
        assert!((conn.support_radius() - 1.0).abs() < 1e-14);
        assert!((conn.nondegeneracy() - 2.0).abs() < 1e-14);
    }

    #[test]
    fn ellipsoid_rejects_indefinite_shape() {
        let m = SmallMat {
            dim: 2,
            a: [[1.0, 2.0], [2.0, 1.0]],
        };
        assert!(ellipsoid_connectivity(2, m).is_err());
    }

    #[test]
    fn validate_accepts_presets() {
        let conn = Connectivity::indicator_ball(1, 3.0).unwrap();
        let report = validate_connectivity(&conn, &SamplePlan::default());
        assert!(report.passed(), "{}", report);
        let conn = ellipsoid_connectivity(2, SmallMat::diagonal(2, &[2.0, 1.0])).unwrap();
        let report = validate_connectivity(&conn, &SamplePlan::default());
        assert!(report.passed(), "{}", report);
    }

    #[test]
    fn validate_flags_asymmetric_profile() {
        let theta = parse_expression("indicator(w1)").unwrap();
        let conn = Connectivity::from_expression(1, theta, 1.0, 1.0, 0.3).unwrap();
        let report = validate_connectivity(&conn, &SamplePlan::default());
        assert!(!report.check("symmetry_in_w").unwrap().passed);
    }

    #[test]
    fn validate_flags_support_overflow() {
        // support actually extends to |w| = 1, declared radius only 0.5
        let theta = parse_expression("3*indicator(1 - abs(w1))").unwrap();
        let conn = Connectivity::from_expression(1, theta, 0.5, 3.0, 0.25).unwrap();
        let report = validate_connectivity(&conn, &SamplePlan::default());
        assert!(!report.check("support").unwrap().passed);
        assert!(report.check("support").unwrap().margin < 0.0);
    }

    #[test]
    fn validate_flags_degenerate_direction() {
        // mass concentrated on the w1 axis: no spread along w2
        let theta = parse_expression("indicator(0.05 - abs(w2))*indicator(1 - abs(w1))").unwrap();
        let conn = Connectivity::from_expression(2, theta, 1.5, 1.5, 0.5).unwrap();
        let report = validate_connectivity(&conn, &SamplePlan::default());
        assert!(!report.check("nondegeneracy").unwrap().passed);
    }

    #[test]
    fn validate_flags_moment_violation() {
        let theta = parse_expression("5*indicator(1 - abs(w1))").unwrap();
        let conn = Connectivity::from_expression(1, theta, 1.0, 2.0, 3.0).unwrap();
        let report = validate_connectivity(&conn, &SamplePlan::default());
        assert!(!report.check("moment_bound").unwrap().passed);
    }
}
