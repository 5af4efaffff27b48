//! Tiny dense linear algebra for spatial dimensions 1 and 2.
//!
//! Points are stored as `[f64; 2]` with the unused component pinned to zero
//! in one dimension; matrices are 2x2 arrays tagged with the active
//! dimension. Everything needed here (symmetric eigenvalues, inverses,
//! Frobenius norms) has a closed form at this size, so no external linear
//! algebra dependency is warranted.

/// Spatial point or displacement, `[x1, x2]`; `x2 = 0` in one dimension.
pub type Point = [f64; 2];

pub fn dot(a: Point, b: Point) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

pub fn norm(a: Point) -> f64 {
    dot(a, a).sqrt()
}

pub fn sub(a: Point, b: Point) -> Point {
    [a[0] - b[0], a[1] - b[1]]
}

pub fn scale(a: Point, s: f64) -> Point {
    [a[0] * s, a[1] * s]
}

/// Square matrix of side `dim` (1 or 2), row-major in a fixed 2x2 block.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmallMat {
    pub dim: usize,
    pub a: [[f64; 2]; 2],
}

impl SmallMat {
    pub fn zero(dim: usize) -> Self {
        SmallMat {
            dim,
            a: [[0.0; 2]; 2],
        }
    }

    pub fn identity(dim: usize) -> Self {
        let mut m = Self::zero(dim);
        for i in 0..dim {
            m.a[i][i] = 1.0;
        }
        m
    }

    pub fn scalar(dim: usize, s: f64) -> Self {
        let mut m = Self::zero(dim);
        for i in 0..dim {
            m.a[i][i] = s;
        }
        m
    }

    pub fn diagonal(dim: usize, d: &[f64]) -> Self {
        let mut m = Self::zero(dim);
        for i in 0..dim {
            m.a[i][i] = d[i];
        }
        m
    }

    /// Outer product `w ⊗ w`.
    pub fn outer(dim: usize, w: Point) -> Self {
        let mut m = Self::zero(dim);
        for i in 0..dim {
            for j in 0..dim {
                m.a[i][j] = w[i] * w[j];
            }
        }
        m
    }

    pub fn add_scaled(&mut self, other: &SmallMat, s: f64) {
        for i in 0..self.dim {
            for j in 0..self.dim {
                self.a[i][j] += s * other.a[i][j];
            }
        }
    }

    pub fn scale(&self, s: f64) -> SmallMat {
        let mut m = *self;
        for i in 0..self.dim {
            for j in 0..self.dim {
                m.a[i][j] *= s;
            }
        }
        m
    }

    pub fn mul_vec(&self, v: Point) -> Point {
        let mut out = [0.0; 2];
        for i in 0..self.dim {
            for j in 0..self.dim {
                out[i] += self.a[i][j] * v[j];
            }
        }
        out
    }

    /// `v^T A v`.
    pub fn quadratic_form(&self, v: Point) -> f64 {
        dot(v, self.mul_vec(v))
    }

    pub fn det(&self) -> f64 {
        match self.dim {
            1 => self.a[0][0],
            _ => self.a[0][0] * self.a[1][1] - self.a[0][1] * self.a[1][0],
        }
    }

    pub fn mat_mul(&self, other: &SmallMat) -> SmallMat {
        let mut m = SmallMat::zero(self.dim);
        for i in 0..self.dim {
            for j in 0..self.dim {
                for k in 0..self.dim {
                    m.a[i][j] += self.a[i][k] * other.a[k][j];
                }
            }
        }
        m
    }

    pub fn transpose(&self) -> SmallMat {
        let mut m = *self;
        if self.dim == 2 {
            m.a[0][1] = self.a[1][0];
            m.a[1][0] = self.a[0][1];
        }
        m
    }

    pub fn frobenius_norm(&self) -> f64 {
        let mut s = 0.0;
        for i in 0..self.dim {
            for j in 0..self.dim {
                s += self.a[i][j] * self.a[i][j];
            }
        }
        s.sqrt()
    }

    pub fn sub(&self, other: &SmallMat) -> SmallMat {
        let mut m = *self;
        for i in 0..self.dim {
            for j in 0..self.dim {
                m.a[i][j] -= other.a[i][j];
            }
        }
        m
    }

    pub fn symmetry_defect(&self) -> f64 {
        if self.dim < 2 {
            0.0
        } else {
            (self.a[0][1] - self.a[1][0]).abs()
        }
    }

    /// Eigenvalues of the symmetric part, ascending. Closed form.
    pub fn sym_eigenvalues(&self) -> (f64, f64) {
        match self.dim {
            1 => (self.a[0][0], self.a[0][0]),
            _ => {
                let p = self.a[0][0];
                let q = self.a[1][1];
                let r = 0.5 * (self.a[0][1] + self.a[1][0]);
                let mean = 0.5 * (p + q);
                let disc = (0.25 * (p - q) * (p - q) + r * r).sqrt();
                (mean - disc, mean + disc)
            }
        }
    }

    /// Inverse; `None` when the determinant vanishes to machine precision.
    pub fn inverse(&self) -> Option<SmallMat> {
        let d = self.det();
        if d.abs() < 1e-300 {
            return None;
        }
        let mut m = Self::zero(self.dim);
        match self.dim {
            1 => m.a[0][0] = 1.0 / d,
            _ => {
                m.a[0][0] = self.a[1][1] / d;
                m.a[1][1] = self.a[0][0] / d;
                m.a[0][1] = -self.a[0][1] / d;
                m.a[1][0] = -self.a[1][0] / d;
            }
        }
        Some(m)
    }
}
