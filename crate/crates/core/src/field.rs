//! Uniform grid on (0,1) with homogeneous Dirichlet boundary, ℝ³-valued
//! nodal fields and the discrete operators acting on them.
//!
//! Fields live on the interior nodes `x_i = i·h`, `i = 1..=n`. The boundary
//! nodes `x_0 = 0` and `x_{n+1} = 1` are ghost zeros and are never stored.
//! Gradients live on the `n + 1` edges between consecutive nodes (boundary
//! edges included), and the 3-point Laplacian is the divergence of that edge
//! gradient. The pairing makes summation by parts exact:
//!
//! ```text
//! (Δf, g) = −(∇f, ∇g)      for every pair of grid fields
//! ```
//!
//! All inner products use the rectangle rule `h·Σ`.

use serde::{Deserialize, Serialize};

use crate::error::{LlbError, Result};

/// A point of ℝ³.
pub type Vec3 = [f64; 3];

#[inline]
pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn cross3(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
fn axpy3(a: f64, x: Vec3, y: Vec3) -> Vec3 {
    [a * x[0] + y[0], a * x[1] + y[1], a * x[2] + y[2]]
}

/// Uniform grid of `n_interior` interior nodes on (0,1).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid1D {
    n_interior: usize,
    spacing: f64,
}

impl Grid1D {
    pub const MIN_NODES: usize = 3;

    /// Builds the grid; rejects fewer than three interior nodes.
    pub fn new(n_interior: usize) -> Result<Self> {
        if n_interior < Self::MIN_NODES {
            return Err(LlbError::invalid(format!(
                "grid needs at least {} interior nodes, got {n_interior}",
                Self::MIN_NODES
            )));
        }
        Ok(Grid1D {
            n_interior,
            spacing: 1.0 / (n_interior as f64 + 1.0),
        })
    }

    pub fn n_interior(&self) -> usize {
        self.n_interior
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    /// Coordinate of interior node `i` (0-based storage index, so `x = (i+1)·h`).
    pub fn node(&self, i: usize) -> f64 {
        (i as f64 + 1.0) * self.spacing
    }

    pub fn nodes(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.n_interior).map(move |i| self.node(i))
    }

    /// Same grid with half the spacing: `2(n+1) − 1` interior nodes.
    pub fn refined(&self) -> Self {
        Grid1D::new(2 * (self.n_interior + 1) - 1).expect("refinement only adds nodes")
    }

    fn ensure_same(&self, other: &Grid1D) -> Result<()> {
        if self.n_interior != other.n_interior {
            return Err(LlbError::GridMismatch {
                left: self.n_interior,
                right: other.n_interior,
            });
        }
        Ok(())
    }
}

/// Norms of a field at one instant.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EnergyReport {
    pub l2: f64,
    pub h1_semi: f64,
    pub h2_semi: f64,
    pub linf: f64,
    pub time: f64,
}

impl EnergyReport {
    /// Full H¹ norm `sqrt(‖u‖² + ‖∇u‖²)`.
    pub fn h1(&self) -> f64 {
        self.l2.hypot(self.h1_semi)
    }
}

/// ℝ³-valued field on the interior nodes of a [`Grid1D`].
#[derive(Debug, Clone, PartialEq)]
pub struct VectorField {
    grid: Grid1D,
    values: Vec<Vec3>,
}

impl VectorField {
    pub fn zeros(grid: Grid1D) -> Self {
        VectorField {
            grid,
            values: vec![[0.0; 3]; grid.n_interior],
        }
    }

    pub fn from_values(grid: Grid1D, values: Vec<Vec3>) -> Result<Self> {
        if values.len() != grid.n_interior {
            return Err(LlbError::DimensionMismatch(format!(
                "{} nodal values for a grid of {} interior nodes",
                values.len(),
                grid.n_interior
            )));
        }
        Ok(VectorField { grid, values })
    }

    /// Samples `f` at every interior node.
    pub fn from_fn(grid: Grid1D, f: impl Fn(f64) -> Vec3) -> Self {
        let values = grid.nodes().map(f).collect();
        VectorField { grid, values }
    }

    pub fn grid(&self) -> &Grid1D {
        &self.grid
    }

    pub fn values(&self) -> &[Vec3] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Vec3] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<Vec3> {
        self.values
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().flatten().all(|v| v.is_finite())
    }

    pub fn scaled(&self, a: f64) -> VectorField {
        self.map(|v| [a * v[0], a * v[1], a * v[2]])
    }

    pub fn map(&self, f: impl Fn(Vec3) -> Vec3) -> VectorField {
        VectorField {
            grid: self.grid,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Pointwise combination of two fields on the same grid.
    pub fn zip_with(&self, other: &VectorField, f: impl Fn(Vec3, Vec3) -> Vec3) -> Result<VectorField> {
        self.grid.ensure_same(&other.grid)?;
        Ok(VectorField {
            grid: self.grid,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &VectorField) -> Result<VectorField> {
        self.zip_with(other, |a, b| [a[0] + b[0], a[1] + b[1], a[2] + b[2]])
    }

    pub fn sub(&self, other: &VectorField) -> Result<VectorField> {
        self.zip_with(other, |a, b| [a[0] - b[0], a[1] - b[1], a[2] - b[2]])
    }

    /// `self + a·x`.
    pub fn axpy(&self, a: f64, x: &VectorField) -> Result<VectorField> {
        self.zip_with(x, |s, x| axpy3(a, x, s))
    }

    /// In-place `self += a·x`.
    pub fn add_scaled(&mut self, a: f64, x: &VectorField) -> Result<()> {
        self.grid.ensure_same(&x.grid)?;
        for (s, &x) in self.values.iter_mut().zip(&x.values) {
            *s = axpy3(a, x, *s);
        }
        Ok(())
    }

    /// Three-point Laplacian with zero ghost values at both ends.
    pub fn laplacian(&self) -> VectorField {
        let n = self.grid.n_interior;
        let inv_h2 = 1.0 / (self.grid.spacing * self.grid.spacing);
        let zero = [0.0; 3];
        let values = (0..n)
            .map(|i| {
                let left = if i == 0 { zero } else { self.values[i - 1] };
                let right = if i + 1 == n { zero } else { self.values[i + 1] };
                let mid = self.values[i];
                [
                    (right[0] - 2.0 * mid[0] + left[0]) * inv_h2,
                    (right[1] - 2.0 * mid[1] + left[1]) * inv_h2,
                    (right[2] - 2.0 * mid[2] + left[2]) * inv_h2,
                ]
            })
            .collect();
        VectorField {
            grid: self.grid,
            values,
        }
    }

    /// Forward differences on all `n + 1` edges, ghost nodes being zero.
    pub fn gradient(&self) -> EdgeField {
        let n = self.grid.n_interior;
        let inv_h = 1.0 / self.grid.spacing;
        let zero = [0.0; 3];
        let values = (0..=n)
            .map(|e| {
                let left = if e == 0 { zero } else { self.values[e - 1] };
                let right = if e == n { zero } else { self.values[e] };
                [
                    (right[0] - left[0]) * inv_h,
                    (right[1] - left[1]) * inv_h,
                    (right[2] - left[2]) * inv_h,
                ]
            })
            .collect();
        EdgeField {
            grid: self.grid,
            values,
        }
    }

    /// Pointwise cross product `self × other`.
    pub fn cross(&self, other: &VectorField) -> Result<VectorField> {
        self.zip_with(other, cross3)
    }

    /// L² inner product `h·Σ f_i·g_i`.
    pub fn inner(&self, other: &VectorField) -> Result<f64> {
        self.grid.ensure_same(&other.grid)?;
        Ok(self.inner_unchecked(other))
    }

    pub(crate) fn inner_unchecked(&self, other: &VectorField) -> f64 {
        self.grid.spacing
            * self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| dot(a, b))
                .sum::<f64>()
    }

    pub fn l2_norm(&self) -> f64 {
        self.inner_unchecked(self).sqrt()
    }

    /// Largest nodal Euclidean norm.
    pub fn linf(&self) -> f64 {
        self.values
            .iter()
            .map(|&v| dot(v, v).sqrt())
            .fold(0.0, f64::max)
    }

    pub fn norms(&self) -> EnergyReport {
        self.norms_at(0.0)
    }

    pub fn norms_at(&self, time: f64) -> EnergyReport {
        EnergyReport {
            l2: self.l2_norm(),
            h1_semi: self.gradient().l2_norm(),
            h2_semi: self.laplacian().l2_norm(),
            linf: self.linf(),
            time,
        }
    }
}

/// Free-function form of [`VectorField::inner`].
pub fn inner_l2(f: &VectorField, g: &VectorField) -> Result<f64> {
    f.inner(g)
}

/// Free-function form of [`VectorField::cross`].
pub fn cross(f: &VectorField, g: &VectorField) -> Result<VectorField> {
    f.cross(g)
}

/// Edge-valued field: one triple per edge, `n + 1` edges.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeField {
    grid: Grid1D,
    values: Vec<Vec3>,
}

impl EdgeField {
    pub fn grid(&self) -> &Grid1D {
        &self.grid
    }

    pub fn values(&self) -> &[Vec3] {
        &self.values
    }

    /// Rectangle-rule inner product over edges.
    pub fn inner(&self, other: &EdgeField) -> Result<f64> {
        self.grid.ensure_same(&other.grid)?;
        Ok(self.grid.spacing
            * self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| dot(a, b))
                .sum::<f64>())
    }

    pub fn l2_norm(&self) -> f64 {
        (self.grid.spacing * self.values.iter().map(|&v| dot(v, v)).sum::<f64>()).sqrt()
    }
}

/// Factored `(I − c·Δ_h)` for repeated solves with a fixed coefficient.
///
/// Thomas elimination without pivoting; the matrix is strictly diagonally
/// dominant for `c ≥ 0`.
#[derive(Debug, Clone)]
pub struct Helmholtz {
    grid: Grid1D,
    off: f64,
    // Modified super-diagonal and inverse pivots from the forward sweep.
    upper: Vec<f64>,
    inv_pivot: Vec<f64>,
}

impl Helmholtz {
    pub fn new(grid: Grid1D, c: f64) -> Result<Self> {
        if !(c >= 0.0) || !c.is_finite() {
            return Err(LlbError::invalid(format!(
                "Helmholtz coefficient must be finite and nonnegative, got {c}"
            )));
        }
        let n = grid.n_interior;
        let r = c / (grid.spacing * grid.spacing);
        let diag = 1.0 + 2.0 * r;
        let off = -r;
        let mut upper = vec![0.0; n];
        let mut inv_pivot = vec![0.0; n];
        let mut prev_upper = 0.0;
        for i in 0..n {
            let pivot = diag - off * prev_upper;
            inv_pivot[i] = 1.0 / pivot;
            upper[i] = off * inv_pivot[i];
            prev_upper = upper[i];
        }
        Ok(Helmholtz {
            grid,
            off,
            upper,
            inv_pivot,
        })
    }

    pub fn solve(&self, rhs: &VectorField) -> Result<VectorField> {
        self.grid.ensure_same(&rhs.grid)?;
        let n = self.grid.n_interior;
        let mut w = vec![[0.0; 3]; n];
        let mut prev = [0.0; 3];
        for ((wi, b), &pivot) in w.iter_mut().zip(&rhs.values).zip(&self.inv_pivot) {
            for d in 0..3 {
                wi[d] = (b[d] - self.off * prev[d]) * pivot;
            }
            prev = *wi;
        }
        for i in (0..n.saturating_sub(1)).rev() {
            let next = w[i + 1];
            for d in 0..3 {
                w[i][d] -= self.upper[i] * next[d];
            }
        }
        Ok(VectorField {
            grid: self.grid,
            values: w,
        })
    }
}

/// Solves `(I − c·Δ_h) w = rhs` componentwise.
pub fn helmholtz_solve(rhs: &VectorField, c: f64) -> Result<VectorField> {
    Helmholtz::new(rhs.grid, c)?.solve(rhs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn e1(f: impl Fn(f64) -> f64) -> impl Fn(f64) -> Vec3 {
        move |x| [f(x), 0.0, 0.0]
    }

    #[test]
    fn grid_spacing() {
        assert_eq!(Grid1D::new(3).unwrap().spacing(), 0.25);
        assert_eq!(Grid1D::new(255).unwrap().spacing(), 1.0 / 256.0);
        assert!(Grid1D::new(2).is_err());
        let g = Grid1D::new(127).unwrap();
        assert!((g.spacing() * 128.0 - 1.0).abs() <= f64::EPSILON);
        assert_eq!(g.refined().n_interior(), 255);
    }

    #[test]
    fn laplacian_exact_on_quadratic() {
        let g = Grid1D::new(31).unwrap();
        let f = VectorField::from_fn(g, e1(|x| x * (1.0 - x)));
        for v in f.laplacian().values() {
            assert!((v[0] + 2.0).abs() < 1e-9, "{}", v[0]);
            assert_eq!(v[1], 0.0);
        }
        let z = VectorField::zeros(g).laplacian();
        assert!(z.values().iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn laplacian_of_sine_within_truncation_bound() {
        let g = Grid1D::new(255).unwrap();
        let h = g.spacing();
        let f = VectorField::from_fn(g, e1(|x| (PI * x).sin()));
        let lap = f.laplacian();
        let bound = PI.powi(4) * h * h / 12.0 * 1.01;
        for (x, v) in g.nodes().zip(lap.values()) {
            let err = (v[0] + PI * PI * (PI * x).sin()).abs();
            assert!(err <= bound, "err {err} > {bound}");
        }
    }

    #[test]
    fn gradient_on_linear_profile() {
        let g = Grid1D::new(15).unwrap();
        let f = VectorField::from_fn(g, e1(|x| x));
        let grad = f.gradient();
        assert_eq!(grad.values().len(), 16);
        // Right boundary edge sees the ghost zero; every other edge is exact.
        for v in &grad.values()[..15] {
            assert!((v[0] - 1.0).abs() < 1e-12);
        }
        assert!(VectorField::zeros(g).gradient().values().iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn cross_of_basis_vectors() {
        let g = Grid1D::new(7).unwrap();
        let a = VectorField::from_fn(g, |_| [1.0, 0.0, 0.0]);
        let b = VectorField::from_fn(g, |_| [0.0, 1.0, 0.0]);
        for v in a.cross(&b).unwrap().values() {
            assert_eq!(*v, [0.0, 0.0, 1.0]);
        }
        assert!(a.cross(&a).unwrap().values().iter().flatten().all(|&v| v == 0.0));
        let other = VectorField::zeros(Grid1D::new(8).unwrap());
        assert!(matches!(a.cross(&other), Err(LlbError::GridMismatch { .. })));
    }

    #[test]
    fn inner_normalization() {
        let g = Grid1D::new(255).unwrap();
        let f = VectorField::from_fn(g, e1(|x| 2f64.sqrt() * (PI * x).sin()));
        // Sine modes are discretely orthonormal under the rectangle rule.
        assert!((f.inner(&f).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(f.inner(&VectorField::zeros(g)).unwrap(), 0.0);
    }

    #[test]
    fn norms_of_first_eigenfunction() {
        let g = Grid1D::new(255).unwrap();
        let h = g.spacing();
        let f = VectorField::from_fn(g, e1(|x| 2f64.sqrt() * (PI * x).sin()));
        let r = f.norms();
        assert!((r.l2 - 1.0).abs() < 1e-12);
        assert!((r.h1_semi - PI).abs() < 10.0 * h * h);
        assert!((r.h2_semi - PI * PI).abs() < 10.0 * h * h);
        assert!((r.linf - 2f64.sqrt()).abs() < 1e-4);
        assert_eq!(VectorField::zeros(g).norms(), EnergyReport::default());
    }

    #[test]
    fn helmholtz_identity_and_eigenvector() {
        let g = Grid1D::new(127).unwrap();
        let h = g.spacing();
        let rhs = VectorField::from_fn(g, |x| [x, x * x, 1.0]);
        assert_eq!(helmholtz_solve(&rhs, 0.0).unwrap(), rhs);
        let c = 0.37;
        let lam_h = (2.0 - 2.0 * (PI * h).cos()) / (h * h);
        let rhs = VectorField::from_fn(g, e1(|x| (1.0 + c * lam_h) * (PI * x).sin()));
        let w = helmholtz_solve(&rhs, c).unwrap();
        for (x, v) in g.nodes().zip(w.values()) {
            assert!((v[0] - (PI * x).sin()).abs() < 1e-10);
        }
        assert!(helmholtz_solve(&rhs, -1.0).is_err());
    }
}
