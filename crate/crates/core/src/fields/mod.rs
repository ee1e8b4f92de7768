//! Nodal fields on a uniform grid over the unit square.
//!
//! Values are stored row-major with the y index outer, so node `(i, j)` sits
//! at `(i/n, j/n)` and lives at offset `j * (n + 1) + i`.

mod elliptic;
mod ops;

pub use elliptic::{helmholtz_inverse, laplacian, poisson_solve, sine_coefficient};
pub use ops::{perp_grad, sample_at};

use crate::error::{input, parameter, Result};

/// Uniform square grid with `n` cells per side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Grid {
    n: usize,
}

impl Grid {
    pub fn new(n: usize) -> Result<Self> {
        if n < 4 {
            return parameter(format!("grid needs at least 4 cells per side, got {n}"));
        }
        if (1.0 / n as f64) * n as f64 != 1.0 {
            return parameter(format!("spacing 1/{n} is not exactly representable"));
        }
        Ok(Self { n })
    }

    /// Cells per side.
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn h(&self) -> f64 {
        1.0 / self.n as f64
    }

    /// Nodes per side (`n + 1`).
    pub fn side(&self) -> usize {
        self.n + 1
    }

    /// Total node count.
    pub fn len(&self) -> usize {
        self.side() * self.side()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize) -> usize {
        j * (self.n + 1) + i
    }

    /// Coordinate of node index `i` along either axis.
    #[inline]
    pub fn coord(&self, i: usize) -> f64 {
        i as f64 / self.n as f64
    }

    #[inline]
    pub fn is_boundary(&self, i: usize, j: usize) -> bool {
        i == 0 || j == 0 || i == self.n || j == self.n
    }

    /// Trapezoid quadrature weight of node `(i, j)`, normalised so that the
    /// weights sum to exactly one over the unit square.
    #[inline]
    pub fn quadrature_weight(&self, i: usize, j: usize) -> f64 {
        let edge = |k: usize| if k == 0 || k == self.n { 0.5 } else { 1.0 };
        let h = self.h();
        edge(i) * edge(j) * h * h
    }

    /// Whether every node of `coarse` coincides with a node of `self`.
    pub fn refines(&self, coarse: &Grid) -> bool {
        self.n % coarse.n == 0
    }
}

/// Boundary condition carried by a scalar field.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Bc {
    /// Exactly zero on every boundary node.
    DirichletZero,
    /// No constraint on boundary values.
    Free,
}

impl Bc {
    pub fn tag(self) -> u32 {
        match self {
            Bc::DirichletZero => 0,
            Bc::Free => 1,
        }
    }

    pub fn from_tag(tag: u32) -> Option<Self> {
        match tag {
            0 => Some(Bc::DirichletZero),
            1 => Some(Bc::Free),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    grid: Grid,
    values: Vec<f64>,
    bc: Bc,
}

impl ScalarField {
    pub fn zeros(grid: Grid, bc: Bc) -> Self {
        Self {
            grid,
            values: vec![0.0; grid.len()],
            bc,
        }
    }

    /// Samples `f(x, y)` at every node. Boundary nodes are zeroed for
    /// [`Bc::DirichletZero`].
    pub fn from_fn(grid: Grid, bc: Bc, f: impl Fn(f64, f64) -> f64) -> Self {
        let mut values = Vec::with_capacity(grid.len());
        for j in 0..grid.side() {
            let y = grid.coord(j);
            for i in 0..grid.side() {
                let v = if bc == Bc::DirichletZero && grid.is_boundary(i, j) {
                    0.0
                } else {
                    f(grid.coord(i), y)
                };
                values.push(v);
            }
        }
        Self { grid, values, bc }
    }

    /// Wraps raw nodal values, validating length, finiteness and the
    /// boundary condition.
    pub fn from_values(grid: Grid, bc: Bc, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return input(format!(
                "expected {} nodal values for n = {}, got {}",
                grid.len(),
                grid.n(),
                values.len()
            ));
        }
        let field = Self { grid, values, bc };
        field.check_finite()?;
        if bc == Bc::DirichletZero {
            for j in 0..grid.side() {
                for i in 0..grid.side() {
                    if grid.is_boundary(i, j) && field.at(i, j) != 0.0 {
                        return input(format!("DirichletZero field has nonzero boundary value at ({i}, {j})"));
                    }
                }
            }
        }
        Ok(field)
    }

    pub(crate) fn from_raw(grid: Grid, bc: Bc, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), grid.len());
        Self { grid, values, bc }
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn bc(&self) -> Bc {
        self.bc
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub(crate) fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[self.grid.index(i, j)]
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.values.iter().position(|v| !v.is_finite()) {
            Some(k) => input(format!("non-finite value at node offset {k}")),
            None => Ok(()),
        }
    }

    pub fn same_grid(&self, other: &ScalarField) -> Result<()> {
        if self.grid != other.grid {
            return input(format!(
                "grid mismatch: n = {} vs n = {}",
                self.grid.n(),
                other.grid.n()
            ));
        }
        Ok(())
    }

    /// Relabels the boundary condition, zeroing boundary nodes when switching
    /// to [`Bc::DirichletZero`].
    pub fn with_bc(mut self, bc: Bc) -> Self {
        if bc == Bc::DirichletZero {
            let g = self.grid;
            for j in 0..g.side() {
                for i in 0..g.side() {
                    if g.is_boundary(i, j) {
                        self.values[g.index(i, j)] = 0.0;
                    }
                }
            }
        }
        self.bc = bc;
        self
    }

    /// `self += a * other`, keeping `self`'s boundary condition.
    pub fn add_scaled(&mut self, a: f64, other: &ScalarField) {
        debug_assert_eq!(self.grid, other.grid);
        for (s, o) in self.values.iter_mut().zip(&other.values) {
            *s += a * o;
        }
    }

    pub fn scaled(&self, a: f64) -> ScalarField {
        Self {
            grid: self.grid,
            values: self.values.iter().map(|v| a * v).collect(),
            bc: self.bc,
        }
    }

    /// Trapezoid-rule integral over the unit square.
    pub fn integral(&self) -> f64 {
        let g = self.grid;
        let mut sum = 0.0;
        for j in 0..g.side() {
            for i in 0..g.side() {
                sum += g.quadrature_weight(i, j) * self.at(i, j);
            }
        }
        sum
    }

    /// Trapezoid-rule `∫ self · other`.
    pub fn inner(&self, other: &ScalarField) -> f64 {
        let g = self.grid;
        let mut sum = 0.0;
        for j in 0..g.side() {
            for i in 0..g.side() {
                let k = g.index(i, j);
                sum += g.quadrature_weight(i, j) * self.values[k] * other.values[k];
            }
        }
        sum
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    /// Nodal subsampling onto a coarser grid whose nodes are a subset of
    /// this grid's nodes.
    pub fn restrict(&self, coarse: Grid) -> Result<ScalarField> {
        if !self.grid.refines(&coarse) {
            return input(format!(
                "fine n = {} is not a multiple of coarse n = {}",
                self.grid.n(),
                coarse.n()
            ));
        }
        let ratio = self.grid.n() / coarse.n();
        let mut values = Vec::with_capacity(coarse.len());
        for j in 0..coarse.side() {
            for i in 0..coarse.side() {
                values.push(self.at(i * ratio, j * ratio));
            }
        }
        Ok(Self::from_raw(coarse, self.bc, values))
    }
}

/// Smooths a fine vorticity field with `(I − Δ/k²)⁻¹`, `k` the coarse cell
/// count, applied to its stream function, and restricts the result to the
/// coarse grid. Returns the coarse stream function.
pub fn coarse_grain_stream(fine_omega: &ScalarField, coarse: Grid) -> Result<ScalarField> {
    let psi = poisson_solve(fine_omega)?;
    let smooth = helmholtz_inverse(&psi, coarse.n() as f64)?;
    smooth.restrict(coarse)
}

/// Coarse vorticity whose stream function is exactly
/// [`coarse_grain_stream`]: the coarse 5-point Laplacian of it, zero on walls.
pub fn coarse_grain_vorticity(fine_omega: &ScalarField, coarse: Grid) -> Result<ScalarField> {
    Ok(laplacian(&coarse_grain_stream(fine_omega, coarse)?).with_bc(Bc::Free))
}

/// Coarse-grained velocity `∇⊥H(Δ⁻¹ω)` on the coarse grid.
pub fn coarse_grain_velocity(fine_omega: &ScalarField, coarse: Grid) -> Result<VectorField> {
    perp_grad(&coarse_grain_stream(fine_omega, coarse)?)
}

/// Velocity `∇⊥Δ⁻¹ω` of a vorticity field.
pub fn velocity(omega: &ScalarField) -> Result<VectorField> {
    perp_grad(&poisson_solve(omega)?)
}

/// Pair of scalar components on one grid.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorField {
    pub x: ScalarField,
    pub y: ScalarField,
}

impl VectorField {
    pub fn new(x: ScalarField, y: ScalarField) -> Result<Self> {
        x.same_grid(&y)?;
        Ok(Self { x, y })
    }

    pub fn grid(&self) -> Grid {
        self.x.grid()
    }

    /// Largest pointwise speed.
    pub fn max_speed(&self) -> f64 {
        self.x
            .values()
            .iter()
            .zip(self.y.values())
            .fold(0.0_f64, |m, (u, v)| m.max(u.hypot(*v)))
    }

    /// Trapezoid-rule spatial average of the pointwise speed.
    pub fn mean_speed(&self) -> f64 {
        let g = self.grid();
        let mut sum = 0.0;
        for j in 0..g.side() {
            for i in 0..g.side() {
                let k = g.index(i, j);
                sum += g.quadrature_weight(i, j) * self.x.values()[k].hypot(self.y.values()[k]);
            }
        }
        sum
    }
}
