//! SALT noise: the calibrated stream-function basis `ζ_i`, Brownian path
//! increments, and the SPDE propagator.
//!
//! The stochastic transport enters through the stream function. Over a
//! substep of length `dt` the advecting stream function is
//! `ψ̃ + Σ_i ζ_i ΔW_i / dt`, with the noise part frozen across the three
//! SSP-RK3 stages and `ψ̃` recomputed from the vorticity at each stage.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::dynamics::{Dynamics, ModelParams};
use crate::error::{input, parameter, Error, Result};
use crate::fields::{coarse_grain_vorticity, poisson_solve, Bc, Grid, ScalarField};

/// Time-constant noise stream functions with their PCA eigenvalues.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseBasis {
    grid: Grid,
    zetas: Vec<ScalarField>,
    spectrum: Vec<f64>,
}

impl NoiseBasis {
    pub fn new(grid: Grid, zetas: Vec<ScalarField>, spectrum: Vec<f64>) -> Result<Self> {
        if zetas.is_empty() {
            return parameter("noise basis needs at least one mode");
        }
        if zetas.len() != spectrum.len() {
            return input(format!("{} modes but {} spectrum values", zetas.len(), spectrum.len()));
        }
        for z in &zetas {
            if z.grid() != grid {
                return input("noise mode is not on the basis grid");
            }
            if z.bc() != Bc::DirichletZero {
                return input("noise modes must be DirichletZero stream functions");
            }
            z.check_finite()?;
        }
        if spectrum.iter().any(|s| !(*s >= 0.0)) {
            return input("spectrum values must be nonnegative");
        }
        Ok(Self { grid, zetas, spectrum })
    }

    /// A basis whose modes are identically zero, i.e. a deterministic model.
    pub fn zero(grid: Grid, m: usize) -> Self {
        Self {
            grid,
            zetas: vec![ScalarField::zeros(grid, Bc::DirichletZero); m.max(1)],
            spectrum: vec![0.0; m.max(1)],
        }
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn m(&self) -> usize {
        self.zetas.len()
    }

    pub fn zetas(&self) -> &[ScalarField] {
        &self.zetas
    }

    pub fn spectrum(&self) -> &[f64] {
        &self.spectrum
    }

    /// `Σ_i c_i ζ_i`, or `None` when every coefficient is zero.
    pub fn combine(&self, coeffs: &[f64]) -> Option<ScalarField> {
        if coeffs.iter().all(|&c| c == 0.0) {
            return None;
        }
        let mut out = ScalarField::zeros(self.grid, Bc::DirichletZero);
        for (z, &c) in self.zetas.iter().zip(coeffs) {
            if c != 0.0 {
                out.add_scaled(c, z);
            }
        }
        Some(out)
    }
}

/// Brownian increments for `m` modes over `n_sub` substeps, stored substep-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PathIncrements {
    m: usize,
    n_sub: usize,
    dw: Vec<f64>,
}

impl PathIncrements {
    pub fn new(m: usize, n_sub: usize, dw: Vec<f64>) -> Result<Self> {
        if m == 0 || n_sub == 0 {
            return parameter(format!("path needs m >= 1 and n_sub >= 1, got m = {m}, n_sub = {n_sub}"));
        }
        if dw.len() != m * n_sub {
            return input(format!("expected {} increments, got {}", m * n_sub, dw.len()));
        }
        if dw.iter().any(|v| !v.is_finite()) {
            return input("non-finite Brownian increment");
        }
        Ok(Self { m, n_sub, dw })
    }

    pub fn zeros(m: usize, n_sub: usize) -> Result<Self> {
        Self::new(m, n_sub, vec![0.0; m * n_sub])
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn n_sub(&self) -> usize {
        self.n_sub
    }

    pub fn values(&self) -> &[f64] {
        &self.dw
    }

    /// Increments of every mode over substep `j`.
    pub fn column(&self, j: usize) -> &[f64] {
        &self.dw[j * self.m..(j + 1) * self.m]
    }
}

/// I.i.d. `Normal(0, dt)` increments.
pub fn brownian_increments<R: Rng + ?Sized>(rng: &mut R, m: usize, n_sub: usize, dt: f64) -> Result<PathIncrements> {
    if !(dt > 0.0) {
        return parameter(format!("increment time step must be > 0, got {dt}"));
    }
    if m == 0 || n_sub == 0 {
        return parameter(format!("path needs m >= 1 and n_sub >= 1, got m = {m}, n_sub = {n_sub}"));
    }
    let sd = dt.sqrt();
    let dw = (0..m * n_sub)
        .map(|_| sd * rng.sample::<f64, _>(StandardNormal))
        .collect();
    PathIncrements::new(m, n_sub, dw)
}

/// `ρW + √(1−ρ²)Z`, entrywise.
pub fn blend_paths(w: &PathIncrements, z: &PathIncrements, rho: f64) -> Result<PathIncrements> {
    if w.m != z.m || w.n_sub != z.n_sub {
        return input(format!(
            "path shapes differ: {}x{} vs {}x{}",
            w.m, w.n_sub, z.m, z.n_sub
        ));
    }
    if !(0.0..=1.0).contains(&rho) {
        return parameter(format!("blend parameter must lie in [0, 1], got {rho}"));
    }
    if rho == 1.0 {
        return Ok(w.clone());
    }
    if rho == 0.0 {
        return Ok(z.clone());
    }
    let c = (1.0 - rho * rho).sqrt();
    let dw = w.dw.iter().zip(&z.dw).map(|(a, b)| rho * a + c * b).collect();
    Ok(PathIncrements { m: w.m, n_sub: w.n_sub, dw })
}

/// The SALT SPDE on the coarse grid.
#[derive(Debug, Clone)]
pub struct SaltModel {
    dynamics: Dynamics,
    basis: NoiseBasis,
}

impl SaltModel {
    pub fn new(params: ModelParams, basis: NoiseBasis) -> Result<Self> {
        Ok(Self {
            dynamics: Dynamics::new(basis.grid(), params)?,
            basis,
        })
    }

    pub fn dynamics(&self) -> &Dynamics {
        &self.dynamics
    }

    pub fn basis(&self) -> &NoiseBasis {
        &self.basis
    }

    pub fn params(&self) -> &ModelParams {
        self.dynamics.params()
    }

    /// One SSP-RK3 step driven by the increments `dw` of every mode.
    pub fn step(&self, q: &ScalarField, dw: &[f64]) -> Result<ScalarField> {
        if q.grid() != self.basis.grid() {
            return input("state is not on the noise basis grid");
        }
        if dw.len() != self.basis.m() {
            return input(format!("expected {} increments, got {}", self.basis.m(), dw.len()));
        }
        let dt = self.params().dt;
        let scaled: Vec<f64> = dw.iter().map(|w| w / dt).collect();
        let noise = self.basis.combine(&scaled);
        self.dynamics.step_with(q, noise.as_ref())
    }

    /// Composition of `path.n_sub()` steps from `parent`.
    pub fn propagate(&self, parent: &ScalarField, path: &PathIncrements) -> Result<ScalarField> {
        if path.m() != self.basis.m() {
            return input(format!("path has {} modes, basis has {}", path.m(), self.basis.m()));
        }
        let mut q = parent.clone();
        for j in 0..path.n_sub() {
            q = self.step(&q, path.column(j))?;
        }
        Ok(q)
    }
}

/// Free-function form of [`SaltModel::step`].
pub fn spde_step(q: &ScalarField, dw: &[f64], basis: &NoiseBasis, params: &ModelParams) -> Result<ScalarField> {
    SaltModel::new(*params, basis.clone())?.step(q, dw)
}

/// Free-function form of [`SaltModel::propagate`].
pub fn propagate_window(
    parent: &ScalarField,
    path: &PathIncrements,
    basis: &NoiseBasis,
    params: &ModelParams,
) -> Result<ScalarField> {
    SaltModel::new(*params, basis.clone())?.propagate(parent, path)
}

/// Principal components of `residuals` (DirichletZero stream functions on
/// one grid) about their mean. Keeps the smallest number of leading modes
/// whose cumulative explained variance reaches `fraction`, and scales each
/// unit eigenvector by `√(λ / dt)`.
pub fn pca_basis(residuals: &[ScalarField], dt: f64, fraction: f64) -> Result<NoiseBasis> {
    if residuals.len() < 2 {
        return input(format!("need at least 2 residuals, got {}", residuals.len()));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return parameter(format!("variance fraction must lie in (0, 1], got {fraction}"));
    }
    if !(dt > 0.0) {
        return parameter(format!("calibration time step must be > 0, got {dt}"));
    }
    let grid = residuals[0].grid();
    let n = grid.n();
    let interior: Vec<usize> = (1..n)
        .flat_map(|j| (1..n).map(move |i| grid.index(i, j)))
        .collect();
    let samples = residuals.len();
    let dim = interior.len();
    let mut x = DMatrix::<f64>::zeros(samples, dim);
    for (s, r) in residuals.iter().enumerate() {
        if r.grid() != grid {
            return input("residuals live on different grids");
        }
        r.check_finite()?;
        for (c, &k) in interior.iter().enumerate() {
            x[(s, c)] = r.values()[k];
        }
    }
    for c in 0..dim {
        let mean = x.column(c).mean();
        x.column_mut(c).add_scalar_mut(-mean);
    }
    let denom = (samples - 1) as f64;
    // Eigenpairs of the smaller of the Gram and covariance matrices.
    let use_gram = samples <= dim;
    let small = if use_gram { &x * x.transpose() } else { x.transpose() * &x } / denom;
    let eig = SymmetricEigen::new(small);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let top = eig.eigenvalues[order[0]];
    if !(top > 0.0) {
        return Err(Error::Degenerate("residuals have zero variance".into()));
    }
    let kept: Vec<usize> = order
        .into_iter()
        .filter(|&k| eig.eigenvalues[k] > top * 1e-12)
        .collect();
    let total: f64 = kept.iter().map(|&k| eig.eigenvalues[k]).sum();
    let mut zetas = Vec::new();
    let mut spectrum = Vec::new();
    let mut cumulative = 0.0;
    for &k in &kept {
        let lambda = eig.eigenvalues[k];
        // Gram eigenvector a maps to covariance eigenvector Xᵀa / √((M−1)λ).
        let v = if use_gram {
            x.transpose() * eig.eigenvectors.column(k) / (denom * lambda).sqrt()
        } else {
            eig.eigenvectors.column(k).into_owned()
        };
        let amp = (lambda / dt).sqrt();
        let mut vals = vec![0.0; grid.len()];
        for (c, &node) in interior.iter().enumerate() {
            vals[node] = amp * v[c];
        }
        zetas.push(ScalarField::from_raw(grid, Bc::DirichletZero, vals));
        spectrum.push(lambda);
        cumulative += lambda;
        if cumulative >= fraction * total * (1.0 - 1e-12) {
            break;
        }
    }
    NoiseBasis::new(grid, zetas, spectrum)
}

/// One-step residual stream functions between consecutive coarse-grained
/// fine snapshots and the deterministic coarse model.
pub fn calibration_residuals(
    fine_snapshots: &[ScalarField],
    coarse: Grid,
    params: &ModelParams,
) -> Result<Vec<ScalarField>> {
    if fine_snapshots.len() < 2 {
        return input(format!("need at least 2 snapshots, got {}", fine_snapshots.len()));
    }
    let model = Dynamics::new(coarse, *params)?;
    let coarse_states = fine_snapshots
        .iter()
        .map(|w| coarse_grain_vorticity(w, coarse))
        .collect::<Result<Vec<_>>>()?;
    coarse_states
        .windows(2)
        .map(|pair| {
            let predicted = model.step(&pair[0])?;
            let mut diff = pair[1].clone();
            diff.add_scaled(-1.0, &predicted);
            poisson_solve(&diff)
        })
        .collect()
}

/// Calibrates the noise basis from fine snapshots spaced one coarse step
/// (`params.dt`) apart.
pub fn calibrate_xi(
    fine_snapshots: &[ScalarField],
    coarse: Grid,
    params: &ModelParams,
    fraction: f64,
) -> Result<NoiseBasis> {
    let residuals = calibration_residuals(fine_snapshots, coarse, params)?;
    pca_basis(&residuals, params.dt, fraction)
}
