//! Damped and forced 2D Euler equations in vorticity form,
//! `∂ω/∂t + u·∇ω = Q − rω` with `u = ∇⊥ψ`, `Δψ = ω`, `ψ = 0` on the walls.
//!
//! Advection uses the Arakawa Jacobian evaluated on every node. Ghost nodes
//! mirror the stream function oddly and the vorticity evenly across each wall,
//! which makes the trapezoid-weighted sums of `J`, `ωJ` and `ψJ` vanish to
//! roundoff: circulation, enstrophy and energy are conserved by the spatial
//! discretisation. Boundary vorticity is carried along the wall by the
//! tangential velocity; only interior vorticity feeds the Poisson solve.

use std::f64::consts::PI;

use log::warn;

use crate::error::{parameter, Error, Result};
use crate::fields::{perp_grad, poisson_solve, Bc, Grid, ScalarField};

/// Physical and time-stepping parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelParams {
    /// Forcing strength `a` in `Q = a sin(bπx)`.
    pub a: f64,
    /// Number of gyres `b`.
    pub b: u32,
    /// Linear damping rate.
    pub r: f64,
    /// Time step.
    pub dt: f64,
}

impl ModelParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.a >= 0.0) {
            return parameter(format!("forcing strength a must be >= 0, got {}", self.a));
        }
        if self.b < 1 {
            return parameter("gyre count b must be >= 1");
        }
        if !(self.r >= 0.0) || !self.r.is_finite() {
            return parameter(format!("damping rate r must be >= 0, got {}", self.r));
        }
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return parameter(format!("time step must be > 0, got {}", self.dt));
        }
        Ok(())
    }
}

/// How a step reacts when the Courant number exceeds its limit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CflPolicy {
    pub limit: f64,
    pub abort: bool,
}

impl Default for CflPolicy {
    fn default() -> Self {
        Self { limit: 0.5, abort: false }
    }
}

impl CflPolicy {
    /// Returns `Err` only when aborting is requested; otherwise logs.
    pub fn check(&self, courant: f64) -> Result<bool> {
        if courant <= self.limit {
            return Ok(true);
        }
        if self.abort {
            return Err(Error::Cfl { courant, limit: self.limit });
        }
        warn!("courant number {courant:.3} exceeds limit {:.3}", self.limit);
        Ok(false)
    }
}

/// `Q(x, y) = a sin(bπx)`.
pub fn forcing_field(grid: Grid, a: f64, b: u32) -> ScalarField {
    ScalarField::from_fn(grid, Bc::Free, |x, _| a * (b as f64 * PI * x).sin())
}

/// Copies `f` into an `(n + 3)²` array with one ghost layer, mirrored with
/// the given parity (`-1` odd, `+1` even).
fn padded(f: &ScalarField, parity: f64) -> Vec<f64> {
    let g = f.grid();
    let n = g.n();
    let s = n + 3;
    let mut p = vec![0.0; s * s];
    for j in 0..=n {
        for i in 0..=n {
            p[(j + 1) * s + (i + 1)] = f.at(i, j);
        }
    }
    for j in 1..=n + 1 {
        p[j * s] = parity * p[j * s + 2];
        p[j * s + n + 2] = parity * p[j * s + n];
    }
    for i in 0..s {
        p[i] = parity * p[2 * s + i];
        p[(n + 2) * s + i] = parity * p[n * s + i];
    }
    p
}

/// Arakawa's energy- and enstrophy-conserving Jacobian `J(ψ, ω) = ψ_x ω_y − ψ_y ω_x`
/// at every node.
pub fn arakawa_jacobian(psi: &ScalarField, omega: &ScalarField) -> Result<ScalarField> {
    psi.same_grid(omega)?;
    let g = psi.grid();
    let n = g.n();
    let s = n + 3;
    let p = padded(psi, -1.0);
    let w = padded(omega, 1.0);
    let scale = (n * n) as f64 / 12.0;
    let mut out = vec![0.0; g.len()];
    for j in 0..=n {
        for i in 0..=n {
            let c = (j + 1) * s + (i + 1);
            let (e, wv, nn, so) = (c + 1, c - 1, c + s, c - s);
            let (ne, nw, se, sw) = (c + s + 1, c + s - 1, c - s + 1, c - s - 1);
            let jpp = (p[e] - p[wv]) * (w[nn] - w[so]) - (p[nn] - p[so]) * (w[e] - w[wv]);
            let jpx = p[e] * (w[ne] - w[se]) - p[wv] * (w[nw] - w[sw]) - p[nn] * (w[ne] - w[nw])
                + p[so] * (w[se] - w[sw]);
            let jxp = w[nn] * (p[ne] - p[nw]) - w[so] * (p[se] - p[sw]) - w[e] * (p[ne] - p[se])
                + w[wv] * (p[nw] - p[sw]);
            out[g.index(i, j)] = (jpp + jpx + jxp) * scale;
        }
    }
    Ok(ScalarField::from_raw(g, Bc::Free, out))
}

/// Courant number `dt · max|u| / h` of the velocity `∇⊥ψ`.
pub fn courant_number(psi: &ScalarField, dt: f64) -> Result<f64> {
    let u = perp_grad(psi)?;
    Ok(dt * u.max_speed() / psi.grid().h())
}

/// Kinetic energy `−½∫ψω`, which equals `½∫|∇ψ|²` for the discrete Poisson pair.
pub fn energy(omega: &ScalarField) -> Result<f64> {
    let psi = poisson_solve(omega)?;
    Ok(-0.5 * psi.inner(omega))
}

/// Enstrophy `½∫ω²`.
pub fn enstrophy(omega: &ScalarField) -> f64 {
    0.5 * omega.inner(omega)
}

/// The deterministic model on one grid, with its forcing field precomputed.
#[derive(Debug, Clone)]
pub struct Dynamics {
    grid: Grid,
    params: ModelParams,
    forcing: ScalarField,
}

impl Dynamics {
    pub fn new(grid: Grid, params: ModelParams) -> Result<Self> {
        params.validate()?;
        Ok(Self {
            grid,
            params,
            forcing: forcing_field(grid, params.a, params.b),
        })
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    /// `−J(ψ, ω) + Q − rω`.
    pub fn tendency(&self, omega: &ScalarField, psi: &ScalarField) -> Result<ScalarField> {
        if omega.grid() != self.grid {
            return crate::error::input("vorticity is not on the model grid");
        }
        let jac = arakawa_jacobian(psi, omega)?;
        let r = self.params.r;
        let vals: Vec<f64> = jac
            .values()
            .iter()
            .zip(self.forcing.values())
            .zip(omega.values())
            .map(|((j, q), w)| -j + q - r * w)
            .collect();
        Ok(ScalarField::from_raw(self.grid, Bc::Free, vals))
    }

    /// Right-hand side with an extra, fixed stream function added to the one
    /// recovered from `omega`.
    fn rhs(&self, omega: &ScalarField, extra_psi: Option<&ScalarField>) -> Result<ScalarField> {
        let mut psi = poisson_solve(omega)?;
        if let Some(extra) = extra_psi {
            psi.add_scaled(1.0, extra);
        }
        self.tendency(omega, &psi)
    }

    /// One Shu–Osher SSP-RK3 step. `extra_psi` is held fixed across the three
    /// stages while the vorticity-derived stream function is recomputed.
    pub fn step_with(&self, omega: &ScalarField, extra_psi: Option<&ScalarField>) -> Result<ScalarField> {
        let dt = self.params.dt;
        let f0 = self.rhs(omega, extra_psi)?;
        let w1 = combine(omega, 1.0, omega, 0.0, &f0, dt);
        let f1 = self.rhs(&w1, extra_psi)?;
        let w2 = combine(omega, 0.75, &w1, 0.25, &f1, 0.25 * dt);
        let f2 = self.rhs(&w2, extra_psi)?;
        let out = combine(omega, 1.0 / 3.0, &w2, 2.0 / 3.0, &f2, 2.0 / 3.0 * dt);
        out.check_finite()?;
        Ok(out)
    }

    pub fn step(&self, omega: &ScalarField) -> Result<ScalarField> {
        self.step_with(omega, None)
    }
}

/// `α·a + β·b + γ·f` nodewise, keeping `a`'s grid and boundary tag.
fn combine(a: &ScalarField, alpha: f64, b: &ScalarField, beta: f64, f: &ScalarField, gamma: f64) -> ScalarField {
    let vals = a
        .values()
        .iter()
        .zip(b.values())
        .zip(f.values())
        .map(|((x, y), z)| alpha * x + beta * y + gamma * z)
        .collect();
    ScalarField::from_raw(a.grid(), a.bc(), vals)
}

/// Free-function form of [`Dynamics::tendency`].
pub fn tendency(omega: &ScalarField, psi: &ScalarField, params: &ModelParams) -> Result<ScalarField> {
    omega.same_grid(psi)?;
    Dynamics::new(omega.grid(), *params)?.tendency(omega, psi)
}

/// Free-function form of [`Dynamics::step`].
pub fn ssprk3_step(omega: &ScalarField, params: &ModelParams) -> Result<ScalarField> {
    Dynamics::new(omega.grid(), *params)?.step(omega)
}

/// The spin-up initial vorticity.
pub fn omega_spin(grid: Grid) -> ScalarField {
    ScalarField::from_fn(grid, Bc::Free, |x, y| {
        (8.0 * PI * x).sin() * (8.0 * PI * y).sin()
            + 0.4 * (6.0 * PI * x).cos() * (6.0 * PI * y).cos()
            + 0.3 * (10.0 * PI * x).cos() * (4.0 * PI * y).cos()
            + 0.02 * (2.0 * PI * y).sin()
            + 0.02 * (2.0 * PI * x).sin()
    })
}

/// One row of the spin-up energy log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergySample {
    pub step: usize,
    pub time: f64,
    pub energy: f64,
    pub enstrophy: f64,
}

#[derive(Debug, Clone)]
pub struct SpinupResult {
    pub omega: ScalarField,
    pub series: Vec<EnergySample>,
    /// Steps whose Courant number exceeded the policy limit.
    pub cfl_violations: usize,
}

impl SpinupResult {
    /// Relative energy change across the trailing `fraction` of the series.
    pub fn trailing_energy_change(&self, fraction: f64) -> Option<f64> {
        relative_energy_change(&self.series, fraction)
    }
}

/// `|E_end − E_start| / |E_end|` over the last `fraction` of `series`.
pub fn relative_energy_change(series: &[EnergySample], fraction: f64) -> Option<f64> {
    let last = series.last()?;
    let cut = last.time - fraction * (last.time - series.first()?.time);
    let start = series.iter().find(|s| s.time >= cut)?;
    Some((last.energy - start.energy).abs() / last.energy.abs().max(f64::MIN_POSITIVE))
}

/// Integrates the deterministic model from [`omega_spin`] to `t_end`,
/// logging energy and enstrophy every `log_every` steps and calling
/// `on_step(step, time, ω)` after each step.
pub fn spinup(
    grid: Grid,
    params: &ModelParams,
    t_end: f64,
    log_every: usize,
    cfl: CflPolicy,
    mut on_step: impl FnMut(usize, f64, &ScalarField) -> Result<()>,
) -> Result<SpinupResult> {
    if !(t_end >= 0.0) {
        return parameter(format!("spin-up end time must be >= 0, got {t_end}"));
    }
    let model = Dynamics::new(grid, *params)?;
    let steps = (t_end / params.dt).round() as usize;
    let log_every = log_every.max(1);
    let mut omega = omega_spin(grid);
    let mut series = vec![EnergySample {
        step: 0,
        time: 0.0,
        energy: energy(&omega)?,
        enstrophy: enstrophy(&omega),
    }];
    let mut violations = 0;
    for step in 1..=steps {
        let psi = poisson_solve(&omega)?;
        if !cfl.check(courant_number(&psi, params.dt)?)? {
            violations += 1;
        }
        omega = model.step(&omega)?;
        let time = step as f64 * params.dt;
        if step % log_every == 0 || step == steps {
            series.push(EnergySample {
                step,
                time,
                energy: energy(&omega)?,
                enstrophy: enstrophy(&omega),
            });
        }
        on_step(step, time, &omega)?;
    }
    Ok(SpinupResult {
        omega,
        series,
        cfl_violations: violations,
    })
}
