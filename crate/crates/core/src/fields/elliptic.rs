//! Direct elliptic solves by diagonalisation in the discrete sine basis.
//!
//! With zero Dirichlet data the 5-point Laplacian on the `(n-1)²` interior
//! nodes is diagonal in the DST-I basis, with eigenvalue
//! `-(4/h²)(sin²(πk/2n) + sin²(πl/2n))` for mode `(k, l)`.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{Arc, Mutex, OnceLock};

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use super::{Bc, Grid, ScalarField};
use crate::error::{parameter, Result};

/// Cached DST-I machinery for one grid size.
struct SineSolver {
    n: usize,
    fft: Arc<dyn Fft<f64>>,
    /// `sin²(πk / 2n)` for `k = 1..n-1`.
    half_angle: Vec<f64>,
}

fn solver_for(grid: Grid) -> Arc<SineSolver> {
    static CACHE: OnceLock<Mutex<HashMap<usize, Arc<SineSolver>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let mut map = cache.lock().unwrap_or_else(|e| e.into_inner());
    map.entry(grid.n())
        .or_insert_with(|| Arc::new(SineSolver::new(grid.n())))
        .clone()
}

impl SineSolver {
    fn new(n: usize) -> Self {
        let fft = FftPlanner::new().plan_fft_forward(2 * n);
        let half_angle = (1..n)
            .map(|k| (PI * k as f64 / (2 * n) as f64).sin().powi(2))
            .collect();
        Self { n, fft, half_angle }
    }

    /// Unnormalised DST-I `S_k = Σ_j x_j sin(πjk/n)` applied to each of the
    /// `rows` contiguous length-`(n-1)` lines of `data`.
    fn dst_lines(&self, data: &mut [f64], rows: usize) {
        let n = self.n;
        let m = n - 1;
        let len = 2 * n;
        let mut buf = vec![Complex::new(0.0, 0.0); rows * len];
        for r in 0..rows {
            let line = &data[r * m..(r + 1) * m];
            let b = &mut buf[r * len..(r + 1) * len];
            for (j, &x) in line.iter().enumerate() {
                b[j + 1] = Complex::new(x, 0.0);
                b[len - 1 - j] = Complex::new(-x, 0.0);
            }
        }
        self.fft.process(&mut buf);
        for r in 0..rows {
            let b = &buf[r * len..(r + 1) * len];
            let line = &mut data[r * m..(r + 1) * m];
            for (k, out) in line.iter_mut().enumerate() {
                *out = -0.5 * b[k + 1].im;
            }
        }
    }

    fn transpose(&self, data: &[f64]) -> Vec<f64> {
        let m = self.n - 1;
        let mut out = vec![0.0; m * m];
        for r in 0..m {
            for c in 0..m {
                out[c * m + r] = data[r * m + c];
            }
        }
        out
    }

    /// Solves `(α I − Δ_h) g = f` on the interior, zero on the boundary,
    /// by scaling each sine mode with `1 / (α + μ_kl)` where `μ_kl ≥ 0` is the
    /// eigenvalue of `−Δ_h`. Returns interior values in row-major order.
    fn solve_shifted(&self, interior: Vec<f64>, alpha: f64, gain: f64) -> Vec<f64> {
        let n = self.n;
        let m = n - 1;
        let inv_h2 = (n * n) as f64;
        let mut data = interior;
        self.dst_lines(&mut data, m);
        let mut data = self.transpose(&data);
        self.dst_lines(&mut data, m);
        // data[k * m + l]: x-mode k indexes rows after the transpose
        let norm = (2.0 / n as f64).powi(2);
        for l in 0..m {
            for k in 0..m {
                let mu = 4.0 * inv_h2 * (self.half_angle[k] + self.half_angle[l]);
                data[k * m + l] *= gain * norm / (alpha + mu);
            }
        }
        self.dst_lines(&mut data, m);
        let mut data = self.transpose(&data);
        self.dst_lines(&mut data, m);
        data
    }
}

fn interior_values(f: &ScalarField) -> Vec<f64> {
    let g = f.grid();
    let n = g.n();
    let mut out = Vec::with_capacity((n - 1) * (n - 1));
    for j in 1..n {
        for i in 1..n {
            out.push(f.at(i, j));
        }
    }
    out
}

fn embed_interior(grid: Grid, interior: &[f64]) -> ScalarField {
    let n = grid.n();
    let m = n - 1;
    let mut values = vec![0.0; grid.len()];
    for j in 1..n {
        for i in 1..n {
            values[grid.index(i, j)] = interior[(j - 1) * m + (i - 1)];
        }
    }
    ScalarField::from_raw(grid, Bc::DirichletZero, values)
}

/// Solves `Δ_h ψ = f` at interior nodes with `ψ = 0` on the boundary.
/// Boundary values of `f` are ignored.
pub fn poisson_solve(f: &ScalarField) -> Result<ScalarField> {
    f.check_finite()?;
    let solver = solver_for(f.grid());
    let out = solver.solve_shifted(interior_values(f), 0.0, -1.0);
    Ok(embed_interior(f.grid(), &out))
}

/// Applies `(I − Δ_h/k²)⁻¹` with zero Dirichlet data.
pub fn helmholtz_inverse(f: &ScalarField, k: f64) -> Result<ScalarField> {
    if !(k > 0.0) || !k.is_finite() {
        return parameter(format!("Helmholtz wavenumber must be positive and finite, got {k}"));
    }
    f.check_finite()?;
    let solver = solver_for(f.grid());
    // (I − Δ/k²) g = f  ⇔  (k² I − Δ) g = k² f
    let k2 = k * k;
    let out = solver.solve_shifted(interior_values(f), k2, k2);
    Ok(embed_interior(f.grid(), &out))
}

/// Standard 5-point Laplacian at interior nodes; boundary nodes are zero,
/// which is the value the odd reflection of a `DirichletZero` field gives.
pub fn laplacian(psi: &ScalarField) -> ScalarField {
    let g = psi.grid();
    let n = g.n();
    let inv_h2 = (n * n) as f64;
    let mut out = ScalarField::zeros(g, Bc::DirichletZero);
    let vals = out.values_mut();
    for j in 1..n {
        for i in 1..n {
            let c = psi.at(i, j);
            vals[g.index(i, j)] = (psi.at(i + 1, j) + psi.at(i - 1, j) + psi.at(i, j + 1)
                + psi.at(i, j - 1)
                - 4.0 * c)
                * inv_h2;
        }
    }
    out
}

/// Coefficient of the discrete mode `sin(kπx) sin(lπy)` in `f`, normalised so
/// that a pure mode sampled on the grid has coefficient one.
pub fn sine_coefficient(f: &ScalarField, k: usize, l: usize) -> f64 {
    let g = f.grid();
    let n = g.n();
    let h2 = g.h() * g.h();
    let mut sum = 0.0;
    for j in 1..n {
        let sy = (PI * (l * j) as f64 / n as f64).sin();
        for i in 1..n {
            let sx = (PI * (k * i) as f64 / n as f64).sin();
            sum += f.at(i, j) * sx * sy;
        }
    }
    4.0 * h2 * sum
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mode11(g: Grid) -> ScalarField {
        ScalarField::from_fn(g, Bc::DirichletZero, |x, y| (PI * x).sin() * (PI * y).sin())
    }

    fn max_err(a: &ScalarField, b: &ScalarField) -> f64 {
        a.values()
            .iter()
            .zip(b.values())
            .fold(0.0_f64, |m, (x, y)| m.max((x - y).abs()))
    }

    #[test]
    fn poisson_zero_rhs() {
        let g = Grid::new(16).unwrap();
        let psi = poisson_solve(&ScalarField::zeros(g, Bc::Free)).unwrap();
        assert!(psi.values().iter().all(|&v| v == 0.0));
        assert_eq!(psi.bc(), Bc::DirichletZero);
    }

    #[test]
    fn poisson_sine_mode_second_order() {
        let mut errs = Vec::new();
        for n in [32, 64, 128] {
            let g = Grid::new(n).unwrap();
            let f = ScalarField::from_fn(g, Bc::Free, |x, y| {
                -2.0 * PI * PI * (PI * x).sin() * (PI * y).sin()
            });
            let psi = poisson_solve(&f).unwrap();
            errs.push(max_err(&psi, &mode11(g)));
        }
        for w in errs.windows(2) {
            let order = (w[0] / w[1]).log2();
            assert!((order - 2.0).abs() < 0.2, "order {order}");
        }
    }

    #[test]
    fn poisson_residual_is_tiny() {
        let g = Grid::new(24).unwrap();
        let f = ScalarField::from_fn(g, Bc::Free, |x, y| (3.0 * x).exp() * (y * 7.0).cos() + x * y);
        let psi = poisson_solve(&f).unwrap();
        let lap = laplacian(&psi);
        let mut num = 0.0_f64;
        let mut den = 0.0_f64;
        for j in 1..g.n() {
            for i in 1..g.n() {
                num = num.max((lap.at(i, j) - f.at(i, j)).abs());
                den = den.max(f.at(i, j).abs());
            }
        }
        assert!(num / den < 1e-10, "relative residual {}", num / den);
    }

    #[test]
    fn helmholtz_rejects_nonpositive_k() {
        let g = Grid::new(8).unwrap();
        let f = mode11(g);
        assert!(helmholtz_inverse(&f, 0.0).is_err());
        assert!(helmholtz_inverse(&f, -3.0).is_err());
        assert!(helmholtz_inverse(&f, f64::NAN).is_err());
    }

    #[test]
    fn helmholtz_sine_mode() {
        let mut errs = Vec::new();
        for n in [32, 64, 128] {
            let g = Grid::new(n).unwrap();
            let f = mode11(g);
            let out = helmholtz_inverse(&f, 8.0).unwrap();
            let expect = f.scaled(1.0 / (1.0 + 2.0 * PI * PI / 64.0));
            errs.push(max_err(&out, &expect));
        }
        for w in errs.windows(2) {
            let order = (w[0] / w[1]).log2();
            assert!((order - 2.0).abs() < 0.2, "order {order}");
        }
    }

    #[test]
    fn helmholtz_large_k_is_identity() {
        let g = Grid::new(32).unwrap();
        let f = ScalarField::from_fn(g, Bc::DirichletZero, |x, y| {
            (PI * x).sin() * (2.0 * PI * y).sin() + 0.3 * (5.0 * PI * x).sin() * (PI * y).sin()
        });
        let out = helmholtz_inverse(&f, 1e6).unwrap();
        let rel = max_err(&out, &f) / f.max_abs();
        assert!(rel < 1e-4, "{rel}");
        let zero = helmholtz_inverse(&ScalarField::zeros(g, Bc::Free), 64.0).unwrap();
        assert!(zero.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sine_coefficient_of_pure_mode() {
        let g = Grid::new(16).unwrap();
        let f = ScalarField::from_fn(g, Bc::DirichletZero, |x, y| {
            (3.0 * PI * x).sin() * (2.0 * PI * y).sin()
        });
        assert!((sine_coefficient(&f, 3, 2) - 1.0).abs() < 1e-12);
        assert!(sine_coefficient(&f, 2, 3).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn poisson_is_linear(a in -3.0..3.0f64, b in -3.0..3.0f64, seed in 0u64..1000) {
            let g = Grid::new(16).unwrap();
            let f = ScalarField::from_fn(g, Bc::Free, |x, y| ((seed as f64) * x + y).sin());
            let h = ScalarField::from_fn(g, Bc::Free, |x, y| (x * y * (seed as f64 + 1.0)).cos());
            let mut comb = f.scaled(a);
            comb.add_scaled(b, &h);
            let lhs = poisson_solve(&comb).unwrap();
            let mut rhs = poisson_solve(&f).unwrap().scaled(a);
            rhs.add_scaled(b, &poisson_solve(&h).unwrap());
            let scale = rhs.max_abs().max(1e-300);
            prop_assert!(max_err(&lhs, &rhs) / scale < 1e-12);
        }

        #[test]
        fn helmholtz_contracts_sine_modes(coeffs in proptest::collection::vec(-1.0..1.0f64, 9), k in 1.0..64.0f64) {
            let g = Grid::new(16).unwrap();
            let f = ScalarField::from_fn(g, Bc::DirichletZero, |x, y| {
                let mut s = 0.0;
                for a in 0..3 {
                    for b in 0..3 {
                        s += coeffs[a * 3 + b] * (PI * (a + 1) as f64 * x).sin() * (PI * (b + 1) as f64 * y).sin();
                    }
                }
                s
            });
            let out = helmholtz_inverse(&f, k).unwrap();
            for a in 1..=4 {
                for b in 1..=4 {
                    prop_assert!(sine_coefficient(&out, a, b).abs() <= sine_coefficient(&f, a, b).abs() + 1e-12);
                }
            }
        }
    }
}
