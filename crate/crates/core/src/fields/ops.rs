use super::{Bc, ScalarField, VectorField};
use crate::error::{input, Result};

/// Second-order derivative along one axis at node index `k` of a line of
/// `n + 1` samples; one-sided at the ends.
#[inline]
fn diff(line: impl Fn(usize) -> f64, k: usize, n: usize, inv_2h: f64) -> f64 {
    if k == 0 {
        (-3.0 * line(0) + 4.0 * line(1) - line(2)) * inv_2h
    } else if k == n {
        (3.0 * line(n) - 4.0 * line(n - 1) + line(n - 2)) * inv_2h
    } else {
        (line(k + 1) - line(k - 1)) * inv_2h
    }
}

/// `∇⊥ψ = (−∂ψ/∂y, ∂ψ/∂x)`: central differences inside, one-sided
/// second-order differences on the boundary.
pub fn perp_grad(psi: &ScalarField) -> Result<VectorField> {
    psi.check_finite()?;
    let g = psi.grid();
    let n = g.n();
    let inv_2h = 0.5 * n as f64;
    let mut ux = vec![0.0; g.len()];
    let mut uy = vec![0.0; g.len()];
    for j in 0..=n {
        for i in 0..=n {
            let k = g.index(i, j);
            ux[k] = -diff(|jj| psi.at(i, jj), j, n, inv_2h);
            uy[k] = diff(|ii| psi.at(ii, j), i, n, inv_2h);
        }
    }
    Ok(VectorField {
        x: ScalarField::from_raw(g, Bc::Free, ux),
        y: ScalarField::from_raw(g, Bc::Free, uy),
    })
}

/// Locates the cell containing `t ∈ [0, 1]` along one axis and the local
/// coordinate within it. Points on interior cell edges belong to the cell on
/// their upper/right side, i.e. they are that cell's lower-left edge; points
/// on the top/right domain boundary belong to the last cell.
#[inline]
fn locate(t: f64, n: usize) -> (usize, f64) {
    let s = t * n as f64;
    let c = (s.floor() as usize).min(n - 1);
    (c, s - c as f64)
}

impl ScalarField {
    /// Bilinear interpolation at `(x, y)`.
    pub fn sample(&self, x: f64, y: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&x) || !(0.0..=1.0).contains(&y) {
            return input(format!("point ({x}, {y}) lies outside the unit square"));
        }
        Ok(self.sample_unchecked(x, y))
    }

    pub(crate) fn sample_unchecked(&self, x: f64, y: f64) -> f64 {
        let n = self.grid().n();
        let (i, fx) = locate(x, n);
        let (j, fy) = locate(y, n);
        let v00 = self.at(i, j);
        let v10 = self.at(i + 1, j);
        let v01 = self.at(i, j + 1);
        let v11 = self.at(i + 1, j + 1);
        (1.0 - fy) * ((1.0 - fx) * v00 + fx * v10) + fy * ((1.0 - fx) * v01 + fx * v11)
    }
}

/// Bilinear interpolation of both components at each point.
pub fn sample_at(field: &VectorField, points: &[(f64, f64)]) -> Result<Vec<(f64, f64)>> {
    points
        .iter()
        .map(|&(x, y)| Ok((field.x.sample(x, y)?, field.y.sample(x, y)?)))
        .collect()
}

/// Node-aligned helper used by tests and calibration: the grid coordinates of
/// every node as `(x, y)` pairs in storage order.
#[cfg(test)]
pub(crate) fn node_points(g: super::Grid) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(g.len());
    for j in 0..g.side() {
        for i in 0..g.side() {
            out.push((g.coord(i), g.coord(j)));
        }
    }
    out
}
