//! Scalar linear-Gaussian model: the exact Kalman recursion and the same
//! model as a [`Propagator`], used to validate the particle filter.

use rand::Rng;
use rand_distr::StandardNormal;

use super::Propagator;
use crate::error::{parameter, Result};
use crate::rng::StreamRng;

/// `x_k = a·x_{k−1} + √q·w_k`, `y_k = h·x_k + √r·v_k`, `x_0 ~ N(m0, p0)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalarLinearModel {
    pub a: f64,
    pub q: f64,
    pub h: f64,
    pub r: f64,
    pub m0: f64,
    pub p0: f64,
}

impl ScalarLinearModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.q > 0.0 && self.r > 0.0 && self.p0 > 0.0) {
            return parameter(format!(
                "variances must be positive: q = {}, r = {}, p0 = {}",
                self.q, self.r, self.p0
            ));
        }
        Ok(())
    }
}

/// Filtering means and variances after each observation.
pub fn kalman_filter(model: &ScalarLinearModel, observations: &[f64]) -> Result<Vec<(f64, f64)>> {
    model.validate()?;
    let (mut m, mut p) = (model.m0, model.p0);
    let mut out = Vec::with_capacity(observations.len());
    for &y in observations {
        m *= model.a;
        p = model.a * model.a * p + model.q;
        let s = model.h * model.h * p + model.r;
        let gain = p * model.h / s;
        m += gain * (y - model.h * m);
        p *= 1.0 - gain * model.h;
        out.push((m, p));
    }
    Ok(out)
}

/// The scalar model with a single standard-normal driver per window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearGaussian(pub ScalarLinearModel);

impl Propagator for LinearGaussian {
    type State = f64;
    type Path = f64;
    type Obs = f64;

    fn propagate(&self, parent: &f64, path: &f64) -> Result<f64> {
        Ok(self.0.a * parent + self.0.q.sqrt() * path)
    }

    fn fresh_path(&self, rng: &mut StreamRng) -> Result<f64> {
        Ok(rng.sample(StandardNormal))
    }

    fn blend(&self, current: &f64, fresh: &f64, rho: f64) -> Result<f64> {
        if rho == 1.0 {
            return Ok(*current);
        }
        Ok(rho * current + (1.0 - rho * rho).sqrt() * fresh)
    }

    fn log_likelihood(&self, state: &f64, y: &f64) -> Result<f64> {
        Ok(-0.5 * (self.0.h * state - y).powi(2) / self.0.r)
    }
}
