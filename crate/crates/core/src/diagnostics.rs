//! Verification statistics: rmse, spread, rank histograms, eddy turnover
//! time and forecast reliability.
//!
//! Field norms use trapezoid quadrature on the unit square, so a constant
//! field `c` has norm exactly `|c|`.

use std::fmt::Write as _;

use rayon::prelude::*;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{input, parameter, Error, Result};
use crate::fields::{ScalarField, VectorField};
use crate::filtering::{Particle, Propagator};
use crate::rng::{stream, Purpose};

fn check_same(a: &VectorField, b: &VectorField) -> Result<()> {
    if a.grid() != b.grid() {
        return input(format!("fields on grids {} and {}", a.grid().n(), b.grid().n()));
    }
    Ok(())
}

/// `∫ |a − b|²` with trapezoid weights.
fn squared_distance(a: &VectorField, b: &VectorField) -> f64 {
    let g = a.grid();
    let mut s = 0.0;
    for j in 0..g.side() {
        for i in 0..g.side() {
            let k = g.index(i, j);
            let dx = a.x.values()[k] - b.x.values()[k];
            let dy = a.y.values()[k] - b.y.values()[k];
            s += g.quadrature_weight(i, j) * (dx * dx + dy * dy);
        }
    }
    s
}

pub fn rmse(mean_field: &VectorField, verification: &VectorField) -> Result<f64> {
    check_same(mean_field, verification)?;
    Ok(squared_distance(mean_field, verification).sqrt())
}

pub fn ensemble_mean(members: &[VectorField]) -> Result<VectorField> {
    let Some(first) = members.first() else {
        return input("ensemble is empty");
    };
    let g = first.grid();
    let mut x = ScalarField::zeros(g, first.x.bc());
    let mut y = ScalarField::zeros(g, first.y.bc());
    let w = 1.0 / members.len() as f64;
    for m in members {
        check_same(first, m)?;
        x.add_scaled(w, &m.x);
        y.add_scaled(w, &m.y);
    }
    VectorField::new(x, y)
}

/// `sqrt(1/(N−1) Σ ‖X − mean‖²)`.
pub fn spread(members: &[VectorField]) -> Result<f64> {
    if members.len() < 2 {
        return parameter(format!("spread needs at least 2 members, got {}", members.len()));
    }
    let mean = ensemble_mean(members)?;
    let total: f64 = members.iter().map(|m| squared_distance(m, &mean)).sum();
    Ok((total / (members.len() - 1) as f64).sqrt())
}

/// Number of ensemble values `≤ y`.
pub fn rank(y: f64, ensemble_values: &[f64]) -> usize {
    ensemble_values.iter().filter(|&&v| v <= y).count()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankHistogram {
    pub counts: Vec<usize>,
    pub chi2: f64,
    /// `χ²_N` quantile at 0.99.
    pub critical: f64,
    pub rejected: bool,
    /// At least `10·(N+1)` samples.
    pub enough_samples: bool,
}

/// Pearson statistic of rank counts against the uniform law on `{0..N}`.
pub fn rank_histogram_chi2(ranks: &[usize], n: usize) -> Result<RankHistogram> {
    if n == 0 {
        return parameter("ensemble size must be >= 1");
    }
    if ranks.is_empty() {
        return input("no ranks");
    }
    let mut counts = vec![0usize; n + 1];
    for &r in ranks {
        if r > n {
            return input(format!("rank {r} exceeds ensemble size {n}"));
        }
        counts[r] += 1;
    }
    let expected = ranks.len() as f64 / (n + 1) as f64;
    let chi2 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let critical = ChiSquared::new(n as f64)
        .map_err(|e| Error::Parameter(e.to_string()))?
        .inverse_cdf(0.99);
    Ok(RankHistogram {
        counts,
        chi2,
        critical,
        rejected: chi2 > critical,
        enough_samples: ranks.len() >= 10 * (n + 1),
    })
}

/// `l / mean_speed`.
pub fn eddy_turnover_time(mean_speed: f64, l: f64) -> Result<f64> {
    if !(mean_speed > 0.0) || !mean_speed.is_finite() {
        return parameter(format!("mean speed must be positive, got {mean_speed}"));
    }
    if !(l >= 0.0) {
        return parameter(format!("length scale must be >= 0, got {l}"));
    }
    Ok(l / mean_speed)
}

/// rmse and spread of a free forecast `j` windows ahead.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReliabilityPoint {
    pub j: usize,
    pub rmse: f64,
    pub spread: f64,
}

/// Propagates `posterior` for `j_max` windows without assimilation and
/// compares against `truth[j − 1]` at lead `j`. Paths come from streams
/// keyed by `(seed, start_step, member, j)`.
pub fn forecast_reliability<P, F>(
    posterior: &[P::State],
    prop: &P,
    to_velocity: F,
    truth: &[VectorField],
    j_max: usize,
    seed: u64,
    start_step: u64,
) -> Result<Vec<ReliabilityPoint>>
where
    P: Propagator,
    F: Fn(&P::State) -> Result<VectorField> + Sync,
{
    if j_max > truth.len() {
        return input(format!("horizon {j_max} exceeds {} truth snapshots", truth.len()));
    }
    if posterior.len() < 2 && j_max > 0 {
        return parameter("forecast reliability needs at least 2 members");
    }
    let mut states = posterior.to_vec();
    let mut out = Vec::with_capacity(j_max);
    for j in 1..=j_max {
        states = states
            .par_iter()
            .enumerate()
            .map(|(k, s)| {
                let mut rng = stream(seed, Purpose::Reliability, start_step, k as u64, j as u64);
                let path = prop.fresh_path(&mut rng)?;
                prop.propagate(s, &path)
            })
            .collect::<Result<Vec<_>>>()?;
        let vel = states.par_iter().map(&to_velocity).collect::<Result<Vec<_>>>()?;
        out.push(ReliabilityPoint {
            j,
            rmse: rmse(&ensemble_mean(&vel)?, &truth[j - 1])?,
            spread: spread(&vel)?,
        });
    }
    Ok(out)
}

pub fn reliability_csv(points: &[ReliabilityPoint]) -> String {
    let mut s = String::from("j,rmse,spread\n");
    for p in points {
        writeln!(s, "{},{:e},{:e}", p.j, p.rmse, p.spread).expect("writing to a String cannot fail");
    }
    s
}

/// One row of `diagnostics.csv`. Undefined entries are NaN.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiagnosticsRecord {
    pub step: u64,
    pub time: f64,
    pub rmse_posterior: f64,
    pub rmse_forecast: f64,
    /// Station rms of forecast mean minus the noisy observation.
    pub rmse_forecast_vs_noisyobs: f64,
    pub rmse_prior: f64,
    pub spread_posterior: f64,
    pub spread_forecast: f64,
    pub spread_prior: f64,
    pub ess: f64,
    pub n_temperatures: usize,
    pub propagator_evals: usize,
}

impl DiagnosticsRecord {
    pub const CSV_HEADER: &'static str = "step,time,rmse_posterior,rmse_forecast,rmse_forecast_vs_noisyobs,rmse_prior,\
spread_posterior,spread_forecast,spread_prior,ess,n_temperatures,propagator_evals";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{},{}",
            self.step,
            self.time,
            self.rmse_posterior,
            self.rmse_forecast,
            self.rmse_forecast_vs_noisyobs,
            self.rmse_prior,
            self.spread_posterior,
            self.spread_forecast,
            self.spread_prior,
            self.ess,
            self.n_temperatures,
            self.propagator_evals
        )
    }

    pub fn parse(line: &str) -> Result<Self> {
        let c: Vec<&str> = line.split(',').collect();
        if c.len() != 12 {
            return input(format!("diagnostics row has {} columns, expected 12", c.len()));
        }
        let f = |k: usize| c[k].parse::<f64>().map_err(|e| Error::Input(format!("column {k}: {e}")));
        let u = |k: usize| c[k].parse::<usize>().map_err(|e| Error::Input(format!("column {k}: {e}")));
        Ok(Self {
            step: c[0].parse().map_err(|e| Error::Input(format!("column 0: {e}")))?,
            time: f(1)?,
            rmse_posterior: f(2)?,
            rmse_forecast: f(3)?,
            rmse_forecast_vs_noisyobs: f(4)?,
            rmse_prior: f(5)?,
            spread_posterior: f(6)?,
            spread_forecast: f(7)?,
            spread_prior: f(8)?,
            ess: f(9)?,
            n_temperatures: u(10)?,
            propagator_evals: u(11)?,
        })
    }
}

/// Parses a whole `diagnostics.csv`.
pub fn parse_diagnostics(text: &str) -> Result<Vec<DiagnosticsRecord>> {
    let mut lines = text.lines();
    if lines.next() != Some(DiagnosticsRecord::CSV_HEADER) {
        return input("missing diagnostics header");
    }
    lines.filter(|l| !l.is_empty()).map(DiagnosticsRecord::parse).collect()
}

/// File-name tag of a probe point, e.g. `0.25_0.5`.
pub fn probe_tag(x: f64, y: f64) -> String {
    format!("{x}_{y}")
}

pub const DEFAULT_PROBES: [f64; 3] = [0.25, 0.5, 0.75];

/// Header of `trajectory_<x>_<y>.csv` for `n` members.
pub fn trajectory_header(n: usize) -> String {
    let mut s = String::from("step,truth,truth_plus_noise,posterior_mean,prior_mean");
    for k in 0..n {
        write!(s, ",member_{k}").expect("writing to a String cannot fail");
    }
    s
}

/// Posterior, prior and forecast values of one velocity component at one
/// probe for one step.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeSample {
    pub step: u64,
    pub truth: f64,
    pub truth_plus_noise: f64,
    pub members: Vec<f64>,
    pub prior_members: Vec<f64>,
}

impl ProbeSample {
    pub fn trajectory_row(&self) -> String {
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let mut s = format!(
            "{},{:e},{:e},{:e},{:e}",
            self.step,
            self.truth,
            self.truth_plus_noise,
            mean(&self.members),
            mean(&self.prior_members)
        );
        for m in &self.members {
            write!(s, ",{m:e}").expect("writing to a String cannot fail");
        }
        s
    }
}

/// `Particle` states mapped to velocities in parallel, in order.
pub fn velocities<S: Sync, P: Sync>(
    particles: &[Particle<S, P>],
    to_velocity: impl Fn(&S) -> Result<VectorField> + Sync,
) -> Result<Vec<VectorField>> {
    particles.par_iter().map(|p| to_velocity(&p.state)).collect()
}
