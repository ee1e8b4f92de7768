//! Particle filter with adaptive tempering and MCMC jittering, written
//! against an abstract [`Propagator`].
//!
//! All randomness is drawn from streams keyed by `(seed, step, stage,
//! particle)`, and every parallel phase collects results in particle order,
//! so the output does not depend on the number of worker threads.

mod kalman;

use rand::Rng;
use rayon::prelude::*;

use crate::error::{parameter, Error, Result};
use crate::rng::{stream, Purpose, StreamRng};

pub use kalman::{kalman_filter, LinearGaussian, ScalarLinearModel};

/// The signal model as seen by the filter.
pub trait Propagator: Sync {
    type State: Clone + Send + Sync;
    type Path: Clone + Send + Sync;
    type Obs: Sync;

    /// Deterministic in `(parent, path)`.
    fn propagate(&self, parent: &Self::State, path: &Self::Path) -> Result<Self::State>;
    fn fresh_path(&self, rng: &mut StreamRng) -> Result<Self::Path>;
    fn blend(&self, current: &Self::Path, fresh: &Self::Path, rho: f64) -> Result<Self::Path>;
    fn log_likelihood(&self, state: &Self::State, y: &Self::Obs) -> Result<f64>;
}

/// `state == propagate(parent, path)` whenever `path` is set.
#[derive(Debug, Clone, PartialEq)]
pub struct Particle<S, P> {
    pub parent: S,
    pub path: Option<P>,
    pub state: S,
    pub log_weight: f64,
    /// Cached full log-likelihood of `state` for the current observation.
    pub loglike: f64,
}

impl<S: Clone, P> Particle<S, P> {
    /// An equal-weight particle at the start of a window.
    pub fn new(state: S) -> Self {
        Self {
            parent: state.clone(),
            path: None,
            state,
            log_weight: 0.0,
            loglike: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterConfig {
    pub n: usize,
    pub ess_threshold_fraction: f64,
    pub rho: f64,
    pub mcmc_steps: usize,
    pub max_temperatures: usize,
    pub bisection_iters: usize,
    /// Resample and jitter at `φ = 1` even when the ESS is healthy.
    pub final_resample_always: bool,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            n: 100,
            ess_threshold_fraction: 0.8,
            rho: 0.9995,
            mcmc_steps: 5,
            max_temperatures: 200,
            bisection_iters: 60,
            final_resample_always: true,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return parameter("ensemble size must be >= 1");
        }
        if !(self.ess_threshold_fraction > 0.0 && self.ess_threshold_fraction <= 1.0) {
            return parameter(format!(
                "ESS threshold fraction must lie in (0, 1], got {}",
                self.ess_threshold_fraction
            ));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return parameter(format!("rho must lie in [0, 1], got {}", self.rho));
        }
        if self.max_temperatures == 0 {
            return parameter("max_temperatures must be >= 1");
        }
        if self.bisection_iters == 0 {
            return parameter("bisection_iters must be >= 1");
        }
        Ok(())
    }

    pub fn threshold(&self) -> f64 {
        self.ess_threshold_fraction * self.n as f64
    }
}

/// Where one assimilation step draws its randomness from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepContext {
    pub seed: u64,
    pub step: u64,
    pub time: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepDiagnostics {
    pub step: u64,
    pub time: f64,
    /// Accepted temperatures `φ_1 < ... < φ_R = 1`.
    pub phis: Vec<f64>,
    /// ESS of the incremental weights at each accepted temperature.
    pub ess_at_temperature: Vec<f64>,
    pub n_resampled_duplicates: usize,
    pub jitter_proposals: usize,
    pub jitter_accepted: usize,
    pub propagator_evals: usize,
}

impl StepDiagnostics {
    pub fn n_temperatures(&self) -> usize {
        self.phis.len()
    }

    pub fn ess_final(&self) -> f64 {
        self.ess_at_temperature.last().copied().unwrap_or(f64::NAN)
    }

    /// NaN when nothing was jittered.
    pub fn jitter_accept_rate(&self) -> f64 {
        if self.jitter_proposals == 0 {
            f64::NAN
        } else {
            self.jitter_accepted as f64 / self.jitter_proposals as f64
        }
    }

    pub const CSV_HEADER: &'static str =
        "step,time,n_temperatures,phi_list,ess_final,n_resampled_duplicates,jitter_accept_rate,propagator_evals";

    /// `phi_list` is `;`-separated.
    pub fn csv_row(&self) -> String {
        let phis: Vec<String> = self.phis.iter().map(|p| format!("{p:e}")).collect();
        format!(
            "{},{},{},{},{:e},{},{:e},{}",
            self.step,
            self.time,
            self.n_temperatures(),
            phis.join(";"),
            self.ess_final(),
            self.n_resampled_duplicates,
            self.jitter_accept_rate(),
            self.propagator_evals
        )
    }
}

/// `exp(logw − max) / Σ exp(logw − max)`.
pub fn normalize_logweights(logw: &[f64]) -> Result<Vec<f64>> {
    if logw.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
        return Err(Error::Degenerate("log-weights contain NaN or +inf".into()));
    }
    let max = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::Degenerate("every log-weight is -inf".into()));
    }
    let w: Vec<f64> = logw.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = w.iter().sum();
    Ok(w.into_iter().map(|v| v / total).collect())
}

/// `1 / Σ w²` for weights summing to one.
pub fn ess(weights: &[f64]) -> Result<f64> {
    let total: f64 = weights.iter().sum();
    if weights.is_empty() || (total - 1.0).abs() > 1e-12 || weights.iter().any(|w| !(*w >= 0.0)) {
        return Err(Error::Input(format!("weights are not normalized (sum {total})")));
    }
    Ok(1.0 / weights.iter().map(|w| w * w).sum::<f64>())
}

fn incremental_ess(base: &[f64], loglikes: &[f64], dphi: f64) -> Result<f64> {
    let logw: Vec<f64> = base
        .iter()
        .zip(loglikes)
        .map(|(b, l)| if dphi == 0.0 { *b } else { b + dphi * l })
        .collect();
    ess(&normalize_logweights(&logw)?)
}

/// Largest `φ ∈ (phi_prev, 1]` whose incremental weights keep the ESS at or
/// above `threshold`, starting from uniform weights.
pub fn find_next_temperature(loglikes: &[f64], phi_prev: f64, threshold: f64, bisection_iters: usize) -> Result<f64> {
    find_next_temperature_from(&vec![0.0; loglikes.len()], loglikes, phi_prev, threshold, bisection_iters)
}

/// As [`find_next_temperature`], on top of existing log-weights `base`.
pub fn find_next_temperature_from(
    base: &[f64],
    loglikes: &[f64],
    phi_prev: f64,
    threshold: f64,
    bisection_iters: usize,
) -> Result<f64> {
    if threshold > loglikes.len() as f64 {
        return parameter(format!("ESS threshold {threshold} exceeds ensemble size {}", loglikes.len()));
    }
    if !(0.0..1.0).contains(&phi_prev) {
        return parameter(format!("previous temperature must lie in [0, 1), got {phi_prev}"));
    }
    if loglikes.iter().all(|l| *l == f64::NEG_INFINITY) {
        return Err(Error::Degenerate("every log-likelihood is -inf".into()));
    }
    if incremental_ess(base, loglikes, 1.0 - phi_prev)? >= threshold {
        return Ok(1.0);
    }
    // ESS(lo) >= threshold > ESS(hi) throughout.
    let (mut lo, mut hi) = (phi_prev, 1.0);
    for _ in 0..bisection_iters {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if incremental_ess(base, loglikes, mid - phi_prev)? >= threshold {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    if lo > phi_prev {
        Ok(lo)
    } else {
        log::warn!("tempering cannot keep ESS above {threshold}; advancing to {hi:e}");
        Ok(hi)
    }
}

/// Systematic resampling with one offset `u ~ U[0, 1/N)`; ascending output.
pub fn resample_systematic<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> Result<Vec<usize>> {
    ess(weights)?;
    Ok(systematic_indices(weights, rng.random::<f64>()))
}

/// Positions `offset + k` against cumulative sums of `N·w`, with
/// `offset ∈ [0, 1)` measured in units of `1/N`.
pub(crate) fn systematic_indices(weights: &[f64], offset: f64) -> Vec<usize> {
    let n = weights.len();
    let scale = n as f64;
    let mut out = Vec::with_capacity(n);
    let mut cumulative = scale * weights[0];
    let mut i = 0;
    for k in 0..n {
        let point = offset + k as f64;
        while point >= cumulative && i + 1 < n {
            i += 1;
            cumulative += scale * weights[i];
        }
        out.push(i);
    }
    out
}

/// `mcmc_steps` Metropolis-Hastings moves on the path targeting the prior
/// tempered by `likelihood^phi`. The parent never changes. Returns the moved
/// particle, the number of accepted proposals and the propagator evaluations.
pub fn jitter<P: Propagator>(
    particle: &Particle<P::State, P::Path>,
    prop: &P,
    y: &P::Obs,
    phi: f64,
    cfg: &FilterConfig,
    rng: &mut StreamRng,
) -> Result<(Particle<P::State, P::Path>, usize, usize)> {
    let mut out = particle.clone();
    let Some(mut path) = particle.path.clone() else {
        return Err(Error::Input("cannot jitter a particle without a path".into()));
    };
    let mut accepted = 0;
    let mut evals = 0;
    for _ in 0..cfg.mcmc_steps {
        let fresh = prop.fresh_path(rng)?;
        let proposal = prop.blend(&path, &fresh, cfg.rho)?;
        let v = prop.propagate(&out.parent, &proposal)?;
        evals += 1;
        let ll = prop.log_likelihood(&v, y)?;
        let log_ratio = phi * (ll - out.loglike);
        let u: f64 = rng.random();
        if log_ratio >= 0.0 || u < log_ratio.exp() {
            path = proposal;
            out.state = v;
            out.loglike = ll;
            accepted += 1;
        }
    }
    out.path = Some(path);
    Ok((out, accepted, evals))
}

/// Propagates every particle from its current state over one window with a
/// fresh path drawn from `(seed, purpose, step, particle)`.
pub fn forecast_particles<P: Propagator>(
    particles: &[Particle<P::State, P::Path>],
    prop: &P,
    seed: u64,
    purpose: Purpose,
    step: u64,
) -> Result<Vec<Particle<P::State, P::Path>>> {
    particles
        .par_iter()
        .enumerate()
        .map(|(k, p)| {
            let mut rng = stream(seed, purpose, step, k as u64, 0);
            let path = prop.fresh_path(&mut rng)?;
            let state = prop.propagate(&p.state, &path)?;
            Ok(Particle {
                parent: p.state.clone(),
                path: Some(path),
                state,
                log_weight: p.log_weight,
                loglike: 0.0,
            })
        })
        .collect()
}

fn fill_loglikes<P: Propagator>(particles: &mut [Particle<P::State, P::Path>], prop: &P, y: &P::Obs) -> Result<()> {
    let lls = particles
        .par_iter()
        .map(|p| prop.log_likelihood(&p.state, y))
        .collect::<Result<Vec<_>>>()?;
    for (p, ll) in particles.iter_mut().zip(lls) {
        if ll.is_nan() {
            return Err(Error::Degenerate("log-likelihood is NaN".into()));
        }
        p.loglike = ll;
    }
    Ok(())
}

/// One assimilation step: forecast with fresh paths, then temper from
/// `φ = 0` to `φ = 1`, resampling and jittering duplicates at each accepted
/// temperature. Every stage after the first re-propagates all particles
/// from `(parent, path)`, so each stage costs `N` evaluations.
pub fn assimilate_step<P: Propagator>(
    ensemble: &[Particle<P::State, P::Path>],
    y: &P::Obs,
    prop: &P,
    cfg: &FilterConfig,
    ctx: StepContext,
) -> Result<(Vec<Particle<P::State, P::Path>>, StepDiagnostics)> {
    let out = assimilate_step_full(ensemble, y, prop, cfg, ctx)?;
    Ok((out.posterior, out.diagnostics))
}

/// Output of one assimilation step including the forecast it started from.
#[derive(Debug, Clone)]
pub struct StepOutput<S, P> {
    /// Propagated states before any reweighting, in particle order.
    pub forecast: Vec<S>,
    pub posterior: Vec<Particle<S, P>>,
    pub diagnostics: StepDiagnostics,
}

/// [`assimilate_step`], also returning the forecast ensemble.
pub fn assimilate_step_full<P: Propagator>(
    ensemble: &[Particle<P::State, P::Path>],
    y: &P::Obs,
    prop: &P,
    cfg: &FilterConfig,
    ctx: StepContext,
) -> Result<StepOutput<P::State, P::Path>> {
    cfg.validate()?;
    if ensemble.len() != cfg.n {
        return parameter(format!("ensemble has {} particles, config expects {}", ensemble.len(), cfg.n));
    }
    let n = cfg.n;
    let threshold = cfg.threshold();
    let mut diag = StepDiagnostics {
        step: ctx.step,
        time: ctx.time,
        phis: Vec::new(),
        ess_at_temperature: Vec::new(),
        n_resampled_duplicates: 0,
        jitter_proposals: 0,
        jitter_accepted: 0,
        propagator_evals: 0,
    };

    let mut particles = forecast_particles(ensemble, prop, ctx.seed, Purpose::ForecastPath, ctx.step)?;
    diag.propagator_evals += n;
    let forecast: Vec<P::State> = particles.iter().map(|p| p.state.clone()).collect();
    fill_loglikes(&mut particles, prop, y)?;
    let mut base: Vec<f64> = particles.iter().map(|p| p.log_weight).collect();
    let mut phi = 0.0;

    for stage in 1..=cfg.max_temperatures {
        if stage > 1 {
            let states = particles
                .par_iter()
                .map(|p| match &p.path {
                    Some(path) => prop.propagate(&p.parent, path),
                    None => Err(Error::Input("particle lost its path".into())),
                })
                .collect::<Result<Vec<_>>>()?;
            diag.propagator_evals += n;
            for (p, s) in particles.iter_mut().zip(states) {
                p.state = s;
            }
            fill_loglikes(&mut particles, prop, y)?;
        }
        let loglikes: Vec<f64> = particles.iter().map(|p| p.loglike).collect();
        let next = find_next_temperature_from(&base, &loglikes, phi, threshold, cfg.bisection_iters)
            .map_err(|e| degenerate_dump(e, ctx, phi, &loglikes))?;
        let logw: Vec<f64> = base.iter().zip(&loglikes).map(|(b, l)| b + (next - phi) * l).collect();
        let weights = normalize_logweights(&logw).map_err(|e| degenerate_dump(e, ctx, phi, &loglikes))?;
        diag.phis.push(next);
        diag.ess_at_temperature.push(ess(&weights)?);

        if next < 1.0 || cfg.final_resample_always {
            let mut rng = stream(ctx.seed, Purpose::Resample, ctx.step, stage as u64, 0);
            let idx = resample_systematic(&weights, &mut rng)?;
            let duplicate: Vec<bool> = (0..n).map(|k| k > 0 && idx[k] == idx[k - 1]).collect();
            diag.n_resampled_duplicates += duplicate.iter().filter(|d| **d).count();
            let moved = idx
                .par_iter()
                .enumerate()
                .map(|(k, &src)| {
                    let mut p = particles[src].clone();
                    p.log_weight = 0.0;
                    if !duplicate[k] || cfg.mcmc_steps == 0 {
                        return Ok((p, 0, 0, 0));
                    }
                    let mut rng = stream(ctx.seed, Purpose::JitterProposal, ctx.step, stage as u64, k as u64);
                    let (q, acc, evals) = jitter(&p, prop, y, next, cfg, &mut rng)?;
                    Ok((q, acc, cfg.mcmc_steps, evals))
                })
                .collect::<Result<Vec<_>>>()?;
            particles = Vec::with_capacity(n);
            for (p, acc, proposals, evals) in moved {
                diag.jitter_accepted += acc;
                diag.jitter_proposals += proposals;
                diag.propagator_evals += evals;
                particles.push(p);
            }
            base = vec![0.0; n];
        } else {
            let lw: Vec<f64> = weights.iter().map(|w| w.ln()).collect();
            for (p, w) in particles.iter_mut().zip(&lw) {
                p.log_weight = *w;
            }
            base = lw;
        }
        phi = next;
        if phi >= 1.0 {
            if !cfg.final_resample_always && diag.ess_final() < threshold {
                // Carried weights must start the next step above the threshold.
                let mut rng = stream(ctx.seed, Purpose::Resample, ctx.step, 0, 1);
                let idx = resample_systematic(&weights, &mut rng)?;
                particles = idx
                    .into_iter()
                    .map(|k| Particle { log_weight: 0.0, ..particles[k].clone() })
                    .collect();
            }
            return Ok(StepOutput { forecast, posterior: particles, diagnostics: diag });
        }
    }
    Err(Error::Degenerate(format!(
        "step {}: tempering did not reach 1 within {} temperatures (last {phi:e})",
        ctx.step, cfg.max_temperatures
    )))
}

fn degenerate_dump(e: Error, ctx: StepContext, phi: f64, loglikes: &[f64]) -> Error {
    match e {
        Error::Degenerate(msg) => {
            let finite = loglikes.iter().filter(|l| l.is_finite()).count();
            let max = loglikes.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            Error::Degenerate(format!(
                "{msg} at step {} (phi {phi:e}): {finite}/{} finite log-likelihoods, max {max:e}, values {loglikes:?}",
                ctx.step,
                loglikes.len()
            ))
        }
        other => other,
    }
}
