//! End-to-end pipelines for the perfect-model and imperfect-model scenarios.
//!
//! Every stage reads its inputs from and writes its outputs to one run
//! directory, so stages can be run separately from the command line:
//!
//! | stage | writes |
//! |---|---|
//! | [`run_spinup`] | `spinup/energy.csv`, `spinup/snap_XXXX.sfld`, `spinup/summary.txt` |
//! | [`run_calibrate_xi`] | `xi.eof`, `xi_metadata.txt` |
//! | [`run_calibrate_noise`] | `obs_noise.csv` |
//! | [`run_truth`] | `truth/truth_XXXX.sfld`, `observations.csv` |
//! | [`run_init_ensemble`] | `ensemble/initial/` |
//! | [`run_assimilation`] | `diagnostics.csv`, `step_diagnostics.csv`, `ranks_*.csv`, `trajectory_*.csv`, `checkpoint/`, `posteriors/` |
//! | [`run_forecast`] | `forecast_<start>.csv` |
//! | [`run_diagnose`] | `summary.txt` |

mod config;

use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

pub use config::{ExperimentConfig, Scenario};

use crate::diagnostics::{
    ensemble_mean, eddy_turnover_time, forecast_reliability, parse_diagnostics, probe_tag, rank, rank_histogram_chi2,
    reliability_csv, rmse, spread, trajectory_header, DiagnosticsRecord, ProbeSample, RankHistogram,
    ReliabilityPoint,
};
use crate::dynamics::{courant_number, spinup, Dynamics, SpinupResult};
use crate::ensembles::{
    member_draw, read_ensemble, read_particles, sample_initial_ensemble, write_ensemble, write_particles,
    DeformationConfig, FieldParticle, Member, MemberRecord,
};
use crate::error::{input, Error, Result};
use crate::fields::{coarse_grain_vorticity, poisson_solve, velocity, ScalarField, VectorField};
use crate::filtering::{
    assimilate_step_full, forecast_particles, kalman_filter, normalize_logweights, ess, LinearGaussian, Particle,
    Propagator, ScalarLinearModel, StepContext, StepDiagnostics,
};
use crate::io::{read_basis, read_field, write_atomic, write_basis, write_field};
use crate::observations::{
    calibrate_obs_noise, log_likelihood, observation_log_rows, observation_operator, observe, read_obs_noise,
    read_observation_log, write_obs_noise, ObsNoise, Observation, StationSet, OBS_LOG_HEADER,
};
use crate::rng::{stream, Purpose, StreamRng};
use crate::stochastic::{blend_paths, brownian_increments, calibrate_xi, NoiseBasis, PathIncrements, SaltModel};

/// Member id whose deformation draw seeds the perfect-model truth.
pub const TRUTH_MEMBER: usize = 1 << 40;

/// Runs `f` on a pool of `workers` threads (all cores when 0).
pub fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Parameter(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

fn snapshot_path(out: &Path, k: usize) -> PathBuf {
    out.join("spinup").join(format!("snap_{k:04}.sfld"))
}

fn truth_path(out: &Path, k: usize) -> PathBuf {
    out.join("truth").join(format!("truth_{k:04}.sfld"))
}

fn append(path: &Path, text: &str) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    f.write_all(text.as_bytes())?;
    Ok(())
}

/// Keeps the header and the rows whose first column is at most `max_step`.
fn truncate_csv(path: &Path, max_step: u64) -> Result<()> {
    let text = fs::read_to_string(path).map_err(|_| Error::Missing(path.display().to_string()))?;
    let mut out = String::new();
    for (i, line) in text.lines().enumerate() {
        let keep = i == 0
            || line
                .split(',')
                .next()
                .and_then(|s| s.parse::<u64>().ok())
                .is_some_and(|s| s <= max_step);
        if keep {
            out.push_str(line);
            out.push('\n');
        }
    }
    write_atomic(path, out.as_bytes())
}

/// The SALT SPDE over one assimilation window, observed at the stations.
pub struct SaltPropagator {
    pub model: SaltModel,
    pub n_sub: usize,
    pub stations: StationSet,
    pub noise: ObsNoise,
    pub cfl: crate::dynamics::CflPolicy,
}

impl Propagator for SaltPropagator {
    type State = ScalarField;
    type Path = PathIncrements;
    type Obs = Observation;

    fn propagate(&self, parent: &ScalarField, path: &PathIncrements) -> Result<ScalarField> {
        let q = self.model.propagate(parent, path)?;
        self.cfl.check(courant_number(&poisson_solve(&q)?, self.model.params().dt)?)?;
        Ok(q)
    }

    fn fresh_path(&self, rng: &mut StreamRng) -> Result<PathIncrements> {
        brownian_increments(rng, self.model.basis().m(), self.n_sub, self.model.params().dt)
    }

    fn blend(&self, current: &PathIncrements, fresh: &PathIncrements, rho: f64) -> Result<PathIncrements> {
        blend_paths(current, fresh, rho)
    }

    fn log_likelihood(&self, state: &ScalarField, y: &Observation) -> Result<f64> {
        log_likelihood(state, y, &self.stations, &self.noise)
    }
}

#[derive(Debug, Clone)]
pub struct SpinupSummary {
    pub energy_change_last_10pct: f64,
    pub max_speed: f64,
    pub mean_speed: f64,
    /// Eddy turnover time at `l = 1/2`.
    pub ett: f64,
    pub cfl_violations: usize,
}

/// Spins the fine model up from the reference vorticity, then records
/// `record_steps + 1` snapshots one coarse step apart. The last snapshot is
/// the truth's initial state.
pub fn run_spinup(cfg: &ExperimentConfig, out: &Path) -> Result<SpinupSummary> {
    let fine = cfg.fine_grid()?;
    let params = cfg.fine_params();
    fs::create_dir_all(out.join("spinup"))?;
    let SpinupResult { omega, series, cfl_violations } =
        spinup(fine, &params, cfg.spinup_time, cfg.energy_log_every, cfg.cfl(), |_, _, _| Ok(()))?;
    let mut csv = String::from("step,time,energy,enstrophy\n");
    for s in &series {
        writeln!(csv, "{},{},{:e},{:e}", s.step, s.time, s.energy, s.enstrophy).unwrap();
    }
    write_atomic(&out.join("spinup").join("energy.csv"), csv.as_bytes())?;
    let change = crate::dynamics::relative_energy_change(&series, 0.1).unwrap_or(f64::NAN);

    let model = Dynamics::new(fine, params)?;
    let mut w = omega;
    let mut speeds = Vec::new();
    write_field(&snapshot_path(out, 0), &w)?;
    for k in 1..=cfg.record_steps {
        for _ in 0..cfg.time_ratio() {
            w = model.step(&w)?;
        }
        write_field(&snapshot_path(out, k), &w)?;
        let u = velocity(&w)?;
        speeds.push((u.max_speed(), u.mean_speed()));
    }
    let max_speed = speeds.iter().map(|s| s.0).fold(0.0, f64::max);
    let mean_speed = speeds.iter().map(|s| s.1).sum::<f64>() / speeds.len() as f64;
    let summary = SpinupSummary {
        energy_change_last_10pct: change,
        max_speed,
        mean_speed,
        ett: eddy_turnover_time(mean_speed, 0.5)?,
        cfl_violations,
    };
    let text = format!(
        "spinup_time = {}\nfine_n = {}\nfine_nodes = {}\nrelative_energy_change_last_10pct = {:e}\nmax_speed = {:e}\nmean_speed = {:e}\nett = {:e}\ncfl_violations = {}\n",
        cfg.spinup_time,
        fine.n(),
        fine.len(),
        summary.energy_change_last_10pct,
        summary.max_speed,
        summary.mean_speed,
        summary.ett,
        summary.cfl_violations
    );
    write_atomic(&out.join("spinup").join("summary.txt"), text.as_bytes())?;
    if change > 0.05 {
        log::warn!("spin-up energy still changing by {:.1}% over the last 10% of the run", 100.0 * change);
    }
    Ok(summary)
}

/// The recorded post-spin-up snapshots, in time order.
pub fn read_snapshots(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<ScalarField>> {
    (0..=cfg.record_steps).map(|k| read_field(&snapshot_path(out, k))).collect()
}

/// Snapshot at the truth's initial time.
pub fn initial_truth_fine(cfg: &ExperimentConfig, out: &Path) -> Result<ScalarField> {
    read_field(&snapshot_path(out, cfg.record_steps))
}

/// Deformation pool: every `pool_stride`-th snapshot before the initial time.
pub fn deformation_pool(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<ScalarField>> {
    (0..cfg.record_steps)
        .step_by(cfg.pool_stride)
        .map(|k| read_field(&snapshot_path(out, k)))
        .collect()
}

pub fn run_calibrate_xi(cfg: &ExperimentConfig, out: &Path) -> Result<NoiseBasis> {
    let snaps = read_snapshots(cfg, out)?;
    let coarse = cfg.coarse_grid()?;
    let basis = calibrate_xi(&snaps, coarse, &cfg.coarse_params(), cfg.xi_fraction)?;
    write_basis(&out.join("xi.eof"), &basis)?;
    let total: f64 = basis.spectrum().iter().sum();
    let mut meta = format!(
        "modes = {}\nvariance_fraction_target = {}\nresiduals = {}\nfine_cells = {}\nfine_nodes = {}\ncoarse_cells = {}\ncoarse_nodes = {}\n\
amplitude_convention = zeta_i = unit eigenvector * sqrt(eigenvalue / dt_coarse), dt_coarse = {}\nretained_variance = {:e}\nspectrum =",
        basis.m(),
        cfg.xi_fraction,
        snaps.len() - 1,
        cfg.fine_n,
        cfg.fine_grid()?.len(),
        cfg.coarse_n,
        coarse.len(),
        cfg.dt_coarse,
        total
    );
    for s in basis.spectrum() {
        write!(meta, " {s:e}").unwrap();
    }
    meta.push('\n');
    write_atomic(&out.join("xi_metadata.txt"), meta.as_bytes())?;
    Ok(basis)
}

pub fn run_calibrate_noise(cfg: &ExperimentConfig, out: &Path) -> Result<ObsNoise> {
    let velocities = read_snapshots(cfg, out)?
        .par_iter()
        .map(velocity)
        .collect::<Result<Vec<_>>>()?;
    let noise = calibrate_obs_noise(&velocities, cfg.coarse_grid()?, &cfg.station_set()?, cfg.lambda, cfg.sigma_floor)?;
    write_obs_noise(&out.join("obs_noise.csv"), &noise)?;
    Ok(noise)
}

fn salt_propagator(cfg: &ExperimentConfig, basis: NoiseBasis, noise: ObsNoise) -> Result<SaltPropagator> {
    if basis.grid() != cfg.coarse_grid()? {
        return input("noise basis grid differs from the configured coarse grid");
    }
    Ok(SaltPropagator {
        model: SaltModel::new(cfg.coarse_params(), basis)?,
        n_sub: cfg.assimilation_interval,
        stations: cfg.station_set()?,
        noise,
        cfl: cfg.cfl(),
    })
}

fn deformation_config(cfg: &ExperimentConfig, out: &Path, n_steps: usize) -> Result<DeformationConfig> {
    Ok(DeformationConfig {
        epsilon: cfg.epsilon,
        n_steps,
        dt_fine: cfg.dt_fine,
        pool: deformation_pool(cfg, out)?,
    })
}

/// Coarse truth vorticity at every window end, index 0 being the initial time.
pub fn truth_trajectory(cfg: &ExperimentConfig, out: &Path, basis: Option<&NoiseBasis>) -> Result<Vec<ScalarField>> {
    let coarse = cfg.coarse_grid()?;
    let w0 = initial_truth_fine(cfg, out)?;
    let windows = cfg.total_windows;
    let mut traj = Vec::with_capacity(windows + 1);
    match cfg.scenario {
        Scenario::Perfect => {
            let basis = basis.ok_or_else(|| Error::Missing("noise basis for the perfect scenario".into()))?;
            let dcfg = deformation_config(cfg, out, cfg.deformation_steps)?;
            let (beta, pool_index) = member_draw(&dcfg, cfg.seed, TRUTH_MEMBER)?;
            let mut q = crate::ensembles::deform(&w0, &dcfg.pool[pool_index], beta, cfg.deformation_steps, cfg.dt_fine, coarse)?;
            let model = SaltModel::new(cfg.coarse_params(), basis.clone())?;
            traj.push(q.clone());
            for k in 1..=windows {
                let mut rng = stream(cfg.seed, Purpose::TruthPath, k as u64, 0, 0);
                let path = brownian_increments(&mut rng, basis.m(), cfg.assimilation_interval, cfg.dt_coarse)?;
                q = model.propagate(&q, &path)?;
                cfg.cfl().check(courant_number(&poisson_solve(&q)?, cfg.dt_coarse)?)?;
                traj.push(q.clone());
            }
        }
        Scenario::Imperfect => {
            let model = Dynamics::new(cfg.fine_grid()?, cfg.fine_params())?;
            let mut w = w0;
            traj.push(coarse_grain_vorticity(&w, coarse)?);
            for _ in 1..=windows {
                for _ in 0..cfg.assimilation_interval * cfg.time_ratio() {
                    w = model.step(&w)?;
                }
                cfg.cfl().check(courant_number(&poisson_solve(&w)?, cfg.dt_fine)?)?;
                traj.push(coarse_grain_vorticity(&w, coarse)?);
            }
        }
    }
    Ok(traj)
}

/// Writes the truth trajectory and the synthetic observations.
pub fn run_truth(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<ScalarField>> {
    let basis = match cfg.scenario {
        Scenario::Perfect => Some(read_basis(&out.join("xi.eof"))?),
        Scenario::Imperfect => None,
    };
    let noise = read_obs_noise(&out.join("obs_noise.csv"))?;
    let stations = cfg.station_set()?;
    let traj = truth_trajectory(cfg, out, basis.as_ref())?;
    fs::create_dir_all(out.join("truth"))?;
    let mut log = format!("{OBS_LOG_HEADER}\n");
    for (k, q) in traj.iter().enumerate() {
        write_field(&truth_path(out, k), q)?;
        if k == 0 {
            continue;
        }
        let u = velocity(q)?;
        let y = observe(&u, &stations, &noise, cfg.seed, k as u64)?;
        let exact = observation_operator(&u, &stations)?;
        observation_log_rows(&mut log, k as f64 * cfg.window_time(), &y, &exact, &stations)?;
    }
    write_atomic(&out.join("observations.csv"), log.as_bytes())?;
    Ok(traj)
}

pub fn read_truth(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<ScalarField>> {
    (0..=cfg.total_windows).map(|k| read_field(&truth_path(out, k))).collect()
}

/// Initial ensemble with `n_steps` deformation steps.
pub fn initial_ensemble(cfg: &ExperimentConfig, out: &Path, n_steps: usize) -> Result<Vec<Member>> {
    let dcfg = deformation_config(cfg, out, n_steps)?;
    sample_initial_ensemble(&dcfg, &initial_truth_fine(cfg, out)?, cfg.filter.n, cfg.seed, cfg.coarse_grid()?)
}

pub fn run_init_ensemble(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<Member>> {
    let members = initial_ensemble(cfg, out, cfg.deformation_steps)?;
    write_ensemble(&out.join("ensemble").join("initial"), &members)?;
    Ok(members)
}

fn station_rmse(mean: &VectorField, y: &Observation, stations: &StationSet) -> Result<f64> {
    let h = observation_operator(mean, stations)?;
    let s: f64 = h.iter().zip(&y.values).map(|(a, b)| (a - b).powi(2)).sum();
    Ok((s / stations.len() as f64).sqrt())
}

fn field_states(particles: &[FieldParticle]) -> Vec<ScalarField> {
    particles.iter().map(|p| p.state.clone()).collect()
}

fn velocities_of(states: &[ScalarField]) -> Result<Vec<VectorField>> {
    states.par_iter().map(velocity).collect()
}

fn ensemble_stats(states: &[ScalarField], truth: &VectorField) -> Result<(f64, f64, VectorField, Vec<VectorField>)> {
    let vel = velocities_of(states)?;
    let mean = ensemble_mean(&vel)?;
    let s = if vel.len() > 1 { spread(&vel)? } else { 0.0 };
    Ok((rmse(&mean, truth)?, s, mean, vel))
}

struct AssimilationInputs {
    prop: SaltPropagator,
    truth: Vec<ScalarField>,
    observations: Vec<Observation>,
    stations: StationSet,
}

fn load_inputs(cfg: &ExperimentConfig, out: &Path) -> Result<AssimilationInputs> {
    let basis = read_basis(&out.join("xi.eof"))?;
    let noise = read_obs_noise(&out.join("obs_noise.csv"))?;
    let stations = cfg.station_set()?;
    let truth = read_truth(cfg, out)?;
    let observations: Vec<Observation> = read_observation_log(&out.join("observations.csv"), &stations)?
        .into_iter()
        .map(|o| o.0)
        .collect();
    if observations.len() != cfg.total_windows || observations.iter().enumerate().any(|(k, o)| o.step != k as u64 + 1) {
        return input(format!(
            "observations.csv holds {} windows, config expects {}",
            observations.len(),
            cfg.total_windows
        ));
    }
    Ok(AssimilationInputs {
        prop: salt_propagator(cfg, basis, noise)?,
        truth,
        observations,
        stations,
    })
}

fn probe_files(cfg: &ExperimentConfig, out: &Path) -> Vec<((f64, f64), PathBuf, PathBuf)> {
    cfg.probe_points()
        .into_iter()
        .map(|(x, y)| {
            let tag = probe_tag(x, y);
            ((x, y), out.join(format!("ranks_{tag}.csv")), out.join(format!("trajectory_{tag}.csv")))
        })
        .collect()
}

fn write_checkpoint(out: &Path, step: usize, posterior: &[FieldParticle], prior: &[FieldParticle], records: &[MemberRecord]) -> Result<()> {
    let dir = out.join("checkpoint");
    write_particles(&dir.join("posterior"), posterior, records)?;
    write_particles(&dir.join("prior"), prior, records)?;
    write_particles(&out.join("posteriors").join(format!("step_{step:04}")), posterior, records)?;
    // Written last: marks the checkpoint complete.
    write_atomic(&dir.join("state.txt"), format!("window = {step}\n").as_bytes())
}

fn read_checkpoint_window(out: &Path) -> Result<Option<usize>> {
    let p = out.join("checkpoint").join("state.txt");
    if !p.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&p)?;
    text.trim()
        .strip_prefix("window = ")
        .and_then(|v| v.parse().ok())
        .map(Some)
        .ok_or_else(|| Error::Format { path: p, reason: format!("malformed checkpoint state {text:?}") })
}

/// Runs the filter for every window, with a no-assimilation prior ensemble
/// alongside. With `resume`, continues from the last complete checkpoint.
/// One assimilated window.
#[derive(Debug, Clone)]
pub struct WindowResult {
    pub record: DiagnosticsRecord,
    pub step: StepDiagnostics,
}

pub fn run_assimilation(cfg: &ExperimentConfig, out: &Path, resume: bool) -> Result<Vec<WindowResult>> {
    run_assimilation_until(cfg, out, resume, cfg.total_windows)
}

/// As [`run_assimilation`], stopping after window `last`.
pub fn run_assimilation_until(cfg: &ExperimentConfig, out: &Path, resume: bool, last: usize) -> Result<Vec<WindowResult>> {
    let AssimilationInputs { prop, truth, observations, stations } = load_inputs(cfg, out)?;
    let n = cfg.filter.n;
    let diag_path = out.join("diagnostics.csv");
    let step_path = out.join("step_diagnostics.csv");
    let probes = probe_files(cfg, out);
    let probe_index: Vec<usize> = probes
        .iter()
        .map(|(pt, _, _)| stations.coords().iter().position(|c| c == pt).expect("validated probe"))
        .collect();

    let checkpoint = if resume { read_checkpoint_window(out)? } else { None };
    let (mut posterior, mut prior, records, start) = match checkpoint {
        Some(k) => {
            let (post, records) = read_particles(&out.join("checkpoint").join("posterior"))?;
            let (pri, _) = read_particles(&out.join("checkpoint").join("prior"))?;
            if post.len() != n || pri.len() != n {
                return input(format!("checkpoint holds {} particles, config expects {n}", post.len()));
            }
            for p in [&diag_path, &step_path] {
                truncate_csv(p, k as u64)?;
            }
            for (_, r, t) in &probes {
                truncate_csv(r, k as u64)?;
                truncate_csv(t, k as u64)?;
            }
            log::info!("resuming after window {k}");
            (post, pri, records, k)
        }
        None => {
            let members = read_ensemble(&out.join("ensemble").join("initial"))?;
            if members.len() != n {
                return input(format!("initial ensemble has {} members, config expects {n}", members.len()));
            }
            let records: Vec<MemberRecord> = members.iter().map(|m| m.record).collect();
            let particles: Vec<FieldParticle> = members.into_iter().map(|m| Particle::new(m.omega)).collect();
            let truth_u = velocity(&truth[0])?;
            let (r0, s0, _, _) = ensemble_stats(&field_states(&particles), &truth_u)?;
            let rec = DiagnosticsRecord {
                step: 0,
                time: 0.0,
                rmse_posterior: r0,
                rmse_forecast: f64::NAN,
                rmse_forecast_vs_noisyobs: f64::NAN,
                rmse_prior: r0,
                spread_posterior: s0,
                spread_forecast: f64::NAN,
                spread_prior: s0,
                ess: n as f64,
                n_temperatures: 0,
                propagator_evals: 0,
            };
            write_atomic(&diag_path, format!("{}\n{}\n", DiagnosticsRecord::CSV_HEADER, rec.csv_row()).as_bytes())?;
            write_atomic(&step_path, format!("{}\n", StepDiagnostics::CSV_HEADER).as_bytes())?;
            for (_, r, t) in &probes {
                write_atomic(r, b"step,rank\n")?;
                write_atomic(t, format!("{}\n", trajectory_header(n)).as_bytes())?;
            }
            (particles.clone(), particles, records, 0)
        }
    };

    let mut results = Vec::new();
    for k in start + 1..=last.min(cfg.total_windows) {
        let time = k as f64 * cfg.window_time();
        let y = &observations[k - 1];
        let ctx = StepContext { seed: cfg.seed, step: k as u64, time };
        let step = assimilate_step_full(&posterior, y, &prop, &cfg.filter, ctx)?;
        prior = forecast_particles(&prior, &prop, cfg.seed, Purpose::PriorPath, k as u64)?;
        posterior = step.posterior;

        let truth_u = velocity(&truth[k])?;
        let (rp, sp, _, post_vel) = ensemble_stats(&field_states(&posterior), &truth_u)?;
        let (rf, sf, fmean, fore_vel) = ensemble_stats(&step.forecast, &truth_u)?;
        let (rq, sq, _, prior_vel) = ensemble_stats(&field_states(&prior), &truth_u)?;
        let d = &step.diagnostics;
        let rec = DiagnosticsRecord {
            step: k as u64,
            time,
            rmse_posterior: rp,
            rmse_forecast: rf,
            rmse_forecast_vs_noisyobs: station_rmse(&fmean, y, &stations)?,
            rmse_prior: rq,
            spread_posterior: sp,
            spread_forecast: sf,
            spread_prior: sq,
            ess: d.ess_final(),
            n_temperatures: d.n_temperatures(),
            propagator_evals: d.propagator_evals,
        };
        append(&diag_path, &format!("{}\n", rec.csv_row()))?;
        append(&step_path, &format!("{}\n", d.csv_row()))?;
        for (((x, yy), rpath, tpath), &si) in probes.iter().zip(&probe_index) {
            let at = |v: &VectorField| v.x.sample(*x, *yy);
            let fore: Vec<f64> = fore_vel.iter().map(at).collect::<Result<_>>()?;
            let truth_x = at(&truth_u)?;
            append(rpath, &format!("{k},{}\n", rank(truth_x, &fore)))?;
            let sample = ProbeSample {
                step: k as u64,
                truth: truth_x,
                truth_plus_noise: y.values[2 * si],
                members: post_vel.iter().map(at).collect::<Result<_>>()?,
                prior_members: prior_vel.iter().map(at).collect::<Result<_>>()?,
            };
            append(tpath, &format!("{}\n", sample.trajectory_row()))?;
        }
        if k % cfg.checkpoint_every == 0 || k == cfg.total_windows {
            write_checkpoint(out, k, &posterior, &prior, &records)?;
        }
        log::info!(
            "window {k}: rmse posterior {rp:.3e} prior {rq:.3e}, {} temperatures, {} evals",
            d.n_temperatures(),
            d.propagator_evals
        );
        results.push(WindowResult { record: rec, step: step.diagnostics });
    }
    Ok(results)
}

/// Free forecast from the posterior saved at window `start`.
pub fn run_forecast(cfg: &ExperimentConfig, out: &Path, start: usize) -> Result<Vec<ReliabilityPoint>> {
    let AssimilationInputs { prop, truth, .. } = load_inputs(cfg, out)?;
    let dir = out.join("posteriors").join(format!("step_{start:04}"));
    let (particles, _) = read_particles(&dir)?;
    let horizon = cfg.forecast_horizon.min(cfg.total_windows.saturating_sub(start));
    if horizon < cfg.forecast_horizon {
        log::warn!("forecast horizon truncated to {horizon} windows by the truth length");
    }
    let truth_u: Vec<VectorField> = truth[start + 1..=start + horizon].iter().map(velocity).collect::<Result<_>>()?;
    let points = forecast_reliability(&field_states(&particles), &prop, velocity, &truth_u, horizon, cfg.seed, start as u64)?;
    write_atomic(&out.join(format!("forecast_{start}.csv")), reliability_csv(&points).as_bytes())?;
    Ok(points)
}

/// Summary of a finished run.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub records: Vec<DiagnosticsRecord>,
    pub rank_histograms: Vec<((f64, f64), RankHistogram)>,
}

impl RunSummary {
    /// Fraction of windows after `after` where the posterior beats the prior.
    pub fn posterior_beats_prior(&self, after: u64) -> f64 {
        let late: Vec<&DiagnosticsRecord> = self.records.iter().filter(|r| r.step > after).collect();
        late.iter().filter(|r| r.rmse_posterior < r.rmse_prior).count() as f64 / late.len().max(1) as f64
    }
}

pub fn run_diagnose(cfg: &ExperimentConfig, out: &Path) -> Result<RunSummary> {
    let path = out.join("diagnostics.csv");
    let text = fs::read_to_string(&path).map_err(|_| Error::Missing(path.display().to_string()))?;
    let records = parse_diagnostics(&text)?;
    let mut rank_histograms = Vec::new();
    for (pt, rpath, _) in probe_files(cfg, out) {
        let t = fs::read_to_string(&rpath).map_err(|_| Error::Missing(rpath.display().to_string()))?;
        let ranks: Vec<usize> = t
            .lines()
            .skip(1)
            .filter(|l| !l.is_empty())
            .map(|l| {
                l.split(',')
                    .nth(1)
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| Error::Format { path: rpath.clone(), reason: format!("bad row {l:?}") })
            })
            .collect::<Result<_>>()?;
        if !ranks.is_empty() {
            rank_histograms.push((pt, rank_histogram_chi2(&ranks, cfg.filter.n)?));
        }
    }
    let summary = RunSummary { records, rank_histograms };
    let mut s = format!(
        "windows = {}\nposterior_beats_prior_after_5 = {:.3}\n",
        summary.records.len().saturating_sub(1),
        summary.posterior_beats_prior(5)
    );
    for ((x, y), h) in &summary.rank_histograms {
        writeln!(
            s,
            "rank ({x}, {y}): chi2 = {:.2}, critical = {:.2}, rejected = {}, enough_samples = {}",
            h.chi2, h.critical, h.rejected, h.enough_samples
        )
        .unwrap();
    }
    write_atomic(&out.join("summary.txt"), s.as_bytes())?;
    Ok(summary)
}

/// Particle filter against the exact Kalman filter on a scalar model.
#[derive(Debug, Clone, PartialEq)]
pub struct KalmanCheckRow {
    pub step: usize,
    pub pf_mean: f64,
    pub pf_var: f64,
    pub kf_mean: f64,
    pub kf_var: f64,
    pub ess: f64,
    pub mean_ok: bool,
    pub var_ok: bool,
}

/// Runs `steps` assimilation steps with `n` particles. The posterior mean
/// must lie within `3·sqrt(kf_var / ess)` of the Kalman mean and the
/// variance within 10%, where `ess` is the ESS of the final weights.
pub fn kalman_check(model: ScalarLinearModel, n: usize, steps: usize, seed: u64, filter: &crate::filtering::FilterConfig) -> Result<Vec<KalmanCheckRow>> {
    let prop = LinearGaussian(model);
    let mut rng = stream(seed, Purpose::TruthPath, 0, 0, 0);
    let mut x = model.m0 + model.p0.sqrt() * rng.sample::<f64, _>(StandardNormal);
    let mut ys = Vec::with_capacity(steps);
    for _ in 0..steps {
        x = model.a * x + model.q.sqrt() * rng.sample::<f64, _>(StandardNormal);
        ys.push(model.h * x + model.r.sqrt() * rng.sample::<f64, _>(StandardNormal));
    }
    let kf = kalman_filter(&model, &ys)?;
    let cfg = crate::filtering::FilterConfig { n, ..filter.clone() };
    let mut ens: Vec<Particle<f64, f64>> = (0..n)
        .map(|k| {
            let mut r = stream(seed, Purpose::InitialEnsemble, k as u64, 0, 0);
            Particle::new(model.m0 + model.p0.sqrt() * r.sample::<f64, _>(StandardNormal))
        })
        .collect();
    let mut rows = Vec::with_capacity(steps);
    for (k, (y, &(km, kv))) in ys.iter().zip(&kf).enumerate() {
        let ctx = StepContext { seed, step: k as u64 + 1, time: (k + 1) as f64 };
        let out = assimilate_step_full(&ens, y, &prop, &cfg, ctx)?;
        ens = out.posterior;
        let w = normalize_logweights(&ens.iter().map(|p| p.log_weight).collect::<Vec<_>>())?;
        let mean: f64 = ens.iter().zip(&w).map(|(p, w)| w * p.state).sum();
        let var: f64 = ens.iter().zip(&w).map(|(p, w)| w * (p.state - mean).powi(2)).sum::<f64>() * n as f64
            / (n as f64 - 1.0);
        let e = out.diagnostics.ess_final().min(ess(&w)?);
        rows.push(KalmanCheckRow {
            step: k + 1,
            pf_mean: mean,
            pf_var: var,
            kf_mean: km,
            kf_var: kv,
            ess: e,
            mean_ok: (mean - km).abs() <= 3.0 * (kv / e).sqrt(),
            var_ok: (var - kv).abs() <= 0.1 * kv,
        });
    }
    Ok(rows)
}

pub fn kalman_check_csv(rows: &[KalmanCheckRow]) -> String {
    let mut s = String::from("step,pf_mean,pf_var,kf_mean,kf_var,ess,mean_ok,var_ok\n");
    for r in rows {
        writeln!(
            s,
            "{},{:e},{:e},{:e},{:e},{:e},{},{}",
            r.step, r.pf_mean, r.pf_var, r.kf_mean, r.kf_var, r.ess, r.mean_ok, r.var_ok
        )
        .unwrap();
    }
    s
}

/// Writes the effective configuration next to the outputs.
pub fn write_config(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    write_atomic(&out.join("config.ini"), cfg.to_file_string().as_bytes())
}

/// Runs every stage in order.
pub fn run_all(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<WindowResult>> {
    write_config(cfg, out)?;
    run_spinup(cfg, out)?;
    run_calibrate_xi(cfg, out)?;
    run_calibrate_noise(cfg, out)?;
    run_truth(cfg, out)?;
    run_init_ensemble(cfg, out)?;
    run_assimilation(cfg, out, false)
}
