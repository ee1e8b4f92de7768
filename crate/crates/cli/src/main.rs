use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use saltda::experiments::{self as ex, ExperimentConfig};
use saltda::filtering::ScalarLinearModel;

/// Particle filtering for the stochastic 2D Euler equations.
#[derive(Parser)]
#[command(name = "saltda", version)]
struct Cli {
    /// Experiment config file (`key = value` lines under section headers).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides `[experiment] seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 0 uses every core. Results do not depend on it.
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,
    /// Run directory shared by all stages.
    #[arg(long, global = true, default_value = "run")]
    out_dir: PathBuf,
    /// Continue `assimilate` from the last complete checkpoint.
    #[arg(long, global = true)]
    resume: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Spin the fine model up and record post-spin-up snapshots.
    Spinup,
    /// Generate the truth trajectory and noisy observations.
    Truth,
    /// Estimate the noise basis from the recorded snapshots.
    CalibrateXi,
    /// Estimate per-station observation noise from the recorded snapshots.
    CalibrateNoise,
    /// Sample the initial ensemble by deformation.
    InitEnsemble,
    /// Run the particle filter over every window.
    Assimilate,
    /// Free forecast from a saved posterior, written as rmse and spread per window.
    Forecast {
        /// Window whose posterior starts the forecast.
        #[arg(long)]
        start: usize,
    },
    /// Summarize diagnostics and rank histograms.
    Diagnose,
    /// Compare the filter against the exact Kalman filter on a scalar model.
    KalmanCheck {
        #[arg(long, default_value_t = 10_000)]
        particles: usize,
        #[arg(long, default_value_t = 20)]
        steps: usize,
    },
    /// Run spinup through assimilate in order.
    All,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => {
            let p = cli.out_dir.join("config.ini");
            if p.exists() {
                ExperimentConfig::load(&p).with_context(|| format!("loading {}", p.display()))?
            } else {
                ExperimentConfig::default()
            }
        }
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli, cfg: &ExperimentConfig) -> Result<()> {
    let out: &Path = &cli.out_dir;
    match &cli.command {
        Command::Spinup => {
            ex::write_config(cfg, out)?;
            let s = ex::run_spinup(cfg, out)?;
            println!(
                "spin-up done: energy change over last 10% = {:.3e}, max speed = {:.3e}, ett = {:.3e}",
                s.energy_change_last_10pct, s.max_speed, s.ett
            );
        }
        Command::CalibrateXi => {
            let b = ex::run_calibrate_xi(cfg, out)?;
            println!("noise basis: {} modes", b.m());
        }
        Command::CalibrateNoise => {
            let n = ex::run_calibrate_noise(cfg, out)?;
            let max = n.sigmas().iter().cloned().fold(0.0, f64::max);
            println!("observation noise: {} stations, max sigma {max:.3e}", n.sigmas().len() / 2);
        }
        Command::Truth => {
            let t = ex::run_truth(cfg, out)?;
            println!("truth: {} windows", t.len() - 1);
        }
        Command::InitEnsemble => {
            let m = ex::run_init_ensemble(cfg, out)?;
            println!("initial ensemble: {} members", m.len());
        }
        Command::Assimilate => {
            let r = ex::run_assimilation(cfg, out, cli.resume)?;
            if let Some(last) = r.last() {
                println!(
                    "window {}: rmse posterior {:.3e}, prior {:.3e}",
                    last.record.step, last.record.rmse_posterior, last.record.rmse_prior
                );
            }
        }
        Command::Forecast { start } => {
            let p = ex::run_forecast(cfg, out, *start)?;
            for q in p {
                println!("j = {}: rmse {:.3e}, spread {:.3e}", q.j, q.rmse, q.spread);
            }
        }
        Command::Diagnose => {
            ex::run_diagnose(cfg, out)?;
            print!("{}", std::fs::read_to_string(out.join("summary.txt"))?);
        }
        Command::KalmanCheck { particles, steps } => {
            let model = ScalarLinearModel { a: 0.9, q: 0.5, h: 1.0, r: 1.0, m0: 0.0, p0: 1.0 };
            let rows = ex::kalman_check(model, *particles, *steps, cfg.seed, &cfg.filter)?;
            std::fs::create_dir_all(out)?;
            std::fs::write(out.join("kalman_check.csv"), ex::kalman_check_csv(&rows))?;
            let bad = rows.iter().filter(|r| !(r.mean_ok && r.var_ok)).count();
            println!("kalman check: {}/{} steps within tolerance", rows.len() - bad, rows.len());
            if bad > 0 {
                bail!("{bad} steps outside tolerance");
            }
        }
        Command::All => {
            let r = ex::run_all(cfg, out)?;
            println!("completed {} windows", r.len());
        }
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let cfg = load_config(&cli)?;
    ex::with_workers(cli.workers, || run(&cli, &cfg))?
}
