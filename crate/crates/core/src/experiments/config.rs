//! `key = value` configuration with `[section]` headers.
//!
//! Every key has a default; a file only lists what it changes. Unknown
//! sections, unknown keys, duplicates and unparsable values are errors.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::dynamics::{CflPolicy, ModelParams};
use crate::error::{Error, Result};
use crate::fields::Grid;
use crate::filtering::FilterConfig;
use crate::observations::StationSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scenario {
    /// Truth is one realisation of the coarse SPDE.
    Perfect,
    /// Truth is the coarse-grained fine deterministic run.
    Imperfect,
}

impl FromStr for Scenario {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "perfect" => Ok(Self::Perfect),
            "imperfect" => Ok(Self::Imperfect),
            other => Err(format!("unknown scenario {other:?} (perfect | imperfect)")),
        }
    }
}

impl std::fmt::Display for Scenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Perfect => "perfect",
            Self::Imperfect => "imperfect",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    // [model]
    pub a: f64,
    pub b: u32,
    pub r: f64,
    pub dt_fine: f64,
    pub dt_coarse: f64,
    pub cfl_limit: f64,
    pub cfl_abort: bool,
    // [grid]
    pub fine_n: usize,
    pub coarse_n: usize,
    // [filter]
    pub filter: FilterConfig,
    // [observations]
    pub stations: usize,
    pub lambda: f64,
    pub sigma_floor: f64,
    // [experiment]
    pub scenario: Scenario,
    pub seed: u64,
    pub spinup_time: f64,
    pub energy_log_every: usize,
    /// Fine snapshots recorded after spin-up, one per coarse step.
    pub record_steps: usize,
    pub xi_fraction: f64,
    pub epsilon: f64,
    pub deformation_steps: usize,
    /// Every `pool_stride`-th recorded snapshot joins the deformation pool.
    pub pool_stride: usize,
    /// Coarse steps per assimilation window.
    pub assimilation_interval: usize,
    pub total_windows: usize,
    pub checkpoint_every: usize,
    pub forecast_horizon: usize,
    pub probes: Vec<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            a: 0.1,
            b: 8,
            r: 0.01,
            dt_fine: 0.01,
            dt_coarse: 0.04,
            cfl_limit: 0.5,
            cfl_abort: false,
            fine_n: 128,
            coarse_n: 32,
            filter: FilterConfig { n: 24, ..FilterConfig::default() },
            stations: 9,
            lambda: 0.6,
            sigma_floor: 1e-6,
            scenario: Scenario::Perfect,
            seed: 1,
            spinup_time: 60.0,
            energy_log_every: 50,
            record_steps: 100,
            xi_fraction: 0.5,
            epsilon: 0.25,
            deformation_steps: 104,
            pool_stride: 10,
            assimilation_interval: 5,
            total_windows: 50,
            checkpoint_every: 10,
            forecast_horizon: 10,
            probes: vec![0.25, 0.5, 0.75],
        }
    }
}

const SECTIONS: [&str; 5] = ["model", "grid", "filter", "observations", "experiment"];

fn parse<T: FromStr>(key: &str, value: &str) -> std::result::Result<T, String>
where
    T::Err: std::fmt::Display,
{
    value.parse::<T>().map_err(|e| format!("{key} = {value:?}: {e}"))
}

fn parse_list(key: &str, value: &str) -> std::result::Result<Vec<f64>, String> {
    value.split(',').map(|v| parse::<f64>(key, v.trim())).collect()
}

impl ExperimentConfig {
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut section: Option<&str> = None;
        let mut seen = HashSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = |msg: String| Error::Input(format!("config line {}: {msg}", lineno + 1));
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim();
                section = Some(SECTIONS.iter().find(|s| **s == name).ok_or_else(|| at(format!("unknown section [{name}]")))?);
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(at(format!("expected key = value, got {line:?}")));
            };
            let (key, value) = (key.trim(), value.trim());
            let sec = section.ok_or_else(|| at(format!("key {key} appears before any section")))?;
            if !seen.insert(format!("{sec}.{key}")) {
                return Err(at(format!("duplicate key {sec}.{key}")));
            }
            cfg.set(sec, key, value).map_err(at)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|_| Error::Missing(path.display().to_string()))?;
        Self::parse_str(&text)
    }

    fn set(&mut self, section: &str, key: &str, v: &str) -> std::result::Result<(), String> {
        let f = &mut self.filter;
        match (section, key) {
            ("model", "a") => self.a = parse(key, v)?,
            ("model", "b") => self.b = parse(key, v)?,
            ("model", "r") => self.r = parse(key, v)?,
            ("model", "dt_fine") => self.dt_fine = parse(key, v)?,
            ("model", "dt_coarse") => self.dt_coarse = parse(key, v)?,
            ("model", "cfl_limit") => self.cfl_limit = parse(key, v)?,
            ("model", "cfl_abort") => self.cfl_abort = parse(key, v)?,
            ("grid", "fine_n") => self.fine_n = parse(key, v)?,
            ("grid", "coarse_n") => self.coarse_n = parse(key, v)?,
            ("filter", "particles") => f.n = parse(key, v)?,
            ("filter", "ess_threshold") => f.ess_threshold_fraction = parse(key, v)?,
            ("filter", "rho") => f.rho = parse(key, v)?,
            ("filter", "mcmc_steps") => f.mcmc_steps = parse(key, v)?,
            ("filter", "max_temperatures") => f.max_temperatures = parse(key, v)?,
            ("filter", "bisection_iters") => f.bisection_iters = parse(key, v)?,
            ("filter", "final_resample_always") => f.final_resample_always = parse(key, v)?,
            ("observations", "stations") => self.stations = parse(key, v)?,
            ("observations", "lambda") => self.lambda = parse(key, v)?,
            ("observations", "sigma_floor") => self.sigma_floor = parse(key, v)?,
            ("experiment", "scenario") => self.scenario = parse(key, v)?,
            ("experiment", "seed") => self.seed = parse(key, v)?,
            ("experiment", "spinup_time") => self.spinup_time = parse(key, v)?,
            ("experiment", "energy_log_every") => self.energy_log_every = parse(key, v)?,
            ("experiment", "record_steps") => self.record_steps = parse(key, v)?,
            ("experiment", "xi_fraction") => self.xi_fraction = parse(key, v)?,
            ("experiment", "epsilon") => self.epsilon = parse(key, v)?,
            ("experiment", "deformation_steps") => self.deformation_steps = parse(key, v)?,
            ("experiment", "pool_stride") => self.pool_stride = parse(key, v)?,
            ("experiment", "assimilation_interval") => self.assimilation_interval = parse(key, v)?,
            ("experiment", "total_windows") => self.total_windows = parse(key, v)?,
            ("experiment", "checkpoint_every") => self.checkpoint_every = parse(key, v)?,
            ("experiment", "forecast_horizon") => self.forecast_horizon = parse(key, v)?,
            ("experiment", "probes") => self.probes = parse_list(key, v)?,
            _ => return Err(format!("unknown key {key} in [{section}]")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Parameter(m));
        self.fine_params().validate()?;
        self.coarse_params().validate()?;
        let fine = self.fine_grid()?;
        let coarse = self.coarse_grid()?;
        if !fine.refines(&coarse) {
            return bad(format!("fine_n = {} is not a multiple of coarse_n = {}", self.fine_n, self.coarse_n));
        }
        let ratio = self.dt_coarse / self.dt_fine;
        if (ratio - ratio.round()).abs() > 1e-9 || ratio.round() < 1.0 {
            return bad(format!("dt_coarse / dt_fine = {ratio} must be a positive integer"));
        }
        if !(self.cfl_limit > 0.0) {
            return bad(format!("cfl_limit must be positive, got {}", self.cfl_limit));
        }
        self.filter.validate()?;
        self.station_set()?;
        if !(self.lambda > 0.0) || !(self.sigma_floor > 0.0) {
            return bad("lambda and sigma_floor must be positive".into());
        }
        if !(self.spinup_time >= 0.0) {
            return bad(format!("spinup_time must be >= 0, got {}", self.spinup_time));
        }
        if self.record_steps < 2 {
            return bad("record_steps must be >= 2 (calibration needs pairs)".into());
        }
        if !(self.xi_fraction > 0.0 && self.xi_fraction <= 1.0) {
            return bad(format!("xi_fraction must lie in (0, 1], got {}", self.xi_fraction));
        }
        if !(self.epsilon > 0.0) {
            return bad(format!("epsilon must be positive, got {}", self.epsilon));
        }
        if self.pool_stride == 0 || self.assimilation_interval == 0 || self.energy_log_every == 0 {
            return bad("pool_stride, assimilation_interval and energy_log_every must be >= 1".into());
        }
        if self.checkpoint_every == 0 {
            return bad("checkpoint_every must be >= 1".into());
        }
        let stations = self.station_set()?;
        for &px in &self.probes {
            for &py in &self.probes {
                if !stations.coords().contains(&(px, py)) {
                    return bad(format!("probe ({px}, {py}) is not a station"));
                }
            }
        }
        Ok(())
    }

    pub fn fine_grid(&self) -> Result<Grid> {
        Grid::new(self.fine_n)
    }

    pub fn coarse_grid(&self) -> Result<Grid> {
        Grid::new(self.coarse_n)
    }

    pub fn fine_params(&self) -> ModelParams {
        ModelParams { a: self.a, b: self.b, r: self.r, dt: self.dt_fine }
    }

    pub fn coarse_params(&self) -> ModelParams {
        ModelParams { a: self.a, b: self.b, r: self.r, dt: self.dt_coarse }
    }

    /// Fine steps per coarse step.
    pub fn time_ratio(&self) -> usize {
        (self.dt_coarse / self.dt_fine).round() as usize
    }

    pub fn station_set(&self) -> Result<StationSet> {
        StationSet::new(self.stations)
    }

    pub fn cfl(&self) -> CflPolicy {
        CflPolicy { limit: self.cfl_limit, abort: self.cfl_abort }
    }

    pub fn window_time(&self) -> f64 {
        self.assimilation_interval as f64 * self.dt_coarse
    }

    pub fn probe_points(&self) -> Vec<(f64, f64)> {
        self.probes
            .iter()
            .flat_map(|&y| self.probes.iter().map(move |&x| (x, y)))
            .collect()
    }

    /// The configuration in file form; parses back to an equal value.
    pub fn to_file_string(&self) -> String {
        let f = &self.filter;
        let mut s = String::new();
        let probes: Vec<String> = self.probes.iter().map(|p| p.to_string()).collect();
        writeln!(
            s,
            "[model]\na = {}\nb = {}\nr = {}\ndt_fine = {}\ndt_coarse = {}\ncfl_limit = {}\ncfl_abort = {}\n",
            self.a, self.b, self.r, self.dt_fine, self.dt_coarse, self.cfl_limit, self.cfl_abort
        )
        .unwrap();
        writeln!(s, "[grid]\nfine_n = {}\ncoarse_n = {}\n", self.fine_n, self.coarse_n).unwrap();
        writeln!(
            s,
            "[filter]\nparticles = {}\ness_threshold = {}\nrho = {}\nmcmc_steps = {}\nmax_temperatures = {}\nbisection_iters = {}\nfinal_resample_always = {}\n",
            f.n, f.ess_threshold_fraction, f.rho, f.mcmc_steps, f.max_temperatures, f.bisection_iters, f.final_resample_always
        )
        .unwrap();
        writeln!(
            s,
            "[observations]\nstations = {}\nlambda = {}\nsigma_floor = {}\n",
            self.stations, self.lambda, self.sigma_floor
        )
        .unwrap();
        writeln!(
            s,
            "[experiment]\nscenario = {}\nseed = {}\nspinup_time = {}\nenergy_log_every = {}\nrecord_steps = {}\nxi_fraction = {}\nepsilon = {}\ndeformation_steps = {}\npool_stride = {}\nassimilation_interval = {}\ntotal_windows = {}\ncheckpoint_every = {}\nforecast_horizon = {}\nprobes = {}",
            self.scenario,
            self.seed,
            self.spinup_time,
            self.energy_log_every,
            self.record_steps,
            self.xi_fraction,
            self.epsilon,
            self.deformation_steps,
            self.pool_stride,
            self.assimilation_interval,
            self.total_windows,
            self.checkpoint_every,
            self.forecast_horizon,
            probes.join(", ")
        )
        .unwrap();
        s
    }
}
