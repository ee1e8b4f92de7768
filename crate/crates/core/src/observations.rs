//! Weather stations, observation-noise calibration, synthetic observations
//! and the Gaussian log-likelihood of velocity observations.
//!
//! An observation holds both velocity components at every station,
//! station-major: `[ux_0, uy_0, ux_1, uy_1, ...]`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{input, parameter, Error, Result};
use crate::fields::{velocity, Bc, Grid, ScalarField, VectorField};
use crate::io::write_atomic;
use crate::rng::{stream, Purpose};

/// The `s × s` vertex lattice `(i/(s−1), j/(s−1))`, `j` outer.
#[derive(Debug, Clone, PartialEq)]
pub struct StationSet {
    s: usize,
    coords: Vec<(f64, f64)>,
}

impl StationSet {
    pub fn new(s: usize) -> Result<Self> {
        if s < 2 {
            return parameter(format!("stations per side must be >= 2, got {s}"));
        }
        let d = (s - 1) as f64;
        let coords = (0..s)
            .flat_map(|j| (0..s).map(move |i| (i as f64 / d, j as f64 / d)))
            .collect();
        Ok(Self { s, coords })
    }

    pub fn per_side(&self) -> usize {
        self.s
    }

    /// Station count `d_y`.
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[(f64, f64)] {
        &self.coords
    }

    /// Index in `self` of every station of `other`, if `other ⊆ self`.
    pub fn indices_of(&self, other: &StationSet) -> Option<Vec<usize>> {
        other
            .coords
            .iter()
            .map(|c| self.coords.iter().position(|d| d == c))
            .collect()
    }
}

pub fn make_stations(s: usize) -> Result<StationSet> {
    StationSet::new(s)
}

/// Per-station, per-component observation standard deviations.
#[derive(Debug, Clone, PartialEq)]
pub struct ObsNoise {
    sigmas: Vec<f64>,
    lambda: f64,
    sigma_floor: f64,
}

impl ObsNoise {
    pub fn new(sigmas: Vec<f64>, lambda: f64, sigma_floor: f64) -> Result<Self> {
        if !(sigma_floor > 0.0) || !sigma_floor.is_finite() {
            return parameter(format!("sigma floor must be positive, got {sigma_floor}"));
        }
        if sigmas.is_empty() || sigmas.len() % 2 != 0 {
            return input(format!("need two sigmas per station, got {}", sigmas.len()));
        }
        if let Some(bad) = sigmas.iter().find(|s| !(**s >= sigma_floor) || !s.is_finite()) {
            return input(format!("sigma {bad} is below the floor {sigma_floor} or not finite"));
        }
        Ok(Self { sigmas, lambda, sigma_floor })
    }

    /// The same standard deviation for every entry.
    pub fn uniform(stations: &StationSet, sigma: f64) -> Result<Self> {
        Self::new(vec![sigma; 2 * stations.len()], 1.0, sigma)
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn sigma_floor(&self) -> f64 {
        self.sigma_floor
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let mut out = Vec::with_capacity(2 * indices.len());
        for &k in indices {
            if 2 * k + 1 >= self.sigmas.len() {
                return input(format!("station index {k} out of range"));
            }
            out.extend_from_slice(&self.sigmas[2 * k..2 * k + 2]);
        }
        Self::new(out, self.lambda, self.sigma_floor)
    }
}

/// An observed velocity vector at assimilation step `step`.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub step: u64,
    pub values: Vec<f64>,
}

impl Observation {
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let mut values = Vec::with_capacity(2 * indices.len());
        for &k in indices {
            if 2 * k + 1 >= self.values.len() {
                return input(format!("station index {k} out of range"));
            }
            values.extend_from_slice(&self.values[2 * k..2 * k + 2]);
        }
        Ok(Self { step: self.step, values })
    }
}

/// Coarse cell index of fine node `i`; nodes on shared edges belong to the
/// cell on their upper/right side except at the top/right wall.
fn owning_cell(i: usize, ratio: usize, coarse_n: usize) -> usize {
    (i / ratio).min(coarse_n - 1)
}

/// Mean absolute deviation of each fine node from its coarse-cell mean,
/// averaged over snapshots and scaled by `lambda`.
pub fn local_variability(fine_snapshots: &[VectorField], coarse: Grid, lambda: f64) -> Result<VectorField> {
    let Some(first) = fine_snapshots.first() else {
        return input("observation-noise calibration needs at least one snapshot");
    };
    if !(lambda > 0.0) || !lambda.is_finite() {
        return parameter(format!("lambda must be positive, got {lambda}"));
    }
    let fine = first.grid();
    if !fine.refines(&coarse) {
        return input(format!("fine grid {} does not refine coarse grid {}", fine.n(), coarse.n()));
    }
    let ratio = fine.n() / coarse.n();
    let nc = coarse.n();
    let cell_of: Vec<usize> = (0..fine.len())
        .map(|k| {
            let (i, j) = (k % fine.side(), k / fine.side());
            owning_cell(j, ratio, nc) * nc + owning_cell(i, ratio, nc)
        })
        .collect();
    let mut counts = vec![0usize; nc * nc];
    for &c in &cell_of {
        counts[c] += 1;
    }
    let mut acc = [vec![0.0; fine.len()], vec![0.0; fine.len()]];
    for snap in fine_snapshots {
        if snap.grid() != fine {
            return input("snapshots live on different grids");
        }
        for (comp, field) in [&snap.x, &snap.y].into_iter().enumerate() {
            field.check_finite()?;
            let mut sums = vec![0.0; nc * nc];
            for (k, v) in field.values().iter().enumerate() {
                sums[cell_of[k]] += v;
            }
            for (k, v) in field.values().iter().enumerate() {
                let c = cell_of[k];
                acc[comp][k] += (v - sums[c] / counts[c] as f64).abs();
            }
        }
    }
    let scale = lambda / fine_snapshots.len() as f64;
    let [ax, ay] = acc;
    VectorField::new(
        ScalarField::from_raw(fine, Bc::Free, ax.into_iter().map(|v| v * scale).collect()),
        ScalarField::from_raw(fine, Bc::Free, ay.into_iter().map(|v| v * scale).collect()),
    )
}

pub fn calibrate_obs_noise(
    fine_snapshots: &[VectorField],
    coarse: Grid,
    stations: &StationSet,
    lambda: f64,
    sigma_floor: f64,
) -> Result<ObsNoise> {
    if !(sigma_floor > 0.0) {
        return parameter(format!("sigma floor must be positive, got {sigma_floor}"));
    }
    let std = local_variability(fine_snapshots, coarse, lambda)?;
    let mut sigmas = Vec::with_capacity(2 * stations.len());
    for &(x, y) in stations.coords() {
        sigmas.push(std.x.sample(x, y)?.max(sigma_floor));
        sigmas.push(std.y.sample(x, y)?.max(sigma_floor));
    }
    ObsNoise::new(sigmas, lambda, sigma_floor)
}

/// Velocity at every station, station-major.
pub fn observation_operator(u: &VectorField, stations: &StationSet) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(2 * stations.len());
    for &(x, y) in stations.coords() {
        out.push(u.x.sample(x, y)?);
        out.push(u.y.sample(x, y)?);
    }
    Ok(out)
}

/// Noise for a station is drawn from a stream keyed by its exact coordinates,
/// so nested station sets see identical noise at shared stations.
pub fn observe(truth: &VectorField, stations: &StationSet, noise: &ObsNoise, seed: u64, step: u64) -> Result<Observation> {
    if noise.sigmas().len() != 2 * stations.len() {
        return input(format!(
            "{} sigmas for {} stations",
            noise.sigmas().len(),
            stations.len()
        ));
    }
    let mut values = observation_operator(truth, stations)?;
    for (k, &(x, y)) in stations.coords().iter().enumerate() {
        let mut rng = stream(seed, Purpose::ObservationNoise, step, x.to_bits(), y.to_bits());
        for c in 0..2 {
            let e: f64 = rng.sample(StandardNormal);
            values[2 * k + c] += noise.sigmas()[2 * k + c] * e;
        }
    }
    Ok(Observation { step, values })
}

/// `−½ Σ ((h_j − y_j)/σ_j)²`.
pub fn gaussian_log_likelihood(h: &[f64], y: &Observation, noise: &ObsNoise) -> Result<f64> {
    if h.len() != y.values.len() || h.len() != noise.sigmas().len() {
        return input(format!(
            "length mismatch: model {}, observation {}, sigmas {}",
            h.len(),
            y.values.len(),
            noise.sigmas().len()
        ));
    }
    let s: f64 = h
        .iter()
        .zip(&y.values)
        .zip(noise.sigmas())
        .map(|((a, b), s)| ((a - b) / s).powi(2))
        .sum();
    Ok(-0.5 * s)
}

/// Log-likelihood of a coarse vorticity state.
pub fn log_likelihood(state: &ScalarField, y: &Observation, stations: &StationSet, noise: &ObsNoise) -> Result<f64> {
    let u = velocity(state)?;
    gaussian_log_likelihood(&observation_operator(&u, stations)?, y, noise)
}

pub const OBS_LOG_HEADER: &str = "step,time,station_index,station_x,station_y,obs_ux,obs_uy,true_ux,true_uy";

/// Appends one observation's rows to `out` in the observation-log layout.
pub fn observation_log_rows(out: &mut String, time: f64, y: &Observation, truth: &[f64], stations: &StationSet) -> Result<()> {
    if truth.len() != y.values.len() || y.values.len() != 2 * stations.len() {
        return input("observation log rows need matching lengths");
    }
    for (k, &(x, yy)) in stations.coords().iter().enumerate() {
        writeln!(
            out,
            "{},{},{},{},{},{:e},{:e},{:e},{:e}",
            y.step,
            time,
            k,
            x,
            yy,
            y.values[2 * k],
            y.values[2 * k + 1],
            truth[2 * k],
            truth[2 * k + 1]
        )
        .expect("writing to a String cannot fail");
    }
    Ok(())
}

/// Reads observations back from an observation log, grouped by step.
pub fn read_observation_log(path: &Path, stations: &StationSet) -> Result<Vec<(Observation, f64, Vec<f64>)>> {
    let text = fs::read_to_string(path).map_err(|_| Error::Missing(path.display().to_string()))?;
    let bad = |reason: String| Error::Format { path: path.to_path_buf(), reason };
    let mut lines = text.lines();
    if lines.next() != Some(OBS_LOG_HEADER) {
        return Err(bad("missing observation-log header".into()));
    }
    let mut out: Vec<(Observation, f64, Vec<f64>)> = Vec::new();
    for (lineno, line) in lines.enumerate().filter(|(_, l)| !l.is_empty()) {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 9 {
            return Err(bad(format!("line {}: expected 9 columns", lineno + 2)));
        }
        let num = |c: &str| c.parse::<f64>().map_err(|e| bad(format!("line {}: {e}", lineno + 2)));
        let step: u64 = cols[0].parse().map_err(|e| bad(format!("line {}: {e}", lineno + 2)))?;
        let station: usize = cols[2].parse().map_err(|e| bad(format!("line {}: {e}", lineno + 2)))?;
        if out.last().map(|o| o.0.step) != Some(step) {
            out.push((Observation { step, values: Vec::new() }, num(cols[1])?, Vec::new()));
        }
        let entry = out.last_mut().expect("pushed above");
        if station != entry.0.values.len() / 2 {
            return Err(bad(format!("line {}: stations out of order", lineno + 2)));
        }
        entry.0.values.extend([num(cols[5])?, num(cols[6])?]);
        entry.2.extend([num(cols[7])?, num(cols[8])?]);
    }
    if let Some(o) = out.iter().find(|o| o.0.values.len() != 2 * stations.len()) {
        return Err(bad(format!("step {} has {} stations", o.0.step, o.0.values.len() / 2)));
    }
    Ok(out)
}

pub fn write_obs_noise(path: &Path, noise: &ObsNoise) -> Result<()> {
    let mut s = format!(
        "# lambda = {:e}\n# sigma_floor = {:e}\nstation_index,sigma_ux,sigma_uy\n",
        noise.lambda, noise.sigma_floor
    );
    for (k, pair) in noise.sigmas.chunks_exact(2).enumerate() {
        writeln!(s, "{k},{:e},{:e}", pair[0], pair[1]).expect("writing to a String cannot fail");
    }
    write_atomic(path, s.as_bytes())
}

pub fn read_obs_noise(path: &Path) -> Result<ObsNoise> {
    let text = fs::read_to_string(path).map_err(|_| Error::Missing(path.display().to_string()))?;
    let bad = |reason: String| Error::Format { path: path.to_path_buf(), reason };
    let mut lambda = None;
    let mut floor = None;
    let mut sigmas = Vec::new();
    let mut header = false;
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        if let Some(comment) = line.strip_prefix('#') {
            if let Some((k, v)) = comment.split_once('=') {
                let v: f64 = v.trim().parse().map_err(|e| bad(format!("{e}")))?;
                match k.trim() {
                    "lambda" => lambda = Some(v),
                    "sigma_floor" => floor = Some(v),
                    other => return Err(bad(format!("unknown header key {other}"))),
                }
            }
            continue;
        }
        if !header {
            if line != "station_index,sigma_ux,sigma_uy" {
                return Err(bad("missing column header".into()));
            }
            header = true;
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 3 || cols[0].parse::<usize>().ok() != Some(sigmas.len() / 2) {
            return Err(bad(format!("malformed row {line:?}")));
        }
        for c in &cols[1..] {
            sigmas.push(c.parse::<f64>().map_err(|e| bad(format!("{e}")))?);
        }
    }
    let (Some(lambda), Some(floor)) = (lambda, floor) else {
        return Err(bad("missing lambda or sigma_floor header comment".into()));
    };
    ObsNoise::new(sigmas, lambda, floor).map_err(|e| bad(e.to_string()))
}

#[cfg(test)]
mod tests {
    use std::f64::consts::PI;

    use super::*;
    use crate::fields::perp_grad;

    fn flow(g: Grid) -> VectorField {
        let psi = ScalarField::from_fn(g, Bc::DirichletZero, |x, y| {
            (PI * x).sin() * (2.0 * PI * y).sin() + 0.3 * (3.0 * PI * x).sin() * (PI * y).sin()
        });
        perp_grad(&psi).unwrap()
    }

    #[test]
    fn station_lattices() {
        assert!(make_stations(1).is_err());
        let corners = make_stations(2).unwrap();
        assert_eq!(corners.coords(), &[(0.0, 0.0), (1.0, 0.0), (0.0, 1.0), (1.0, 1.0)]);
        let s9 = make_stations(9).unwrap();
        let s17 = make_stations(17).unwrap();
        assert_eq!(s9.len(), 81);
        assert_eq!(s17.len(), 289);
        let idx = s17.indices_of(&s9).unwrap();
        assert_eq!(idx.len(), 81);
        assert!(s9.indices_of(&s17).is_none());
    }

    #[test]
    fn constant_field_gives_floor() {
        let g = Grid::new(16).unwrap();
        let c = VectorField::new(
            ScalarField::from_fn(g, Bc::Free, |_, _| 0.7),
            ScalarField::from_fn(g, Bc::Free, |_, _| -0.2),
        )
        .unwrap();
        let st = make_stations(3).unwrap();
        let noise = calibrate_obs_noise(&[c], Grid::new(4).unwrap(), &st, 0.6, 1e-6).unwrap();
        assert!(noise.sigmas().iter().all(|&s| s == 1e-6));
        assert!(calibrate_obs_noise(&[], Grid::new(4).unwrap(), &st, 0.6, 1e-6).is_err());
    }

    #[test]
    fn hand_computed_cell() {
        // fine 8, coarse 4: cell (0, 0) owns fine nodes i, j ∈ {0, 1}
        let fine = Grid::new(8).unwrap();
        let mut vals = vec![5.0; fine.len()];
        for (k, v) in [(fine.index(0, 0), 1.0), (fine.index(1, 0), 3.0), (fine.index(0, 1), 1.0), (fine.index(1, 1), 3.0)] {
            vals[k] = v;
        }
        let x = ScalarField::from_values(fine, Bc::Free, vals).unwrap();
        let u = VectorField::new(x, ScalarField::zeros(fine, Bc::Free)).unwrap();
        let lambda = 0.6;
        let std = local_variability(&[u], Grid::new(4).unwrap(), lambda).unwrap();
        for (i, j) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
            assert!((std.x.at(i, j) - lambda).abs() < 1e-15);
        }
        assert_eq!(std.x.at(4, 4), 0.0);
        assert!(std.y.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lambda_scales_sigmas() {
        let fine = Grid::new(32).unwrap();
        let st = make_stations(5).unwrap();
        let coarse = Grid::new(8).unwrap();
        let u = flow(fine);
        let a = calibrate_obs_noise(std::slice::from_ref(&u), coarse, &st, 0.3, 1e-9).unwrap();
        let b = calibrate_obs_noise(&[u], coarse, &st, 0.6, 1e-9).unwrap();
        for (x, y) in a.sigmas().iter().zip(b.sigmas()) {
            if *x > 1e-9 {
                assert!((y / x - 2.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn observe_noise_levels() {
        let g = Grid::new(16).unwrap();
        let u = flow(g);
        let st = make_stations(5).unwrap();
        let exact = observation_operator(&u, &st).unwrap();
        let tiny = ObsNoise::uniform(&st, 1e-12).unwrap();
        let y = observe(&u, &st, &tiny, 3, 0).unwrap();
        assert!(y.values.iter().zip(&exact).all(|(a, b)| (a - b).abs() < 1e-10));
        let noise = ObsNoise::uniform(&st, 0.1).unwrap();
        assert_eq!(observe(&u, &st, &noise, 3, 1).unwrap(), observe(&u, &st, &noise, 3, 1).unwrap());
        let draws = 100_000;
        let mut sq = 0.0;
        for step in 0..draws {
            let y = observe(&u, &st, &noise, 3, step).unwrap();
            sq += (y.values[14] - exact[14]).powi(2);
        }
        let sd = (sq / draws as f64).sqrt();
        assert!((sd / 0.1 - 1.0).abs() < 0.02, "sd {sd}");
        assert!(observe(&u, &make_stations(4).unwrap(), &noise, 3, 0).is_err());
    }

    #[test]
    fn nested_observations_agree() {
        let g = Grid::new(16).unwrap();
        let u = flow(g);
        let s9 = make_stations(9).unwrap();
        let s17 = make_stations(17).unwrap();
        let idx = s17.indices_of(&s9).unwrap();
        let n17 = ObsNoise::new((0..2 * 289).map(|k| 0.01 + 1e-4 * k as f64).collect(), 1.0, 1e-3).unwrap();
        let n9 = n17.subset(&idx).unwrap();
        let big = observe(&u, &s17, &n17, 8, 4).unwrap();
        let small = observe(&u, &s9, &n9, 8, 4).unwrap();
        assert_eq!(big.subset(&idx).unwrap(), small);
    }

    #[test]
    fn likelihood_values() {
        let st = make_stations(2).unwrap();
        let noise = ObsNoise::new(vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8], 1.0, 0.05).unwrap();
        let h = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0];
        let y = Observation { step: 0, values: h.clone() };
        assert_eq!(gaussian_log_likelihood(&h, &y, &noise).unwrap(), 0.0);
        let mut off = h.clone();
        off[3] += 0.4;
        assert!((gaussian_log_likelihood(&off, &y, &noise).unwrap() + 0.5).abs() < 1e-12);
        assert!(gaussian_log_likelihood(&h[..6], &y, &noise).is_err());
        assert_eq!(st.len() * 2, h.len());
    }

    #[test]
    fn likelihood_matches_dense_quadratic_form() {
        use nalgebra::{DMatrix, DVector};
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let d = 18;
        let sig: Vec<f64> = (0..d).map(|_| rng.random_range(0.05..2.0)).collect();
        let h: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let yv: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let cov = DMatrix::from_diagonal(&DVector::from_iterator(d, sig.iter().map(|s| s * s)));
        let r = DVector::from_iterator(d, h.iter().zip(&yv).map(|(a, b)| a - b));
        let oracle = -0.5 * (r.transpose() * cov.try_inverse().unwrap() * &r)[(0, 0)];
        let noise = ObsNoise::new(sig.clone(), 1.0, 0.01).unwrap();
        let y = Observation { step: 0, values: yv.clone() };
        let ll = gaussian_log_likelihood(&h, &y, &noise).unwrap();
        assert!((ll - oracle).abs() <= 1e-12 * oracle.abs());
        // consistent permutation of stations
        let perm: Vec<usize> = (0..d / 2).rev().collect();
        let ph: Vec<f64> = perm.iter().flat_map(|&k| [h[2 * k], h[2 * k + 1]]).collect();
        let py = Observation { step: 0, values: perm.iter().flat_map(|&k| [yv[2 * k], yv[2 * k + 1]]).collect() };
        let pn = noise.subset(&perm).unwrap();
        assert!((gaussian_log_likelihood(&ph, &py, &pn).unwrap() - ll).abs() <= 1e-12 * ll.abs());
    }

    #[test]
    fn state_likelihood_of_exact_observation_is_zero() {
        let g = Grid::new(16).unwrap();
        let omega = ScalarField::from_fn(g, Bc::Free, |x, y| (PI * x).sin() * (PI * y).sin());
        let st = make_stations(5).unwrap();
        let u = velocity(&omega).unwrap();
        let noise = ObsNoise::uniform(&st, 0.1).unwrap();
        let y = Observation { step: 0, values: observation_operator(&u, &st).unwrap() };
        assert_eq!(log_likelihood(&omega, &y, &st, &noise).unwrap(), 0.0);
    }

    #[test]
    fn csv_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let st = make_stations(3).unwrap();
        let noise = ObsNoise::new((0..18).map(|k| 0.1 + k as f64 * 1e-3).collect(), 0.6, 1e-6).unwrap();
        let p = dir.path().join("obs_noise.csv");
        write_obs_noise(&p, &noise).unwrap();
        assert_eq!(read_obs_noise(&p).unwrap(), noise);

        let u = flow(Grid::new(8).unwrap());
        let truth = observation_operator(&u, &st).unwrap();
        let mut s = format!("{OBS_LOG_HEADER}\n");
        for step in 1..3 {
            let y = observe(&u, &st, &noise, 1, step).unwrap();
            observation_log_rows(&mut s, step as f64 * 0.1, &y, &truth, &st).unwrap();
        }
        let lp = dir.path().join("observations.csv");
        fs::write(&lp, &s).unwrap();
        let back = read_observation_log(&lp, &st).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[1].0, observe(&u, &st, &noise, 1, 2).unwrap());
        assert_eq!(back[0].2, truth);
    }
}
