//! Deformation prior for the initial ensemble, and ensemble checkpoints.
//!
//! A member is the reference fine vorticity advected for a number of fine
//! steps by a frozen velocity `β·u`, with `u` taken from a pool of
//! equilibrium snapshots and `β ~ N(0, ε)`, then coarse-grained.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand_distr::{Distribution, Normal};
use rand::Rng;
use rayon::prelude::*;

use crate::dynamics::arakawa_jacobian;
use crate::error::{input, parameter, Error, Result};
use crate::fields::{coarse_grain_vorticity, perp_grad, poisson_solve, Grid, ScalarField};
use crate::filtering::Particle;
use crate::io::{read_field, read_path, write_atomic, write_field, write_path};
use crate::rng::{stream, Purpose};
use crate::stochastic::PathIncrements;

/// Courant limit used to split deformation steps.
pub const DEFORMATION_CFL: f64 = 0.5;

#[derive(Debug, Clone)]
pub struct DeformationConfig {
    /// Variance of `β`.
    pub epsilon: f64,
    /// Fine steps of linear advection.
    pub n_steps: usize,
    pub dt_fine: f64,
    /// Fine vorticity snapshots whose velocities drive the deformation.
    pub pool: Vec<ScalarField>,
}

impl DeformationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return parameter(format!("epsilon must be positive, got {}", self.epsilon));
        }
        if !(self.dt_fine > 0.0) {
            return parameter(format!("fine time step must be positive, got {}", self.dt_fine));
        }
        if self.pool.is_empty() {
            return input("deformation pool is empty");
        }
        Ok(())
    }
}

/// Number of substeps keeping `|β|·max|u|·dt/m ≤ 0.5h`.
pub fn deformation_substeps(beta: f64, max_speed: f64, dt: f64, h: f64) -> usize {
    ((beta.abs() * max_speed * dt / (DEFORMATION_CFL * h)).ceil() as usize).max(1)
}

/// Advects `omega` by the frozen stream function `beta·psi` for `n_steps`
/// steps of length `dt` on the fine grid.
pub fn advect_frozen(omega: &ScalarField, psi: &ScalarField, beta: f64, n_steps: usize, dt: f64) -> Result<ScalarField> {
    omega.same_grid(psi)?;
    if beta == 0.0 || n_steps == 0 {
        return Ok(omega.clone());
    }
    let drive = psi.scaled(beta);
    let speed = perp_grad(psi)?.max_speed();
    let m = deformation_substeps(beta, speed, dt, omega.grid().h());
    if m > 1 {
        log::info!("deformation with beta = {beta:.4} uses {m} substeps per fine step");
    }
    let h = dt / m as f64;
    let rhs = |w: &ScalarField| -> Result<ScalarField> { Ok(arakawa_jacobian(&drive, w)?.scaled(-1.0)) };
    let mut w = omega.clone();
    for _ in 0..n_steps * m {
        let mut w1 = w.clone();
        w1.add_scaled(h, &rhs(&w)?);
        let mut w2 = w.scaled(0.75);
        w2.add_scaled(0.25, &w1);
        w2.add_scaled(0.25 * h, &rhs(&w1)?);
        let mut next = w.scaled(1.0 / 3.0);
        next.add_scaled(2.0 / 3.0, &w2);
        next.add_scaled(2.0 / 3.0 * h, &rhs(&w2)?);
        w = next;
    }
    w.check_finite()?;
    Ok(w.with_bc(omega.bc()))
}

/// Deforms `omega_truth` with the velocity of `u_sample` (a fine vorticity
/// snapshot) scaled by `beta` and coarse-grains the result.
pub fn deform(
    omega_truth: &ScalarField,
    u_sample: &ScalarField,
    beta: f64,
    n_steps: usize,
    dt_fine: f64,
    coarse: Grid,
) -> Result<ScalarField> {
    let psi = poisson_solve(u_sample)?;
    let advected = advect_frozen(omega_truth, &psi, beta, n_steps, dt_fine)?;
    coarse_grain_vorticity(&advected, coarse)
}

/// One initial-ensemble member with its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct Member {
    pub omega: ScalarField,
    pub record: MemberRecord,
}

/// A row of `manifest.csv`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MemberRecord {
    pub member: usize,
    pub beta: f64,
    pub pool_index: usize,
    pub n_steps: usize,
    pub seed: u64,
}

/// `β` and pool index of member `k`, drawn from its own stream.
pub fn member_draw(cfg: &DeformationConfig, seed: u64, k: usize) -> Result<(f64, usize)> {
    let mut rng = stream(seed, Purpose::InitialEnsemble, k as u64, 0, 0);
    let pool_index = rng.random_range(0..cfg.pool.len());
    let normal = Normal::new(0.0, cfg.epsilon.sqrt()).map_err(|e| Error::Parameter(e.to_string()))?;
    Ok((normal.sample(&mut rng), pool_index))
}

/// `n` independent draws from the deformation prior.
pub fn sample_initial_ensemble(
    cfg: &DeformationConfig,
    omega_truth: &ScalarField,
    n: usize,
    seed: u64,
    coarse: Grid,
) -> Result<Vec<Member>> {
    cfg.validate()?;
    if n == 0 {
        return parameter("ensemble size must be >= 1");
    }
    (0..n)
        .into_par_iter()
        .map(|k| {
            let (beta, pool_index) = member_draw(cfg, seed, k)?;
            let omega = deform(omega_truth, &cfg.pool[pool_index], beta, cfg.n_steps, cfg.dt_fine, coarse)?;
            Ok(Member {
                omega,
                record: MemberRecord { member: k, beta, pool_index, n_steps: cfg.n_steps, seed },
            })
        })
        .collect()
}

pub const MANIFEST_HEADER: &str = "member,beta,pool_index,n_steps,seed";

pub fn member_file(dir: &Path, k: usize, suffix: &str) -> PathBuf {
    dir.join(format!("member_{k:04}{suffix}"))
}

fn write_manifest(dir: &Path, records: &[MemberRecord]) -> Result<()> {
    let mut s = format!("{MANIFEST_HEADER}\n");
    for r in records {
        writeln!(s, "{},{:e},{},{},{}", r.member, r.beta, r.pool_index, r.n_steps, r.seed)
            .expect("writing to a String cannot fail");
    }
    write_atomic(&dir.join("manifest.csv"), s.as_bytes())
}

fn read_manifest(dir: &Path) -> Result<Vec<MemberRecord>> {
    let path = dir.join("manifest.csv");
    let text = fs::read_to_string(&path).map_err(|_| Error::Missing(path.display().to_string()))?;
    let bad = |reason: String| Error::Format { path: path.clone(), reason };
    let mut lines = text.lines();
    if lines.next() != Some(MANIFEST_HEADER) {
        return Err(bad("missing manifest header".into()));
    }
    let mut out = Vec::new();
    for line in lines.filter(|l| !l.is_empty()) {
        let c: Vec<&str> = line.split(',').collect();
        if c.len() != 5 {
            return Err(bad(format!("malformed row {line:?}")));
        }
        let err = |e: &dyn std::fmt::Display| bad(format!("row {line:?}: {e}"));
        let rec = MemberRecord {
            member: c[0].parse().map_err(|e| err(&e))?,
            beta: c[1].parse().map_err(|e| err(&e))?,
            pool_index: c[2].parse().map_err(|e| err(&e))?,
            n_steps: c[3].parse().map_err(|e| err(&e))?,
            seed: c[4].parse().map_err(|e| err(&e))?,
        };
        if rec.member != out.len() {
            return Err(bad(format!("member {} out of order", rec.member)));
        }
        out.push(rec);
    }
    if out.is_empty() {
        return Err(bad("manifest lists no members".into()));
    }
    Ok(out)
}

/// Writes `member_XXXX.sfld` files and `manifest.csv`.
pub fn write_ensemble(dir: &Path, members: &[Member]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for m in members {
        write_field(&member_file(dir, m.record.member, ".sfld"), &m.omega)?;
    }
    write_manifest(dir, &members.iter().map(|m| m.record).collect::<Vec<_>>())
}

pub fn read_ensemble(dir: &Path) -> Result<Vec<Member>> {
    let records = read_manifest(dir)?;
    let members = records
        .into_iter()
        .map(|record| {
            Ok(Member {
                omega: read_field(&member_file(dir, record.member, ".sfld"))?,
                record,
            })
        })
        .collect::<Result<Vec<Member>>>()?;
    let g = members[0].omega.grid();
    if members.iter().any(|m| m.omega.grid() != g) {
        return input(format!("ensemble in {} mixes grids", dir.display()));
    }
    Ok(members)
}

/// Filter particles on the coarse grid.
pub type FieldParticle = Particle<ScalarField, PathIncrements>;

/// Writes states, parents, paths and `weights.csv` (`member,log_weight`)
/// next to a manifest.
pub fn write_particles(dir: &Path, particles: &[FieldParticle], records: &[MemberRecord]) -> Result<()> {
    if particles.len() != records.len() {
        return input("one manifest record per particle is required");
    }
    fs::create_dir_all(dir)?;
    let mut weights = String::from("member,log_weight\n");
    for (k, p) in particles.iter().enumerate() {
        write_field(&member_file(dir, k, ".sfld"), &p.state)?;
        write_field(&member_file(dir, k, ".parent.sfld"), &p.parent)?;
        if let Some(path) = &p.path {
            write_path(&member_file(dir, k, ".path"), path)?;
        }
        writeln!(weights, "{k},{:e}", p.log_weight).expect("writing to a String cannot fail");
    }
    write_atomic(&dir.join("weights.csv"), weights.as_bytes())?;
    write_manifest(dir, records)
}

pub fn read_particles(dir: &Path) -> Result<(Vec<FieldParticle>, Vec<MemberRecord>)> {
    let records = read_manifest(dir)?;
    let wpath = dir.join("weights.csv");
    let text = fs::read_to_string(&wpath).map_err(|_| Error::Missing(wpath.display().to_string()))?;
    let weights: Vec<f64> = text
        .lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|l| {
            l.split_once(',')
                .and_then(|(_, w)| w.parse().ok())
                .ok_or_else(|| Error::Format { path: wpath.clone(), reason: format!("malformed row {l:?}") })
        })
        .collect::<Result<_>>()?;
    if weights.len() != records.len() {
        return Err(Error::Format { path: wpath, reason: "weight count differs from manifest".into() });
    }
    let particles = (0..records.len())
        .map(|k| {
            let path_file = member_file(dir, k, ".path");
            let path = if path_file.exists() { Some(read_path(&path_file)?) } else { None };
            Ok(Particle {
                parent: read_field(&member_file(dir, k, ".parent.sfld"))?,
                path,
                state: read_field(&member_file(dir, k, ".sfld"))?,
                log_weight: weights[k],
                loglike: 0.0,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((particles, records))
}

#[cfg(test)]
mod tests {
    use std::f64::consts::PI;

    use super::*;
    use crate::fields::Bc;

    fn vorticity(g: Grid, phase: f64) -> ScalarField {
        ScalarField::from_fn(g, Bc::Free, |x, y| {
            (PI * x).sin() * (2.0 * PI * y + phase).sin() + 0.5 * (3.0 * PI * x).cos() * (PI * y).cos() + 0.3
        })
    }

    fn config(g: Grid, n_steps: usize) -> DeformationConfig {
        DeformationConfig {
            epsilon: 0.25,
            n_steps,
            dt_fine: 0.01,
            pool: vec![vorticity(g, 0.3), vorticity(g, 1.1), vorticity(g, 2.0)],
        }
    }

    #[test]
    fn identity_cases() {
        let fine = Grid::new(32).unwrap();
        let coarse = Grid::new(8).unwrap();
        let w = vorticity(fine, 0.0);
        let target = coarse_grain_vorticity(&w, coarse).unwrap();
        assert_eq!(deform(&w, &vorticity(fine, 1.0), 0.0, 50, 0.01, coarse).unwrap(), target);
        assert_eq!(deform(&w, &vorticity(fine, 1.0), 0.7, 0, 0.01, coarse).unwrap(), target);
    }

    #[test]
    fn casimirs_are_conserved() {
        let g = Grid::new(64).unwrap();
        let w = vorticity(g, 0.0);
        let psi = poisson_solve(&vorticity(g, 1.3)).unwrap();
        let speed = perp_grad(&psi).unwrap().max_speed();
        let beta = 0.5;
        // one substep per step at CFL 0.5
        let dt = DEFORMATION_CFL * g.h() / (beta * speed);
        let out = advect_frozen(&w, &psi, beta, 100, dt).unwrap();
        let mean_drift = (out.integral() - w.integral()).abs() / w.integral().abs();
        let ens_drift = (out.inner(&out) - w.inner(&w)).abs() / w.inner(&w);
        assert!(mean_drift <= 1e-10, "mean {mean_drift}");
        assert!(ens_drift <= 1e-6, "enstrophy {ens_drift}");
        assert!(out != w);
    }

    #[test]
    fn substeps_follow_cfl() {
        assert_eq!(deformation_substeps(0.0, 1.0, 0.1, 0.01), 1);
        assert_eq!(deformation_substeps(1.0, 1.0, 0.005, 0.01), 1);
        assert_eq!(deformation_substeps(-2.0, 1.0, 0.01, 0.01), 4);
    }

    #[test]
    fn ensembles_are_reproducible_and_exchangeable() {
        let fine = Grid::new(16).unwrap();
        let coarse = Grid::new(8).unwrap();
        let cfg = config(fine, 5);
        let w = vorticity(fine, 0.0);
        let a = sample_initial_ensemble(&cfg, &w, 4, 7, coarse).unwrap();
        let b = sample_initial_ensemble(&cfg, &w, 4, 7, coarse).unwrap();
        assert_eq!(a, b);
        for m in &a {
            assert_eq!(m.omega.grid(), coarse);
            let psi = poisson_solve(&m.omega).unwrap();
            assert_eq!(psi.bc(), Bc::DirichletZero);
            let (beta, pool) = member_draw(&cfg, 7, m.record.member).unwrap();
            assert_eq!((beta, pool), (m.record.beta, m.record.pool_index));
            assert_eq!(m.omega, deform(&w, &cfg.pool[pool], beta, 5, 0.01, coarse).unwrap());
        }
        let empty = DeformationConfig { pool: vec![], ..cfg };
        assert!(sample_initial_ensemble(&empty, &w, 4, 7, coarse).is_err());
    }

    #[test]
    fn checkpoints_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let fine = Grid::new(16).unwrap();
        let coarse = Grid::new(8).unwrap();
        let w = vorticity(fine, 0.0);
        let members = sample_initial_ensemble(&config(fine, 2), &w, 3, 1, coarse).unwrap();
        write_ensemble(dir.path(), &members).unwrap();
        assert_eq!(read_ensemble(dir.path()).unwrap(), members);
        let manifest = fs::read_to_string(dir.path().join("manifest.csv")).unwrap();
        assert!(manifest.starts_with("member,beta,pool_index,n_steps,seed\n0,"));

        let pdir = dir.path().join("step");
        let particles: Vec<FieldParticle> = members
            .iter()
            .enumerate()
            .map(|(k, m)| Particle {
                parent: m.omega.scaled(2.0),
                path: (k != 1).then(|| PathIncrements::new(1, 2, vec![0.1 * k as f64, -0.3]).unwrap()),
                state: m.omega.clone(),
                log_weight: -(k as f64) / 3.0,
                loglike: 0.0,
            })
            .collect();
        let records: Vec<MemberRecord> = members.iter().map(|m| m.record).collect();
        write_particles(&pdir, &particles, &records).unwrap();
        let (back, rec) = read_particles(&pdir).unwrap();
        assert_eq!(back, particles);
        assert_eq!(rec, records);
        fs::write(member_file(&pdir, 0, ".sfld"), b"SALTFLD1").unwrap();
        assert!(matches!(read_particles(&pdir), Err(Error::Format { .. })));
    }
}
