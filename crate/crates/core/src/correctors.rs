//! Correctors `phi_i`, fluxes `q_i = a (grad phi_i + e_i)`, flux correctors `sigma_ijk`
//! and per-sample homogenized coefficients.
//!
//! `sigma_ijk` lives on the plaquette spanned by `e_j, e_k` at each site and solves
//! `D^T D sigma_ijk = d_j^+ q_ik - d_k^+ q_ij`, so that
//! `sum_k d_k^- sigma_ijk = q_ij - mean(q_ij)` whenever `q_i` is divergence free.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{truncate_coefficient, LatticeField};
use crate::grid::{LatticeGrid, Neighbors};
use crate::pde::{
    divergence, edge_coefficients_with, gradient, solve_flux_form, EdgeCoefficient, EdgeRule, SolveReport,
    SolverOptions, SpectralPoisson,
};
use crate::stats;

/// Row-major square matrix.
pub type Matrix = Vec<Vec<f64>>;

pub fn identity(d: usize) -> Matrix {
    (0..d).map(|i| (0..d).map(|j| (i == j) as u8 as f64).collect()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrectorConfig {
    /// `Some(M)` clamps `a` to `[1/M, M]` before solving.
    pub truncation_m: Option<f64>,
    pub edge_rule: EdgeRule,
    pub solver: SolverOptions,
    pub with_sigma: bool,
}

impl Default for CorrectorConfig {
    fn default() -> Self {
        Self {
            truncation_m: Some(std::f64::consts::E.powi(4)),
            edge_rule: EdgeRule::Geometric,
            solver: SolverOptions::default(),
            with_sigma: true,
        }
    }
}

/// Ordered pairs `j < k` indexing the stored `sigma_ijk`.
pub fn skew_pairs(d: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for j in 0..d {
        for k in j + 1..d {
            out.push((j, k));
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct CorrectorSet {
    pub grid: LatticeGrid,
    pub edges: EdgeCoefficient,
    pub phi: Vec<LatticeField>,
    /// Edge fields `D phi_i`.
    pub grad_phi: Vec<LatticeField>,
    /// Edge fields `q_i`.
    pub flux: Vec<LatticeField>,
    /// `sigma[i * pairs + p]` for the `p`-th pair of `skew_pairs`; empty in d = 1 or when disabled.
    pub sigma: Vec<LatticeField>,
    /// `ahom_sample[i][j]` = lattice mean of `q_ij`.
    pub ahom_sample: Matrix,
    pub reports: Vec<SolveReport>,
    pub truncation_m: Option<f64>,
}

impl CorrectorSet {
    /// `sigma_ijk` at a site, with the sign implied by skew symmetry.
    pub fn sigma_at(&self, i: usize, j: usize, k: usize, site: usize) -> f64 {
        if j == k || self.sigma.is_empty() {
            return 0.0;
        }
        let d = self.grid.dim();
        let (lo, hi, sign) = if j < k { (j, k, 1.0) } else { (k, j, -1.0) };
        let p = skew_pairs(d).iter().position(|&pq| pq == (lo, hi)).unwrap();
        sign * self.sigma[i * skew_pairs(d).len() + p].values[site]
    }

    /// Write every field to the binary container plus a JSON manifest.
    pub fn save(&self, dir: &Path, config_hash: &str, seed: Option<u64>) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let d = self.grid.dim();
        for (i, phi) in self.phi.iter().enumerate() {
            phi.save(&dir.join(format!("phi_{i}.bin")))?;
            self.flux[i].save(&dir.join(format!("flux_{i}.bin")))?;
        }
        let pairs = skew_pairs(d);
        for (idx, s) in self.sigma.iter().enumerate() {
            let (j, k) = pairs[idx % pairs.len()];
            s.save(&dir.join(format!("sigma_{}_{j}{k}.bin", idx / pairs.len())))?;
        }
        let manifest = serde_json::json!({
            "config_hash": config_hash,
            "seed": seed,
            "grid": self.grid,
            "truncation_m": self.truncation_m,
            "ahom_sample": self.ahom_sample,
            "reports": self.reports.iter().map(|r| serde_json::json!({
                "iterations": r.iterations,
                "relative_residual": r.relative_residual,
                "converged": r.converged,
            })).collect::<Vec<_>>(),
        });
        std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }
}

/// Solve `-div aE (D phi + e_i) = 0` for mean-zero `phi`.
pub fn compute_corrector(
    edges: &EdgeCoefficient,
    direction: usize,
    options: SolverOptions,
) -> Result<(LatticeField, SolveReport)> {
    let d = edges.grid.dim();
    let mut w = vec![0.0; edges.values.len()];
    for site in 0..edges.grid.sites() {
        w[site * d + direction] = edges.values[site * d + direction];
    }
    solve_flux_form(edges, &w, options)
}

/// Edge field `aE (D phi + e_i)`.
pub fn compute_flux(edges: &EdgeCoefficient, nb: &Neighbors, phi: &LatticeField, direction: usize) -> LatticeField {
    let grid = edges.grid;
    let d = grid.dim();
    let mut q = gradient(&grid, nb, &phi.values);
    for (idx, v) in q.iter_mut().enumerate() {
        let unit = (idx % d == direction) as u8 as f64;
        *v = edges.values[idx] * (*v + unit);
    }
    LatticeField { grid, components: d, values: q, meta: Default::default() }
}

/// Flux correctors `sigma_ijk`, `j < k`, for one flux `q_i`.
///
/// `ahom_row` is subtracted first; constants have no curl, so it only matters
/// for the reconstruction check.
pub fn compute_sigma(
    q: &LatticeField,
    ahom_row: &[f64],
    nb: &Neighbors,
    poisson: &SpectralPoisson,
) -> Vec<LatticeField> {
    let grid = q.grid;
    let d = grid.dim();
    let inv_h = 1.0 / grid.spacing();
    let centered: Vec<f64> = q.values.iter().enumerate().map(|(idx, v)| v - ahom_row[idx % d]).collect();
    skew_pairs(d)
        .into_iter()
        .map(|(j, k)| {
            let curl: Vec<f64> = (0..grid.sites())
                .map(|s| {
                    let dj = centered[nb.fwd[j][s] as usize * d + k] - centered[s * d + k];
                    let dk = centered[nb.fwd[k][s] as usize * d + j] - centered[s * d + j];
                    (dj - dk) * inv_h
                })
                .collect();
            LatticeField { grid, components: 1, values: poisson.solve(&curl), meta: Default::default() }
        })
        .collect()
}

/// Edge field `(D . sigma_i)_j = sum_k d_k^- sigma_ijk` from a stored block.
pub fn sigma_divergence(grid: &LatticeGrid, nb: &Neighbors, block: &[LatticeField]) -> Vec<f64> {
    let d = grid.dim();
    let inv_h = 1.0 / grid.spacing();
    let mut out = vec![0.0; grid.sites() * d];
    for (p, (j, k)) in skew_pairs(d).into_iter().enumerate() {
        let s = &block[p].values;
        for site in 0..grid.sites() {
            // sigma_ijk contributes d_k^- to component j, sigma_ikj = -sigma_ijk gives -d_j^- to k.
            out[site * d + j] += (s[site] - s[nb.bwd[k][site] as usize]) * inv_h;
            out[site * d + k] -= (s[site] - s[nb.bwd[j][site] as usize]) * inv_h;
        }
    }
    out
}

/// `max |q_i - ahom_row - D . sigma_i| / max |q_i|`.
pub fn reconstruction_residual(q: &LatticeField, ahom_row: &[f64], nb: &Neighbors, block: &[LatticeField]) -> f64 {
    let d = q.grid.dim();
    let div = sigma_divergence(&q.grid, nb, block);
    let err = q
        .values
        .iter()
        .enumerate()
        .map(|(idx, v)| (v - ahom_row[idx % d] - div[idx]).abs())
        .fold(0.0, f64::max);
    err / q.max_abs().max(f64::MIN_POSITIVE)
}

/// All correctors of one coefficient sample.
pub fn compute_correctors(a: &LatticeField, config: &CorrectorConfig) -> Result<CorrectorSet> {
    let a = match config.truncation_m {
        Some(m) => truncate_coefficient(a, m)?,
        None => a.clone(),
    };
    let edges = edge_coefficients_with(&a, config.edge_rule)?;
    correctors_from_edges(edges, config)
}

pub fn correctors_from_edges(edges: EdgeCoefficient, config: &CorrectorConfig) -> Result<CorrectorSet> {
    let grid = edges.grid;
    let d = grid.dim();
    let nb = grid.neighbors();
    let mut phi = Vec::with_capacity(d);
    let mut grad_phi = Vec::with_capacity(d);
    let mut flux = Vec::with_capacity(d);
    let mut reports = Vec::with_capacity(d);
    let mut ahom = Vec::with_capacity(d);
    for i in 0..d {
        let (p, mut report) = compute_corrector(&edges, i, config.solver)?;
        report.truncation_m = config.truncation_m;
        let q = compute_flux(&edges, &nb, &p, i);
        ahom.push((0..d).map(|j| q.mean(j)).collect::<Vec<_>>());
        grad_phi.push(LatticeField {
            grid,
            components: d,
            values: gradient(&grid, &nb, &p.values),
            meta: Default::default(),
        });
        phi.push(p);
        flux.push(q);
        reports.push(report);
    }
    let mut sigma = Vec::new();
    if config.with_sigma && d > 1 {
        let poisson = SpectralPoisson::new(&grid);
        for i in 0..d {
            sigma.extend(compute_sigma(&flux[i], &ahom[i], &nb, &poisson));
        }
    }
    Ok(CorrectorSet {
        grid,
        edges,
        phi,
        grad_phi,
        flux,
        sigma,
        ahom_sample: ahom,
        reports,
        truncation_m: config.truncation_m,
    })
}

/// Replica mean and standard error of the per-sample homogenized coefficient.
pub fn estimate_ahom(replicas: &[CorrectorSet]) -> Result<(Matrix, Matrix)> {
    if replicas.len() < 2 {
        return Err(Error::ConfigMismatch("need at least two replicas".into()));
    }
    let first = &replicas[0];
    if replicas.iter().any(|r| r.grid != first.grid || r.truncation_m != first.truncation_m) {
        return Err(Error::ConfigMismatch("replicas differ in grid or truncation".into()));
    }
    let samples: Vec<&Matrix> = replicas.iter().map(|r| &r.ahom_sample).collect();
    Ok(matrix_estimate(&samples))
}

/// Entrywise mean and standard error over a list of matrices.
pub fn matrix_estimate(samples: &[&Matrix]) -> (Matrix, Matrix) {
    let d = samples[0].len();
    let mut mean = vec![vec![0.0; d]; d];
    let mut err = vec![vec![0.0; d]; d];
    for i in 0..d {
        for j in 0..d {
            let xs: Vec<f64> = samples.iter().map(|m| m[i][j]).collect();
            mean[i][j] = stats::mean(&xs);
            err[i][j] = stats::std_error(&xs);
        }
    }
    (mean, err)
}

/// Maximum of the discrete divergence of a flux, relative to its size.
pub fn flux_divergence(q: &LatticeField, nb: &Neighbors) -> f64 {
    divergence(&q.grid, nb, &q.values).iter().fold(0.0, |m, v| m.max(v.abs()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{exp_field, sample_gaussian_field, CovarianceFamily, CovarianceSpec};
    use crate::pde::EdgeCoefficient;

    fn lognormal(grid: &LatticeGrid, amplitude: f64, seed: u64) -> LatticeField {
        let spec = CovarianceSpec::new(CovarianceFamily::GaussianKernel, amplitude, 2.0).unwrap();
        exp_field(&sample_gaussian_field(grid, &spec, seed).unwrap()).unwrap()
    }

    #[test]
    fn constant_coefficient_has_trivial_correctors() {
        let grid = LatticeGrid::unit_spacing(3, 8).unwrap();
        let set = correctors_from_edges(EdgeCoefficient::constant(grid, 2.0), &CorrectorConfig::default()).unwrap();
        for i in 0..3 {
            assert_eq!(set.phi[i].max_abs(), 0.0);
            for s in 0..grid.sites() {
                for j in 0..3 {
                    assert_eq!(set.flux[i].get(s, j), if i == j { 2.0 } else { 0.0 });
                }
            }
        }
        assert!(set.sigma.iter().all(|s| s.max_abs() < 1e-14));
        assert_eq!(set.sigma.len(), 9);
    }

    #[test]
    fn one_dimensional_closed_form() {
        let grid = LatticeGrid::unit_spacing(1, 512).unwrap();
        let a = lognormal(&grid, 0.5, 7);
        let cfg = CorrectorConfig {
            truncation_m: None,
            solver: SolverOptions::with_tol(1e-13),
            ..Default::default()
        };
        let set = compute_correctors(&a, &cfg).unwrap();
        let inv: Vec<f64> = set.edges.values.iter().map(|v| 1.0 / v).collect();
        let harmonic = 1.0 / stats::mean(&inv);
        for (s, e) in set.edges.values.iter().enumerate() {
            assert!((set.grad_phi[0].values[s] + 1.0 - harmonic / e).abs() < 1e-10);
            assert!((set.flux[0].values[s] - harmonic).abs() < 1e-10 * harmonic);
        }
        assert!((set.ahom_sample[0][0] - harmonic).abs() < 1e-10);
        assert!(set.sigma.is_empty());
    }

    #[test]
    fn layered_medium_tangential_corrector_vanishes() {
        let grid = LatticeGrid::unit_spacing(2, 32).unwrap();
        let values: Vec<f64> = (0..grid.sites()).map(|s| (0.7 * (grid.coords(s)[1] as f64).sin()).exp()).collect();
        let a = LatticeField::scalar(grid, values).unwrap();
        let set = compute_correctors(&a, &CorrectorConfig::default()).unwrap();
        assert!(set.phi[0].max_abs() < 1e-12);
        assert!(set.phi[1].max_abs() > 1e-3);
    }

    #[test]
    fn flux_is_divergence_free_and_gradients_mean_zero() {
        let grid = LatticeGrid::unit_spacing(2, 32).unwrap();
        let set = compute_correctors(&lognormal(&grid, 1.0, 3), &CorrectorConfig::default()).unwrap();
        let nb = grid.neighbors();
        for i in 0..2 {
            let scale = set.flux[i].max_abs();
            assert!(flux_divergence(&set.flux[i], &nb) <= 10.0 * 1e-10 * scale * 32.0);
            for j in 0..2 {
                assert!(set.grad_phi[i].mean(j).abs() < 1e-14);
            }
            assert!(set.phi[i].mean(0).abs() < 1e-12);
        }
    }

    #[test]
    fn sigma_is_skew_and_reconstructs_flux() {
        for (dim, n) in [(2, 32), (3, 16)] {
            let grid = LatticeGrid::unit_spacing(dim, n).unwrap();
            let set = compute_correctors(&lognormal(&grid, 1.0, 11), &CorrectorConfig::default()).unwrap();
            let nb = grid.neighbors();
            for i in 0..dim {
                for s in [0, 5, grid.sites() - 1] {
                    for j in 0..dim {
                        for k in 0..dim {
                            assert_eq!(set.sigma_at(i, j, k, s), -set.sigma_at(i, k, j, s));
                        }
                    }
                }
                let p = skew_pairs(dim).len();
                let block = &set.sigma[i * p..(i + 1) * p];
                assert!(block.iter().all(|s| s.mean(0).abs() < 1e-12));
                let res = reconstruction_residual(&set.flux[i], &set.ahom_sample[i], &nb, block);
                assert!(res < 1e-6, "dim {dim} residual {res}");
            }
        }
    }

    #[test]
    fn stream_function_is_recovered() {
        let grid = LatticeGrid::new(2, 32, 8.0).unwrap();
        let nb = grid.neighbors();
        let h = grid.spacing();
        let psi: Vec<f64> = (0..grid.sites()).map(|s| ((s * 7919) % 101) as f64 / 50.0 - 1.0).collect();
        let mut q = vec![0.0; grid.sites() * 2];
        for s in 0..grid.sites() {
            q[s * 2] = (psi[s] - psi[nb.bwd[1][s] as usize]) / h;
            q[s * 2 + 1] = -(psi[s] - psi[nb.bwd[0][s] as usize]) / h;
        }
        let q = LatticeField::new(grid, 2, q).unwrap();
        let sigma = compute_sigma(&q, &[0.0, 0.0], &nb, &SpectralPoisson::new(&grid));
        let m = stats::mean(&psi);
        for s in 0..grid.sites() {
            assert!((sigma[0].values[s] - (psi[s] - m)).abs() < 1e-8);
        }
    }

    #[test]
    fn constant_flux_has_no_sigma() {
        let grid = LatticeGrid::unit_spacing(3, 8).unwrap();
        let q = LatticeField::new(grid, 3, (0..grid.sites() * 3).map(|i| (i % 3) as f64 + 0.5).collect()).unwrap();
        let sigma = compute_sigma(&q, &[0.0; 3], &grid.neighbors(), &SpectralPoisson::new(&grid));
        assert!(sigma.iter().all(|s| s.max_abs() < 1e-13));
    }

    #[test]
    fn estimate_rejects_mismatched_replicas() {
        let grid = LatticeGrid::unit_spacing(1, 16).unwrap();
        let cfg = CorrectorConfig::default();
        let one = correctors_from_edges(EdgeCoefficient::constant(grid, 1.0), &cfg).unwrap();
        assert!(estimate_ahom(std::slice::from_ref(&one)).is_err());
        let mut other = one.clone();
        other.truncation_m = None;
        assert!(matches!(estimate_ahom(&[one.clone(), other]), Err(Error::ConfigMismatch(_))));
        let (mean, err) = estimate_ahom(&[one.clone(), one]).unwrap();
        assert_eq!(mean, identity(1));
        assert_eq!(err[0][0], 0.0);
    }

    #[test]
    fn manifest_is_written() {
        let grid = LatticeGrid::unit_spacing(2, 8).unwrap();
        let set = compute_correctors(&lognormal(&grid, 0.5, 1), &CorrectorConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        set.save(dir.path(), "abc", Some(1)).unwrap();
        assert!(dir.path().join("sigma_1_01.bin").exists());
        let text = std::fs::read_to_string(dir.path().join("manifest.json")).unwrap();
        assert!(text.contains("ahom_sample"));
        let phi = LatticeField::load(&dir.path().join("phi_0.bin")).unwrap();
        assert_eq!(phi.values, set.phi[0].values);
    }
}
