//! Staggered discretization of `-div a (grad u + g) = div h` on the periodic lattice.
//!
//! Scalars live on sites. Vector fields live on edges: component `axis` at
//! `site` belongs to the edge from `site` to `site + e_axis`. With `D` the
//! forward difference, the operator is `A u = D^T (aE D u)`, symmetric and
//! positive semidefinite with the constants as kernel.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fft::FftNd;
use crate::field::LatticeField;
use crate::grid::{LatticeGrid, Neighbors};

pub const DEFAULT_TOL: f64 = 1e-10;

/// How a cell coefficient becomes an edge coefficient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeRule {
    #[default]
    Geometric,
    Harmonic,
}

/// Coefficient on each edge, `values[site * dim + axis]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeCoefficient {
    pub grid: LatticeGrid,
    pub values: Vec<f64>,
}

impl EdgeCoefficient {
    pub fn constant(grid: LatticeGrid, value: f64) -> Self {
        Self { grid, values: vec![value; grid.sites() * grid.dim()] }
    }

    pub fn get(&self, site: usize, axis: usize) -> f64 {
        self.values[site * self.grid.dim() + axis]
    }

    fn check(&self) -> Result<()> {
        let d = self.grid.dim();
        if let Some(i) = self.values.iter().position(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::SingularCoefficient { site: i / d, axis: i % d, value: self.values[i] });
        }
        Ok(())
    }
}

pub fn edge_coefficients(a: &LatticeField) -> Result<EdgeCoefficient> {
    edge_coefficients_with(a, EdgeRule::Geometric)
}

pub fn edge_coefficients_with(a: &LatticeField, rule: EdgeRule) -> Result<EdgeCoefficient> {
    a.require_scalar()?;
    let grid = a.grid;
    let d = grid.dim();
    let nb = grid.neighbors();
    let mut values = Vec::with_capacity(grid.sites() * d);
    for site in 0..grid.sites() {
        let x = a.values[site];
        for axis in 0..d {
            let y = a.values[nb.fwd[axis][site] as usize];
            values.push(match rule {
                EdgeRule::Geometric => (x * y).sqrt(),
                EdgeRule::Harmonic => 2.0 * x * y / (x + y),
            });
        }
    }
    let edges = EdgeCoefficient { grid, values };
    edges.check()?;
    Ok(edges)
}

/// Forward difference `D u` as an edge field.
pub fn gradient(grid: &LatticeGrid, nb: &Neighbors, u: &[f64]) -> Vec<f64> {
    let d = grid.dim();
    let inv_h = 1.0 / grid.spacing();
    let mut out = vec![0.0; grid.sites() * d];
    for site in 0..grid.sites() {
        for axis in 0..d {
            out[site * d + axis] = (u[nb.fwd[axis][site] as usize] - u[site]) * inv_h;
        }
    }
    out
}

/// Discrete divergence `-D^T w` of an edge field, a site field.
pub fn divergence(grid: &LatticeGrid, nb: &Neighbors, w: &[f64]) -> Vec<f64> {
    let d = grid.dim();
    let inv_h = 1.0 / grid.spacing();
    let mut out = vec![0.0; grid.sites()];
    for (site, o) in out.iter_mut().enumerate() {
        let mut s = 0.0;
        for axis in 0..d {
            s += w[site * d + axis] - w[nb.bwd[axis][site] as usize * d + axis];
        }
        *o = s * inv_h;
    }
    out
}

/// The stencil of `A` with precomputed neighbor tables and diagonal.
struct Stencil<'a> {
    edges: &'a EdgeCoefficient,
    nb: Neighbors,
    diag: Vec<f64>,
    inv_h2: f64,
}

impl<'a> Stencil<'a> {
    fn new(edges: &'a EdgeCoefficient) -> Self {
        let grid = edges.grid;
        let d = grid.dim();
        let nb = grid.neighbors();
        let inv_h2 = 1.0 / (grid.spacing() * grid.spacing());
        let diag = (0..grid.sites())
            .map(|site| {
                (0..d)
                    .map(|axis| edges.get(site, axis) + edges.get(nb.bwd[axis][site] as usize, axis))
                    .sum::<f64>()
                    * inv_h2
            })
            .collect();
        Self { edges, nb, diag, inv_h2 }
    }

    fn apply(&self, u: &[f64], out: &mut [f64]) {
        let d = self.edges.grid.dim();
        let w = &self.edges.values;
        for site in 0..u.len() {
            let ux = u[site];
            let mut s = 0.0;
            for axis in 0..d {
                let up = self.nb.fwd[axis][site] as usize;
                let down = self.nb.bwd[axis][site] as usize;
                s += w[site * d + axis] * (ux - u[up]) + w[down * d + axis] * (ux - u[down]);
            }
            out[site] = s * self.inv_h2;
        }
    }
}

pub fn apply_operator(edges: &EdgeCoefficient, u: &LatticeField) -> Result<LatticeField> {
    u.require_scalar()?;
    if u.grid != edges.grid {
        return Err(Error::GridMismatch("operand and coefficient grids differ".into()));
    }
    let mut out = vec![0.0; u.grid.sites()];
    Stencil::new(edges).apply(&u.values, &mut out);
    Ok(LatticeField { grid: u.grid, components: 1, values: out, meta: Default::default() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub iterations: usize,
    pub relative_residual: f64,
    pub converged: bool,
    pub truncation_m: Option<f64>,
    /// `(iteration, relative residual)` of the recursive residual.
    pub history: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    pub tol: f64,
    /// Defaults to `50 * n_per_side`.
    pub max_iter: Option<usize>,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { tol: DEFAULT_TOL, max_iter: None }
    }
}

impl SolverOptions {
    pub fn with_tol(tol: f64) -> Self {
        Self { tol, max_iter: None }
    }
}

/// Solve `-div aE (D u + g) = div h`, i.e. `A u = -D^T (aE g + h)`.
///
/// `g` and `h` are edge fields with `dim` components; either may be absent.
pub fn solve_divform(
    edges: &EdgeCoefficient,
    g: Option<&LatticeField>,
    h: Option<&LatticeField>,
    tol: f64,
) -> Result<(LatticeField, SolveReport)> {
    let grid = edges.grid;
    let d = grid.dim();
    let mut w = vec![0.0; grid.sites() * d];
    for (field, weighted) in [(g, true), (h, false)] {
        let Some(f) = field else { continue };
        if f.grid != grid || f.components != d {
            return Err(Error::GridMismatch(format!(
                "forcing needs {d} components on the coefficient grid"
            )));
        }
        for (i, v) in f.values.iter().enumerate() {
            w[i] += if weighted { edges.values[i] * v } else { *v };
        }
    }
    solve_flux_form(edges, &w, SolverOptions::with_tol(tol))
}

/// Solve `A u = -D^T w` for an edge field `w`.
pub fn solve_flux_form(
    edges: &EdgeCoefficient,
    w: &[f64],
    options: SolverOptions,
) -> Result<(LatticeField, SolveReport)> {
    edges.check()?;
    let grid = edges.grid;
    let nb = grid.neighbors();
    let b = divergence(&grid, &nb, w);
    let u = solve_linear(edges, &b, options)?;
    Ok(u)
}

/// Jacobi-preconditioned conjugate gradients on mean-zero functions for `A u = b`.
pub fn solve_linear(edges: &EdgeCoefficient, b: &[f64], options: SolverOptions) -> Result<(LatticeField, SolveReport)> {
    let grid = edges.grid;
    let n = grid.sites();
    let max_iter = options.max_iter.unwrap_or(50 * grid.n_per_side());
    let stencil = Stencil::new(edges);

    let mut b = b.to_vec();
    project_mean(&mut b);
    let b_norm = norm(&b);
    let mut u = vec![0.0; n];
    let mut report = SolveReport {
        iterations: 0,
        relative_residual: 0.0,
        converged: true,
        truncation_m: None,
        history: Vec::new(),
    };
    if b_norm == 0.0 {
        return Ok((LatticeField { grid, components: 1, values: u, meta: Default::default() }, report));
    }

    let mut r = b.clone();
    let mut z = vec![0.0; n];
    let mut p = vec![0.0; n];
    let mut ap = vec![0.0; n];
    let mut restart = true;
    let mut rz = 0.0;
    let mut iter = 0;
    loop {
        if restart {
            precondition(&stencil.diag, &r, &mut z);
            p.copy_from_slice(&z);
            rz = dot(&r, &z);
            restart = false;
        }
        let rel = norm(&r) / b_norm;
        report.history.push((iter, rel));
        if rel <= options.tol {
            // Confirm against the true residual before accepting.
            stencil.apply(&u, &mut ap);
            for i in 0..n {
                r[i] = b[i] - ap[i];
            }
            project_mean(&mut r);
            let true_rel = norm(&r) / b_norm;
            if true_rel <= options.tol {
                report.relative_residual = true_rel;
                break;
            }
            restart = true;
            continue;
        }
        if iter >= max_iter {
            return Err(Error::NoConvergence { iterations: iter, residual: rel, history: report.history });
        }
        stencil.apply(&p, &mut ap);
        let alpha = rz / dot(&p, &ap);
        for i in 0..n {
            u[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        project_mean(&mut r);
        precondition(&stencil.diag, &r, &mut z);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
        iter += 1;
    }
    project_mean(&mut u);
    report.iterations = iter;
    Ok((LatticeField { grid, components: 1, values: u, meta: Default::default() }, report))
}

fn precondition(diag: &[f64], r: &[f64], z: &mut [f64]) {
    for i in 0..r.len() {
        z[i] = r[i] / diag[i];
    }
    project_mean(z);
}

fn project_mean(v: &mut [f64]) {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter_mut().for_each(|x| *x -= m);
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Inverse of the unit-coefficient operator `D^T D` by Fourier diagonalization.
pub struct SpectralPoisson {
    fft: FftNd,
    inv_symbol: Vec<f64>,
}

impl SpectralPoisson {
    pub fn new(grid: &LatticeGrid) -> Self {
        let fft = FftNd::new(grid);
        let inv_symbol = (0..grid.sites())
            .map(|k| if k == 0 { 0.0 } else { 1.0 / fft.laplacian_symbol(k) })
            .collect();
        Self { fft, inv_symbol }
    }

    pub fn fft(&self) -> &FftNd {
        &self.fft
    }

    /// Mean-zero `u` with `D^T D u = rhs - mean(rhs)`.
    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let mut hat = self.fft.forward_real(rhs);
        for (v, s) in hat.iter_mut().zip(&self.inv_symbol) {
            *v *= *s;
        }
        self.fft.inverse_real(hat)
    }
}

pub fn solve_poisson_spectral(rhs: &LatticeField) -> Result<LatticeField> {
    rhs.require_scalar()?;
    let values = SpectralPoisson::new(&rhs.grid).solve(&rhs.values);
    Ok(LatticeField { grid: rhs.grid, components: 1, values, meta: Default::default() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{exp_field, sample_gaussian_field, CovarianceFamily, CovarianceSpec};
    use std::f64::consts::PI;

    fn lognormal(grid: &LatticeGrid, amplitude: f64, seed: u64) -> LatticeField {
        let spec = CovarianceSpec::new(CovarianceFamily::GaussianKernel, amplitude, 2.0).unwrap();
        exp_field(&sample_gaussian_field(grid, &spec, seed).unwrap()).unwrap()
    }

    fn mode(grid: &LatticeGrid, k: [usize; 3]) -> Vec<f64> {
        let n = grid.n_per_side() as f64;
        (0..grid.sites())
            .map(|s| {
                let c = grid.coords(s);
                let phase: f64 = (0..grid.dim()).map(|a| (k[a] * c[a]) as f64).sum();
                (2.0 * PI * phase / n).cos()
            })
            .collect()
    }

    fn symbol(grid: &LatticeGrid, k: [usize; 3]) -> f64 {
        let h = grid.spacing();
        let n = grid.n_per_side() as f64;
        (0..grid.dim()).map(|a| (2.0 - 2.0 * (2.0 * PI * k[a] as f64 / n).cos()) / (h * h)).sum()
    }

    #[test]
    fn edge_rules() {
        let grid = LatticeGrid::unit_spacing(1, 4).unwrap();
        let a = LatticeField::scalar(grid, vec![1f64.exp(), 3f64.exp(), 1.0, 1.0]).unwrap();
        let geo = edge_coefficients(&a).unwrap();
        assert!((geo.values[0] - 2f64.exp()).abs() < 1e-12);
        assert!((geo.values[0] - 7.389).abs() < 1e-3);
        let harm = edge_coefficients_with(&a, EdgeRule::Harmonic).unwrap();
        assert!(harm.values[0] < geo.values[0]);
        let c = LatticeField::constant(LatticeGrid::unit_spacing(2, 8).unwrap(), 1, 2.5);
        assert!(edge_coefficients(&c).unwrap().values.iter().all(|&v| v == 2.5));
    }

    #[test]
    fn geometric_edges_shrink_the_mean() {
        let grid = LatticeGrid::unit_spacing(2, 64).unwrap();
        let (mut cell, mut edge) = (0.0, 0.0);
        for seed in 0..10 {
            let a = lognormal(&grid, 1.0, seed);
            cell += a.mean(0);
            edge += crate::stats::mean(&edge_coefficients(&a).unwrap().values);
        }
        assert!(edge < cell);
    }

    #[test]
    fn operator_kills_constants_and_matches_symbol() {
        let grid = LatticeGrid::new(2, 16, 4.0).unwrap();
        let ones = EdgeCoefficient::constant(grid, 1.0);
        let c = LatticeField::constant(grid, 1, 3.0);
        assert!(apply_operator(&ones, &c).unwrap().max_abs() < 1e-12);
        let k = [2, 5, 0];
        let u = LatticeField::scalar(grid, mode(&grid, k)).unwrap();
        let au = apply_operator(&ones, &u).unwrap();
        let s = symbol(&grid, k);
        for i in 0..grid.sites() {
            assert!((au.values[i] - s * u.values[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn operator_is_symmetric() {
        let grid = LatticeGrid::unit_spacing(3, 8).unwrap();
        let edges = edge_coefficients(&lognormal(&grid, 1.0, 4)).unwrap();
        let u = LatticeField::scalar(grid, (0..512).map(|i| ((i * 31) % 17) as f64 - 8.0).collect()).unwrap();
        let v = LatticeField::scalar(grid, (0..512).map(|i| ((i * 7) % 13) as f64 * 0.3).collect()).unwrap();
        let au = apply_operator(&edges, &u).unwrap();
        let av = apply_operator(&edges, &v).unwrap();
        let lhs = dot(&au.values, &v.values);
        let rhs = dot(&u.values, &av.values);
        assert!((lhs - rhs).abs() < 1e-12 * lhs.abs().max(1.0));
    }

    #[test]
    fn zero_forcing_gives_zero() {
        let grid = LatticeGrid::unit_spacing(2, 16).unwrap();
        let edges = edge_coefficients(&lognormal(&grid, 1.0, 1)).unwrap();
        let (u, report) = solve_divform(&edges, None, None, 1e-10).unwrap();
        assert!(u.max_abs() == 0.0 && report.converged);
    }

    #[test]
    fn unit_coefficient_solve_matches_spectral() {
        let grid = LatticeGrid::new(2, 32, 2.0).unwrap();
        let ones = EdgeCoefficient::constant(grid, 1.0);
        let nb = grid.neighbors();
        let psi = mode(&grid, [3, 1, 0]);
        let h = LatticeField::new(grid, 2, gradient(&grid, &nb, &psi)).unwrap();
        let (u, report) = solve_divform(&ones, None, Some(&h), 1e-12).unwrap();
        assert!(report.converged && report.relative_residual <= 1e-12);
        // -div grad u = div grad psi, so u = -psi.
        let rhs = LatticeField::scalar(grid, divergence(&grid, &nb, &h.values)).unwrap();
        let spectral = solve_poisson_spectral(&rhs).unwrap();
        for i in 0..grid.sites() {
            assert!((u.values[i] + psi[i]).abs() < 1e-9);
            assert!((spectral.values[i] - u.values[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn one_dimensional_flux_is_the_harmonic_mean() {
        let grid = LatticeGrid::unit_spacing(1, 256).unwrap();
        let edges = edge_coefficients(&lognormal(&grid, 1.0, 9)).unwrap();
        let g = LatticeField::constant(grid, 1, 1.0);
        let (u, _) = solve_divform(&edges, Some(&g), None, 1e-13).unwrap();
        let harmonic = 1.0 / crate::stats::mean(&edges.values.iter().map(|v| 1.0 / v).collect::<Vec<_>>());
        let du = gradient(&grid, &grid.neighbors(), &u.values);
        for (i, e) in edges.values.iter().enumerate() {
            assert!((du[i] + 1.0 - harmonic / e).abs() < 1e-10, "edge {i}");
        }
    }

    #[test]
    fn energy_identity_and_flux_conservation() {
        let grid = LatticeGrid::unit_spacing(2, 32).unwrap();
        let nb = grid.neighbors();
        let edges = edge_coefficients(&lognormal(&grid, 1.0, 2)).unwrap();
        let g = LatticeField::new(grid, 2, (0..2048).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let h = LatticeField::new(grid, 2, (0..2048).map(|i| (i as f64 * 0.11).cos()).collect()).unwrap();
        let (u, _) = solve_divform(&edges, Some(&g), Some(&h), 1e-12).unwrap();
        let du = gradient(&grid, &nb, &u.values);
        let lhs: f64 = (0..2048).map(|i| edges.values[i] * (du[i] + g.values[i]) * du[i]).sum();
        let rhs: f64 = -(0..2048).map(|i| h.values[i] * du[i]).sum::<f64>();
        assert!((lhs - rhs).abs() < 1e-8 * lhs.abs());

        let e0 = LatticeField::new(grid, 2, (0..2048).map(|i| (i % 2 == 0) as u8 as f64).collect()).unwrap();
        let (phi, _) = solve_divform(&edges, Some(&e0), None, 1e-10).unwrap();
        let dphi = gradient(&grid, &nb, &phi.values);
        let flux: Vec<f64> = (0..2048).map(|i| edges.values[i] * (dphi[i] + e0.values[i])).collect();
        let div = divergence(&grid, &nb, &flux);
        let scale = crate::stats::mean(&edges.values);
        assert!(div.iter().all(|v| v.abs() < 1e-8 * scale));
    }

    #[test]
    fn truncation_does_not_slow_the_solver() {
        let grid = LatticeGrid::unit_spacing(2, 64).unwrap();
        let a = lognormal(&grid, 1.0, 5);
        let e0 = LatticeField::new(grid, 2, (0..grid.sites() * 2).map(|i| (i % 2 == 0) as u8 as f64).collect()).unwrap();
        let iters = |m: f64| {
            let am = crate::field::truncate_coefficient(&a, m).unwrap();
            let edges = edge_coefficients(&am).unwrap();
            solve_divform(&edges, Some(&e0), None, 1e-10).unwrap().1.iterations
        };
        let (low, high) = (iters(1.5), iters(20.0));
        assert!(low <= high, "{low} > {high}");
    }

    #[test]
    fn singular_coefficient_rejected() {
        let grid = LatticeGrid::unit_spacing(1, 8).unwrap();
        let mut edges = EdgeCoefficient::constant(grid, 1.0);
        edges.values[3] = 0.0;
        let g = LatticeField::constant(grid, 1, 1.0);
        assert!(matches!(
            solve_divform(&edges, Some(&g), None, 1e-10),
            Err(Error::SingularCoefficient { site: 3, .. })
        ));
    }

    #[test]
    fn iteration_cap_reports_history() {
        let grid = LatticeGrid::unit_spacing(2, 32).unwrap();
        let edges = edge_coefficients(&lognormal(&grid, 1.0, 3)).unwrap();
        let e0 = LatticeField::new(grid, 2, (0..2048).map(|i| (i % 2 == 0) as u8 as f64).collect()).unwrap();
        let w: Vec<f64> = (0..2048).map(|i| edges.values[i] * e0.values[i]).collect();
        let opts = SolverOptions { tol: 1e-12, max_iter: Some(3) };
        match solve_flux_form(&edges, &w, opts) {
            Err(Error::NoConvergence { iterations, history, .. }) => {
                assert_eq!(iterations, 3);
                assert_eq!(history.len(), 4);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn spectral_poisson_inverts_the_laplacian() {
        let grid = LatticeGrid::new(3, 16, 3.0).unwrap();
        let rhs = LatticeField::scalar(grid, (0..4096).map(|i| ((i * 13) % 29) as f64 - 14.0).collect()).unwrap();
        let u = solve_poisson_spectral(&rhs).unwrap();
        let back = apply_operator(&EdgeCoefficient::constant(grid, 1.0), &u).unwrap();
        let mean = rhs.mean(0);
        let scale = rhs.max_abs();
        assert!((0..4096).all(|i| (back.values[i] - (rhs.values[i] - mean)).abs() < 1e-10 * scale));
        assert!(u.mean(0).abs() < 1e-12);
        let zero = LatticeField::zeros(grid, 1);
        assert_eq!(solve_poisson_spectral(&zero).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn second_order_mesh_convergence() {
        // -lap u = div h on the unit torus with h = (sin 2pi x cos 2pi y, 0),
        // exact u = cos 2pi x cos 2pi y / (4 pi).
        let mut hs = Vec::new();
        let mut errs = Vec::new();
        for n in [16, 32, 64] {
            let grid = LatticeGrid::new(2, n, 1.0).unwrap();
            let sp = grid.spacing();
            let ones = EdgeCoefficient::constant(grid, 1.0);
            let mut h = vec![0.0; grid.sites() * 2];
            for s in 0..grid.sites() {
                let c = grid.coords(s);
                let (x, y) = (c[0] as f64 * sp, c[1] as f64 * sp);
                h[s * 2] = (2.0 * PI * (x + sp / 2.0)).sin() * (2.0 * PI * y).cos();
            }
            let (u, _) = solve_flux_form(&ones, &h, SolverOptions::with_tol(1e-13)).unwrap();
            let err = (0..grid.sites())
                .map(|s| {
                    let c = grid.coords(s);
                    let exact = (2.0 * PI * c[0] as f64 * sp).cos() * (2.0 * PI * c[1] as f64 * sp).cos() / (4.0 * PI);
                    (u.values[s] - exact).abs()
                })
                .fold(0.0, f64::max);
            hs.push(sp.ln());
            errs.push(err.ln());
        }
        let fit = crate::stats::linear_fit(&hs, &errs);
        assert!((fit.slope - 2.0).abs() < 0.1, "slope {}", fit.slope);
    }
}
