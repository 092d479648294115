//! Two-scale expansion on a macro torus of side 1.
//!
//! Lengths are measured in units of the forcing radius `R`: the coefficient at
//! level `eps` has correlation length `eps R`, the averaging ball `S_eps` has
//! radius `eps R`, and the lattice carries `cells_per_corr` cells per correlation
//! length at every level. Correctors solved on this grid are already the rescaled
//! `eps phi(x / eps)`.

use serde::{Deserialize, Serialize};

use crate::balls::BallAverager;
use crate::correctors::CorrectorSet;
use crate::error::{Error, Result};
use crate::fft::FftNd;
use crate::field::LatticeField;
use crate::grid::LatticeGrid;
use crate::pde::{divergence, gradient, solve_divform, SpectralPoisson, DEFAULT_TOL};
use crate::stats;

/// `mu_d(t)` from the corrector growth law.
pub fn mu(d: usize, t: f64) -> f64 {
    crate::fluctuations::mu_squared(d, t).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoScaleCase {
    pub dim: usize,
    /// Dyadic, decreasing.
    pub eps_levels: Vec<f64>,
    /// Lattice cells per correlation length.
    pub cells_per_corr: usize,
    /// Radius `R` of the forcing bump around the origin, in torus units; the macro length unit.
    pub support_radius: f64,
}

impl TwoScaleCase {
    pub fn validate(&self) -> Result<()> {
        if self.eps_levels.len() < 3 {
            return Err(Error::Config("two-scale needs at least three eps levels".into()));
        }
        for w in self.eps_levels.windows(2) {
            if (w[0] / w[1] - 2.0).abs() > 1e-12 {
                return Err(Error::Config(format!("eps levels must halve: {:?}", self.eps_levels)));
            }
        }
        if self.cells_per_corr == 0 || !(self.support_radius > 0.0 && self.support_radius <= 0.5) {
            return Err(Error::Config("cells_per_corr >= 1 and support radius in (0, 1/2]".into()));
        }
        for &eps in &self.eps_levels {
            let n = self.cells_per_corr as f64 / self.corr_length(eps);
            let k = n.round() as usize;
            if (n - k as f64).abs() > 1e-9 || k < 16 || !k.is_power_of_two() {
                return Err(Error::ScaleMismatch(format!("eps {eps} gives {n} cells per side")));
            }
        }
        Ok(())
    }

    /// Correlation length and averaging radius at level `eps`, in torus units.
    pub fn corr_length(&self, eps: f64) -> f64 {
        eps * self.support_radius
    }

    pub fn grid(&self, eps: f64) -> Result<LatticeGrid> {
        LatticeGrid::new(self.dim, (self.cells_per_corr as f64 / self.corr_length(eps)).round() as usize, 1.0)
    }
}

/// Edge field `f = chi(|x| / radius) e_1` centered at the origin, sampled at edge midpoints.
pub fn forcing(grid: &LatticeGrid, radius: f64) -> LatticeField {
    let d = grid.dim();
    let h = grid.spacing();
    let mut values = vec![0.0; grid.sites() * d];
    for site in 0..grid.sites() {
        let mut x = grid.position(site);
        x[0] += 0.5 * h;
        let r2: f64 = (0..d).map(|k| x[k] * x[k]).sum::<f64>() / (radius * radius);
        if r2 < 1.0 {
            values[site * d] = (1.0 - 1.0 / (1.0 - r2)).exp();
        }
    }
    LatticeField { grid: *grid, components: d, values, meta: Default::default() }
}

/// `S_eps(v)`: average over the ball of radius `eps` around every site, per component.
pub fn local_average(v: &LatticeField, eps: f64) -> Result<LatticeField> {
    let grid = v.grid;
    if eps < grid.spacing() {
        return Err(Error::ScaleMismatch(format!("eps {eps} is below the spacing {}", grid.spacing())));
    }
    let fft = FftNd::new(&grid);
    let avg = BallAverager::new(&grid, &fft, eps)?;
    let c = v.components;
    let mut values = vec![0.0; v.values.len()];
    for k in 0..c {
        for (s, x) in avg.average(&fft, &v.component(k)).into_iter().enumerate() {
            values[s * c + k] = x;
        }
    }
    Ok(LatticeField { grid, components: c, values, meta: Default::default() })
}

/// Cell-centered gradient: the mean of the two edges through each site.
fn centered_gradient(grid: &LatticeGrid, u: &[f64]) -> LatticeField {
    let d = grid.dim();
    let nb = grid.neighbors();
    let du = gradient(grid, &nb, u);
    let mut values = vec![0.0; du.len()];
    for s in 0..grid.sites() {
        for k in 0..d {
            values[s * d + k] = 0.5 * (du[s * d + k] + du[nb.bwd[k][s] as usize * d + k]);
        }
    }
    LatticeField { grid: *grid, components: d, values, meta: Default::default() }
}

/// `S_eps(u) + phi_i S_eps(d_i u)` with `phi_i` the correctors on the same grid and `eps` the
/// averaging radius in grid length units.
pub fn two_scale_expansion(ubar: &LatticeField, set: &CorrectorSet, eps: f64) -> Result<LatticeField> {
    ubar.require_scalar()?;
    if ubar.grid != set.grid {
        return Err(Error::GridMismatch("macro solution and correctors live on different grids".into()));
    }
    let grid = ubar.grid;
    let d = grid.dim();
    let su = local_average(ubar, eps)?;
    let sg = local_average(&centered_gradient(&grid, &ubar.values), eps)?;
    let values = (0..grid.sites())
        .map(|s| su.values[s] + (0..d).map(|i| set.phi[i].values[s] * sg.values[s * d + i]).sum::<f64>())
        .collect();
    Ok(LatticeField { grid, components: 1, values, meta: Default::default() })
}

/// Sites of the middle half of the torus, the cube of side 1/2 around the forcing center.
/// Errors are accumulated only here, away from the periodic images of the forcing.
pub fn middle_half(grid: &LatticeGrid) -> Vec<usize> {
    let q = (grid.n_per_side() / 4) as i64;
    (0..grid.sites())
        .filter(|&s| grid.coords(s)[..grid.dim()].iter().all(|&c| (-q..q).contains(&grid.min_image(c as i64))))
        .collect()
}

/// Macro data shared by all replicas at one level: forcing and `z` with `abar z = u_bar`.
pub struct MacroProblem {
    pub grid: LatticeGrid,
    pub f: LatticeField,
    /// Solution of `-div grad z = div f`; the homogenized solution is `z / abar` for scalar `abar`.
    pub z: LatticeField,
}

impl MacroProblem {
    pub fn new(grid: &LatticeGrid, support_radius: f64) -> Self {
        let f = forcing(grid, support_radius);
        let nb = grid.neighbors();
        let z = SpectralPoisson::new(grid).solve(&divergence(grid, &nb, &f.values));
        Self { grid: *grid, f, z: LatticeField { grid: *grid, components: 1, values: z, meta: Default::default() } }
    }
}

/// Per-replica integrals from which the error follows for any scalar `abar`:
/// `error^2 = a_int - 2 b_int / abar + c_int / abar^2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpansionIntegrals {
    pub a_int: f64,
    pub b_int: f64,
    pub c_int: f64,
    /// `|int a |D u|^2 + int f . D u|` relative to the energy.
    pub energy_gap: f64,
    /// `tr(abar_sample) / d` of this replica.
    pub ahom_trace: f64,
}

impl ExpansionIntegrals {
    pub fn error_squared(&self, abar: f64) -> f64 {
        (self.a_int - 2.0 * self.b_int / abar + self.c_int / (abar * abar)).max(0.0)
    }
}

/// Solve the `eps`-problem on one sample and accumulate the local energy integrals over the middle
/// half; `eps` is the averaging radius in grid length units.
pub fn expansion_integrals(problem: &MacroProblem, set: &CorrectorSet, eps: f64, tol: f64) -> Result<ExpansionIntegrals> {
    let grid = problem.grid;
    if set.grid != grid {
        return Err(Error::GridMismatch("correctors and macro problem differ".into()));
    }
    let d = grid.dim();
    let nb = grid.neighbors();
    let (u, _) = solve_divform(&set.edges, None, Some(&problem.f), tol)?;
    let w = two_scale_expansion(&problem.z, set, eps)?;
    let du = gradient(&grid, &nb, &u.values);
    let dw = gradient(&grid, &nb, &w.values);
    let a = &set.edges.values;
    let mut dens = [vec![0.0; grid.sites()], vec![0.0; grid.sites()], vec![0.0; grid.sites()]];
    let (mut energy, mut work) = (0.0, 0.0);
    for s in 0..grid.sites() {
        for k in 0..d {
            let e = s * d + k;
            dens[0][s] += a[e] * du[e] * du[e];
            dens[1][s] += a[e] * du[e] * dw[e];
            dens[2][s] += a[e] * dw[e] * dw[e];
            work += problem.f.values[e] * du[e];
        }
        energy += dens[0][s];
    }
    let fft = FftNd::new(&grid);
    let avg = BallAverager::new(&grid, &fft, eps)?;
    let middle = middle_half(&grid);
    let vol = grid.spacing().powi(d as i32);
    let mut ints = [0.0; 3];
    for (k, dn) in dens.iter().enumerate() {
        let smoothed = avg.average(&fft, dn);
        ints[k] = vol * middle.iter().map(|&s| smoothed[s]).sum::<f64>();
    }
    Ok(ExpansionIntegrals {
        a_int: ints[0],
        b_int: ints[1],
        c_int: ints[2],
        energy_gap: (energy + work).abs() / energy.max(f64::MIN_POSITIVE),
        ahom_trace: (0..d).map(|i| set.ahom_sample[i][i]).sum::<f64>() / d as f64,
    })
}

/// `eps mu_d(1/eps) (int mu_d(|x|)^2 avg_{B_eps(x)} |f|^2 dx)^(1/2)` over the torus, with lengths in
/// units of `unit` (the forcing radius).
pub fn error_envelope(problem: &MacroProblem, eps: f64, unit: f64) -> Result<f64> {
    let grid = problem.grid;
    let d = grid.dim();
    let f2: Vec<f64> =
        (0..grid.sites()).map(|s| (0..d).map(|k| problem.f.values[s * d + k].powi(2)).sum()).collect();
    let fft = FftNd::new(&grid);
    let smoothed = BallAverager::new(&grid, &fft, eps * unit)?.average(&fft, &f2);
    let vol = grid.spacing().powi(d as i32);
    let weighted: f64 = (0..grid.sites())
        .map(|s| {
            let x = grid.position(s);
            let r = (0..d).map(|k| x[k] * x[k]).sum::<f64>().sqrt() / unit;
            crate::fluctuations::mu_squared(d, r) * smoothed[s]
        })
        .sum();
    Ok(eps * mu(d, 1.0 / eps) * (vol * weighted / unit.powi(d as i32)).sqrt())
}

/// Pooled errors per level and the rate fits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpansionFit {
    pub eps: Vec<f64>,
    /// `sqrt(E error^2)` per level.
    pub error: Vec<f64>,
    pub error_stderr: Vec<f64>,
    pub envelope: Vec<f64>,
    pub abar: Vec<f64>,
    /// `log error` against `log eps`.
    pub slope: f64,
    pub slope_stderr: f64,
    pub r_squared_power: f64,
    /// `log error` against `log(eps mu_d(1/eps))`.
    pub slope_log_corrected: f64,
    pub r_squared_log_corrected: f64,
}

/// `levels[k]` holds the per-replica integrals at `eps[k]`; `abar` is pooled per level.
pub fn fit_expansion(d: usize, eps: &[f64], levels: &[Vec<ExpansionIntegrals>], envelope: &[f64]) -> Result<ExpansionFit> {
    if eps.len() < 3 || levels.len() != eps.len() {
        return Err(Error::Config("need integrals for at least three eps levels".into()));
    }
    let mut error = Vec::new();
    let mut stderr = Vec::new();
    let mut abar = Vec::new();
    for reps in levels {
        if reps.len() < 2 {
            return Err(Error::Config("need at least two replicas per level".into()));
        }
        let a = stats::mean(&reps.iter().map(|r| r.ahom_trace).collect::<Vec<_>>());
        let sq = stats::Estimate::from_samples(&reps.iter().map(|r| r.error_squared(a)).collect::<Vec<_>>());
        let e = sq.mean.sqrt();
        error.push(e);
        stderr.push(sq.stderr / (2.0 * e));
        abar.push(a);
    }
    let ly: Vec<f64> = error.iter().map(|e| e.ln()).collect();
    let lx: Vec<f64> = eps.iter().map(|e| e.ln()).collect();
    let lc: Vec<f64> = eps.iter().map(|&e| (e * mu(d, 1.0 / e)).ln()).collect();
    let power = stats::linear_fit(&lx, &ly);
    let corrected = stats::linear_fit(&lc, &ly);
    Ok(ExpansionFit {
        eps: eps.to_vec(),
        error,
        error_stderr: stderr,
        envelope: envelope.to_vec(),
        abar,
        slope: power.slope,
        slope_stderr: power.slope_stderr,
        r_squared_power: power.r_squared,
        slope_log_corrected: corrected.slope,
        r_squared_log_corrected: corrected.r_squared,
    })
}

/// Default solver tolerance for the `eps`-problem.
pub const SOLVE_TOL: f64 = DEFAULT_TOL;
