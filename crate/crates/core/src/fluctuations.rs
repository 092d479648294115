//! Fluctuation observables: spatial averages of corrector gradients, corrector
//! increments, the homogenization commutator and its rescaled pairings.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::balls::BallAverager;
use crate::correctors::{skew_pairs, CorrectorSet, Matrix};
use crate::error::{Error, Result};
use crate::fft::FftNd;
use crate::field::LatticeField;
use crate::grid::LatticeGrid;
use crate::pde::gradient;
use crate::stats::{self, LinearFit};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObservableKind {
    GradPhiAvg,
    GradSigmaAvg,
    CorrectorIncrement,
    CommutatorPairing,
    PathwiseResidual,
}

impl ObservableKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::GradPhiAvg => "grad_phi_avg",
            Self::GradSigmaAvg => "grad_sigma_avg",
            Self::CorrectorIncrement => "corrector_increment",
            Self::CommutatorPairing => "commutator_pairing",
            Self::PathwiseResidual => "pathwise_residual",
        }
    }
}

/// One scalar measurement on one replica.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observable {
    pub kind: ObservableKind,
    /// Radius, distance or `eps`, depending on the kind.
    pub param: f64,
    pub component: usize,
    pub replica: u64,
    pub value: f64,
}

/// Edge fields `D phi_i` and `D sigma_ijk` flattened into scalar components.
fn gradient_components(set: &CorrectorSet, sigma: bool) -> Vec<Vec<f64>> {
    let d = set.grid.dim();
    let mut out = Vec::new();
    if sigma {
        let nb = set.grid.neighbors();
        for s in &set.sigma {
            let g = gradient(&set.grid, &nb, &s.values);
            for axis in 0..d {
                out.push(g.iter().skip(axis).step_by(d).copied().collect());
            }
        }
    } else {
        for g in &set.grad_phi {
            for axis in 0..d {
                out.push(g.component(axis));
            }
        }
    }
    out
}

/// Ball averages of every component of `D phi` at the origin.
pub fn avg_gradient_observable(set: &CorrectorSet, radius: f64, replica: u64) -> Result<Vec<Observable>> {
    let grid = set.grid;
    let max = grid.side_length() / 4.0;
    if radius > max {
        return Err(Error::BallTooLarge { radius, max });
    }
    let offsets = grid.ball_offsets(radius);
    Ok(gradient_components(set, false)
        .iter()
        .enumerate()
        .map(|(c, v)| Observable {
            kind: ObservableKind::GradPhiAvg,
            param: radius,
            component: c,
            replica,
            value: crate::balls::ball_average_at(&grid, v, 0, &offsets),
        })
        .collect())
}

/// Ball averagers for the averaged-gradient experiment.
pub struct AveragingContext {
    fft: FftNd,
    radii: Vec<f64>,
    averagers: Vec<BallAverager>,
}

impl AveragingContext {
    pub fn new(grid: &LatticeGrid, radii: &[f64]) -> Result<Self> {
        let max = grid.side_length() / 4.0;
        if let Some(&r) = radii.iter().find(|&&r| r > max) {
            return Err(Error::BallTooLarge { radius: r, max });
        }
        let fft = FftNd::new(grid);
        let averagers = radii.iter().map(|&r| BallAverager::new(grid, &fft, r)).collect::<Result<Vec<_>>>()?;
        Ok(Self { fft, radii: radii.to_vec(), averagers })
    }

    pub fn radii(&self) -> &[f64] {
        &self.radii
    }
}

/// `E |avg_{B_R(x)} D phi|^2` (summed over components) for each radius, pooled over all centers
/// of one sample. With `sigma`, the same for `D sigma`.
pub fn averaged_gradient_moments(ctx: &AveragingContext, set: &CorrectorSet, sigma: bool) -> Vec<f64> {
    let comps = gradient_components(set, sigma);
    let mut out = vec![0.0; ctx.radii.len()];
    for v in &comps {
        let hat = ctx.fft.forward_real(v);
        for (k, avg) in ctx.averagers.iter().enumerate() {
            let a = avg.average_hat(&ctx.fft, &hat);
            out[k] += a.iter().map(|x| x * x).sum::<f64>() / a.len() as f64;
        }
    }
    out
}

/// Log-log regression of a pooled second moment against a scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingFit {
    pub abscissae: Vec<f64>,
    /// `log` of the replica mean at each abscissa.
    pub ordinates: Vec<f64>,
    pub ordinate_stderr: Vec<f64>,
    pub slope: f64,
    pub slope_stderr: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// `per_replica[r][k]` is replica `r`'s value at `abscissae[k]`.
pub fn fit_scaling(abscissae: &[f64], per_replica: &[Vec<f64>]) -> Result<ScalingFit> {
    if abscissae.len() < 3 {
        return Err(Error::Config("a scaling fit needs at least three abscissae".into()));
    }
    if per_replica.len() < 2 {
        return Err(Error::Config("a scaling fit needs at least two replicas".into()));
    }
    let mut ordinates = Vec::new();
    let mut errs = Vec::new();
    for k in 0..abscissae.len() {
        let e = stats::Estimate::from_samples(&per_replica.iter().map(|r| r[k]).collect::<Vec<_>>());
        ordinates.push(e.mean.ln());
        errs.push(e.stderr / e.mean);
    }
    let xs: Vec<f64> = abscissae.iter().map(|x| x.ln()).collect();
    let fit = stats::linear_fit(&xs, &ordinates);
    let weighted = stats::weighted_linear_fit(&xs, &ordinates, &errs);
    Ok(ScalingFit {
        abscissae: abscissae.to_vec(),
        ordinates,
        ordinate_stderr: errs,
        slope: fit.slope,
        slope_stderr: weighted.slope_stderr,
        intercept: fit.intercept,
        r_squared: fit.r_squared,
    })
}

/// Oscillation exponent `2p / (p - 1)` with `p = d + 1`.
pub fn oscillation_exponent(d: usize) -> f64 {
    let p = (d + 1) as f64;
    2.0 * p / (p - 1.0)
}

/// Components `(phi_i, sqrt(2) sigma_ijk)` whose Euclidean norm is `|(phi, sigma)|`.
pub fn corrector_components(set: &CorrectorSet) -> Vec<Vec<f64>> {
    let mut comps: Vec<Vec<f64>> = set.phi.iter().map(|p| p.values.clone()).collect();
    for s in &set.sigma {
        comps.push(s.values.iter().map(|v| std::f64::consts::SQRT_2 * v).collect());
    }
    comps
}

/// `(avg_{B_1(base + offset)} |(phi, sigma) - avg_{B_1(base)} (phi, sigma)|^p)^(1/p)`.
pub fn corrector_increment(set: &CorrectorSet, base: usize, offset: &[i64]) -> f64 {
    let grid = set.grid;
    let comps = corrector_components(set);
    let ball = grid.ball_offsets(grid.spacing());
    let p = oscillation_exponent(grid.dim());
    increment_with(&grid, &comps, &ball, p, base, offset)
}

fn increment_with(
    grid: &LatticeGrid,
    comps: &[Vec<f64>],
    ball: &[[i64; 3]],
    p: f64,
    base: usize,
    offset: &[i64],
) -> f64 {
    let anchor: Vec<f64> = comps.iter().map(|v| crate::balls::ball_average_at(grid, v, base, ball)).collect();
    let center = grid.offset(base, offset);
    let sum: f64 = ball
        .iter()
        .map(|z| {
            let y = grid.offset(center, z);
            let sq: f64 = comps.iter().zip(&anchor).map(|(v, m)| (v[y] - m).powi(2)).sum();
            sq.powf(p / 2.0)
        })
        .sum();
    (sum / ball.len() as f64).powf(1.0 / p)
}

/// Second moment of the corrector increment at each lattice distance, pooled over all base
/// points and the coordinate directions of one sample.
pub fn increment_second_moments(set: &CorrectorSet, distances: &[usize]) -> Result<Vec<f64>> {
    let grid = set.grid;
    let d = grid.dim();
    let max = grid.n_per_side() / 4;
    if let Some(&t) = distances.iter().find(|&&t| t > max) {
        return Err(Error::BallTooLarge { radius: t as f64 * grid.spacing(), max: max as f64 * grid.spacing() });
    }
    let comps = corrector_components(set);
    let ball = grid.ball_offsets(grid.spacing());
    let p = oscillation_exponent(d);
    let anchors: Vec<Vec<f64>> = {
        let fft = FftNd::new(&grid);
        let avg = BallAverager::new(&grid, &fft, grid.spacing())?;
        comps.iter().map(|v| avg.average(&fft, v)).collect()
    };
    let mut out = Vec::with_capacity(distances.len());
    for &t in distances {
        let mut total = 0.0;
        for axis in 0..d {
            let mut off = [0i64; 3];
            off[axis] = t as i64;
            for base in 0..grid.sites() {
                let center = grid.offset(base, &off);
                let sum: f64 = ball
                    .iter()
                    .map(|z| {
                        let y = grid.offset(center, z);
                        let sq: f64 = comps.iter().zip(&anchors).map(|(v, m)| (v[y] - m[base]).powi(2)).sum();
                        sq.powf(p / 2.0)
                    })
                    .sum();
                total += (sum / ball.len() as f64).powf(2.0 / p);
            }
        }
        out.push(total / (d * grid.sites()) as f64);
    }
    Ok(out)
}

/// Squared growth rate `mu_d(t)^2`: `t + 1`, `log(t + 2)`, `1`.
pub fn mu_squared(d: usize, t: f64) -> f64 {
    match d {
        1 => t + 1.0,
        2 => (t + 2.0).ln(),
        _ => 1.0,
    }
}

/// Fit pooled second moments to `A + B mu_d(|x|)^2`.
pub fn fit_growth(d: usize, distances: &[f64], per_replica: &[Vec<f64>]) -> (LinearFit, Vec<stats::Estimate>) {
    let est: Vec<stats::Estimate> = (0..distances.len())
        .map(|k| stats::Estimate::from_samples(&per_replica.iter().map(|r| r[k]).collect::<Vec<_>>()))
        .collect();
    let xs: Vec<f64> = distances.iter().map(|&t| mu_squared(d, t)).collect();
    let ys: Vec<f64> = est.iter().map(|e| e.mean).collect();
    (stats::linear_fit(&xs, &ys), est)
}

/// `[Xi]_i = (a - abar)(D phi_i + e_i)` at cell centers, `xi.values[site * d*d + i*d + j]`.
#[derive(Debug, Clone)]
pub struct CommutatorField {
    pub xi: LatticeField,
    /// In the storage convention of `CorrectorSet::ahom_sample`: row `i` is the flux mean of `q_i`.
    pub ahom_used: Matrix,
}

/// Cell-centered flux and gradient: averages of the two edges through each site along each axis.
fn centered(grid: &LatticeGrid, bwd: &[Vec<u32>], edge: &[f64], site: usize, axis: usize) -> f64 {
    let d = grid.dim();
    0.5 * (edge[site * d + axis] + edge[bwd[axis][site] as usize * d + axis])
}

/// Commutator from cell-centered fluxes `q~_i` and gradients `v~_i = D phi_i + e_i`:
/// `Xi_ij = q~_ij - (abar v~_i)_j`. Its lattice mean is exactly `ahom_sample - abar`.
pub fn build_commutator(set: &CorrectorSet, ahom: &Matrix) -> CommutatorField {
    let grid = set.grid;
    let d = grid.dim();
    let nb = grid.neighbors();
    let mut xi = vec![0.0; grid.sites() * d * d];
    for site in 0..grid.sites() {
        for i in 0..d {
            let q = &set.flux[i].values;
            let g = &set.grad_phi[i].values;
            let v: Vec<f64> = (0..d)
                .map(|k| centered(&grid, &nb.bwd, g, site, k) + if k == i { 1.0 } else { 0.0 })
                .collect();
            for j in 0..d {
                // (abar v)_j = sum_k abar_jk v_k with abar_jk = ahom[k][j].
                let av: f64 = (0..d).map(|k| ahom[k][j] * v[k]).sum();
                xi[site * d * d + i * d + j] = centered(&grid, &nb.bwd, q, site, j) - av;
            }
        }
    }
    CommutatorField {
        xi: LatticeField { grid, components: d * d, values: xi, meta: Default::default() },
        ahom_used: ahom.clone(),
    }
}

/// Smooth bump on the unit cube, `exp(1 - 1/(1 - |2y - 1|^2))` inside the inscribed ball.
pub fn bump(y: &[f64]) -> f64 {
    let r2: f64 = y.iter().map(|v| (2.0 * v - 1.0).powi(2)).sum();
    if r2 >= 1.0 {
        0.0
    } else {
        (1.0 - 1.0 / (1.0 - r2)).exp()
    }
}

/// Test function `F = chi(x / W) e_i (x) e_j` supported in a window of `W` cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestFunction {
    pub i: usize,
    pub j: usize,
}

/// Window size in cells for `eps = corr_length / (W * spacing)`.
pub fn window_cells(grid: &LatticeGrid, corr_length: f64, eps: f64) -> Result<usize> {
    let w = (corr_length / (eps * grid.spacing())).round();
    if w < 8.0 || w > grid.n_per_side() as f64 {
        return Err(Error::ScaleMismatch(format!(
            "eps {eps} needs a window of {w} cells; allowed 8..={}",
            grid.n_per_side()
        )));
    }
    Ok(w as usize)
}

/// Bump weights on a `W^d` window, row-major.
fn window_weights(d: usize, w: usize) -> Vec<f64> {
    let cells = w.pow(d as u32);
    (0..cells)
        .map(|c| {
            let mut y = [0.0; 3];
            let mut rest = c;
            for axis in (0..d).rev() {
                y[axis] = ((rest % w) as f64 + 0.5) / w as f64;
                rest /= w;
            }
            bump(&y[..d])
        })
        .collect()
}

/// `int chi^2` over the unit cube by the same quadrature as the pairings.
pub fn bump_norm_squared(d: usize, w: usize) -> f64 {
    window_weights(d, w).iter().map(|v| v * v).sum::<f64>() / w.pow(d as u32) as f64
}

/// Per-window moments `P_ij = sum chi q~_ij` and `V_ik = sum chi v~_ik`, already scaled so that
/// `I(chi e_i (x) e_j) = P_ij - sum_k V_ik abar_jk` for any `abar`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowMoments {
    pub p: Matrix,
    pub v: Matrix,
}

impl WindowMoments {
    /// `I(F)` for `F = chi e_i (x) e_j` and a given `abar` (storage convention).
    pub fn pairing(&self, ahom: &Matrix, f: TestFunction) -> f64 {
        let d = self.p.len();
        self.p[f.i][f.j] - (0..d).map(|k| self.v[f.i][k] * ahom[k][f.j]).sum::<f64>()
    }
}

/// Window moments on every disjoint translate of the window (the first translate sits at the origin).
pub fn window_moments(set: &CorrectorSet, corr_length: f64, eps: f64) -> Result<Vec<WindowMoments>> {
    let grid = set.grid;
    let d = grid.dim();
    let w = window_cells(&grid, corr_length, eps)?;
    let n = grid.n_per_side();
    let per_axis = n / w;
    let weights = window_weights(d, w);
    let nb = grid.neighbors();
    // I = eps^{d/2} l^{-d} sum_s Xi(s) : F(eps s / l) in units where the correlation length is one.
    let cell = grid.spacing() / corr_length;
    let scale = eps.powf(d as f64 / 2.0) * cell.powi(d as i32);
    let mut out = Vec::with_capacity(per_axis.pow(d as u32));
    for t in 0..per_axis.pow(d as u32) {
        let mut corner = [0usize; 3];
        let mut rest = t;
        for axis in (0..d).rev() {
            corner[axis] = (rest % per_axis) * w;
            rest /= per_axis;
        }
        let mut p = vec![vec![0.0; d]; d];
        let mut v = vec![vec![0.0; d]; d];
        for (c, &chi) in weights.iter().enumerate() {
            if chi == 0.0 {
                continue;
            }
            let mut coords = [0usize; 3];
            let mut r = c;
            for axis in (0..d).rev() {
                coords[axis] = corner[axis] + r % w;
                r /= w;
            }
            let site = grid.index(&coords);
            for i in 0..d {
                for j in 0..d {
                    p[i][j] += chi * centered(&grid, &nb.bwd, &set.flux[i].values, site, j);
                    let unit = if i == j { 1.0 } else { 0.0 };
                    v[i][j] += chi * (centered(&grid, &nb.bwd, &set.grad_phi[i].values, site, j) + unit);
                }
            }
        }
        for row in p.iter_mut().chain(v.iter_mut()) {
            row.iter_mut().for_each(|x| *x *= scale);
        }
        out.push(WindowMoments { p, v });
    }
    Ok(out)
}

/// `I_eps(F)` on the window at the origin, from an assembled commutator.
pub fn commutator_observable(xi: &CommutatorField, f: TestFunction, corr_length: f64, eps: f64) -> Result<f64> {
    let grid = xi.xi.grid;
    let d = grid.dim();
    let w = window_cells(&grid, corr_length, eps)?;
    let weights = window_weights(d, w);
    let scale = eps.powf(d as f64 / 2.0) * (grid.spacing() / corr_length).powi(d as i32);
    let mut sum = 0.0;
    for (c, &chi) in weights.iter().enumerate() {
        let mut coords = [0usize; 3];
        let mut r = c;
        for axis in (0..d).rev() {
            coords[axis] = r % w;
            r /= w;
        }
        sum += chi * xi.xi.get(grid.index(&coords), f.i * d + f.j);
    }
    Ok(scale * sum)
}

/// Covariance tensor estimate `Q_{(ij),(kl)}` with replica standard errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QEstimate {
    pub basis: Vec<TestFunction>,
    /// `q[a][b]` for basis entries `a, b`.
    pub q: Matrix,
    pub stderr: Matrix,
    /// Smallest `Q_aa / stderr_aa` over rank-one directions `e_i (x) e_j`.
    pub min_rank_one_z: f64,
    pub min_rank_one: f64,
}

/// Least-squares fit of `Cov(I(F_a), I(F_b)) = Q_ab int chi^2` over the symmetric unknowns.
///
/// `samples[r][t][a]` is replica `r`, translate `t`, basis element `a`.
pub fn estimate_q(basis: &[TestFunction], samples: &[Vec<Vec<f64>>], chi_norm2: f64) -> Result<QEstimate> {
    let m = basis.len();
    if m < 2 {
        return Err(Error::RankDeficient("need at least two test functions".into()));
    }
    if samples.len() < 2 {
        return Err(Error::RankDeficient("need at least two replicas".into()));
    }
    let all: Vec<&Vec<f64>> = samples.iter().flatten().collect();
    let means: Vec<f64> = (0..m).map(|a| all.iter().map(|s| s[a]).sum::<f64>() / all.len() as f64).collect();
    // Per-replica covariance pairings.
    let per_rep: Vec<Vec<f64>> = samples
        .iter()
        .map(|rep| {
            let mut c = vec![0.0; m * m];
            for s in rep {
                for a in 0..m {
                    for b in 0..m {
                        c[a * m + b] += (s[a] - means[a]) * (s[b] - means[b]);
                    }
                }
            }
            c.iter_mut().for_each(|x| *x /= rep.len() as f64);
            c
        })
        .collect();
    // Unknowns: symmetric pairs of components (i, j) appearing in the basis.
    let mut comps: Vec<(usize, usize)> = basis.iter().map(|f| (f.i, f.j)).collect();
    comps.sort();
    comps.dedup();
    let unknowns: Vec<(usize, usize)> =
        (0..comps.len()).flat_map(|a| (a..comps.len()).map(move |b| (a, b))).collect();
    let comp_index = |f: &TestFunction| comps.iter().position(|&c| c == (f.i, f.j)).unwrap();
    let mut design = DMatrix::<f64>::zeros(m * m, unknowns.len());
    for a in 0..m {
        for b in 0..m {
            let (ca, cb) = (comp_index(&basis[a]), comp_index(&basis[b]));
            let key = (ca.min(cb), ca.max(cb));
            let col = unknowns.iter().position(|&u| u == key).unwrap();
            design[(a * m + b, col)] = chi_norm2;
        }
    }
    let svd = design.clone().svd(true, true);
    let rank = svd.rank(1e-12 * chi_norm2.abs().max(1e-300));
    if rank < unknowns.len() {
        return Err(Error::RankDeficient(format!("rank {rank} < {} unknowns", unknowns.len())));
    }
    let solve = |c: &[f64]| -> Vec<f64> {
        let rhs = DVector::from_column_slice(c);
        svd.solve(&rhs, 1e-12).expect("svd has both factors").iter().copied().collect()
    };
    let q_reps: Vec<Vec<f64>> = per_rep.iter().map(|c| solve(c)).collect();
    let k = comps.len();
    let mut q = vec![vec![0.0; k]; k];
    let mut err = vec![vec![0.0; k]; k];
    for (col, &(a, b)) in unknowns.iter().enumerate() {
        let xs: Vec<f64> = q_reps.iter().map(|r| r[col]).collect();
        let e = stats::Estimate::from_samples(&xs);
        q[a][b] = e.mean;
        q[b][a] = e.mean;
        err[a][b] = e.stderr;
        err[b][a] = e.stderr;
    }
    let (min_rank_one, min_rank_one_z) = (0..k).fold((f64::MAX, f64::MAX), |acc, a| {
        (acc.0.min(q[a][a]), acc.1.min(q[a][a] / err[a][a]))
    });
    Ok(QEstimate {
        basis: comps.iter().map(|&(i, j)| TestFunction { i, j }).collect(),
        q,
        stderr: err,
        min_rank_one_z,
        min_rank_one,
    })
}

/// Long-run variance `sum_{|k| <= max_lag} gamma(k)` of a periodic 1-d series, with
/// `gamma` the circular autocovariance.
pub fn long_run_variance(series: &[f64], max_lag: usize) -> f64 {
    let n = series.len();
    let m = stats::mean(series);
    let c: Vec<f64> = series.iter().map(|x| x - m).collect();
    let gamma = |k: usize| (0..n).map(|i| c[i] * c[(i + k) % n]).sum::<f64>() / n as f64;
    gamma(0) + 2.0 * (1..=max_lag.min(n / 2)).map(gamma).sum::<f64>()
}

/// The `Xi_11` series of a 1-d commutator.
pub fn commutator_series(xi: &CommutatorField) -> Vec<f64> {
    xi.xi.component(0)
}

/// Per-replica flux-corrector pair count, for record layouts.
pub fn sigma_components(d: usize) -> usize {
    d * skew_pairs(d).len()
}

/// Pathwise pairings of one replica, split so any scalar `abar` can be applied afterwards:
/// `X = xi_flux - abar xi_grad` is `int g . Xi_eps(f)`,
/// `comm_flux / abar - comm_grad` is `int g . Xi(./eps) grad u_bar` and
/// `lit_flux / abar^2 - lit_grad / abar` is `int grad v_bar . Xi(./eps) grad u_bar`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathwiseIntegrals {
    pub xi_flux: f64,
    pub xi_grad: f64,
    pub comm_flux: f64,
    pub comm_grad: f64,
    pub lit_flux: f64,
    pub lit_grad: f64,
    pub ahom_trace: f64,
}

impl PathwiseIntegrals {
    pub fn field_pairing(&self, abar: f64) -> f64 {
        self.xi_flux - abar * self.xi_grad
    }

    pub fn commutator_pairing(&self, abar: f64) -> f64 {
        self.comm_flux / abar - self.comm_grad
    }

    pub fn literal_pairing(&self, abar: f64) -> f64 {
        self.lit_flux / (abar * abar) - self.lit_grad / abar
    }
}

/// Solve `-div a grad u = div f` on the macro grid of `problem` and pair with `g` (an edge field).
pub fn pathwise_integrals(
    problem: &crate::twoscale::MacroProblem,
    g: &LatticeField,
    set: &CorrectorSet,
    tol: f64,
) -> Result<PathwiseIntegrals> {
    let grid = problem.grid;
    if set.grid != grid || g.grid != grid || g.components != grid.dim() {
        return Err(Error::GridMismatch("pathwise data must share the macro grid".into()));
    }
    let d = grid.dim();
    let nb = grid.neighbors();
    let (u, _) = crate::pde::solve_divform(&set.edges, None, Some(&problem.f), tol)?;
    let du = gradient(&grid, &nb, &u.values);
    let au: Vec<f64> = du.iter().zip(&set.edges.values).map(|(x, a)| x * a).collect();
    let dz = gradient(&grid, &nb, &problem.z.values);
    let y = crate::pde::SpectralPoisson::new(&grid).solve(&crate::pde::divergence(&grid, &nb, &g.values));
    let dy = gradient(&grid, &nb, &y);
    let mut out = PathwiseIntegrals {
        xi_flux: 0.0,
        xi_grad: 0.0,
        comm_flux: 0.0,
        comm_grad: 0.0,
        lit_flux: 0.0,
        lit_grad: 0.0,
        ahom_trace: (0..d).map(|i| set.ahom_sample[i][i]).sum::<f64>() / d as f64,
    };
    for s in 0..grid.sites() {
        for j in 0..d {
            let gj = centered(&grid, &nb.bwd, &g.values, s, j);
            let yj = centered(&grid, &nb.bwd, &dy, s, j);
            out.xi_flux += gj * centered(&grid, &nb.bwd, &au, s, j);
            out.xi_grad += gj * centered(&grid, &nb.bwd, &du, s, j);
            for i in 0..d {
                let zi = centered(&grid, &nb.bwd, &dz, s, i);
                let q = centered(&grid, &nb.bwd, &set.flux[i].values, s, j);
                let v = centered(&grid, &nb.bwd, &set.grad_phi[i].values, s, j) + if i == j { 1.0 } else { 0.0 };
                out.comm_flux += gj * q * zi;
                out.comm_grad += gj * v * zi;
                out.lit_flux += yj * q * zi;
                out.lit_grad += yj * v * zi;
            }
        }
    }
    let vol = grid.spacing().powi(d as i32);
    for v in [
        &mut out.xi_flux,
        &mut out.xi_grad,
        &mut out.comm_flux,
        &mut out.comm_grad,
        &mut out.lit_flux,
        &mut out.lit_grad,
    ] {
        *v *= vol;
    }
    Ok(out)
}

/// Pooled pathwise statistics at one `eps`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathwiseLevel {
    pub eps: f64,
    pub abar: f64,
    /// Per-replica residuals against `int g . Xi(./eps) grad u_bar`.
    pub residuals: Vec<f64>,
    /// Per-replica residuals against `int grad v_bar . Xi(./eps) grad u_bar`.
    pub residuals_literal: Vec<f64>,
    pub residual_l2: f64,
    pub residual_literal_l2: f64,
    /// Standard error of the estimated mean of `eps^{-d/2} int g . Xi_eps(f)`.
    pub mean_inflation: f64,
    /// Variance of `eps^{-d/2} int g . Xi_eps(f)`.
    pub variance: f64,
    /// `eps mu_d(1/eps)`.
    pub envelope: f64,
}

pub fn summarize_pathwise(d: usize, eps: f64, reps: &[PathwiseIntegrals]) -> Result<PathwiseLevel> {
    if reps.len() < 2 {
        return Err(Error::Config("pathwise statistics need at least two replicas".into()));
    }
    let abar = stats::mean(&reps.iter().map(|r| r.ahom_trace).collect::<Vec<_>>());
    let scale = eps.powf(-(d as f64) / 2.0);
    let x: Vec<f64> = reps.iter().map(|r| scale * r.field_pairing(abar)).collect();
    let mx = stats::mean(&x);
    let residuals: Vec<f64> =
        reps.iter().zip(&x).map(|(r, xv)| (xv - mx - scale * r.commutator_pairing(abar)).abs()).collect();
    let residuals_literal: Vec<f64> =
        reps.iter().zip(&x).map(|(r, xv)| (xv - mx - scale * r.literal_pairing(abar)).abs()).collect();
    let l2 = |v: &[f64]| (v.iter().map(|r| r * r).sum::<f64>() / v.len() as f64).sqrt();
    Ok(PathwiseLevel {
        eps,
        abar,
        residual_l2: l2(&residuals),
        residual_literal_l2: l2(&residuals_literal),
        residuals,
        residuals_literal,
        mean_inflation: stats::std_error(&x),
        variance: stats::variance(&x),
        envelope: eps * crate::twoscale::mu(d, 1.0 / eps),
    })
}
