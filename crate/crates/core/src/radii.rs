//! Random minimal radii and their tails.
//!
//! All searches run over dyadic radii `spacing * 2^k <= side_length / 4`.
//! Per-site raw radii are made 1/8-Lipschitz by the smallest majorant
//! `r(x) = max_y (r~(y) - |x - y| / 8)`.

use serde::{Deserialize, Serialize};

use crate::balls::{ball_average_at, BallAverager};
use crate::correctors::{skew_pairs, CorrectorSet};
use crate::error::{Error, Result};
use crate::fft::FftNd;
use crate::field::LatticeField;
use crate::grid::LatticeGrid;
use crate::stats::{self, LinearFit};

pub const LIPSCHITZ: f64 = 1.0 / 8.0;
pub const DEFAULT_COMPARISON: f64 = 2.0;
/// At `C = 10` the sublinearity radius sits at one or two dyadic values on desk-size tori,
/// which leaves nothing to fit a tail to.
pub const DEFAULT_C_STAR: f64 = 4.0;
pub const DEFAULT_C_SPADE: f64 = 10.0;

/// Integrability exponent `p = d + 1` of the ellipticity radius.
pub fn p_diamond(d: usize) -> usize {
    d + 1
}

/// Comparison constant `C_d` with `(1 - 1/C_d) 2^d = 9^-d / 2`, the value under which
/// dyadic radii control all real radii. Too strict to leave unsaturated radii on desk-size tori.
pub fn strict_comparison(d: usize) -> f64 {
    1.0 / (1.0 - 9f64.powi(-(d as i32)) * 2f64.powi(-(d as i32 + 1)))
}

/// Reverse-Hölder exponent `2d(d+1) / (d^2 + d + 2)`.
pub fn reverse_holder_alpha(d: usize) -> f64 {
    let d = d as f64;
    2.0 * d * (d + 1.0) / (d * d + d + 2.0)
}

/// Exact `(E[a^p], E[a^-p])` for `a = exp(G)`, `Var G = amplitude`, `p = d + 1`.
pub fn exact_diamond_moments(amplitude: f64, d: usize) -> (f64, f64) {
    let p = p_diamond(d) as f64;
    let m = (amplitude * p * p / 2.0).exp();
    (m, m)
}

/// Dyadic radii and their FFT ball averagers for one grid, shared across replicas.
pub struct RadiiContext {
    grid: LatticeGrid,
    fft: FftNd,
    radii: Vec<f64>,
    averagers: Vec<BallAverager>,
}

impl RadiiContext {
    pub fn new(grid: &LatticeGrid) -> Result<Self> {
        let radii = dyadic_radii(grid);
        if radii.is_empty() {
            return Err(Error::InvalidGrid("grid too small for any dyadic radius".into()));
        }
        let fft = FftNd::new(grid);
        let averagers = radii
            .iter()
            .map(|&r| BallAverager::new(grid, &fft, r))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { grid: *grid, fft, radii, averagers })
    }

    pub fn grid(&self) -> &LatticeGrid {
        &self.grid
    }

    pub fn fft(&self) -> &FftNd {
        &self.fft
    }

    pub fn radii(&self) -> &[f64] {
        &self.radii
    }

    pub fn rho_max(&self) -> f64 {
        *self.radii.last().unwrap()
    }

    /// Ball averages of `values` at every dyadic radius.
    pub fn ball_averages(&self, values: &[f64]) -> Vec<Vec<f64>> {
        let hat = self.fft.forward_real(values);
        self.averagers.iter().map(|b| b.average_hat(&self.fft, &hat)).collect()
    }
}

pub fn dyadic_radii(grid: &LatticeGrid) -> Vec<f64> {
    let max = grid.side_length() / 4.0;
    let mut out = Vec::new();
    let mut r = grid.spacing();
    while r <= max * (1.0 + 1e-12) {
        out.push(r);
        r *= 2.0;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RadiusKind {
    Diamond,
    Star,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RadiusParams {
    pub p_diamond: usize,
    /// Two-sided factor for the ellipticity radius, or the constant `C` for the sublinearity radius.
    pub comparison: f64,
    pub dyadic_base: f64,
}

#[derive(Debug, Clone)]
pub struct RadiusField {
    pub grid: LatticeGrid,
    pub kind: RadiusKind,
    pub params: RadiusParams,
    /// Enveloped radius.
    pub values: Vec<f64>,
    /// Per-site radius before the envelope.
    pub raw: Vec<f64>,
    /// Sites where no admissible radius exists below `rho_max`.
    pub saturated: Vec<bool>,
    pub rho_max: f64,
}

impl RadiusField {
    pub fn saturated_count(&self) -> usize {
        self.saturated.iter().filter(|&&s| s).count()
    }

    /// Enveloped values at unsaturated sites, for tail fitting.
    pub fn uncensored(&self) -> Vec<f64> {
        self.values.iter().zip(&self.saturated).filter(|(_, &s)| !s).map(|(&v, _)| v).collect()
    }

    pub fn to_field(&self) -> LatticeField {
        LatticeField { grid: self.grid, components: 1, values: self.values.clone(), meta: Default::default() }
    }
}

/// Raw radius from per-radius pass flags: smallest dyadic `r` with every `rho >= r` passing.
/// `passes(k)` is queried from the largest index down and may stop early.
fn smallest_admissible(radii: &[f64], floor: f64, mut passes: impl FnMut(usize) -> bool) -> (f64, bool) {
    for k in (0..radii.len()).rev() {
        if radii[k] < floor * (1.0 - 1e-12) {
            break;
        }
        if !passes(k) {
            return match radii.get(k + 1) {
                Some(&r) => (r.max(floor), false),
                None => (*radii.last().unwrap(), true),
            };
        }
    }
    (radii[0].max(floor), false)
}

/// Ellipticity radius: ball averages of `a^p + a^-p` within a factor `comparison` of their mean.
pub fn compute_r_diamond(
    ctx: &RadiiContext,
    a: &LatticeField,
    moments: (f64, f64),
    comparison: f64,
) -> Result<RadiusField> {
    a.require_scalar()?;
    if a.grid != ctx.grid {
        return Err(Error::GridMismatch("coefficient and radius context differ".into()));
    }
    let d = ctx.grid.dim();
    let p = p_diamond(d) as i32;
    let target = moments.0 + moments.1;
    let f: Vec<f64> = a.values.iter().map(|v| v.powi(p) + v.powi(-p)).collect();
    let avgs = ctx.ball_averages(&f);
    let (lo, hi) = (target / comparison, target * comparison);
    let mut raw = Vec::with_capacity(f.len());
    let mut saturated = Vec::with_capacity(f.len());
    for site in 0..f.len() {
        let (r, sat) = smallest_admissible(&ctx.radii, 0.0, |k| {
            let m = avgs[k][site];
            m >= lo && m <= hi
        });
        raw.push(r);
        saturated.push(sat);
    }
    let values = lipschitz_envelope(&ctx.grid, &raw);
    Ok(RadiusField {
        grid: ctx.grid,
        kind: RadiusKind::Diamond,
        params: RadiusParams { p_diamond: p as usize, comparison, dyadic_base: 2.0 },
        values,
        raw,
        saturated,
        rho_max: ctx.rho_max(),
    })
}

/// `(R^(-eps/2) sup_{B_R(center)} (a + 1/a))^2`.
pub fn r_club_at(a: &LatticeField, center: usize, radius: f64, eps: f64) -> Result<f64> {
    let max = a.grid.side_length() / 4.0;
    if radius > max {
        return Err(Error::BallTooLarge { radius, max });
    }
    let sup = a
        .grid
        .ball_offsets(radius)
        .iter()
        .map(|z| {
            let v = a.values[a.grid.offset(center, z)];
            v + 1.0 / v
        })
        .fold(0.0, f64::max);
    Ok((radius.powf(-eps / 2.0) * sup).powi(2))
}

pub fn compute_r_club(a: &LatticeField, radius: f64, eps: f64) -> Result<f64> {
    r_club_at(a, 0, radius, eps)
}

/// Oscillation components `(phi_i, sqrt(2) sigma_ijk)`; the factor counts both orderings of `(j, k)`.
fn oscillation_components(set: &CorrectorSet) -> Vec<Vec<f64>> {
    let mut comps: Vec<Vec<f64>> = set.phi.iter().map(|p| p.values.clone()).collect();
    let w = std::f64::consts::SQRT_2;
    for s in &set.sigma {
        comps.push(s.values.iter().map(|v| w * v).collect());
    }
    comps
}

/// Lattice offsets of a ball as flat-index shifts relative to each site, via wrap tables.
struct BallWalker {
    dim: usize,
    n: usize,
    offsets: Vec<[i64; 3]>,
}

impl BallWalker {
    fn new(grid: &LatticeGrid, radius: f64) -> Self {
        Self { dim: grid.dim(), n: grid.n_per_side(), offsets: grid.ball_offsets(radius) }
    }

    fn for_each(&self, coords: [usize; 3], mut f: impl FnMut(usize) -> bool) {
        let n = self.n as i64;
        for z in &self.offsets {
            let mut idx = 0usize;
            for a in 0..self.dim {
                idx = idx * self.n + (coords[a] as i64 + z[a]).rem_euclid(n) as usize;
            }
            if !f(idx) {
                return;
            }
        }
    }
}

/// `sum |v|^p` with the exponent specialized where possible; `sq` is `|v|^2`.
fn abs_pow(sq: f64, p: f64) -> f64 {
    if p == 4.0 {
        sq * sq
    } else if p == 3.0 {
        sq * sq.sqrt()
    } else {
        sq.powf(p / 2.0)
    }
}

/// Whether `(1/rho) (avg_{B_rho(x)} |v - avg v|^p)^(1/p) <= 1/C` at one site.
fn oscillation_passes(
    comps: &[Vec<f64>],
    means: &[&[f64]],
    walker: &BallWalker,
    coords: [usize; 3],
    site: usize,
    rho: f64,
    c: f64,
    p: f64,
) -> bool {
    let budget = (rho / c).powf(p) * walker.offsets.len() as f64;
    let m: Vec<f64> = means.iter().map(|mk| mk[site]).collect();
    let mut sum = 0.0;
    let mut ok = true;
    walker.for_each(coords, |y| {
        let sq: f64 = comps.iter().zip(&m).map(|(v, mk)| (v[y] - mk).powi(2)).sum();
        sum += abs_pow(sq, p);
        ok = sum <= budget;
        ok
    });
    ok
}

/// Sublinearity radius: the smallest admissible `r >= r_diamond(x)` for the oscillation bound.
pub fn compute_r_star(
    ctx: &RadiiContext,
    set: &CorrectorSet,
    r_diamond: &RadiusField,
    c: f64,
) -> Result<RadiusField> {
    if set.grid != ctx.grid || r_diamond.grid != ctx.grid {
        return Err(Error::GridMismatch("correctors, radius and context differ".into()));
    }
    let grid = ctx.grid;
    let d = grid.dim();
    let pd = p_diamond(d) as f64;
    let p = 2.0 * pd / (pd - 1.0);
    let comps = oscillation_components(set);
    let means: Vec<Vec<Vec<f64>>> = comps.iter().map(|v| ctx.ball_averages(v)).collect();
    let walkers: Vec<BallWalker> = ctx.radii.iter().map(|&r| BallWalker::new(&grid, r)).collect();
    let mut dyadic = vec![0.0; grid.sites()];
    let mut saturated = vec![false; grid.sites()];
    for site in 0..grid.sites() {
        let coords = grid.coords(site);
        let floor = r_diamond.values[site];
        let mut failed = false;
        let (r, sat) = smallest_admissible(&ctx.radii, floor, |k| {
            let mk: Vec<&[f64]> = means.iter().map(|m| m[k].as_slice()).collect();
            let ok = oscillation_passes(&comps, &mk, &walkers[k], coords, site, ctx.radii[k], c, p);
            failed |= !ok;
            ok
        });
        saturated[site] = sat || r_diamond.saturated[site];
        // Only the dyadic part needs an envelope; the floor is already Lipschitz.
        dyadic[site] = if failed { r } else { 0.0 };
    }
    let env = lipschitz_envelope(&grid, &dyadic);
    let raw: Vec<f64> = dyadic.iter().zip(&r_diamond.values).map(|(a, b)| a.max(*b)).collect();
    let values: Vec<f64> = env.iter().zip(&r_diamond.values).map(|(a, b)| a.max(*b)).collect();
    Ok(RadiusField {
        grid,
        kind: RadiusKind::Star,
        params: RadiusParams { p_diamond: pd as usize, comparison: c, dyadic_base: 2.0 },
        values,
        raw,
        saturated,
        rho_max: ctx.rho_max(),
    })
}

/// Per-site `sum_axis aE (D phi_e + e)_axis^2`, the energy density of `u = phi_e + e.x`.
pub fn harmonic_energy_density(set: &CorrectorSet, direction: usize) -> Vec<f64> {
    edge_energy(set, direction, 1.0)
}

/// Per-site `sum_axis aE (D phi_e)_axis^2`.
pub fn corrector_energy_density(set: &CorrectorSet, direction: usize) -> Vec<f64> {
    edge_energy(set, direction, 0.0)
}

fn edge_energy(set: &CorrectorSet, direction: usize, shift: f64) -> Vec<f64> {
    let d = set.grid.dim();
    let g = &set.grad_phi[direction].values;
    (0..set.grid.sites())
        .map(|s| {
            (0..d)
                .map(|axis| {
                    let v = g[s * d + axis] + if axis == direction { shift } else { 0.0 };
                    set.edges.values[s * d + axis] * v * v
                })
                .sum()
        })
        .collect()
}

/// Energy radius at `center`: smallest dyadic `r >= floor` such that every dyadic `R` in
/// `[r, side/8]` has `avg_{B_R} a |D phi_e|^2 <= C avg_{B_2R} a`; maximized over directions.
pub fn compute_r_spade(set: &CorrectorSet, a: &LatticeField, center: usize, floor: f64, c: f64) -> Result<f64> {
    let grid = set.grid;
    let radii: Vec<f64> = dyadic_radii(&grid).into_iter().filter(|&r| 2.0 * r <= grid.side_length() / 4.0 + 1e-9).collect();
    if radii.is_empty() {
        return Err(Error::InvalidGrid("grid too small for the energy radius".into()));
    }
    let offsets: Vec<Vec<[i64; 3]>> = radii.iter().map(|&r| grid.ball_offsets(r)).collect();
    let doubled: Vec<Vec<[i64; 3]>> = radii.iter().map(|&r| grid.ball_offsets(2.0 * r)).collect();
    let mut worst: f64 = 0.0;
    for e in 0..grid.dim() {
        let energy = corrector_energy_density(set, e);
        let (r, _) = smallest_admissible(&radii, floor, |k| {
            ball_average_at(&grid, &energy, center, &offsets[k])
                <= c * ball_average_at(&grid, &a.values, center, &doubled[k])
        });
        worst = worst.max(r);
    }
    Ok(worst)
}

/// Smallest 1/8-Lipschitz majorant on the periodic lattice.
///
/// Fields with few distinct values are handled exactly through one periodic
/// distance transform per level; otherwise falls back to direct maximization.
pub fn lipschitz_envelope(grid: &LatticeGrid, values: &[f64]) -> Vec<f64> {
    let mut levels: Vec<f64> = values.to_vec();
    levels.sort_by(f64::total_cmp);
    levels.dedup();
    if levels.len() > 64 {
        return lipschitz_envelope_direct(grid, values);
    }
    let h = grid.spacing();
    let mut out = values.to_vec();
    let top = *levels.last().unwrap();
    for &level in &levels {
        let mask: Vec<bool> = values.iter().map(|&v| v == level).collect();
        let dist2 = periodic_edt(grid, &mask);
        for (o, &d2) in out.iter_mut().zip(&dist2) {
            if d2.is_finite() {
                *o = o.max(level - LIPSCHITZ * d2.sqrt() * h);
            }
        }
    }
    debug_assert!(out.iter().all(|&v| v <= top));
    out
}

/// `max_y (f(y) - |x - y| / 8)` by direct summation over all pairs.
pub fn lipschitz_envelope_direct(grid: &LatticeGrid, values: &[f64]) -> Vec<f64> {
    let n = grid.sites();
    (0..n)
        .map(|x| (0..n).map(|y| values[y] - LIPSCHITZ * grid.distance(x, y)).fold(f64::MIN, f64::max))
        .collect()
}

/// Squared periodic Euclidean distance (lattice units) to the nearest marked site.
fn periodic_edt(grid: &LatticeGrid, mask: &[bool]) -> Vec<f64> {
    let n = grid.n_per_side();
    let mut f: Vec<f64> = mask.iter().map(|&m| if m { 0.0 } else { f64::INFINITY }).collect();
    let mut line = vec![0.0; n];
    let mut out = vec![0.0; n];
    for axis in 0..grid.dim() {
        let stride = grid.stride(axis);
        let block = stride * n;
        for outer in (0..grid.sites()).step_by(block) {
            for inner in 0..stride {
                let base = outer + inner;
                for (k, slot) in line.iter_mut().enumerate() {
                    *slot = f[base + k * stride];
                }
                periodic_dt_1d(&line, &mut out);
                for (k, v) in out.iter().enumerate() {
                    f[base + k * stride] = *v;
                }
            }
        }
    }
    f
}

/// `out[p] = min_q (f[q] + minimage(p - q)^2)` via the lower envelope of parabolas
/// over three periods.
fn periodic_dt_1d(f: &[f64], out: &mut [f64]) {
    let n = f.len();
    let m = 3 * n;
    let val = |q: usize| f[q % n];
    let mut v: Vec<usize> = Vec::with_capacity(m);
    let mut z: Vec<f64> = Vec::with_capacity(m + 1);
    for q in 0..m {
        let fq = val(q);
        if !fq.is_finite() {
            continue;
        }
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    z.clear();
                    z.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&p) => {
                    let qf = q as f64;
                    let pf = p as f64;
                    let s = ((fq + qf * qf) - (val(p) + pf * pf)) / (2.0 * (qf - pf));
                    if s <= *z.last().unwrap() {
                        v.pop();
                        z.pop();
                        if v.is_empty() {
                            continue;
                        }
                    } else {
                        v.push(q);
                        z.push(s);
                        break;
                    }
                }
            }
        }
    }
    if v.is_empty() {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (i, o) in out.iter_mut().enumerate() {
        let x = (i + n) as f64;
        while k + 1 < v.len() && z[k + 1] < x {
            k += 1;
        }
        let q = v[k] as f64;
        *o = (x - q) * (x - q) + val(v[k]);
    }
}

/// Least-squares tail fit `-log S(x) = c log^2(1 + x) + b` on the upper decile
/// (thinned to evenly spaced survival levels),
/// with the pure power-law alternative `-log S(x) = c' log(1 + x) + b'` for comparison.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TailFit {
    pub c_hat: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub sample_count: usize,
    pub censored_count: usize,
    pub fit_points: usize,
    pub power_slope: f64,
    pub power_r_squared: f64,
}

/// Points `(x, -log S(x))` used by the tail fit.
pub fn tail_points(samples: &[f64], censored: usize, upper_fraction: f64) -> Vec<(f64, f64)> {
    let mut xs = samples.to_vec();
    xs.sort_by(f64::total_cmp);
    let total = (xs.len() + censored) as f64;
    let cut = stats::quantile(&xs, 1.0 - upper_fraction);
    let mut points = Vec::new();
    let mut i = 0;
    while i < xs.len() {
        let x = xs[i];
        let at_or_above = xs.len() - i + censored;
        if x >= cut && at_or_above >= MIN_TAIL_COUNT {
            points.push((x, -(at_or_above as f64 / total).ln()));
        }
        while i < xs.len() && xs[i] == x {
            i += 1;
        }
    }
    thin_by_survival(points, TAIL_LEVELS)
}

/// Points with fewer samples at or above them are too noisy to fit.
pub const MIN_TAIL_COUNT: usize = 10;

/// Maximum number of points kept in a tail fit.
pub const TAIL_LEVELS: usize = 40;

/// Keep the first point at or above each of `levels` evenly spaced `-log S` values,
/// so the densely sampled start of the tail does not dominate the fit.
fn thin_by_survival(points: Vec<(f64, f64)>, levels: usize) -> Vec<(f64, f64)> {
    if points.len() <= levels {
        return points;
    }
    let (y0, y1) = (points[0].1, points[points.len() - 1].1);
    let mut out: Vec<(f64, f64)> = Vec::with_capacity(levels);
    let mut j = 0;
    for k in 0..levels {
        let level = y0 + (y1 - y0) * k as f64 / (levels - 1) as f64;
        while j < points.len() && points[j].1 < level {
            j += 1;
        }
        if j < points.len() && out.last().is_none_or(|p| p.0 != points[j].0) {
            out.push(points[j]);
        }
    }
    out
}

pub fn fit_log2_tail(samples: &[f64]) -> Result<TailFit> {
    fit_log2_tail_censored(samples, 0)
}

pub fn fit_log2_tail_censored(samples: &[f64], censored: usize) -> Result<TailFit> {
    let above = samples.iter().filter(|&&x| x > 1.0).count();
    if above < 50 {
        return Err(Error::InsufficientTail(format!("{above} samples above 1, need 50")));
    }
    let points = tail_points(samples, censored, 0.1);
    if points.len() < 3 {
        return Err(Error::InsufficientTail(format!("{} distinct tail values", points.len())));
    }
    let ys: Vec<f64> = points.iter().map(|p| p.1).collect();
    let log2: Vec<f64> = points.iter().map(|p| (1.0 + p.0).ln().powi(2)).collect();
    let log1: Vec<f64> = points.iter().map(|p| (1.0 + p.0).ln()).collect();
    let fit: LinearFit = stats::linear_fit(&log2, &ys);
    let power = stats::linear_fit(&log1, &ys);
    Ok(TailFit {
        c_hat: fit.slope,
        intercept: fit.intercept,
        r_squared: fit.r_squared,
        sample_count: samples.len(),
        censored_count: censored,
        fit_points: points.len(),
        power_slope: power.slope,
        power_r_squared: power.r_squared,
    })
}

/// `(r, avg_{B_r} e / avg_{B_R} e)` at one center for each radius in `r_list`.
pub fn energy_ratio_profile(
    grid: &LatticeGrid,
    density: &[f64],
    center: usize,
    r_list: &[f64],
    big_r: f64,
) -> Vec<(f64, f64)> {
    let outer = ball_average_at(grid, density, center, &grid.ball_offsets(big_r));
    r_list
        .iter()
        .map(|&r| (r, ball_average_at(grid, density, center, &grid.ball_offsets(r)) / outer))
        .collect()
}

/// Hole-filling profile for `u = phi_e + e.x` at `center`, over dyadic `r` in `[floor, R)`.
pub fn hole_filling_profile(
    set: &CorrectorSet,
    direction: usize,
    center: usize,
    floor: f64,
    big_r: f64,
) -> Vec<(f64, f64)> {
    let density = harmonic_energy_density(set, direction);
    let r_list: Vec<f64> = dyadic_radii(&set.grid)
        .into_iter()
        .filter(|&r| r >= floor * (1.0 - 1e-12) && r < big_r)
        .collect();
    energy_ratio_profile(&set.grid, &density, center, &r_list, big_r)
}

/// Fitted decay `avg_{B_r} / avg_{B_R} <= C (R/r)^(d - beta)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HoleFillingFit {
    pub beta_hat: f64,
    pub c_hat: f64,
    pub slope: f64,
    pub r_squared: f64,
    pub points: usize,
    pub alpha: f64,
}

impl HoleFillingFit {
    /// Whether every point of a profile satisfies the fitted bound with `slack`.
    pub fn holds(&self, profile: &[(f64, f64)], big_r: f64, d: usize, slack: f64) -> bool {
        profile
            .iter()
            .all(|&(r, ratio)| ratio <= slack * self.c_hat * (big_r / r).powf(d as f64 - self.beta_hat))
    }
}

/// Regress `log ratio` on `log(R/r)`; `beta = d - slope` clamped to `(0, d]`, and `C` is the
/// worst case of the fitting profiles under that exponent.
pub fn fit_hole_filling(profiles: &[Vec<(f64, f64)>], big_r: f64, d: usize) -> Result<HoleFillingFit> {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for prof in profiles {
        for &(r, ratio) in prof {
            xs.push((big_r / r).ln());
            ys.push(ratio.ln());
        }
    }
    let distinct = {
        let mut v = xs.clone();
        v.sort_by(f64::total_cmp);
        v.dedup();
        v.len()
    };
    if distinct < 2 {
        return Err(Error::InsufficientTail("hole filling needs at least two radii".into()));
    }
    let fit = stats::linear_fit(&xs, &ys);
    let df = d as f64;
    let slope = if fit.slope.is_finite() { fit.slope } else { 0.0 };
    let beta_hat = (df - slope).clamp(1e-6, df);
    let log_c = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| y - (df - beta_hat) * x)
        .fold(f64::MIN, f64::max);
    Ok(HoleFillingFit {
        beta_hat,
        c_hat: log_c.exp(),
        slope,
        r_squared: fit.r_squared,
        points: xs.len(),
        alpha: reverse_holder_alpha(d),
    })
}

/// Largest `avg_{B_r} / avg_{B_R}` over dyadic `r` in `[r_min, R]` for `u = phi_e + e.x`.
pub fn mean_value_ratio(set: &CorrectorSet, direction: usize, center: usize, r_min: f64, big_r: f64) -> f64 {
    hole_filling_profile(set, direction, center, r_min, big_r)
        .iter()
        .map(|p| p.1)
        .fold(1.0, f64::max)
}

/// Number of stored flux-corrector pairs, exposed for diagnostics.
pub fn oscillation_dimension(d: usize) -> usize {
    d + d * skew_pairs(d).len()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::correctors::{compute_correctors, correctors_from_edges, CorrectorConfig};
    use crate::field::{exp_field, sample_gaussian_field, CovarianceFamily, CovarianceSpec};
    use crate::pde::EdgeCoefficient;
    use crate::rng::{stream_rng, streams};
    use rand::Rng;
    use rand_distr::{Exp, StandardNormal};

    fn lognormal(grid: &LatticeGrid, amplitude: f64, seed: u64) -> LatticeField {
        let spec = CovarianceSpec::new(CovarianceFamily::GaussianKernel, amplitude, 2.0).unwrap();
        exp_field(&sample_gaussian_field(grid, &spec, seed).unwrap()).unwrap()
    }

    #[test]
    fn constants() {
        assert!((reverse_holder_alpha(2) - 1.5).abs() < 1e-15);
        assert!((reverse_holder_alpha(3) - 12.0 / 7.0).abs() < 1e-15);
        let c2 = strict_comparison(2);
        assert!(((1.0 - 1.0 / c2) * 4.0 - 81f64.recip() / 2.0).abs() < 1e-15);
        let grid = LatticeGrid::unit_spacing(2, 64).unwrap();
        assert_eq!(dyadic_radii(&grid), vec![1.0, 2.0, 4.0, 8.0, 16.0]);
    }

    #[test]
    fn envelope_matches_direct_and_is_minimal() {
        for (dim, n) in [(1, 32), (2, 16), (3, 8)] {
            let grid = LatticeGrid::new(dim, n, n as f64 * 1.5).unwrap();
            let mut rng = stream_rng(5, dim as u64, streams::SYNTHETIC);
            let raw: Vec<f64> = (0..grid.sites()).map(|_| [1.0, 2.0, 4.0, 8.0][rng.random_range(0..4)]).collect();
            let fast = lipschitz_envelope(&grid, &raw);
            let slow = lipschitz_envelope_direct(&grid, &raw);
            for i in 0..grid.sites() {
                assert!((fast[i] - slow[i]).abs() < 1e-9, "dim {dim} site {i}: {} vs {}", fast[i], slow[i]);
                assert!(fast[i] >= raw[i]);
            }
            for x in 0..grid.sites() {
                for y in 0..grid.sites() {
                    assert!(fast[x] - fast[y] <= LIPSCHITZ * grid.distance(x, y) + 1e-9);
                }
            }
            // Lowering a value below the raw field or below a neighbor's cone breaks a property.
            for x in (0..grid.sites()).step_by(7) {
                let lowered = fast[x] - 1e-3;
                let breaks_majorant = lowered < raw[x];
                let breaks_lipschitz =
                    (0..grid.sites()).any(|y| fast[y] - lowered > LIPSCHITZ * grid.distance(x, y) + 1e-12);
                assert!(breaks_majorant || breaks_lipschitz);
            }
        }
    }

    #[test]
    fn constant_coefficient_radii_are_one() {
        let grid = LatticeGrid::unit_spacing(2, 32).unwrap();
        let ctx = RadiiContext::new(&grid).unwrap();
        let a = LatticeField::constant(grid, 1, 1.0);
        let rd = compute_r_diamond(&ctx, &a, (1.0, 1.0), DEFAULT_COMPARISON).unwrap();
        assert!(rd.values.iter().all(|&v| v == 1.0));
        let set = correctors_from_edges(EdgeCoefficient::constant(grid, 1.0), &CorrectorConfig::default()).unwrap();
        let rs = compute_r_star(&ctx, &set, &rd, 10.0).unwrap();
        assert!(rs.values.iter().all(|&v| v == 1.0));
        assert_eq!(compute_r_spade(&set, &a, 0, 1.0, 2.0).unwrap(), 1.0);
        assert!((compute_r_club(&a, 8.0, 1.0).unwrap() - 0.5).abs() < 1e-15);
        let big = LatticeGrid::unit_spacing(2, 64).unwrap();
        let a64 = LatticeField::constant(big, 1, 1.0);
        assert!((compute_r_club(&a64, 16.0, 1.0).unwrap() - 0.25).abs() < 1e-15);
        assert!(matches!(compute_r_club(&a64, 17.0, 1.0), Err(Error::BallTooLarge { .. })));
    }

    #[test]
    fn single_extreme_site_peaks_and_decays() {
        let grid = LatticeGrid::unit_spacing(2, 64).unwrap();
        let ctx = RadiiContext::new(&grid).unwrap();
        let mut a = LatticeField::constant(grid, 1, 1.0);
        let peak = grid.index(&[20, 30]);
        a.values[peak] = 30.0;
        let rd = compute_r_diamond(&ctx, &a, (1.0, 1.0), DEFAULT_COMPARISON).unwrap();
        let top = rd.values.iter().cloned().fold(0.0, f64::max);
        assert_eq!(rd.values[peak], top);
        assert!(top > 1.0);
        let far = grid.index(&[52, 62]);
        assert!(rd.values[far] < top);
        for s in 0..grid.sites() {
            assert!(top - rd.values[s] <= LIPSCHITZ * grid.distance(s, peak) + 1e-9);
        }
    }

    #[test]
    fn radii_monotone_in_constants_and_star_above_diamond() {
        let grid = LatticeGrid::unit_spacing(2, 32).unwrap();
        let ctx = RadiiContext::new(&grid).unwrap();
        let a = lognormal(&grid, 0.5, 21);
        let m = exact_diamond_moments(0.5, 2);
        let loose = compute_r_diamond(&ctx, &a, m, 3.0).unwrap();
        let tight = compute_r_diamond(&ctx, &a, m, 1.5).unwrap();
        assert!(loose.values.iter().zip(&tight.values).all(|(l, t)| l <= t));
        let set = compute_correctors(&a, &CorrectorConfig::default()).unwrap();
        let s10 = compute_r_star(&ctx, &set, &loose, 10.0).unwrap();
        let s5 = compute_r_star(&ctx, &set, &loose, 5.0).unwrap();
        assert!(s10.values.iter().zip(&loose.values).all(|(s, d)| s >= d));
        assert!(s5.values.iter().zip(&s10.values).all(|(a, b)| a <= b));
        let spade_lo = compute_r_spade(&set, &a, 0, 1.0, 0.5).unwrap();
        let spade_hi = compute_r_spade(&set, &a, 0, 1.0, 5.0).unwrap();
        assert!(spade_hi <= spade_lo);
        let again = compute_r_star(&ctx, &set, &loose, 10.0).unwrap();
        assert_eq!(again.values, s10.values);
    }

    #[test]
    fn brute_force_oscillation_agrees() {
        let grid = LatticeGrid::unit_spacing(2, 16).unwrap();
        let ctx = RadiiContext::new(&grid).unwrap();
        let a = lognormal(&grid, 1.0, 2);
        let set = compute_correctors(&a, &CorrectorConfig::default()).unwrap();
        let ones = RadiusField {
            grid,
            kind: RadiusKind::Diamond,
            params: RadiusParams { p_diamond: 3, comparison: 2.0, dyadic_base: 2.0 },
            values: vec![1.0; 256],
            raw: vec![1.0; 256],
            saturated: vec![false; 256],
            rho_max: 4.0,
        };
        let c = 4.0;
        let rs = compute_r_star(&ctx, &set, &ones, c).unwrap();
        let comps = oscillation_components(&set);
        for site in [0, 17, 100, 255] {
            let mut expected = 1.0;
            for &rho in ctx.radii().iter().rev() {
                let off = grid.ball_offsets(rho);
                let mean: Vec<f64> = comps.iter().map(|v| ball_average_at(&grid, v, site, &off)).collect();
                let avg = off
                    .iter()
                    .map(|z| {
                        let y = grid.offset(site, z);
                        let sq: f64 = comps.iter().zip(&mean).map(|(v, m)| (v[y] - m).powi(2)).sum();
                        sq.powf(1.5)
                    })
                    .sum::<f64>()
                    / off.len() as f64;
                if avg.powf(1.0 / 3.0) / rho > 1.0 / c {
                    expected = (2.0 * rho).min(4.0);
                    break;
                }
            }
            assert_eq!(rs.raw[site], expected, "site {site}");
        }
    }

    #[test]
    fn tail_fit_recovers_lognormal_type_constant() {
        let mut rng = stream_rng(1, 0, streams::SYNTHETIC);
        let xs: Vec<f64> = (0..200_000).map(|_| rng.sample::<f64, _>(StandardNormal).abs().exp()).collect();
        let fit = fit_log2_tail(&xs).unwrap();
        assert!((fit.c_hat - 0.5).abs() < 0.1, "{fit:?}");
        assert!(fit.r_squared > fit.power_r_squared, "{fit:?}");
        let exp = Exp::new(1.0).unwrap();
        let ys: Vec<f64> = (0..20000).map(|_| 1.0 + rng.sample::<f64, _>(exp)).collect();
        let efit = fit_log2_tail(&ys).unwrap();
        assert!(efit.r_squared < fit.r_squared, "{} vs {}", efit.r_squared, fit.r_squared);
        assert!(matches!(fit_log2_tail(&[3.0; 100]), Err(Error::InsufficientTail(_))));
        assert!(matches!(fit_log2_tail(&[0.5; 100]), Err(Error::InsufficientTail(_))));
    }

    #[test]
    fn hole_filling_on_constant_coefficient() {
        let grid = LatticeGrid::unit_spacing(2, 64).unwrap();
        let set = correctors_from_edges(EdgeCoefficient::constant(grid, 1.0), &CorrectorConfig::default()).unwrap();
        let prof = hole_filling_profile(&set, 0, 0, 1.0, 16.0);
        assert_eq!(prof.len(), 4);
        assert!(prof.iter().all(|p| (p.1 - 1.0).abs() < 1e-12));
        let fit = fit_hole_filling(&[prof.clone()], 16.0, 2).unwrap();
        assert!((fit.beta_hat - 2.0).abs() < 1e-9);
        assert!(fit.holds(&prof, 16.0, 2, 1.0 + 1e-9));
        assert!((mean_value_ratio(&set, 1, 5, 1.0, 16.0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dt_handles_wraparound() {
        let mut out = vec![0.0; 8];
        let mut f = vec![f64::INFINITY; 8];
        f[7] = 0.0;
        periodic_dt_1d(&f, &mut out);
        assert_eq!(out, vec![1.0, 4.0, 9.0, 16.0, 9.0, 4.0, 1.0, 0.0]);
        periodic_dt_1d(&[f64::INFINITY; 8], &mut out);
        assert!(out.iter().all(|v| v.is_infinite()));
    }
}
