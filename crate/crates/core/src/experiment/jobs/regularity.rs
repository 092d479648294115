use super::{estimate_row, failed, too_few, value_row, Base, Extra, Job, ReplicaOutput};
use crate::correctors::compute_correctors;
use crate::error::Result;
use crate::experiment::{Check, ExperimentConfig, FitRow, ObservableTable};
use crate::field::{truncate_coefficient, LatticeField};
use crate::grid::LatticeGrid;
use crate::radii::{
    compute_r_diamond, compute_r_spade, compute_r_star, exact_diamond_moments, fit_hole_filling, fit_log2_tail_censored,
    hole_filling_profile, mean_value_ratio, r_club_at, reverse_holder_alpha, RadiiContext, RadiusField,
};
use crate::stats;

/// Histogram bins per octave of the radius histograms.
pub(crate) const BINS_PER_OCTAVE: f64 = 4.0;

/// Lower bin edges `2^(k / BINS_PER_OCTAVE)` from 1 up to `rho_max`.
pub(crate) fn radius_bins(rho_max: f64) -> Vec<f64> {
    let mut out = Vec::new();
    let mut k = 0.0;
    loop {
        let lo = 2f64.powf(k / BINS_PER_OCTAVE);
        if lo > rho_max * (1.0 + 1e-12) {
            return out;
        }
        out.push(lo);
        k += 1.0;
    }
}

/// Counts of the uncensored values per bin (values below the first edge go to bin 0).
fn histogram(field: &RadiusField) -> Vec<(f64, usize)> {
    let bins = radius_bins(field.rho_max);
    let mut counts = vec![0usize; bins.len()];
    for v in field.uncensored() {
        let k = bins.partition_point(|&lo| lo <= v * (1.0 + 1e-12)).max(1) - 1;
        counts[k] += 1;
    }
    bins.into_iter().zip(counts).collect()
}

fn coefficient_used(config: &ExperimentConfig, a: &LatticeField) -> Result<LatticeField> {
    match config.truncation() {
        Some(m) => truncate_coefficient(a, m),
        None => Ok(a.clone()),
    }
}

pub(crate) struct RadiiJob {
    base: Base,
    ctx: RadiiContext,
    moments: (f64, f64),
}

impl RadiiJob {
    pub fn new(config: &ExperimentConfig) -> Result<Self> {
        let base = Base::new(config)?;
        let ctx = RadiiContext::new(&base.grid)?;
        let moments = exact_diamond_moments(config.covariance.amplitude, config.dim);
        Ok(Self { base, ctx, moments })
    }
}

impl Job for RadiiJob {
    fn replica(&self, replica: u64) -> Result<ReplicaOutput> {
        let config = &self.base.config;
        let a = self.base.coefficient(replica)?;
        let diamond = compute_r_diamond(&self.ctx, &a, self.moments, config.radii.comparison)?;
        let set = compute_correctors(&a, &config.corrector_config(config.dim > 1))?;
        let star = compute_r_star(&self.ctx, &set, &diamond, config.radii.c_star)?;
        let used = coefficient_used(config, &a)?;
        let spade = compute_r_spade(&set, &used, 0, diamond.values[0], config.radii.c_spade)?;
        let mut out = ReplicaOutput::default();
        out.add_solves(&set);
        out.push("r_diamond_origin", 0.0, 0, diamond.values[0]);
        out.push("r_star_origin", 0.0, 0, star.values[0]);
        out.push("r_spade_origin", 0.0, 0, spade);
        for &r in &config.radii.club_radii {
            out.push("r_club", r, 0, r_club_at(&a, 0, r, config.radii.club_eps)?);
        }
        for (name, field) in [("r_diamond", &diamond), ("r_star", &star)] {
            out.push(&format!("{name}_censored"), field.rho_max, 0, field.saturated_count() as f64);
            for (lo, count) in histogram(field) {
                out.push(&format!("{name}_bin"), lo, 0, count as f64);
            }
        }
        if let Some(dir) = self.base.fields_dir(replica) {
            std::fs::create_dir_all(&dir)?;
            diamond.to_field().save(&dir.join("r_diamond.bin"))?;
            star.to_field().save(&dir.join("r_star.bin"))?;
        }
        out.extra = Extra::Radii {
            diamond: diamond.uncensored(),
            diamond_censored: diamond.saturated_count(),
            star: star.uncensored(),
            star_censored: star.saturated_count(),
        };
        Ok(out)
    }

    fn summarize(&self, table: &ObservableTable, extras: &[Extra]) -> (Vec<FitRow>, Vec<Check>) {
        if let Some(empty) = too_few(table) {
            return empty;
        }
        let mut rows = Vec::new();
        let mut checks = Vec::new();
        let mut pooled = [(Vec::new(), 0usize), (Vec::new(), 0usize)];
        for e in extras {
            if let Extra::Radii { diamond, diamond_censored, star, star_censored } = e {
                pooled[0].0.extend_from_slice(diamond);
                pooled[0].1 += diamond_censored;
                pooled[1].0.extend_from_slice(star);
                pooled[1].1 += star_censored;
            }
        }
        for (name, (samples, censored)) in ["r_diamond", "r_star"].into_iter().zip(&pooled) {
            let total = samples.len() + censored;
            rows.push(value_row(&format!("{name}_censored_fraction"), 0.0, *censored as f64 / total.max(1) as f64, total));
            match fit_log2_tail_censored(samples, *censored) {
                Ok(fit) => {
                    rows.push(value_row(&format!("{name}_tail_c"), 0.0, fit.c_hat, fit.fit_points));
                    rows.push(value_row(&format!("{name}_tail_r2"), 0.0, fit.r_squared, fit.fit_points));
                    rows.push(value_row(&format!("{name}_power_r2"), 0.0, fit.power_r_squared, fit.fit_points));
                    rows.push(value_row(&format!("{name}_power_slope"), 0.0, fit.power_slope, fit.fit_points));
                    checks.push(Check::new(
                        &format!("{name}_tail"),
                        fit.r_squared >= 0.85 && fit.r_squared > fit.power_r_squared && fit.c_hat > 0.0,
                        format!(
                            "c = {:.4}, r2 {:.4} vs power-law r2 {:.4} on {} points ({} censored)",
                            fit.c_hat, fit.r_squared, fit.power_r_squared, fit.fit_points, censored
                        ),
                    ));
                }
                Err(e) => checks.push(failed(&format!("{name}_tail"), e)),
            }
        }
        for name in ["r_diamond_origin", "r_star_origin", "r_spade_origin"] {
            let col = table.column(name, 0.0, 0);
            rows.push(estimate_row(name, 0.0, 0, &col));
            rows.push(value_row(&format!("{name}_q90"), 0.0, stats::quantile(&col, 0.9), col.len()));
        }
        for r in table.params("r_club") {
            rows.push(estimate_row("r_club", r, 0, &table.column("r_club", r, 0)));
        }
        (rows, checks)
    }
}

/// Origin first, then an evenly spaced sublattice offset by half a stride.
fn centers(grid: &LatticeGrid, per_axis: usize) -> Vec<usize> {
    let n = grid.n_per_side();
    let k = per_axis.min(n);
    let stride = n / k;
    let d = grid.dim();
    let mut out = vec![0];
    for idx in 0..k.pow(d as u32) {
        let mut c = [0usize; 3];
        let mut rest = idx;
        for axis in 0..d {
            c[axis] = (rest % k) * stride + stride / 2;
            rest /= k;
        }
        let site = grid.index(&c);
        if site != 0 {
            out.push(site);
        }
    }
    out
}

pub(crate) struct HoleFillingJob {
    base: Base,
    ctx: RadiiContext,
    moments: (f64, f64),
    centers: Vec<usize>,
}

impl HoleFillingJob {
    pub fn new(config: &ExperimentConfig) -> Result<Self> {
        let base = Base::new(config)?;
        let ctx = RadiiContext::new(&base.grid)?;
        let moments = exact_diamond_moments(config.covariance.amplitude, config.dim);
        let centers = centers(&base.grid, config.regularity.centers_per_axis);
        Ok(Self { base, ctx, moments, centers })
    }

    /// Profile of record `k` at center index `c` in direction `dir`.
    fn profile(&self, table: &ObservableTable, radii: &[f64], k: usize, c: usize, dir: usize) -> Vec<(f64, f64)> {
        let d = self.base.grid.dim();
        radii.iter().filter_map(|&r| table.get(k, "profile", r, c * d + dir).map(|v| (r, v))).collect()
    }
}

impl Job for HoleFillingJob {
    fn replica(&self, replica: u64) -> Result<ReplicaOutput> {
        let config = &self.base.config;
        let d = config.dim;
        let big_r = config.regularity.big_r;
        let a = self.base.coefficient(replica)?;
        let diamond = compute_r_diamond(&self.ctx, &a, self.moments, config.radii.comparison)?;
        let set = compute_correctors(&a, &config.corrector_config(false))?;
        let mut out = ReplicaOutput::default();
        out.add_solves(&set);
        out.push("dim", 0.0, 0, d as f64);
        for (c, &center) in self.centers.iter().enumerate() {
            let floor = diamond.values[center];
            out.push("floor", 0.0, c, floor);
            for dir in 0..d {
                for (r, ratio) in hole_filling_profile(&set, dir, center, floor, big_r) {
                    out.push("profile", r, c * d + dir, ratio);
                }
            }
        }
        Ok(out)
    }

    /// Fit on the first half of the replicas (all centers), validate at the origin of the rest.
    fn summarize(&self, table: &ObservableTable, _: &[Extra]) -> (Vec<FitRow>, Vec<Check>) {
        if let Some(empty) = too_few(table) {
            return empty;
        }
        let config = &self.base.config;
        let (d, big_r, slack) = (config.dim, config.regularity.big_r, config.regularity.slack);
        let radii = table.params("profile");
        let half = table.len() / 2;
        let mut calibration = Vec::new();
        for k in 0..half {
            for c in 0..self.centers.len() {
                for dir in 0..d {
                    calibration.push(self.profile(table, &radii, k, c, dir));
                }
            }
        }
        let mut rows = vec![value_row("reverse_holder_alpha", 0.0, reverse_holder_alpha(d), 0)];
        let mut checks = Vec::new();
        let fit = match fit_hole_filling(&calibration, big_r, d) {
            Ok(f) => f,
            Err(e) => return (rows, vec![failed("beta_range", e)]),
        };
        let held: Vec<bool> = (half..table.len())
            .map(|k| (0..d).all(|dir| fit.holds(&self.profile(table, &radii, k, 0, dir), big_r, d, slack)))
            .collect();
        let fraction = held.iter().filter(|&&h| h).count() as f64 / held.len() as f64;
        rows.push(value_row("beta_hat", 0.0, fit.beta_hat, fit.points));
        rows.push(value_row("c_hat", 0.0, fit.c_hat, fit.points));
        rows.push(value_row("slope", 0.0, fit.slope, fit.points));
        rows.push(value_row("r_squared", 0.0, fit.r_squared, fit.points));
        rows.push(value_row("holdout_fraction", slack, fraction, held.len()));
        rows.push(estimate_row("floor", 0.0, 0, &table.column("floor", 0.0, 0)));
        checks.push(Check::new(
            "beta_range",
            fit.beta_hat > 0.0 && fit.beta_hat <= d as f64,
            format!("beta = {:.4} from {} points (r2 {:.3})", fit.beta_hat, fit.points, fit.r_squared),
        ));
        checks.push(Check::new(
            "holdout_fraction",
            fraction >= 0.95,
            format!("bound with slack {slack} holds on {:.1}% of {} held-out replicas", 100.0 * fraction, held.len()),
        ));
        (rows, checks)
    }
}

pub(crate) struct MeanValueJob {
    base: Base,
    ctx: RadiiContext,
    moments: (f64, f64),
}

impl MeanValueJob {
    pub fn new(config: &ExperimentConfig) -> Result<Self> {
        let base = Base::new(config)?;
        let ctx = RadiiContext::new(&base.grid)?;
        let moments = exact_diamond_moments(config.covariance.amplitude, config.dim);
        Ok(Self { base, ctx, moments })
    }

    fn outer_radii(&self) -> [f64; 2] {
        let r = self.base.config.regularity.big_r;
        [r / 2.0, r]
    }
}

impl Job for MeanValueJob {
    fn replica(&self, replica: u64) -> Result<ReplicaOutput> {
        let config = &self.base.config;
        let a = self.base.coefficient(replica)?;
        let diamond = compute_r_diamond(&self.ctx, &a, self.moments, config.radii.comparison)?;
        let set = compute_correctors(&a, &config.corrector_config(config.dim > 1))?;
        let star = compute_r_star(&self.ctx, &set, &diamond, config.radii.c_star)?;
        let r0 = star.values[0];
        let mut out = ReplicaOutput::default();
        out.add_solves(&set);
        out.push("r_star_origin", 0.0, 0, r0);
        let worst = |r_min: f64, big_r: f64| {
            (0..config.dim).map(|e| mean_value_ratio(&set, e, 0, r_min, big_r)).fold(1.0, f64::max)
        };
        for big_r in self.outer_radii() {
            out.push("ratio_rstar", big_r, 0, worst(r0, big_r));
            out.push("ratio_all", big_r, 0, worst(self.base.grid.spacing(), big_r));
        }
        Ok(out)
    }

    fn summarize(&self, table: &ObservableTable, _: &[Extra]) -> (Vec<FitRow>, Vec<Check>) {
        if let Some(empty) = too_few(table) {
            return empty;
        }
        let mut rows = vec![estimate_row("r_star_origin", 0.0, 0, &table.column("r_star_origin", 0.0, 0))];
        let mut checks = Vec::new();
        let [half, full] = self.outer_radii();
        let q = |name: &str, r: f64| stats::quantile(&table.column(name, r, 0), 0.95);
        for r in [half, full] {
            let (above, all) = (q("ratio_rstar", r), q("ratio_all", r));
            rows.push(value_row("ratio_rstar_q95", r, above, table.len()));
            rows.push(value_row("ratio_all_q95", r, all, table.len()));
            checks.push(Check::new(
                &format!("threshold_tightens_R{r}"),
                above <= all,
                format!("95th percentile {above:.4} above r_star(0) vs {all:.4} over all radii"),
            ));
        }
        let change = (q("ratio_rstar", full) - q("ratio_rstar", half)).abs() / q("ratio_rstar", half);
        rows.push(value_row("doubling_change", full, change, table.len()));
        checks.push(Check::new(
            "doubling_stable",
            change < 0.25,
            format!("relative change {:.1}% from R = {half} to {full}", 100.0 * change),
        ));
        (rows, checks)
    }
}
