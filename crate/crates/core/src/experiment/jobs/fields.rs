use super::{estimate_row, failed, pooled_ahom, too_few, value_row, Base, Extra, Job, ReplicaOutput};
use crate::correctors::{compute_correctors, reconstruction_residual, skew_pairs};
use crate::error::Result;
use crate::experiment::{Check, ExperimentConfig, FitRow, ObservableTable};
use crate::field::{clamped_fraction, exp_field, truncate_coefficient};
use crate::pde::{edge_coefficients_with, EdgeRule};
use crate::stats::{self, Estimate};

const MOMENT_ORDERS: [f64; 3] = [1.0, 2.0, 3.0];

pub(crate) struct SampleFieldJob {
    base: Base,
}

impl SampleFieldJob {
    pub fn new(config: &ExperimentConfig) -> Result<Self> {
        Ok(Self { base: Base::new(config)? })
    }
}

impl Job for SampleFieldJob {
    fn replica(&self, replica: u64) -> Result<ReplicaOutput> {
        let g = self.base.gaussian(replica);
        let a = exp_field(&g)?;
        let mut out = ReplicaOutput::default();
        for p in MOMENT_ORDERS {
            out.push("a_moment", p, 0, stats::mean(&a.values.iter().map(|v| v.powf(p)).collect::<Vec<_>>()));
            out.push("a_inverse_moment", p, 0, stats::mean(&a.values.iter().map(|v| v.powf(-p)).collect::<Vec<_>>()));
        }
        out.push("g_mean", 0.0, 0, stats::mean(&g.values));
        out.push("g_variance", 0.0, 0, stats::variance(&g.values));
        if let Some(m) = self.base.config.truncation() {
            out.push("clamped_fraction", m, 0, clamped_fraction(&a, m));
        }
        if let Some(dir) = self.base.fields_dir(replica) {
            std::fs::create_dir_all(&dir)?;
            g.save(&dir.join("gaussian.bin"))?;
            a.save(&dir.join("coefficient.bin"))?;
        }
        Ok(out)
    }

    fn summarize(&self, table: &ObservableTable, _: &[Extra]) -> (Vec<FitRow>, Vec<Check>) {
        if let Some(empty) = too_few(table) {
            return empty;
        }
        let amp = self.base.config.covariance.amplitude;
        let mut rows = Vec::new();
        let mut checks = Vec::new();
        for p in MOMENT_ORDERS {
            let col = table.column("a_moment", p, 0);
            let est = Estimate::from_samples(&col);
            let exact = (amp * p * p / 2.0).exp();
            rows.push(estimate_row("a_moment", p, 0, &col));
            rows.push(value_row("a_moment_exact", p, exact, col.len()));
            rows.push(estimate_row("a_inverse_moment", p, 0, &table.column("a_inverse_moment", p, 0)));
            checks.push(Check::new(
                &format!("moment_p{p}"),
                est.within(exact, 3.0),
                format!("E[a^{p}] = {:.5} +- {:.5}, exact {exact:.5}", est.mean, est.stderr),
            ));
        }
        rows.push(estimate_row("g_mean", 0.0, 0, &table.column("g_mean", 0.0, 0)));
        rows.push(estimate_row("g_variance", 0.0, 0, &table.column("g_variance", 0.0, 0)));
        if let Some(m) = self.base.config.truncation() {
            rows.push(estimate_row("clamped_fraction", m, 0, &table.column("clamped_fraction", m, 0)));
        }
        (rows, checks)
    }
}

pub(crate) struct CorrectorsJob {
    base: Base,
}

impl CorrectorsJob {
    pub fn new(config: &ExperimentConfig) -> Result<Self> {
        Ok(Self { base: Base::new(config)? })
    }

    /// Exact `abar` of the 1-d lattice model: `1 / E[1 / aE]`.
    fn one_dimensional_target(&self) -> f64 {
        let spec = &self.base.config.covariance;
        match self.base.config.edge_rule {
            EdgeRule::Harmonic => (-spec.amplitude / 2.0).exp(),
            EdgeRule::Geometric => {
                let neighbor = spec.eval_radial(self.base.grid.spacing());
                (-(spec.amplitude + neighbor) / 4.0).exp()
            }
        }
    }
}

impl Job for CorrectorsJob {
    fn replica(&self, replica: u64) -> Result<ReplicaOutput> {
        let config = &self.base.config;
        let grid = self.base.grid;
        let d = grid.dim();
        let a = self.base.coefficient(replica)?;
        let set = compute_correctors(&a, &config.corrector_config(d > 1))?;
        let mut out = ReplicaOutput::default();
        out.add_solves(&set);
        out.push_ahom(&set);
        for axis in 0..d {
            let edge: Vec<f64> = set.edges.values.iter().skip(axis).step_by(d).copied().collect();
            out.push("arithmetic_mean", 0.0, axis, stats::mean(&edge));
            out.push("harmonic_mean", 0.0, axis, 1.0 / stats::mean(&edge.iter().map(|v| 1.0 / v).collect::<Vec<_>>()));
        }
        let nb = grid.neighbors();
        for i in 0..d {
            out.push("flux_divergence", 0.0, i, crate::correctors::flux_divergence(&set.flux[i], &nb));
        }
        if !set.sigma.is_empty() {
            let pairs = skew_pairs(d).len();
            let mut skew: f64 = 0.0;
            for i in 0..d {
                let block = &set.sigma[i * pairs..(i + 1) * pairs];
                out.push("sigma_reconstruction", 0.0, i, reconstruction_residual(&set.flux[i], &set.ahom_sample[i], &nb, block));
                for j in 0..d {
                    for k in 0..d {
                        for site in 0..grid.sites() {
                            skew = skew.max((set.sigma_at(i, j, k, site) + set.sigma_at(i, k, j, site)).abs());
                        }
                    }
                }
            }
            out.push("sigma_skew", 0.0, 0, skew);
        }
        if let Some(m) = config.truncation() {
            out.push("clamped_fraction", m, 0, clamped_fraction(&a, m));
        }
        if let Some(dir) = self.base.fields_dir(replica) {
            set.save(&dir, &self.base.hash, Some(config.seed))?;
            let used = match config.truncation() {
                Some(m) => truncate_coefficient(&a, m)?,
                None => a,
            };
            used.save(&dir.join("coefficient.bin"))?;
            let edges = edge_coefficients_with(&used, config.edge_rule)?;
            crate::field::LatticeField::new(grid, d, edges.values)?.save(&dir.join("edges.bin"))?;
        }
        Ok(out)
    }

    fn summarize(&self, table: &ObservableTable, _: &[Extra]) -> (Vec<FitRow>, Vec<Check>) {
        if let Some(empty) = too_few(table) {
            return empty;
        }
        let d = self.base.grid.dim();
        let mut rows = Vec::new();
        let mut checks = Vec::new();
        let ahom = pooled_ahom(table, d, &mut rows);
        for axis in 0..d {
            let ar = Estimate::from_samples(&table.column("arithmetic_mean", 0.0, axis));
            let hr = Estimate::from_samples(&table.column("harmonic_mean", 0.0, axis));
            let diag = Estimate::from_samples(&table.column("ahom", 0.0, axis * d + axis));
            rows.push(FitRow::new("arithmetic_mean", 0.0, axis, ar.mean, ar.stderr, ar.n));
            rows.push(FitRow::new("harmonic_mean", 0.0, axis, hr.mean, hr.stderr, hr.n));
            let lo = hr.mean - 3.0 * hr.stderr.hypot(diag.stderr);
            let hi = ar.mean + 3.0 * ar.stderr.hypot(diag.stderr);
            checks.push(Check::new(
                &format!("voigt_reuss_axis{axis}"),
                lo <= diag.mean && diag.mean <= hi,
                format!("harmonic {:.5} <= ahom {:.5} <= arithmetic {:.5}", hr.mean, ahom[axis][axis], ar.mean),
            ));
        }
        if d == 1 {
            let est = Estimate::from_samples(&table.column("ahom", 0.0, 0));
            let target = self.one_dimensional_target();
            rows.push(value_row("ahom_oracle", 0.0, target, est.n));
            checks.push(Check::new(
                "one_dimensional_oracle",
                est.within(target, 3.0),
                format!("ahom {:.5} +- {:.5}, oracle {target:.5}", est.mean, est.stderr),
            ));
        } else {
            let recon: Vec<f64> = (0..d).flat_map(|i| table.column("sigma_reconstruction", 0.0, i)).collect();
            let skew = table.column("sigma_skew", 0.0, 0);
            if recon.is_empty() {
                checks.push(failed("sigma_gauge", "no flux correctors were computed"));
            } else {
                let worst = recon.iter().fold(0.0f64, |m, v| m.max(*v));
                let skew_max = skew.iter().fold(0.0f64, |m, v| m.max(*v));
                rows.push(value_row("sigma_reconstruction_max", 0.0, worst, table.len()));
                checks.push(Check::new(
                    "sigma_gauge",
                    worst <= 1e-6 && skew_max == 0.0,
                    format!("max relative reconstruction {worst:.3e}, max skew defect {skew_max:.1e}"),
                ));
            }
        }
        if let Some(m) = self.base.config.truncation() {
            rows.push(estimate_row("clamped_fraction", m, 0, &table.column("clamped_fraction", m, 0)));
        }
        (rows, checks)
    }
}
