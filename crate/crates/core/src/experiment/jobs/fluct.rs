use super::{failed, pooled_ahom, too_few, value_row, Base, Extra, Job, ReplicaOutput};
use crate::correctors::{compute_correctors, identity, Matrix};
use crate::error::Result;
use crate::experiment::{Check, ExperimentConfig, FitRow, ObservableTable};
use crate::fluctuations::{
    averaged_gradient_moments, avg_gradient_observable, build_commutator, bump_norm_squared, commutator_series,
    estimate_q, fit_growth, fit_scaling, increment_second_moments, long_run_variance, window_cells, window_moments,
    AveragingContext, TestFunction,
};
use crate::stats::{self, Estimate};

/// `per_replica[r][k]` for the observable `name` at each parameter.
fn matrix(table: &ObservableTable, name: &str, params: &[f64], component: usize) -> Vec<Vec<f64>> {
    (0..table.len())
        .filter_map(|k| params.iter().map(|&p| table.get(k, name, p, component)).collect::<Option<Vec<_>>>())
        .collect()
}

pub(crate) struct CltJob {
    base: Base,
    ctx: AveragingContext,
}

impl CltJob {
    pub fn new(config: &ExperimentConfig) -> Result<Self> {
        let base = Base::new(config)?;
        let ctx = AveragingContext::new(&base.grid, &config.scaling.radii)?;
        Ok(Self { base, ctx })
    }
}

impl Job for CltJob {
    fn replica(&self, replica: u64) -> Result<ReplicaOutput> {
        let config = &self.base.config;
        let d = config.dim;
        let a = self.base.coefficient(replica)?;
        let set = compute_correctors(&a, &config.corrector_config(d > 1))?;
        let mut out = ReplicaOutput::default();
        out.add_solves(&set);
        out.push_ahom(&set);
        let radii = &config.scaling.radii;
        for (r, m) in radii.iter().zip(averaged_gradient_moments(&self.ctx, &set, false)) {
            out.push("grad_phi_moment", *r, 0, m);
        }
        if d > 1 {
            for (r, m) in radii.iter().zip(averaged_gradient_moments(&self.ctx, &set, true)) {
                out.push("grad_sigma_moment", *r, 0, m);
            }
        }
        for obs in avg_gradient_observable(&set, radii[0], replica)? {
            out.push(obs.kind.as_str(), obs.param, obs.component, obs.value);
        }
        Ok(out)
    }

    fn summarize(&self, table: &ObservableTable, _: &[Extra]) -> (Vec<FitRow>, Vec<Check>) {
        if let Some(empty) = too_few(table) {
            return empty;
        }
        let d = self.base.config.dim;
        let radii = &self.base.config.scaling.radii;
        let mut rows = Vec::new();
        let mut checks = Vec::new();
        pooled_ahom(table, d, &mut rows);
        for (c, name) in ["grad_phi_moment", "grad_sigma_moment"].into_iter().enumerate() {
            if c == 1 && d == 1 {
                continue;
            }
            match fit_scaling(radii, &matrix(table, name, radii, 0)) {
                Ok(fit) => {
                    for k in 0..radii.len() {
                        rows.push(FitRow::new(
                            &format!("{name}_log"),
                            radii[k],
                            0,
                            fit.ordinates[k],
                            fit.ordinate_stderr[k],
                            table.len(),
                        ));
                    }
                    rows.push(FitRow::new(&format!("{name}_slope"), 0.0, 0, fit.slope, fit.slope_stderr, radii.len()));
                    rows.push(value_row(&format!("{name}_r2"), 0.0, fit.r_squared, radii.len()));
                    if c == 0 {
                        checks.push(Check::new(
                            "clt_slope",
                            (fit.slope + d as f64).abs() <= 0.3,
                            format!("slope {:.4} +- {:.4}, expected {}", fit.slope, fit.slope_stderr, -(d as f64)),
                        ));
                    }
                }
                Err(e) => {
                    if c == 0 {
                        checks.push(failed("clt_slope", e));
                    }
                }
            }
        }
        let name = crate::fluctuations::ObservableKind::GradPhiAvg.as_str();
        let r0 = radii[0];
        let mut centered = true;
        for comp in 0..table.components(name) {
            let est = Estimate::from_samples(&table.column(name, r0, comp));
            centered &= est.within(0.0, 3.0);
            rows.push(FitRow::new(name, r0, comp, est.mean, est.stderr, est.n));
        }
        checks.push(Check::new(
            "origin_average_centered",
            centered,
            format!("ball averages of D phi at the origin, R = {r0}, vanish within 3 stderr"),
        ));
        (rows, checks)
    }
}

pub(crate) struct GrowthJob {
    base: Base,
}

impl GrowthJob {
    pub fn new(config: &ExperimentConfig) -> Result<Self> {
        Ok(Self { base: Base::new(config)? })
    }

    fn distances(&self) -> Vec<f64> {
        self.base.config.scaling.distances.iter().map(|&t| t as f64).collect()
    }
}

impl Job for GrowthJob {
    fn replica(&self, replica: u64) -> Result<ReplicaOutput> {
        let config = &self.base.config;
        let a = self.base.coefficient(replica)?;
        let set = compute_correctors(&a, &config.corrector_config(config.dim > 1))?;
        let mut out = ReplicaOutput::default();
        out.add_solves(&set);
        let moments = increment_second_moments(&set, &config.scaling.distances)?;
        for (t, m) in self.distances().into_iter().zip(moments) {
            out.push("increment_moment", t, 0, m);
        }
        Ok(out)
    }

    fn summarize(&self, table: &ObservableTable, _: &[Extra]) -> (Vec<FitRow>, Vec<Check>) {
        if let Some(empty) = too_few(table) {
            return empty;
        }
        let d = self.base.config.dim;
        let ts = self.distances();
        let (fit, est) = fit_growth(d, &ts, &matrix(table, "increment_moment", &ts, 0));
        let mut rows: Vec<FitRow> =
            ts.iter().zip(&est).map(|(&t, e)| FitRow::new("increment_moment", t, 0, e.mean, e.stderr, e.n)).collect();
        let check = if d >= 3 {
            let (first, last) = (est[0].mean, est[est.len() - 1].mean);
            Check::new(
                "growth_law",
                last <= 1.5 * first,
                format!("second moment {first:.4} at t = {} and {last:.4} at t = {}", ts[0], ts[ts.len() - 1]),
            )
        } else {
            rows.push(FitRow::new("growth_slope", 0.0, 0, fit.slope, fit.slope_stderr, fit.n));
            rows.push(value_row("growth_intercept", 0.0, fit.intercept, fit.n));
            rows.push(value_row("growth_r2", 0.0, fit.r_squared, fit.n));
            let need = if d == 1 { 0.9 } else { 0.8 };
            Check::new(
                "growth_law",
                fit.r_squared >= need && fit.slope > 0.0,
                format!("A + B mu^2 fit: B = {:.5}, r2 {:.4} (need {need})", fit.slope, fit.r_squared),
            )
        };
        (rows, vec![check])
    }
}

pub(crate) struct CommutatorJob {
    base: Base,
    basis: Vec<TestFunction>,
}

impl CommutatorJob {
    pub fn new(config: &ExperimentConfig) -> Result<Self> {
        let d = config.dim;
        let basis = (0..d).flat_map(|i| (0..d).map(move |j| TestFunction { i, j })).collect();
        Ok(Self { base: Base::new(config)?, basis })
    }

    fn windows(&self, eps: f64) -> usize {
        window_cells(&self.base.grid, self.base.config.covariance.corr_length, eps).expect("validated")
    }

    /// `samples[r][t][a]` at one `eps` for a given `abar`.
    fn samples(&self, table: &ObservableTable, eps: f64, ahom: &Matrix) -> Vec<Vec<Vec<f64>>> {
        let d = self.base.config.dim;
        let per = self.base.grid.n_per_side() / self.windows(eps);
        let translates = per.pow(d as u32);
        (0..table.len())
            .map(|k| {
                (0..translates)
                    .map(|t| {
                        let mut p = vec![vec![0.0; d]; d];
                        let mut v = vec![vec![0.0; d]; d];
                        for i in 0..d {
                            for j in 0..d {
                                let c = t * d * d + i * d + j;
                                p[i][j] = table.get(k, "window_p", eps, c).unwrap_or(f64::NAN);
                                v[i][j] = table.get(k, "window_v", eps, c).unwrap_or(f64::NAN);
                            }
                        }
                        let w = crate::fluctuations::WindowMoments { p, v };
                        self.basis.iter().map(|&f| w.pairing(ahom, f)).collect()
                    })
                    .collect()
            })
            .collect()
    }
}

/// Variance of all `(replica, translate)` values of basis element `a`.
fn pooled_variance(samples: &[Vec<Vec<f64>>], a: usize) -> (f64, usize) {
    let xs: Vec<f64> = samples.iter().flat_map(|r| r.iter().map(|t| t[a])).collect();
    (stats::variance(&xs), xs.len())
}

impl Job for CommutatorJob {
    fn replica(&self, replica: u64) -> Result<ReplicaOutput> {
        let config = &self.base.config;
        let d = config.dim;
        let a = self.base.coefficient(replica)?;
        let set = compute_correctors(&a, &config.corrector_config(false))?;
        let mut out = ReplicaOutput::default();
        out.add_solves(&set);
        out.push_ahom(&set);
        for &eps in &config.commutator.eps {
            for (t, w) in window_moments(&set, config.covariance.corr_length, eps)?.iter().enumerate() {
                for i in 0..d {
                    for j in 0..d {
                        out.push("window_p", eps, t * d * d + i * d + j, w.p[i][j]);
                        out.push("window_v", eps, t * d * d + i * d + j, w.v[i][j]);
                    }
                }
            }
        }
        if d == 1 {
            // Xi = q~ - abar v~, so its long-run variance is quadratic in abar.
            let q = commutator_series(&build_commutator(&set, &vec![vec![0.0]]));
            let q_minus_v = commutator_series(&build_commutator(&set, &identity(1)));
            let v: Vec<f64> = q.iter().zip(&q_minus_v).map(|(a, b)| a - b).collect();
            let sum: Vec<f64> = q.iter().zip(&v).map(|(a, b)| a + b).collect();
            let lags = (config.commutator.lrv_lags * config.covariance.corr_length / self.base.grid.spacing()).ceil();
            let lags = lags as usize;
            let (qq, vv) = (long_run_variance(&q, lags), long_run_variance(&v, lags));
            out.push("lrv_qq", 0.0, 0, qq);
            out.push("lrv_vv", 0.0, 0, vv);
            out.push("lrv_qv", 0.0, 0, (long_run_variance(&sum, lags) - qq - vv) / 2.0);
        }
        Ok(out)
    }

    fn summarize(&self, table: &ObservableTable, _: &[Extra]) -> (Vec<FitRow>, Vec<Check>) {
        if let Some(empty) = too_few(table) {
            return empty;
        }
        let config = &self.base.config;
        let d = config.dim;
        let mut rows = Vec::new();
        let mut checks = Vec::new();
        let ahom = pooled_ahom(table, d, &mut rows);
        let eps_list = &config.commutator.eps;
        let per_eps: Vec<Vec<Vec<Vec<f64>>>> = eps_list.iter().map(|&e| self.samples(table, e, &ahom)).collect();
        let mut variances = vec![vec![0.0; self.basis.len()]; eps_list.len()];
        for (k, &eps) in eps_list.iter().enumerate() {
            for a in 0..self.basis.len() {
                let (var, n) = pooled_variance(&per_eps[k], a);
                variances[k][a] = var;
                rows.push(FitRow::new("variance", eps, a, var, var * (2.0 / (n as f64 - 1.0)).sqrt(), n));
            }
        }
        for k in 1..eps_list.len() {
            let mut ok = true;
            let mut worst: f64 = 1.0;
            for a in 0..self.basis.len() {
                let ratio = variances[k][a] / variances[k - 1][a];
                ok &= (2.0 / 3.0..=1.5).contains(&ratio);
                if (ratio.ln()).abs() > worst.ln().abs() {
                    worst = ratio;
                }
                rows.push(value_row("variance_ratio", eps_list[k], ratio, table.len()).with_component(a));
            }
            checks.push(Check::new(
                &format!("variance_ratio_eps{}", eps_list[k]),
                ok,
                format!("Var ratio eps {} / {}: worst {worst:.4}", eps_list[k], eps_list[k - 1]),
            ));
        }
        let last = eps_list.len() - 1;
        let eps_min = eps_list[last];
        let origin: Vec<f64> = per_eps[last].iter().map(|r| r[0][0]).collect();
        let ks = stats::ks_standard_normal(&stats::standardize(&origin));
        rows.push(value_row("ks_p_value", eps_min, ks.p_value, ks.n));
        checks.push(Check::new(
            "ks_normality",
            ks.p_value >= 0.01,
            format!("KS statistic {:.4}, p = {:.4} on {} replicas", ks.statistic, ks.p_value, ks.n),
        ));
        let w = self.windows(eps_min);
        let chi2 = bump_norm_squared(d, w);
        if d >= 2 {
            match estimate_q(&self.basis, &per_eps[last], chi2) {
                Ok(q) => {
                    let m = self.basis.len();
                    for a in 0..m {
                        for b in 0..m {
                            rows.push(FitRow::new("q", eps_min, a * m + b, q.q[a][b], q.stderr[a][b], table.len()));
                        }
                    }
                    rows.push(value_row("q_min_rank_one_z", eps_min, q.min_rank_one_z, table.len()));
                    checks.push(Check::new(
                        "q_positive",
                        q.min_rank_one > 0.0 && q.min_rank_one_z > 2.0,
                        format!("smallest rank-one Q = {:.4e}, z = {:.1}", q.min_rank_one, q.min_rank_one_z),
                    ));
                }
                Err(e) => checks.push(failed("q_positive", e)),
            }
        } else {
            let abar = ahom[0][0];
            let cell = self.base.grid.spacing() / config.covariance.corr_length;
            let lrv: Vec<f64> = (0..table.len())
                .filter_map(|k| {
                    let qq = table.get(k, "lrv_qq", 0.0, 0)?;
                    let qv = table.get(k, "lrv_qv", 0.0, 0)?;
                    let vv = table.get(k, "lrv_vv", 0.0, 0)?;
                    Some(cell * (qq - 2.0 * abar * qv + abar * abar * vv))
                })
                .collect();
            let from_lrv = Estimate::from_samples(&lrv);
            let (var, n) = pooled_variance(&per_eps[last], 0);
            let direct = var / chi2;
            let direct_se = direct * (2.0 / (n as f64 - 1.0)).sqrt();
            rows.push(FitRow::new("q", eps_min, 0, direct, direct_se, n));
            rows.push(FitRow::new("q_long_run", 0.0, 0, from_lrv.mean, from_lrv.stderr, from_lrv.n));
            checks.push(Check::new(
                "q_positive",
                direct > 2.0 * direct_se,
                format!("Q = {direct:.4e} +- {direct_se:.1e}"),
            ));
            checks.push(Check::new(
                "q_long_run_agreement",
                (direct - from_lrv.mean).abs() <= 3.0 * direct_se.hypot(from_lrv.stderr),
                format!("window Q {direct:.4e} vs long-run variance {:.4e} +- {:.1e}", from_lrv.mean, from_lrv.stderr),
            ));
        }
        (rows, checks)
    }
}
