use super::{too_few, value_row, Extra, Job, ReplicaOutput};
use crate::correctors::{compute_correctors, CorrectorSet};
use crate::error::Result;
use crate::experiment::{Check, ExperimentConfig, FitRow, ObservableTable};
use crate::field::{exp_field, GaussianSampler};
use crate::fluctuations::{pathwise_integrals, summarize_pathwise, PathwiseIntegrals};
use crate::rng::{stream_rng, streams};
use crate::stats;
use crate::twoscale::{error_envelope, expansion_integrals, fit_expansion, ExpansionIntegrals, MacroProblem};

struct Level {
    eps: f64,
    sampler: GaussianSampler,
    problem: MacroProblem,
    envelope: f64,
}

/// One grid per `eps` with the coefficient correlation length `eps R`.
struct Levels {
    config: ExperimentConfig,
    levels: Vec<Level>,
}

impl Levels {
    fn new(config: &ExperimentConfig) -> Result<Self> {
        let case = config.two_scale_case();
        case.validate()?;
        let mut levels = Vec::new();
        for &eps in &case.eps_levels {
            let grid = case.grid(eps)?;
            let mut spec = config.covariance;
            spec.corr_length = case.corr_length(eps);
            let sampler = GaussianSampler::new(&grid, &spec, config.psd_tol)?;
            let problem = MacroProblem::new(&grid, case.support_radius);
            let envelope = error_envelope(&problem, eps, case.support_radius)?;
            levels.push(Level { eps, sampler, problem, envelope });
        }
        Ok(Self { config: config.clone(), levels })
    }

    /// Correctors of replica `replica` at level `l`, drawn from the level's own stream.
    fn correctors(&self, l: usize, replica: u64) -> Result<CorrectorSet> {
        let mut rng = stream_rng(self.config.seed, replica, streams::LEVEL_BASE + l as u16);
        let a = exp_field(&self.levels[l].sampler.sample(&mut rng))?;
        compute_correctors(&a, &self.config.corrector_config(false))
    }

    fn eps(&self) -> Vec<f64> {
        self.levels.iter().map(|l| l.eps).collect()
    }
}

const PATHWISE_FIELDS: [&str; 7] = ["xi_flux", "xi_grad", "comm_flux", "comm_grad", "lit_flux", "lit_grad", "ahom_trace"];

pub(crate) struct PathwiseJob {
    levels: Levels,
}

impl PathwiseJob {
    pub fn new(config: &ExperimentConfig) -> Result<Self> {
        Ok(Self { levels: Levels::new(config)? })
    }
}

impl Job for PathwiseJob {
    fn replica(&self, replica: u64) -> Result<ReplicaOutput> {
        let mut out = ReplicaOutput::default();
        out.push("dim", 0.0, 0, self.levels.config.dim as f64);
        for (l, level) in self.levels.levels.iter().enumerate() {
            let set = self.levels.correctors(l, replica)?;
            out.add_solves(&set);
            let p = pathwise_integrals(&level.problem, &level.problem.f, &set, self.levels.config.solver_tol)?;
            let values = [p.xi_flux, p.xi_grad, p.comm_flux, p.comm_grad, p.lit_flux, p.lit_grad, p.ahom_trace];
            for (name, v) in PATHWISE_FIELDS.iter().zip(values) {
                out.push(name, level.eps, 0, v);
            }
        }
        Ok(out)
    }

    fn summarize(&self, table: &ObservableTable, _: &[Extra]) -> (Vec<FitRow>, Vec<Check>) {
        if let Some(empty) = too_few(table) {
            return empty;
        }
        let d = self.levels.config.dim;
        let mut rows = Vec::new();
        let mut checks = Vec::new();
        let mut summaries = Vec::new();
        for eps in self.levels.eps() {
            let reps: Vec<PathwiseIntegrals> = (0..table.len())
                .filter_map(|k| {
                    let v: Vec<f64> =
                        PATHWISE_FIELDS.iter().map(|n| table.get(k, n, eps, 0)).collect::<Option<Vec<_>>>()?;
                    Some(PathwiseIntegrals {
                        xi_flux: v[0],
                        xi_grad: v[1],
                        comm_flux: v[2],
                        comm_grad: v[3],
                        lit_flux: v[4],
                        lit_grad: v[5],
                        ahom_trace: v[6],
                    })
                })
                .collect();
            match summarize_pathwise(d, eps, &reps) {
                Ok(s) => {
                    rows.push(value_row("residual_l2", eps, s.residual_l2, reps.len()));
                    rows.push(value_row("residual_literal_l2", eps, s.residual_literal_l2, reps.len()));
                    rows.push(value_row("fluctuation_variance", eps, s.variance, reps.len()));
                    rows.push(value_row("mean_inflation", eps, s.mean_inflation, reps.len()));
                    rows.push(value_row("envelope", eps, s.envelope, reps.len()));
                    rows.push(value_row("abar", eps, s.abar, reps.len()));
                    summaries.push(s);
                }
                Err(e) => return (rows, vec![super::failed("residual_decreases", e)]),
            }
        }
        let lx: Vec<f64> = summaries.iter().map(|s| s.eps.ln()).collect();
        for (name, pick) in [
            ("residual_slope", (|s: &crate::fluctuations::PathwiseLevel| s.residual_l2) as fn(&_) -> f64),
            ("residual_literal_slope", |s| s.residual_literal_l2),
        ] {
            let ly: Vec<f64> = summaries.iter().map(|s| pick(s).ln()).collect();
            let fit = stats::linear_fit(&lx, &ly);
            rows.push(FitRow::new(name, 0.0, 0, fit.slope, fit.slope_stderr, fit.n));
        }
        let decreasing = summaries.windows(2).all(|w| w[1].residual_l2 < w[0].residual_l2);
        checks.push(Check::new(
            "residual_decreases",
            decreasing,
            format!("residual L2 by eps: {:?}", summaries.iter().map(|s| s.residual_l2).collect::<Vec<_>>()),
        ));
        let last = summaries.last().unwrap();
        checks.push(Check::new(
            "residual_below_fluctuation",
            last.residual_l2 < last.variance.sqrt(),
            format!("residual {:.4e} vs fluctuation sd {:.4e} at eps {}", last.residual_l2, last.variance.sqrt(), last.eps),
        ));
        (rows, checks)
    }
}

const EXPANSION_FIELDS: [&str; 5] = ["a_int", "b_int", "c_int", "energy_gap", "ahom_trace"];

pub(crate) struct TwoScaleJob {
    levels: Levels,
}

impl TwoScaleJob {
    pub fn new(config: &ExperimentConfig) -> Result<Self> {
        Ok(Self { levels: Levels::new(config)? })
    }
}

impl Job for TwoScaleJob {
    fn replica(&self, replica: u64) -> Result<ReplicaOutput> {
        let radius = self.levels.config.macro_scale.support_radius;
        let mut out = ReplicaOutput::default();
        out.push("dim", 0.0, 0, self.levels.config.dim as f64);
        for (l, level) in self.levels.levels.iter().enumerate() {
            let set = self.levels.correctors(l, replica)?;
            out.add_solves(&set);
            let e = expansion_integrals(&level.problem, &set, level.eps * radius, self.levels.config.solver_tol)?;
            for (name, v) in EXPANSION_FIELDS.iter().zip([e.a_int, e.b_int, e.c_int, e.energy_gap, e.ahom_trace]) {
                out.push(name, level.eps, 0, v);
            }
        }
        Ok(out)
    }

    fn summarize(&self, table: &ObservableTable, _: &[Extra]) -> (Vec<FitRow>, Vec<Check>) {
        if let Some(empty) = too_few(table) {
            return empty;
        }
        let d = self.levels.config.dim;
        let eps = self.levels.eps();
        let envelope: Vec<f64> = self.levels.levels.iter().map(|l| l.envelope).collect();
        let levels: Vec<Vec<ExpansionIntegrals>> = eps
            .iter()
            .map(|&e| {
                (0..table.len())
                    .filter_map(|k| {
                        let v: Vec<f64> =
                            EXPANSION_FIELDS.iter().map(|n| table.get(k, n, e, 0)).collect::<Option<Vec<_>>>()?;
                        Some(ExpansionIntegrals {
                            a_int: v[0],
                            b_int: v[1],
                            c_int: v[2],
                            energy_gap: v[3],
                            ahom_trace: v[4],
                        })
                    })
                    .collect()
            })
            .collect();
        let gap = levels.iter().flatten().map(|i| i.energy_gap).fold(0.0f64, f64::max);
        let mut checks = vec![Check::new("energy_identity", gap <= 1e-6, format!("max relative energy gap {gap:.2e}"))];
        let fit = match fit_expansion(d, &eps, &levels, &envelope) {
            Ok(f) => f,
            Err(e) => return (Vec::new(), vec![super::failed("expansion_rate", e)]),
        };
        let mut rows = Vec::new();
        for k in 0..eps.len() {
            rows.push(FitRow::new("error", eps[k], 0, fit.error[k], fit.error_stderr[k], levels[k].len()));
            rows.push(value_row("envelope", eps[k], fit.envelope[k], levels[k].len()));
            rows.push(value_row("abar", eps[k], fit.abar[k], levels[k].len()));
        }
        rows.push(FitRow::new("slope", 0.0, 0, fit.slope, fit.slope_stderr, eps.len()));
        rows.push(value_row("r2_power", 0.0, fit.r_squared_power, eps.len()));
        rows.push(value_row("slope_log_corrected", 0.0, fit.slope_log_corrected, eps.len()));
        rows.push(value_row("r2_log_corrected", 0.0, fit.r_squared_log_corrected, eps.len()));
        checks.push(match d {
            3 => Check::new(
                "expansion_rate",
                (fit.slope - 1.0).abs() <= 0.25,
                format!("slope {:.4} +- {:.4}, expected 1 +- 0.25", fit.slope, fit.slope_stderr),
            ),
            2 => Check::new(
                "expansion_rate",
                fit.r_squared_log_corrected > fit.r_squared_power,
                format!(
                    "log-corrected r2 {:.5} vs power r2 {:.5} (slopes {:.3}, {:.3})",
                    fit.r_squared_log_corrected, fit.r_squared_power, fit.slope_log_corrected, fit.slope
                ),
            ),
            _ => Check::new(
                "expansion_rate",
                (fit.slope_log_corrected - 1.0).abs() <= 0.25,
                format!("slope against eps mu(1/eps) {:.4}", fit.slope_log_corrected),
            ),
        });
        (rows, checks)
    }
}
