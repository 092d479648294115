//! Per-kind replica work and pooled summaries.

mod fields;
mod fluct;
mod multiscale;
mod regularity;

use std::path::PathBuf;

use super::{Check, ExperimentConfig, ExperimentKind, FitRow, ObservableTable, RecordValue, SolveSummary};
use crate::correctors::{CorrectorSet, Matrix};
use crate::error::Result;
use crate::field::{exp_field, GaussianSampler, LatticeField};
use crate::grid::LatticeGrid;
use crate::stats::Estimate;

/// Bulk per-replica data that is used by the summary but not persisted as observables.
#[derive(Debug, Clone, Default)]
pub(crate) enum Extra {
    #[default]
    None,
    Radii {
        diamond: Vec<f64>,
        diamond_censored: usize,
        star: Vec<f64>,
        star_censored: usize,
    },
}

#[derive(Debug, Default)]
pub(crate) struct ReplicaOutput {
    pub observables: Vec<RecordValue>,
    pub solves: Vec<SolveSummary>,
    pub extra: Extra,
}

impl ReplicaOutput {
    fn push(&mut self, name: &str, param: f64, component: usize, value: f64) {
        self.observables.push(RecordValue::new(name, param, component, value));
    }

    fn add_solves(&mut self, set: &CorrectorSet) {
        self.solves.extend(set.reports.iter().map(SolveSummary::from));
    }

    /// `ahom` entries `i * d + j` of the sample coefficient.
    fn push_ahom(&mut self, set: &CorrectorSet) {
        let d = set.grid.dim();
        for i in 0..d {
            for j in 0..d {
                self.push("ahom", 0.0, i * d + j, set.ahom_sample[i][j]);
            }
        }
    }
}

pub(crate) trait Job: Sync {
    fn replica(&self, replica: u64) -> Result<ReplicaOutput>;
    /// Pooled fits and checks; `extras` is aligned with the table's records.
    fn summarize(&self, table: &ObservableTable, extras: &[Extra]) -> (Vec<FitRow>, Vec<Check>);
}

pub(crate) fn prepare(config: &ExperimentConfig) -> Result<Box<dyn Job>> {
    use ExperimentKind::*;
    Ok(match config.kind {
        SampleField => Box::new(fields::SampleFieldJob::new(config)?),
        Correctors => Box::new(fields::CorrectorsJob::new(config)?),
        Radii => Box::new(regularity::RadiiJob::new(config)?),
        HoleFilling => Box::new(regularity::HoleFillingJob::new(config)?),
        MeanValue => Box::new(regularity::MeanValueJob::new(config)?),
        CltScaling => Box::new(fluct::CltJob::new(config)?),
        CorrectorGrowth => Box::new(fluct::GrowthJob::new(config)?),
        Commutator => Box::new(fluct::CommutatorJob::new(config)?),
        Pathwise => Box::new(multiscale::PathwiseJob::new(config)?),
        TwoScale => Box::new(multiscale::TwoScaleJob::new(config)?),
    })
}

/// Single-torus sampling shared by most kinds.
struct Base {
    config: ExperimentConfig,
    hash: String,
    grid: LatticeGrid,
    sampler: GaussianSampler,
}

impl Base {
    fn new(config: &ExperimentConfig) -> Result<Self> {
        let grid = config.grid()?;
        let sampler = GaussianSampler::new(&grid, &config.covariance, config.psd_tol)?;
        Ok(Self { config: config.clone(), hash: config.hash(), grid, sampler })
    }

    fn gaussian(&self, replica: u64) -> LatticeField {
        self.sampler.sample_replica(self.config.seed, replica)
    }

    /// Untruncated coefficient of a replica.
    fn coefficient(&self, replica: u64) -> Result<LatticeField> {
        exp_field(&self.gaussian(replica))
    }

    fn fields_dir(&self, replica: u64) -> Option<PathBuf> {
        fields_dir(&self.config, replica)
    }
}

fn fields_dir(config: &ExperimentConfig, replica: u64) -> Option<PathBuf> {
    match (&config.out, config.save_fields) {
        (Some(out), true) => Some(out.join("fields").join(format!("replica_{replica:05}"))),
        _ => None,
    }
}

fn estimate_row(name: &str, param: f64, component: usize, xs: &[f64]) -> FitRow {
    let e = Estimate::from_samples(xs);
    FitRow::new(name, param, component, e.mean, e.stderr, e.n)
}

fn value_row(name: &str, param: f64, value: f64, n: usize) -> FitRow {
    FitRow::new(name, param, 0, value, f64::NAN, n)
}

/// Pooled `ahom` (storage convention) and one fit row per entry.
fn pooled_ahom(table: &ObservableTable, d: usize, rows: &mut Vec<FitRow>) -> Matrix {
    let mut m = vec![vec![0.0; d]; d];
    for i in 0..d {
        for j in 0..d {
            let col = table.column("ahom", 0.0, i * d + j);
            let row = estimate_row("ahom", 0.0, i * d + j, &col);
            m[i][j] = row.value;
            rows.push(row);
        }
    }
    m
}

/// Failing check carrying an error message.
fn failed(name: &str, err: impl std::fmt::Display) -> Check {
    Check::new(name, false, err.to_string())
}

/// Not enough replicas to pool anything.
fn too_few(table: &ObservableTable) -> Option<(Vec<FitRow>, Vec<Check>)> {
    (table.len() < 2).then(|| (Vec::new(), Vec::new()))
}
