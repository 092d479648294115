//! Experiment orchestration: configuration, replica-parallel execution, persistence
//! and plot data.
//!
//! Replica `i` of master seed `s` always draws from the stream keyed by `(s, i)`,
//! so observables do not depend on thread count or completion order.

mod config;
mod jobs;
mod plots;
mod runner;
mod table;

use serde::{Deserialize, Serialize};

pub use config::{
    CommutatorParams, ExperimentConfig, ExperimentKind, MacroParams, Overrides, RadiiParams, RegularityParams,
    ScalingParams,
};
pub use plots::emit_plot_data;
pub use runner::{load_records, run_experiment, RunOutput};
pub use table::ObservableTable;

/// Crate version stamped on every record.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// One named scalar of one replica.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordValue {
    pub name: String,
    /// Radius, distance, `eps` or exponent, depending on `name`.
    pub param: f64,
    pub component: usize,
    pub value: f64,
}

impl RecordValue {
    pub fn new(name: &str, param: f64, component: usize, value: f64) -> Self {
        Self { name: name.into(), param, component, value }
    }
}

/// Condensed linear-solve report.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolveSummary {
    pub iterations: usize,
    pub relative_residual: f64,
    pub converged: bool,
}

impl From<&crate::pde::SolveReport> for SolveSummary {
    fn from(r: &crate::pde::SolveReport) -> Self {
        Self { iterations: r.iterations, relative_residual: r.relative_residual, converged: r.converged }
    }
}

/// Everything one successful replica produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub kind: ExperimentKind,
    pub config_hash: String,
    pub seed: u64,
    pub replica: u64,
    pub observables: Vec<RecordValue>,
    pub solves: Vec<SolveSummary>,
    pub wall_seconds: f64,
    pub version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicaFailure {
    pub replica: u64,
    pub error: String,
}

/// A pooled estimate or fitted quantity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitRow {
    pub name: String,
    pub param: f64,
    pub component: usize,
    pub value: f64,
    /// NaN when not applicable.
    pub stderr: f64,
    pub n: usize,
}

impl FitRow {
    pub fn new(name: &str, param: f64, component: usize, value: f64, stderr: f64, n: usize) -> Self {
        Self { name: name.into(), param, component, value, stderr, n }
    }

    pub fn with_component(mut self, component: usize) -> Self {
        self.component = component;
        self
    }
}

/// Outcome of a built-in check on the pooled results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    pub fn new(name: &str, passed: bool, detail: String) -> Self {
        Self { name: name.into(), passed, detail }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub kind: ExperimentKind,
    pub config_hash: String,
    pub requested: usize,
    pub succeeded: usize,
    pub failures: Vec<ReplicaFailure>,
    pub fits: Vec<FitRow>,
    pub checks: Vec<Check>,
}

impl Summary {
    /// First fit row with this name, parameter and component.
    pub fn fit(&self, name: &str, param: f64, component: usize) -> Option<&FitRow> {
        self.fits.iter().find(|f| f.name == name && f.param == param && f.component == component)
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }
}
