//! Experiment configuration: TOML with per-kind defaults and flag overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::balls::max_radius;
use crate::correctors::CorrectorConfig;
use crate::error::{Error, Result};
use crate::field::{CovarianceFamily, CovarianceSpec, DEFAULT_PSD_TOL};
use crate::fluctuations::window_cells;
use crate::grid::LatticeGrid;
use crate::pde::{EdgeRule, SolverOptions, DEFAULT_TOL};
use crate::radii::{DEFAULT_COMPARISON, DEFAULT_C_SPADE, DEFAULT_C_STAR};
use crate::twoscale::TwoScaleCase;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    SampleField,
    Correctors,
    Radii,
    CltScaling,
    CorrectorGrowth,
    Commutator,
    Pathwise,
    TwoScale,
    HoleFilling,
    MeanValue,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 10] = [
        Self::SampleField,
        Self::Correctors,
        Self::Radii,
        Self::CltScaling,
        Self::CorrectorGrowth,
        Self::Commutator,
        Self::Pathwise,
        Self::TwoScale,
        Self::HoleFilling,
        Self::MeanValue,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::SampleField => "sample_field",
            Self::Correctors => "correctors",
            Self::Radii => "radii",
            Self::CltScaling => "clt_scaling",
            Self::CorrectorGrowth => "corrector_growth",
            Self::Commutator => "commutator",
            Self::Pathwise => "pathwise",
            Self::TwoScale => "two_scale",
            Self::HoleFilling => "hole_filling",
            Self::MeanValue => "mean_value",
        }
    }

    /// Kinds that sample on a sequence of grids rather than one torus.
    pub fn is_multiscale(&self) -> bool {
        matches!(self, Self::Pathwise | Self::TwoScale)
    }
}

impl std::fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ExperimentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.replace('-', "_");
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == norm)
            .ok_or_else(|| Error::Config(format!("unknown experiment kind '{s}'")))
    }
}

/// Constants of the random radii.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RadiiParams {
    /// Two-sided factor for the ellipticity radius.
    pub comparison: f64,
    pub c_star: f64,
    pub c_spade: f64,
    /// Exponent `eps` of the ellipticity-ratio radius.
    pub club_eps: f64,
    pub club_radii: Vec<f64>,
}

/// Radii for the CLT experiment and distances for corrector growth, in lattice units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScalingParams {
    pub radii: Vec<f64>,
    pub distances: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CommutatorParams {
    /// Dyadic and decreasing; `eps = corr_length / window`.
    pub eps: Vec<f64>,
    /// Lags (in correlation lengths) summed by the 1-d long-run variance.
    pub lrv_lags: f64,
}

/// Grids for the pathwise and two-scale experiments; the covariance
/// `corr_length` and `n` are derived per level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MacroParams {
    pub eps: Vec<f64>,
    pub cells_per_corr: usize,
    pub support_radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegularityParams {
    /// Outer radius `R` in lattice units.
    pub big_r: f64,
    pub slack: f64,
    /// Calibration centers per axis, evenly spaced, in addition to the origin.
    pub centers_per_axis: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub dim: usize,
    pub n: usize,
    /// Torus side; unit spacing when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub length: Option<f64>,
    pub covariance: CovarianceSpec,
    pub truncate: bool,
    pub trunc_m: f64,
    pub edge_rule: EdgeRule,
    pub solver_tol: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_iter: Option<usize>,
    pub psd_tol: f64,
    pub replicas: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
    /// Write per-replica fields next to the records.
    pub save_fields: bool,
    pub radii: RadiiParams,
    pub scaling: ScalingParams,
    pub commutator: CommutatorParams,
    #[serde(rename = "macro")]
    pub macro_scale: MacroParams,
    pub regularity: RegularityParams,
}

/// Values given on the command line; each replaces its config key.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub dim: Option<usize>,
    pub n: Option<usize>,
    pub length: Option<f64>,
    pub cov_family: Option<CovarianceFamily>,
    pub amplitude: Option<f64>,
    pub corr_length: Option<f64>,
    /// `Some(None)` disables truncation.
    pub trunc_m: Option<Option<f64>>,
    pub replicas: Option<usize>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub threads: Option<usize>,
}

fn gaussian(amplitude: f64, corr_length: f64) -> CovarianceSpec {
    CovarianceSpec { family: CovarianceFamily::GaussianKernel, amplitude, corr_length, holder_gamma: 0.45 }
}

impl ExperimentConfig {
    /// Calibrated defaults for one kind and dimension.
    pub fn preset(kind: ExperimentKind, dim: usize) -> Self {
        use ExperimentKind::*;
        let (n, corr) = match dim {
            1 => (4096, 4.0),
            3 => (32, 2.0),
            _ => (128, 2.0),
        };
        let mut c = Self {
            kind,
            dim,
            n,
            length: None,
            covariance: gaussian(1.0, corr),
            truncate: true,
            trunc_m: std::f64::consts::E.powi(4),
            edge_rule: EdgeRule::Geometric,
            solver_tol: DEFAULT_TOL,
            max_iter: None,
            psd_tol: DEFAULT_PSD_TOL,
            replicas: 30,
            seed: 20240601,
            out: None,
            threads: None,
            save_fields: false,
            radii: RadiiParams {
                comparison: DEFAULT_COMPARISON,
                c_star: DEFAULT_C_STAR,
                c_spade: DEFAULT_C_SPADE,
                club_eps: 0.5,
                club_radii: vec![8.0, 16.0, 32.0],
            },
            scaling: ScalingParams { radii: vec![8.0, 16.0, 32.0, 64.0], distances: vec![4, 8, 16, 32, 64] },
            commutator: CommutatorParams { eps: vec![0.125, 0.0625, 0.03125], lrv_lags: 10.0 },
            macro_scale: MacroParams { eps: vec![0.25, 0.125, 0.0625], cells_per_corr: 4, support_radius: 0.25 },
            regularity: RegularityParams { big_r: 32.0, slack: 1.1, centers_per_axis: 4 },
        };
        match kind {
            SampleField => c.replicas = 200,
            Correctors => {
                if dim == 1 {
                    c.covariance.amplitude = 0.5;
                    c.replicas = 100;
                }
            }
            Radii | HoleFilling | MeanValue => {
                c.covariance.amplitude = 0.25;
                if kind == HoleFilling {
                    c.replicas = 50;
                }
            }
            CltScaling => {
                c.replicas = 100;
                if dim == 2 {
                    c.n = 256;
                }
            }
            CorrectorGrowth => {
                c.scaling.distances = match dim {
                    1 => vec![4, 8, 16, 32, 64, 128, 256, 512, 1024],
                    2 => {
                        c.n = 256;
                        vec![4, 8, 16, 32, 64]
                    }
                    _ => vec![2, 4, 8],
                };
            }
            Commutator => {
                c.replicas = 200;
                if dim == 3 {
                    c.commutator.eps = vec![0.25, 0.125];
                }
            }
            Pathwise => {}
            TwoScale => {
                c.covariance.amplitude = 0.25;
                if dim == 2 {
                    // The power and log-corrected fits differ in the fourth digit of r2; 30
                    // replicas cannot separate them.
                    c.macro_scale.support_radius = 0.5;
                    c.replicas = 200;
                }
            }
        }
        if dim == 3 {
            c.radii.club_radii = vec![4.0, 8.0];
            c.scaling.radii = vec![2.0, 4.0, 8.0];
            c.regularity.big_r = 8.0;
            c.macro_scale.cells_per_corr = 2;
            c.macro_scale.support_radius = 0.5;
        }
        if kind == HoleFilling && dim > 1 {
            // The enveloped r_diamond sits near side/8, so the torus and R are doubled to
            // leave two dyadic radii in [r_diamond, R).
            c.n *= 2;
            c.regularity.big_r *= 2.0;
        }
        c
    }

    /// Parse TOML on top of the preset chosen by its `kind` and `dim`.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        Self::from_toml_with(text, None, &Overrides::default())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    /// Resolve a config from optional TOML text, the kind chosen by the caller and flag
    /// overrides, in increasing precedence: preset, file, flags.
    pub fn from_toml_with(text: &str, kind: Option<ExperimentKind>, overrides: &Overrides) -> Result<Self> {
        let user: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let file_kind = match user.get("kind") {
            Some(v) => Some(
                v.as_str()
                    .ok_or_else(|| Error::Config("kind must be a string".into()))?
                    .parse::<ExperimentKind>()?,
            ),
            None => None,
        };
        let kind = match (kind, file_kind) {
            (Some(a), Some(b)) if a != b => {
                return Err(Error::Config(format!("config is for '{b}' but '{a}' was requested")))
            }
            (Some(a), _) | (None, Some(a)) => a,
            (None, None) => return Err(Error::Config("config has no kind".into())),
        };
        let dim = match (overrides.dim, user.get("dim")) {
            (Some(d), _) => d,
            (None, Some(v)) => {
                v.as_integer().ok_or_else(|| Error::Config("dim must be an integer".into()))? as usize
            }
            (None, None) => 2,
        };
        if !(1..=3).contains(&dim) {
            return Err(Error::Config(format!("dim must be 1, 2 or 3, got {dim}")));
        }
        let mut merged = toml::Table::try_from(Self::preset(kind, dim)).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut merged, user);
        merged.insert("kind".into(), toml::Value::String(kind.as_str().into()));
        merged.insert("dim".into(), toml::Value::Integer(dim as i64));
        let mut config: Self = merged.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        config.apply(overrides);
        config.validate()?;
        Ok(config)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(v) = o.n {
            self.n = v;
        }
        if let Some(v) = o.length {
            self.length = Some(v);
        }
        if let Some(v) = o.cov_family {
            self.covariance.family = v;
        }
        if let Some(v) = o.amplitude {
            self.covariance.amplitude = v;
        }
        if let Some(v) = o.corr_length {
            self.covariance.corr_length = v;
        }
        match o.trunc_m {
            Some(Some(m)) => {
                self.truncate = true;
                self.trunc_m = m;
            }
            Some(None) => self.truncate = false,
            None => {}
        }
        if let Some(v) = o.replicas {
            self.replicas = v;
        }
        if let Some(v) = o.seed {
            self.seed = v;
        }
        if let Some(v) = &o.out {
            self.out = Some(v.clone());
        }
        if let Some(v) = o.threads {
            self.threads = Some(v);
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// SHA-256 of the canonical JSON of every setting that can change an observable.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.out = None;
        canonical.threads = None;
        canonical.save_fields = false;
        let json = serde_json::to_string(&canonical).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn grid(&self) -> Result<LatticeGrid> {
        LatticeGrid::new(self.dim, self.n, self.length.unwrap_or(self.n as f64))
    }

    pub fn truncation(&self) -> Option<f64> {
        self.truncate.then_some(self.trunc_m)
    }

    pub fn corrector_config(&self, with_sigma: bool) -> CorrectorConfig {
        CorrectorConfig {
            truncation_m: self.truncation(),
            edge_rule: self.edge_rule,
            solver: SolverOptions { tol: self.solver_tol, max_iter: self.max_iter },
            with_sigma,
        }
    }

    pub fn two_scale_case(&self) -> TwoScaleCase {
        TwoScaleCase {
            dim: self.dim,
            eps_levels: self.macro_scale.eps.clone(),
            cells_per_corr: self.macro_scale.cells_per_corr,
            support_radius: self.macro_scale.support_radius,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(1..=3).contains(&self.dim) {
            return bad(format!("dim must be 1, 2 or 3, got {}", self.dim));
        }
        self.covariance.validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.truncate && !(self.trunc_m >= 1.0 && self.trunc_m.is_finite()) {
            return bad(format!("trunc_m must be a finite value >= 1, got {}", self.trunc_m));
        }
        if !(self.solver_tol > 0.0 && self.solver_tol < 1.0) {
            return bad(format!("solver_tol must lie in (0, 1), got {}", self.solver_tol));
        }
        if !(self.psd_tol >= 0.0 && self.psd_tol < 1.0) {
            return bad(format!("psd_tol must lie in [0, 1), got {}", self.psd_tol));
        }
        if self.threads == Some(0) {
            return bad("threads must be positive".into());
        }
        let r = &self.radii;
        if !(r.comparison > 1.0 && r.c_star > 0.0 && r.c_spade > 0.0 && r.club_eps > 0.0 && r.club_eps < 1.0) {
            return bad("radii constants need comparison > 1, c_star, c_spade > 0 and club_eps in (0, 1)".into());
        }
        if self.kind.is_multiscale() {
            self.two_scale_case().validate().map_err(|e| Error::Config(e.to_string()))?;
            return Ok(());
        }
        let grid = self.grid().map_err(|e| Error::Config(e.to_string()))?;
        let quarter = grid.side_length() / 4.0;
        match self.kind {
            ExperimentKind::Radii => {
                if r.club_radii.is_empty() || r.club_radii.iter().any(|&x| !(x > 0.0 && x <= quarter)) {
                    return bad(format!("club radii must lie in (0, {quarter}]"));
                }
            }
            ExperimentKind::CltScaling => {
                let s = &self.scaling.radii;
                if s.len() < 3 || s.iter().any(|&x| !(x > 0.0 && x <= max_radius(&grid))) {
                    return bad(format!("need >= 3 CLT radii in (0, {}]", max_radius(&grid)));
                }
            }
            ExperimentKind::CorrectorGrowth => {
                let s = &self.scaling.distances;
                if s.len() < 3 || s.iter().any(|&t| t == 0 || t > self.n / 4) {
                    return bad(format!("need >= 3 growth distances in [1, {}]", self.n / 4));
                }
            }
            ExperimentKind::Commutator => {
                let e = &self.commutator.eps;
                if e.len() < 2 {
                    return bad("commutator needs at least two eps values".into());
                }
                for &eps in e {
                    window_cells(&grid, self.covariance.corr_length, eps).map_err(|e| Error::Config(e.to_string()))?;
                }
                if !(self.commutator.lrv_lags > 0.0) {
                    return bad("lrv_lags must be positive".into());
                }
            }
            ExperimentKind::HoleFilling | ExperimentKind::MeanValue => {
                let g = &self.regularity;
                if !(g.big_r >= 2.0 && g.big_r <= quarter) {
                    return bad(format!("big_r must lie in [2, {quarter}]"));
                }
                if !(g.slack >= 1.0) || g.centers_per_axis == 0 {
                    return bad("slack must be >= 1 and centers_per_axis positive".into());
                }
            }
            _ => {}
        }
        Ok(())
    }
}

/// Recursive overlay of `top` onto `base`; tables merge, everything else replaces.
fn merge(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
