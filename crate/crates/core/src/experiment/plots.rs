//! CSV tables shaped for plotting, computed from records alone.

use std::path::{Path, PathBuf};

use statrs::distribution::{ContinuousCDF, Normal};

use super::{ExperimentKind, ExperimentRecord, ObservableTable};
use crate::error::{Error, Result};
use crate::fluctuations::PathwiseIntegrals;
use crate::stats::{self, Estimate};
use crate::twoscale::ExpansionIntegrals;

const HISTOGRAM_BINS: usize = 20;

struct Table {
    name: &'static str,
    header: &'static [&'static str],
    rows: Vec<Vec<f64>>,
}

impl Table {
    fn new(name: &'static str, header: &'static [&'static str]) -> Self {
        Self { name, header, rows: Vec::new() }
    }
}

/// Write the plot tables of one experiment kind into `dir`; empty input gives header-only files.
pub fn emit_plot_data(records: &[ExperimentRecord], kind: ExperimentKind, dir: &Path) -> Result<Vec<PathBuf>> {
    if let Some(r) = records.iter().find(|r| r.kind != kind) {
        return Err(Error::MixedKinds(format!("expected {kind}, found {} (replica {})", r.kind, r.replica)));
    }
    let t = ObservableTable::new(records);
    let tables = match kind {
        ExperimentKind::SampleField => vec![moments(&t)],
        ExperimentKind::Correctors => correctors(&t),
        ExperimentKind::Radii => vec![tails(&t)],
        ExperimentKind::CltScaling => vec![
            clt(&t, "clt_plot.csv", "grad_phi_moment"),
            clt(&t, "clt_sigma_plot.csv", "grad_sigma_moment"),
        ],
        ExperimentKind::CorrectorGrowth => vec![growth(&t)],
        ExperimentKind::Commutator => commutator(&t),
        ExperimentKind::Pathwise => vec![pathwise(&t)],
        ExperimentKind::TwoScale => vec![two_scale(&t)],
        ExperimentKind::HoleFilling => vec![hole_filling(&t)],
        ExperimentKind::MeanValue => vec![mean_value(&t)],
    };
    std::fs::create_dir_all(dir)?;
    let mut files = Vec::new();
    for table in tables {
        let path = dir.join(table.name);
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(table.header)?;
        for row in &table.rows {
            w.write_record(row.iter().map(|v| format!("{v:?}")))?;
        }
        w.flush()?;
        files.push(path);
    }
    Ok(files)
}

fn dim(t: &ObservableTable) -> usize {
    t.column("dim", 0.0, 0).first().map_or(1, |&d| d as usize)
}

fn moments(t: &ObservableTable) -> Table {
    let mut out = Table::new("moments_plot.csv", &["p", "mean", "stderr", "log_mean"]);
    for p in t.params("a_moment") {
        let e = Estimate::from_samples(&t.column("a_moment", p, 0));
        out.rows.push(vec![p, e.mean, e.stderr, e.mean.ln()]);
    }
    out
}

fn correctors(t: &ObservableTable) -> Vec<Table> {
    let mut ahom = Table::new("ahom_plot.csv", &["replica", "component", "ahom"]);
    let mut bounds = Table::new("bounds_plot.csv", &["replica", "axis", "harmonic", "arithmetic", "ahom"]);
    let d = (t.components("ahom") as f64).sqrt().round() as usize;
    for (k, r) in t.records().iter().enumerate() {
        for c in 0..d * d {
            if let Some(v) = t.get(k, "ahom", 0.0, c) {
                ahom.rows.push(vec![r.replica as f64, c as f64, v]);
            }
        }
        for axis in 0..d {
            let get = |name: &str, c: usize| t.get(k, name, 0.0, c).unwrap_or(f64::NAN);
            bounds.rows.push(vec![
                r.replica as f64,
                axis as f64,
                get("harmonic_mean", axis),
                get("arithmetic_mean", axis),
                get("ahom", axis * d + axis),
            ]);
        }
    }
    vec![ahom, bounds]
}

/// Survival of the pooled radius histograms with `x = log^2(1 + r)` and `y = -log S(r)`;
/// censored sites sit in the last bin and count as surviving every threshold.
fn tails(t: &ObservableTable) -> Table {
    let mut out = Table::new(
        "tail_plot.csv",
        &["radius", "bin_lo", "bin_hi", "count", "censored", "survival", "x", "y"],
    );
    for (id, name) in ["r_diamond", "r_star"].into_iter().enumerate() {
        let bin_name = format!("{name}_bin");
        let cens_name = format!("{name}_censored");
        let bins = t.params(&bin_name);
        let rho_max = t.params(&cens_name).last().copied().unwrap_or(f64::NAN);
        let counts: Vec<f64> = bins.iter().map(|&b| t.column(&bin_name, b, 0).iter().sum()).collect();
        let censored: f64 = t.params(&cens_name).iter().map(|&p| t.column(&cens_name, p, 0).iter().sum::<f64>()).sum();
        let total = counts.iter().sum::<f64>() + censored;
        let mut above = total;
        for (k, &lo) in bins.iter().enumerate() {
            let hi = bins.get(k + 1).copied().unwrap_or(rho_max);
            let s = above / total;
            let c = if k + 1 == bins.len() { censored } else { 0.0 };
            out.rows.push(vec![id as f64, lo, hi, counts[k], c, s, (1.0 + lo).ln().powi(2), -s.ln()]);
            above -= counts[k];
        }
    }
    out
}

fn clt(t: &ObservableTable, file: &'static str, name: &str) -> Table {
    let mut out = Table::new(file, &["R", "log_var", "stderr"]);
    for r in t.params(name) {
        let e = Estimate::from_samples(&t.column(name, r, 0));
        out.rows.push(vec![r, e.mean.ln(), e.stderr / e.mean]);
    }
    out
}

fn growth(t: &ObservableTable) -> Table {
    let mut out = Table::new("growth_plot.csv", &["distance", "moment", "stderr"]);
    for d in t.params("increment_moment") {
        let e = Estimate::from_samples(&t.column("increment_moment", d, 0));
        out.rows.push(vec![d, e.mean, e.stderr]);
    }
    out
}

/// QQ and histogram data of `I_eps(chi e_1 (x) e_1)` on the origin window, standardized.
fn commutator(t: &ObservableTable) -> Vec<Table> {
    let mut qq = Table::new("qq_plot.csv", &["eps", "rank", "normal_quantile", "sample"]);
    let mut hist = Table::new("histogram_plot.csv", &["eps", "bin_lo", "bin_hi", "count"]);
    let d = (t.components("ahom") as f64).sqrt().round() as usize;
    let ahom: Vec<f64> = (0..d).map(|k| stats::mean(&t.column("ahom", 0.0, k * d))).collect();
    let normal = Normal::new(0.0, 1.0).unwrap();
    for eps in t.params("window_p") {
        let xs: Vec<f64> = (0..t.len())
            .filter_map(|k| {
                let p = t.get(k, "window_p", eps, 0)?;
                let v: f64 = (0..d).map(|j| Some(t.get(k, "window_v", eps, j)? * ahom[j])).sum::<Option<f64>>()?;
                Some(p - v)
            })
            .collect();
        if xs.len() < 2 {
            continue;
        }
        let mut z = stats::standardize(&xs);
        z.sort_by(f64::total_cmp);
        let n = z.len() as f64;
        for (i, &v) in z.iter().enumerate() {
            qq.rows.push(vec![eps, i as f64, normal.inverse_cdf((i as f64 + 0.5) / n), v]);
        }
        let (lo, hi) = (z[0], z[z.len() - 1]);
        let width = (hi - lo).max(f64::MIN_POSITIVE) / HISTOGRAM_BINS as f64;
        let mut counts = [0usize; HISTOGRAM_BINS];
        for &v in &z {
            counts[(((v - lo) / width) as usize).min(HISTOGRAM_BINS - 1)] += 1;
        }
        for (b, &c) in counts.iter().enumerate() {
            let b0 = lo + b as f64 * width;
            hist.rows.push(vec![eps, b0, b0 + width, c as f64]);
        }
    }
    vec![qq, hist]
}

fn pathwise(t: &ObservableTable) -> Table {
    let mut out = Table::new("pathwise_plot.csv", &["eps", "residual_l2", "residual_literal_l2", "fluctuation_sd"]);
    let d = dim(t);
    for eps in t.params("xi_flux") {
        let reps: Vec<PathwiseIntegrals> = (0..t.len())
            .filter_map(|k| {
                let g = |n: &str| t.get(k, n, eps, 0);
                Some(PathwiseIntegrals {
                    xi_flux: g("xi_flux")?,
                    xi_grad: g("xi_grad")?,
                    comm_flux: g("comm_flux")?,
                    comm_grad: g("comm_grad")?,
                    lit_flux: g("lit_flux")?,
                    lit_grad: g("lit_grad")?,
                    ahom_trace: g("ahom_trace")?,
                })
            })
            .collect();
        if let Ok(s) = crate::fluctuations::summarize_pathwise(d, eps, &reps) {
            out.rows.push(vec![eps, s.residual_l2, s.residual_literal_l2, s.variance.sqrt()]);
        }
    }
    out
}

fn two_scale(t: &ObservableTable) -> Table {
    let mut out = Table::new("expansion_plot.csv", &["eps", "error", "stderr"]);
    for eps in t.params("a_int") {
        let reps: Vec<ExpansionIntegrals> = (0..t.len())
            .filter_map(|k| {
                let g = |n: &str| t.get(k, n, eps, 0);
                Some(ExpansionIntegrals {
                    a_int: g("a_int")?,
                    b_int: g("b_int")?,
                    c_int: g("c_int")?,
                    energy_gap: g("energy_gap")?,
                    ahom_trace: g("ahom_trace")?,
                })
            })
            .collect();
        if reps.len() < 2 {
            continue;
        }
        let abar = stats::mean(&reps.iter().map(|r| r.ahom_trace).collect::<Vec<_>>());
        let sq = Estimate::from_samples(&reps.iter().map(|r| r.error_squared(abar)).collect::<Vec<_>>());
        let e = sq.mean.sqrt();
        out.rows.push(vec![eps, e, sq.stderr / (2.0 * e)]);
    }
    out
}

fn hole_filling(t: &ObservableTable) -> Table {
    let mut out = Table::new("profile_plot.csv", &["replica", "center", "direction", "r", "ratio"]);
    let d = dim(t);
    let radii = t.params("profile");
    let comps = t.components("profile");
    for (k, rec) in t.records().iter().enumerate() {
        for c in 0..comps {
            for &r in &radii {
                if let Some(v) = t.get(k, "profile", r, c) {
                    out.rows.push(vec![rec.replica as f64, (c / d) as f64, (c % d) as f64, r, v]);
                }
            }
        }
    }
    out
}

fn mean_value(t: &ObservableTable) -> Table {
    let mut out = Table::new("mean_value_plot.csv", &["replica", "R", "ratio_rstar", "ratio_all"]);
    for (k, rec) in t.records().iter().enumerate() {
        for big_r in t.params("ratio_rstar") {
            let get = |n: &str| t.get(k, n, big_r, 0).unwrap_or(f64::NAN);
            out.rows.push(vec![rec.replica as f64, big_r, get("ratio_rstar"), get("ratio_all")]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiment::RecordValue;

    fn record(kind: ExperimentKind, replica: u64, obs: Vec<RecordValue>) -> ExperimentRecord {
        ExperimentRecord {
            kind,
            config_hash: "h".into(),
            seed: 1,
            replica,
            observables: obs,
            solves: Vec::new(),
            wall_seconds: 0.0,
            version: "0".into(),
        }
    }

    fn read(path: &Path) -> Vec<Vec<String>> {
        let mut r = csv::ReaderBuilder::new().has_headers(false).from_path(path).unwrap();
        r.records().map(|x| x.unwrap().iter().map(String::from).collect()).collect()
    }

    #[test]
    fn empty_records_give_header_only_files() {
        let dir = tempfile::tempdir().unwrap();
        for kind in ExperimentKind::ALL {
            for f in emit_plot_data(&[], kind, dir.path()).unwrap() {
                assert_eq!(read(&f).len(), 1, "{kind}: {}", f.display());
            }
        }
    }

    #[test]
    fn mixed_kinds_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let recs = vec![record(ExperimentKind::Radii, 0, vec![])];
        assert!(matches!(
            emit_plot_data(&recs, ExperimentKind::CltScaling, dir.path()),
            Err(Error::MixedKinds(_))
        ));
    }

    #[test]
    fn clt_columns_are_sorted_by_radius() {
        let dir = tempfile::tempdir().unwrap();
        let recs: Vec<_> = (0..3)
            .map(|k| {
                let obs = [32.0, 8.0, 16.0]
                    .iter()
                    .map(|&r| RecordValue::new("grad_phi_moment", r, 0, (1.0 + k as f64 * 0.1) / (r * r)))
                    .collect();
                record(ExperimentKind::CltScaling, k, obs)
            })
            .collect();
        let files = emit_plot_data(&recs, ExperimentKind::CltScaling, dir.path()).unwrap();
        let rows = read(&files[0]);
        assert_eq!(rows[0], ["R", "log_var", "stderr"]);
        let rs: Vec<f64> = rows[1..].iter().map(|r| r[0].parse().unwrap()).collect();
        assert_eq!(rs, [8.0, 16.0, 32.0]);
    }

    #[test]
    fn tail_bins_carry_censored_counts() {
        let dir = tempfile::tempdir().unwrap();
        let obs = vec![
            RecordValue::new("r_diamond_bin", 1.0, 0, 6.0),
            RecordValue::new("r_diamond_bin", 2.0, 0, 3.0),
            RecordValue::new("r_diamond_censored", 4.0, 0, 1.0),
        ];
        let files = emit_plot_data(&[record(ExperimentKind::Radii, 0, obs)], ExperimentKind::Radii, dir.path()).unwrap();
        let rows = read(&files[0]);
        assert_eq!(rows[0][4], "censored");
        assert_eq!(rows.len(), 3);
        let last: Vec<f64> = rows[2].iter().map(|s| s.parse().unwrap()).collect();
        assert_eq!(last[4], 1.0);
        assert!((last[5] - 0.4).abs() < 1e-12);
    }
}
