use std::collections::BTreeMap;
use std::fs::File;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use super::jobs::{self, Extra, ReplicaOutput};
use super::{
    emit_plot_data, ExperimentConfig, ExperimentKind, ExperimentRecord, ObservableTable, RecordValue, ReplicaFailure,
    Summary, VERSION,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct RunOutput {
    /// Successful replicas in replica order.
    pub records: Vec<ExperimentRecord>,
    pub summary: Summary,
    /// Files written under the output directory, if any.
    pub files: Vec<PathBuf>,
}

/// Execute every replica, persist records as they arrive and summarize.
///
/// Fails with `ReplicaFailures` (after writing all outputs) when more than 5% of the
/// replicas error.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunOutput> {
    config.validate()?;
    let hash = config.hash();
    let job = jobs::prepare(config)?;
    let mut writer = match &config.out {
        Some(dir) => Some(RunWriter::create(dir, config, &hash)?),
        None => None,
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.threads.unwrap_or(0))
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    let total = config.replicas as u64;
    let (tx, rx) = mpsc::channel::<(u64, Result<ReplicaOutput>, f64)>();
    let mut done: Vec<(ExperimentRecord, Extra)> = Vec::new();
    let mut failures: Vec<ReplicaFailure> = Vec::new();
    let mut write_error: Option<Error> = None;
    std::thread::scope(|scope| {
        let job = &*job;
        scope.spawn(move || {
            pool.install(|| {
                (0..total).into_par_iter().for_each_with(tx, |tx, r| {
                    let start = Instant::now();
                    let result = catch_unwind(AssertUnwindSafe(|| job.replica(r)))
                        .unwrap_or_else(|p| Err(Error::Config(format!("replica panicked: {}", panic_message(&p)))));
                    let _ = tx.send((r, result, start.elapsed().as_secs_f64()));
                })
            })
        });
        for (replica, result, wall) in rx {
            let written = match result {
                Ok(out) => {
                    let record = ExperimentRecord {
                        kind: config.kind,
                        config_hash: hash.clone(),
                        seed: config.seed,
                        replica,
                        observables: out.observables,
                        solves: out.solves,
                        wall_seconds: wall,
                        version: VERSION.to_string(),
                    };
                    let w = writer.as_mut().map_or(Ok(()), |w| w.record(&record));
                    done.push((record, out.extra));
                    w
                }
                Err(e) => {
                    let failure = ReplicaFailure { replica, error: e.to_string() };
                    let w = writer.as_mut().map_or(Ok(()), |w| w.failure(&failure, wall));
                    failures.push(failure);
                    w
                }
            };
            if let Err(e) = written {
                write_error.get_or_insert(e);
            }
        }
    });
    if let Some(e) = write_error {
        return Err(e);
    }
    done.sort_by_key(|(r, _)| r.replica);
    failures.sort_by_key(|f| f.replica);
    let (records, extras): (Vec<_>, Vec<_>) = done.into_iter().unzip();
    let table = ObservableTable::new(&records);
    let (fits, checks) = job.summarize(&table, &extras);
    let summary = Summary {
        kind: config.kind,
        config_hash: hash,
        requested: config.replicas,
        succeeded: records.len(),
        failures,
        fits,
        checks,
    };
    let files = match writer {
        Some(w) => w.finish(&records, &summary)?,
        None => Vec::new(),
    };
    let failed = summary.failures.len();
    if failed * 20 > config.replicas {
        return Err(Error::ReplicaFailures { failed, total: config.replicas });
    }
    Ok(RunOutput { records, summary, files })
}

fn panic_message(p: &Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<&str>()
        .map(|s| s.to_string())
        .or_else(|| p.downcast_ref::<String>().cloned())
        .unwrap_or_else(|| "unknown".into())
}

fn unix_seconds() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// `{:?}` prints the shortest representation that parses back to the same `f64`.
fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

const RECORD_HEADER: [&str; 8] = ["config_hash", "kind", "replica", "seed", "name", "param", "component", "value"];

/// Single consumer of replica results; every row is flushed before the next replica.
struct RunWriter {
    dir: PathBuf,
    hash: String,
    config: ExperimentConfig,
    started: u64,
    records: csv::Writer<File>,
    solves: csv::Writer<File>,
    replicas: csv::Writer<File>,
}

impl RunWriter {
    fn create(dir: &Path, config: &ExperimentConfig, hash: &str) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("config.toml"), config.to_toml()?)?;
        let open = |name: &str, header: &[&str]| -> Result<csv::Writer<File>> {
            let mut w = csv::Writer::from_path(dir.join(name))?;
            w.write_record(header)?;
            w.flush()?;
            Ok(w)
        };
        let writer = Self {
            dir: dir.to_path_buf(),
            hash: hash.to_string(),
            config: config.clone(),
            started: unix_seconds(),
            records: open("records.csv", &RECORD_HEADER)?,
            solves: open("solves.csv", &["config_hash", "replica", "solve", "iterations", "relative_residual", "converged"])?,
            replicas: open("replicas.csv", &["config_hash", "replica", "status", "wall_seconds", "version", "error"])?,
        };
        writer.manifest("running", &[], None)?;
        Ok(writer)
    }

    fn record(&mut self, r: &ExperimentRecord) -> Result<()> {
        for o in &r.observables {
            self.records.write_record([
                r.config_hash.as_str(),
                r.kind.as_str(),
                &r.replica.to_string(),
                &r.seed.to_string(),
                &o.name,
                &fmt_f64(o.param),
                &o.component.to_string(),
                &fmt_f64(o.value),
            ])?;
        }
        for (k, s) in r.solves.iter().enumerate() {
            self.solves.write_record([
                r.config_hash.as_str(),
                &r.replica.to_string(),
                &k.to_string(),
                &s.iterations.to_string(),
                &fmt_f64(s.relative_residual),
                &s.converged.to_string(),
            ])?;
        }
        self.replicas.write_record([
            r.config_hash.as_str(),
            &r.replica.to_string(),
            "ok",
            &fmt_f64(r.wall_seconds),
            &r.version,
            "",
        ])?;
        self.records.flush()?;
        self.solves.flush()?;
        self.replicas.flush()?;
        Ok(())
    }

    fn failure(&mut self, f: &ReplicaFailure, wall: f64) -> Result<()> {
        self.replicas.write_record([&self.hash, &f.replica.to_string(), "failed", &fmt_f64(wall), VERSION, &f.error])?;
        self.replicas.flush()?;
        Ok(())
    }

    fn finish(mut self, records: &[ExperimentRecord], summary: &Summary) -> Result<Vec<PathBuf>> {
        self.records.flush()?;
        self.solves.flush()?;
        self.replicas.flush()?;
        let mut fits = csv::Writer::from_path(self.dir.join("fits.csv"))?;
        fits.write_record(["config_hash", "kind", "name", "param", "component", "value", "stderr", "n"])?;
        for f in &summary.fits {
            fits.write_record([
                self.hash.as_str(),
                summary.kind.as_str(),
                &f.name,
                &fmt_f64(f.param),
                &f.component.to_string(),
                &fmt_f64(f.value),
                &fmt_f64(f.stderr),
                &f.n.to_string(),
            ])?;
        }
        fits.flush()?;
        let mut checks = csv::Writer::from_path(self.dir.join("checks.csv"))?;
        checks.write_record(["config_hash", "name", "passed", "detail"])?;
        for c in &summary.checks {
            checks.write_record([self.hash.as_str(), &c.name, &c.passed.to_string(), &c.detail])?;
        }
        checks.flush()?;
        let mut files: Vec<PathBuf> = ["config.toml", "records.csv", "solves.csv", "replicas.csv", "fits.csv", "checks.csv"]
            .iter()
            .map(|n| self.dir.join(n))
            .collect();
        files.extend(emit_plot_data(records, summary.kind, &self.dir.join("plots"))?);
        self.manifest("complete", &files, Some(summary))?;
        files.push(self.dir.join("manifest.json"));
        Ok(files)
    }

    fn manifest(&self, status: &str, files: &[PathBuf], summary: Option<&Summary>) -> Result<()> {
        let mut hashes = BTreeMap::new();
        for f in files {
            let rel = f.strip_prefix(&self.dir).unwrap_or(f).to_string_lossy().into_owned();
            hashes.insert(rel, hex::encode(Sha256::digest(std::fs::read(f)?)));
        }
        let manifest = serde_json::json!({
            "kind": self.config.kind,
            "status": status,
            "config_hash": self.hash,
            "version": VERSION,
            "config": self.config,
            "started_unix": self.started,
            "finished_unix": summary.map(|_| unix_seconds()),
            "replicas_requested": self.config.replicas,
            "replicas_succeeded": summary.map(|s| s.succeeded),
            "replicas_failed": summary.map(|s| s.failures.len()),
            "checks": summary.map(|s| &s.checks),
            "files": hashes,
        });
        std::fs::write(self.dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }
}

/// Read `records.csv` back into records (observables only; solve reports and timing stay in
/// their own files).
pub fn load_records(path: &Path) -> Result<Vec<ExperimentRecord>> {
    let mut reader = csv::Reader::from_path(path)?;
    let header = reader.headers()?.clone();
    if header.iter().ne(RECORD_HEADER) {
        return Err(Error::Config(format!("{} is not a records file", path.display())));
    }
    let parse_f = |s: &str| s.parse::<f64>().map_err(|e| Error::Config(format!("bad number '{s}': {e}")));
    let parse_u = |s: &str| s.parse::<u64>().map_err(|e| Error::Config(format!("bad integer '{s}': {e}")));
    let mut out: Vec<ExperimentRecord> = Vec::new();
    for row in reader.records() {
        let row = row?;
        let kind: ExperimentKind = row[1].parse()?;
        let replica = parse_u(&row[2])?;
        let value = RecordValue {
            name: row[4].to_string(),
            param: parse_f(&row[5])?,
            component: parse_u(&row[6])? as usize,
            value: parse_f(&row[7])?,
        };
        match out.last_mut() {
            Some(r) if r.replica == replica && r.config_hash == row[0] => r.observables.push(value),
            _ => out.push(ExperimentRecord {
                kind,
                config_hash: row[0].to_string(),
                seed: parse_u(&row[3])?,
                replica,
                observables: vec![value],
                solves: Vec::new(),
                wall_seconds: 0.0,
                version: VERSION.to_string(),
            }),
        }
    }
    Ok(out)
}
