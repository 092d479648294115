use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lnhom_core::experiment::{run_experiment, ExperimentConfig, ExperimentKind, Overrides, Summary};
use lnhom_core::{CovarianceFamily, Error};

#[derive(Parser)]
#[command(name = "lnhom", version, about = "Monte Carlo experiments for log-normal random conductances")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Moments of the sampled coefficient field.
    SampleField,
    /// Homogenized matrix, corrector residuals and Voigt/Reuss bounds.
    Correctors,
    /// Tails of the minimal radii.
    Radii,
    /// Variance decay of spatial averages of corrector gradients.
    CltScaling,
    /// Second moments of corrector increments against distance.
    CorrectorGrowth,
    /// Gaussian limit of the homogenization commutator.
    Commutator,
    /// Pathwise fluctuation structure of the macroscopic solution.
    Pathwise,
    /// Error of the two-scale expansion against eps.
    TwoScale,
    /// Hole-filling decay of the corrector energy.
    HoleFilling,
    /// Mean-value inequality above the sublinearity radius.
    MeanValue,
}

impl Command {
    fn kind(self) -> ExperimentKind {
        match self {
            Self::SampleField => ExperimentKind::SampleField,
            Self::Correctors => ExperimentKind::Correctors,
            Self::Radii => ExperimentKind::Radii,
            Self::CltScaling => ExperimentKind::CltScaling,
            Self::CorrectorGrowth => ExperimentKind::CorrectorGrowth,
            Self::Commutator => ExperimentKind::Commutator,
            Self::Pathwise => ExperimentKind::Pathwise,
            Self::TwoScale => ExperimentKind::TwoScale,
            Self::HoleFilling => ExperimentKind::HoleFilling,
            Self::MeanValue => ExperimentKind::MeanValue,
        }
    }
}

#[derive(Args)]
struct Common {
    /// TOML file; flags take precedence over its values.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    dim: Option<usize>,
    /// Sites per axis (power of two).
    #[arg(long, global = true)]
    n: Option<usize>,
    /// Torus side length; the lattice spacing is length / n.
    #[arg(long, global = true)]
    length: Option<f64>,
    /// gaussian, exponential or spherical.
    #[arg(long, global = true, value_parser = parse_family)]
    cov_family: Option<CovarianceFamily>,
    #[arg(long, global = true)]
    amplitude: Option<f64>,
    #[arg(long, global = true)]
    corr_length: Option<f64>,
    /// Truncation level M, or "none" to disable.
    #[arg(long = "trunc-M", global = true, value_name = "M", value_parser = parse_trunc)]
    trunc_m: Option<Truncation>,
    #[arg(long, global = true)]
    replicas: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory [default: out/<kind>].
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    threads: Option<usize>,
}

fn parse_family(s: &str) -> Result<CovarianceFamily, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// `None` disables truncation.
#[derive(Clone, Copy)]
struct Truncation(Option<f64>);

fn parse_trunc(s: &str) -> Result<Truncation, String> {
    match s {
        "none" | "off" => Ok(Truncation(None)),
        _ => s.parse().map(|m| Truncation(Some(m))).map_err(|e| format!("'{s}': {e}")),
    }
}

fn resolve(cli: &Cli) -> Result<ExperimentConfig, Error> {
    let kind = cli.command.kind();
    let c = &cli.common;
    let overrides = Overrides {
        dim: c.dim,
        n: c.n,
        length: c.length,
        cov_family: c.cov_family,
        amplitude: c.amplitude,
        corr_length: c.corr_length,
        trunc_m: c.trunc_m.map(|t| t.0),
        replicas: c.replicas,
        seed: c.seed,
        out: c.out.clone(),
        threads: c.threads,
    };
    let text = match &c.config {
        Some(path) => std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?,
        None => String::new(),
    };
    let mut config = ExperimentConfig::from_toml_with(&text, Some(kind), &overrides)?;
    if config.out.is_none() {
        config.out = Some(PathBuf::from("out").join(kind.as_str()));
    }
    Ok(config)
}

fn report(summary: &Summary) {
    println!(
        "{}: {} of {} replicas succeeded (config {})",
        summary.kind,
        summary.succeeded,
        summary.requested,
        &summary.config_hash[..12]
    );
    for f in &summary.failures {
        println!("  replica {} failed: {}", f.replica, f.error);
    }
    for c in &summary.checks {
        println!("  [{}] {}: {}", if c.passed { "ok" } else { "FAIL" }, c.name, c.detail);
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let config = match resolve(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    match run_experiment(&config) {
        Ok(run) => {
            report(&run.summary);
            if let Some(dir) = &config.out {
                println!("outputs in {}", dir.display());
            }
            ExitCode::SUCCESS
        }
        Err(e @ Error::ReplicaFailures { .. }) => {
            eprintln!("error: {e}");
            ExitCode::from(3)
        }
        Err(e @ (Error::Config(_) | Error::InvalidGrid(_) | Error::InvalidCovariance(_) | Error::BadTruncation(_))) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
