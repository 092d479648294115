use lnhom_core::experiment::{
    emit_plot_data, load_records, run_experiment, ExperimentConfig, ExperimentKind, Overrides,
};
use lnhom_core::Error;

fn config(kind: ExperimentKind, text: &str, o: Overrides) -> ExperimentConfig {
    ExperimentConfig::from_toml_with(text, Some(kind), &o).unwrap()
}

fn small(replicas: usize, seed: u64) -> Overrides {
    Overrides { n: Some(16), replicas: Some(replicas), seed: Some(seed), ..Default::default() }
}

#[test]
fn zero_replicas_give_an_empty_summary() {
    let c = config(ExperimentKind::Correctors, "", small(0, 1));
    let run = run_experiment(&c).unwrap();
    assert!(run.records.is_empty());
    assert_eq!(run.summary.requested, 0);
    assert_eq!(run.summary.succeeded, 0);
    assert!(run.summary.failures.is_empty());
}

#[test]
fn reruns_are_bit_identical_and_reload_from_csv() {
    let dir = tempfile::tempdir().unwrap();
    let mut o = small(6, 42);
    o.out = Some(dir.path().join("a"));
    o.threads = Some(1);
    let first = run_experiment(&config(ExperimentKind::Correctors, "", o.clone())).unwrap();
    o.out = None;
    o.threads = Some(3);
    let second = run_experiment(&config(ExperimentKind::Correctors, "", o)).unwrap();
    assert_eq!(first.records.len(), 6);
    for (a, b) in first.records.iter().zip(&second.records) {
        assert_eq!(a.replica, b.replica);
        assert_eq!(a.config_hash, b.config_hash);
        assert_eq!(a.observables, b.observables);
    }
    let loaded = load_records(&dir.path().join("a/records.csv")).unwrap();
    assert_eq!(loaded.len(), 6);
    for (a, b) in first.records.iter().zip(&loaded) {
        assert_eq!(a.observables, b.observables);
        assert_eq!(a.seed, b.seed);
    }
}

#[test]
fn different_seeds_agree_statistically() {
    let d = "dim = 2\n";
    let ahom = |seed| {
        let run = run_experiment(&config(ExperimentKind::Correctors, d, small(20, seed))).unwrap();
        let f = run.summary.fit("ahom", 0.0, 0).cloned().unwrap();
        (f.value, f.stderr)
    };
    let (a, sa) = ahom(1);
    let (b, sb) = ahom(2);
    assert!((a - b).abs() <= 3.0 * (sa * sa + sb * sb).sqrt(), "{a} +- {sa} vs {b} +- {sb}");
}

#[test]
fn failures_above_five_percent_are_reported_after_writing() {
    let dir = tempfile::tempdir().unwrap();
    let mut o = small(4, 1);
    o.out = Some(dir.path().to_path_buf());
    let c = config(ExperimentKind::Correctors, "max_iter = 1\n", o);
    match run_experiment(&c) {
        Err(Error::ReplicaFailures { failed, total }) => assert_eq!((failed, total), (4, 4)),
        other => panic!("expected failures, got {other:?}"),
    }
    assert!(dir.path().join("manifest.json").exists());
}

#[test]
fn plot_data_rejects_mixed_kinds() {
    let run = run_experiment(&config(ExperimentKind::SampleField, "", small(2, 1))).unwrap();
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(
        emit_plot_data(&run.records, ExperimentKind::Radii, dir.path()),
        Err(Error::MixedKinds(_))
    ));
    let files = emit_plot_data(&run.records, ExperimentKind::SampleField, dir.path()).unwrap();
    let text = std::fs::read_to_string(&files[0]).unwrap();
    assert_eq!(text.lines().count(), 4);
}
