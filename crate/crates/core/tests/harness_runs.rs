use std::path::{Path, PathBuf};

use aoe::harness::{load_runs, report, run_experiment, run_path, summary_csv, EnvironmentSpec, ExperimentConfig, Method, SUMMARY_HEADER};

fn data_path(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data").join(rel)
}

fn tiny_recsys(out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::recsys();
    if let EnvironmentSpec::Recsys(r) = &mut cfg.environment {
        r.ratings_path = data_path("ml-100k/u.data");
        r.table.n_users = 20;
        r.table.n_items = 20;
    }
    cfg.name = "tiny".into();
    cfg.repeats = 1;
    cfg.search.budget = 1;
    cfg.search.surrogate.num_inducing = 10;
    cfg.search.surrogate.train.epochs = 2;
    cfg.search.surrogate.metric_samples = 16;
    cfg.output_dir = out.to_path_buf();
    cfg
}

#[test]
fn single_repeat_single_iteration_writes_one_file_per_method() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_recsys(dir.path());
    let rows = run_experiment(&cfg).unwrap();
    assert_eq!(rows.len(), Method::ALL.len());
    let exp = cfg.experiment_dir();
    for m in Method::ALL {
        let files: Vec<_> = std::fs::read_dir(exp.join(m.name())).unwrap().collect();
        assert_eq!(files.len(), 1, "{m}");
        assert!(run_path(&exp, m, 0).is_file());
    }
    for row in &rows {
        assert_eq!(row.iteration, 1);
        assert_eq!(row.gap_std, 0.0);
        assert!(row.gap_mean >= 0.0 && row.rmse_mean >= 0.0);
    }
}

#[test]
fn report_from_disk_matches_summary() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_recsys(dir.path());
    cfg.repeats = 2;
    cfg.search.budget = 2;
    cfg.methods = vec![Method::Aoe, Method::IsGreedy];
    run_experiment(&cfg).unwrap();
    let exp = cfg.experiment_dir();
    let summary = std::fs::read_to_string(exp.join("summary.csv")).unwrap();
    assert!(summary.starts_with(SUMMARY_HEADER));
    let records = load_runs(&exp).unwrap();
    assert_eq!(records.len(), 4);
    assert_eq!(summary_csv(&report(&records).unwrap()), summary);
}

#[test]
fn config_round_trips_through_json() {
    for cfg in [ExperimentConfig::classification(), ExperimentConfig::recsys()] {
        let back = ExperimentConfig::from_json(&cfg.to_json().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }
}

#[test]
fn missing_ratings_file_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_recsys(dir.path());
    if let EnvironmentSpec::Recsys(r) = &mut cfg.environment {
        r.ratings_path = dir.path().join("absent.data");
    }
    assert!(run_experiment(&cfg).is_err());
}
