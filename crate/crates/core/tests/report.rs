mod common;

use headsearch::run::{cmd_report, ReportOptions};
use headsearch::searchspace::{baseline_config, HeadConfig};

fn reported_configs() -> Vec<HeadConfig> {
    common::reported_architectures()
        .into_iter()
        .filter(|(name, _)| name.starts_with("full/"))
        .map(|(_, col)| col.to_config(false, 768).unwrap().0)
        .collect()
}

fn report_in(dir: &std::path::Path) -> headsearch::run::Report {
    cmd_report(&ReportOptions {
        runs: vec![dir.join("runs")],
        out: dir.join("out"),
        tasks: common::GLUE_TASKS.iter().map(|s| s.to_string()).collect(),
    })
    .unwrap()
}

#[test]
fn reported_accuracies_reproduce_verbatim() {
    let dir = tempfile::tempdir().unwrap();
    common::write_runs(
        &dir.path().join("runs"),
        &common::GLUE_TASKS,
        &common::REPORTED_BASE,
        &common::REPORTED_TUNED,
        &reported_configs(),
    );
    let report = report_in(dir.path());
    let md = std::fs::read_to_string(dir.path().join("out/accuracy.md")).unwrap();
    assert_eq!(
        md,
        "| method | sst2 | cola | mrpc | mnli | rte | qqp | average |\n\
         |---|---|---|---|---|---|---|---|\n\
         | base | 0.925 | 0.831 | 0.821 | 0.829 | 0.700 | 0.899 | 0.834 |\n\
         | tuned | **0.930** | 0.831 | **0.860** | **0.835** | 0.700 | **0.900** | 0.843 |\n"
    );
    assert_eq!(report.accuracy.improved_count(), 4);
    let csv = std::fs::read_to_string(dir.path().join("out/accuracy.csv")).unwrap();
    assert!(csv.starts_with("task,base,tuned,improved\nsst2,0.925,0.930,true\ncola,0.831,0.831,false\n"));

    let arch = std::fs::read_to_string(dir.path().join("out/architecture.md")).unwrap();
    assert!(arch.contains("| pooling | mean | [CLS] | [CLS] | max | [CLS] | max |"), "{arch}");
    assert!(arch.contains("| number heads conv | - | - | 112 | 9 | - | 159 |"), "{arch}");
    assert!(arch.contains("| skip connection | - | - | True | True | - | True |"), "{arch}");
    assert!(arch.contains("| number attention layers | 1 | 0 | 4 | 0 | 0 | 0 |"), "{arch}");
}

#[test]
fn report_is_a_pure_function_of_files() {
    let dir = tempfile::tempdir().unwrap();
    common::write_runs(
        &dir.path().join("runs"),
        &common::GLUE_TASKS,
        &common::REPORTED_BASE,
        &common::REPORTED_TUNED,
        &reported_configs(),
    );
    let first = report_in(dir.path());
    let bytes: Vec<Vec<u8>> = first.files.iter().map(|f| std::fs::read(f).unwrap()).collect();
    drop(first);
    std::fs::remove_dir_all(dir.path().join("out")).unwrap();
    let second = report_in(dir.path());
    let again: Vec<Vec<u8>> = second.files.iter().map(|f| std::fs::read(f).unwrap()).collect();
    assert_eq!(bytes, again);
}

#[test]
fn missing_runs_are_listed_by_task() {
    let dir = tempfile::tempdir().unwrap();
    let runs = dir.path().join("runs");
    common::write_runs(&runs, &["sst2", "cola"], &[0.9, 0.8], &[0.91, 0.8], &[baseline_config(); 2]);
    std::fs::remove_dir_all(runs.join("search-cola")).unwrap();
    let err = cmd_report(&ReportOptions {
        runs: vec![runs],
        out: dir.path().join("out"),
        tasks: vec!["sst2".into(), "cola".into(), "rte".into()],
    })
    .unwrap_err()
    .to_string();
    assert!(err.contains("cola (search)"), "{err}");
    assert!(err.contains("rte (search)") && err.contains("rte (baseline)"), "{err}");
    assert!(!err.contains("sst2"), "{err}");
}
