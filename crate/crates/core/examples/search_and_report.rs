//! A miniature end-to-end run: pretrain, search and train baselines on two
//! small tasks, then write the architecture and accuracy tables.
//!
//!     cargo run --release --example search_and_report

use headsearch::encoder::{EncoderDims, PretrainSettings};
use headsearch::run::{
    cmd_baseline, cmd_pretrain, cmd_report, cmd_search, BaselineOptions, PretrainOptions, ReportOptions,
    SearchOptions, TaskOptions, TaskSource,
};
use headsearch::tasks::TaskKind;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let weights = dir.path().join("base.hsw");
    cmd_pretrain(&PretrainOptions {
        out: weights.clone(),
        seed: 0,
        dims: EncoderDims::default(),
        settings: PretrainSettings {
            steps: 600,
            ..PretrainSettings::default()
        },
    })?;

    let runs = dir.path().join("runs");
    for kind in [TaskKind::Keyword, TaskKind::Majority] {
        let task = TaskOptions::new(TaskSource::Synthetic(kind), true);
        let outcome = cmd_search(&SearchOptions {
            budget_max: Some(3),
            weights: weights.clone(),
            ..SearchOptions::new(task.clone(), runs.join(format!("search-{kind}")))
        })?;
        println!("{kind}: {} trials, best val {:.3}", outcome.trials.len(), outcome.best.val_acc);
        cmd_baseline(&BaselineOptions {
            budget: Some(3),
            weights: weights.clone(),
            ..BaselineOptions::new(task, runs.join(format!("baseline-{kind}")))
        })?;
    }

    let report = cmd_report(&ReportOptions {
        runs: vec![runs],
        out: dir.path().join("report"),
        tasks: Vec::new(),
    })?;
    print!("{}\n{}", report.architecture.to_markdown(), report.accuracy.to_markdown());
    Ok(())
}
