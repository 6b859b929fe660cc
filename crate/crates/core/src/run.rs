//! Command implementations behind the `headsearch` binary: run
//! directories, persisted trials and report generation.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bohb::{BohbSampler, SamplerParams};
use crate::encoder::{pretrain, EncoderDims, EncoderWeights, PretrainReport, PretrainSettings, SyntheticCorpus, Tokenizer};
use crate::error::{Error, Result};
use crate::hyperband::{best_trial, plan, run_search, Evaluator, SearchState};
use crate::report::{AccuracyTable, ArchitectureTable};
use crate::searchspace::{baseline_config, cardinality, ArchitectureColumn, HeadConfig};
use crate::tasks::{generate, load_tsv, make_small, TaskDataset, TaskKind, SMALL_TRAIN};
use crate::trainer::{fine_tune, TrainSettings, Trial};

pub const WEIGHTS_ENV: &str = "HEADSEARCH_WEIGHTS";
pub const DEFAULT_WEIGHTS: &str = "weights/base.hsw";

pub const SETTINGS_FILE: &str = "settings.json";
pub const TRIALS_FILE: &str = "trials.jsonl";
pub const BEST_CONFIG_FILE: &str = "best_config.json";
pub const BASELINE_FILE: &str = "baseline.json";

pub const FULL_BUDGET_MAX: u32 = 9;
pub const SMALL_BUDGET_MAX: u32 = 10;
pub const FULL_BASELINE_EPOCHS: u32 = 5;
pub const SMALL_BASELINE_EPOCHS: u32 = 10;

/// Explicit path, then `HEADSEARCH_WEIGHTS`, then [`DEFAULT_WEIGHTS`].
pub fn resolve_weights(explicit: Option<&Path>) -> PathBuf {
    explicit
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(WEIGHTS_ENV).filter(|v| !v.is_empty()).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_WEIGHTS))
}

/// Where a task comes from: a synthetic task name or `tsv:<path>`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TaskSource {
    Synthetic(TaskKind),
    Tsv(PathBuf),
}

impl std::str::FromStr for TaskSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.strip_prefix("tsv:") {
            Some("") => Err(Error::Data("tsv: task needs a path".into())),
            Some(path) => Ok(TaskSource::Tsv(PathBuf::from(path))),
            None => s.parse().map(TaskSource::Synthetic),
        }
    }
}

impl std::fmt::Display for TaskSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TaskSource::Synthetic(k) => write!(f, "{k}"),
            TaskSource::Tsv(p) => write!(f, "tsv:{}", p.display()),
        }
    }
}

/// Dataset selection shared by `search` and `baseline`.
#[derive(Clone, Debug)]
pub struct TaskOptions {
    pub source: TaskSource,
    pub small: bool,
    /// Seeds data generation and the small-split draw; independent of the
    /// search seed so every run of a task sees the same data.
    pub data_seed: u64,
    pub text_column: String,
    pub label_column: String,
}

impl TaskOptions {
    pub fn new(source: TaskSource, small: bool) -> Self {
        Self {
            source,
            small,
            data_seed: 0,
            text_column: "sentence".into(),
            label_column: "label".into(),
        }
    }

    pub fn load(&self) -> Result<TaskDataset> {
        let task = match &self.source {
            TaskSource::Synthetic(kind) => generate(*kind, self.data_seed),
            TaskSource::Tsv(path) => load_tsv(
                path,
                &self.text_column,
                &self.label_column,
                &Tokenizer::default(),
                self.data_seed,
            )?,
        };
        if self.small {
            let mut rng = ChaCha8Rng::seed_from_u64(self.data_seed);
            rng.set_stream(1);
            make_small(&task, SMALL_TRAIN, &mut rng)
        } else {
            Ok(task)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunKind {
    Search,
    Baseline,
}

/// `settings.json` of a run directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub kind: RunKind,
    /// Report column, e.g. `keyword` or `keyword-small`.
    pub task: String,
    pub task_source: String,
    pub small: bool,
    pub seed: u64,
    pub data_seed: u64,
    /// Maximum budget of a search; training budget of a baseline.
    pub budget_max: u32,
    pub eta: Option<u32>,
    pub parallel: usize,
    pub train: TrainSettings,
    pub sampler: Option<SamplerParams>,
    pub weights: PathBuf,
    pub trials: Option<String>,
    pub best_config: Option<HeadConfig>,
}

#[derive(Clone, Debug)]
pub struct SearchOptions {
    pub task: TaskOptions,
    /// Defaults to 9, or 10 for small tasks.
    pub budget_max: Option<u32>,
    pub eta: u32,
    pub seed: u64,
    pub parallel: usize,
    pub out: PathBuf,
    pub weights: PathBuf,
    pub train: TrainSettings,
    pub sampler: SamplerParams,
    /// Record measured wall time; off by default so reruns are
    /// byte-identical.
    pub wall_time: bool,
}

impl SearchOptions {
    pub fn new(task: TaskOptions, out: impl Into<PathBuf>) -> Self {
        Self {
            task,
            budget_max: None,
            eta: 3,
            seed: 0,
            parallel: 1,
            out: out.into(),
            weights: resolve_weights(None),
            train: TrainSettings::default(),
            sampler: SamplerParams::default(),
            wall_time: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SearchOutcome {
    pub dir: PathBuf,
    pub trials: Vec<Trial>,
    pub best: Trial,
}

struct FineTune<'a> {
    task: &'a TaskDataset,
    base: &'a EncoderWeights,
    settings: TrainSettings,
    wall_time: bool,
}

impl Evaluator for FineTune<'_> {
    fn evaluate(&self, config: &HeadConfig, budget_epochs: u32, seed: u64) -> Result<Trial> {
        let mut t = fine_tune(config, self.task, self.base, budget_epochs, seed, &self.settings)?;
        if !self.wall_time {
            t.wall_ms = 0;
        }
        Ok(t)
    }
}

fn task_label(source: &TaskSource, small: bool) -> String {
    let name = match source {
        TaskSource::Synthetic(k) => k.name().to_string(),
        TaskSource::Tsv(p) => p
            .file_stem()
            .map_or_else(|| "tsv".to_string(), |s| s.to_string_lossy().into_owned()),
    };
    if small {
        format!("{name}-small")
    } else {
        name
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Runs Hyperband with density-ratio proposals and writes `trials.jsonl`,
/// `best_config.json` and `settings.json` into `opts.out`.
pub fn cmd_search(opts: &SearchOptions) -> Result<SearchOutcome> {
    opts.sampler.check()?;
    let budget_max = opts
        .budget_max
        .unwrap_or(if opts.task.small { SMALL_BUDGET_MAX } else { FULL_BUDGET_MAX });
    let plan = plan(budget_max, opts.eta)?;
    let base = EncoderWeights::load(&opts.weights)?;
    let task = opts.task.load()?;
    let base_dim = base.dims().dim;
    let mut sampler = BohbSampler::new(opts.sampler, base_dim)?;

    create_dir(&opts.out)?;
    let trials_path = opts.out.join(TRIALS_FILE);
    let file = fs::File::create(&trials_path).map_err(|e| Error::io(&trials_path, e))?;
    let mut writer = BufWriter::new(file);
    let evaluator = FineTune {
        task: &task,
        base: &base,
        settings: opts.train,
        wall_time: opts.wall_time,
    };
    log::info!(
        "searching {} ({} trials, R={budget_max}, eta={})",
        task.name,
        plan.trial_count(),
        opts.eta
    );
    let trials = {
        let sink = |t: &Trial| -> Result<()> {
            let line = serde_json::to_string(t)?;
            writeln!(writer, "{line}")
                .and_then(|()| writer.flush())
                .map_err(|e| Error::io(&trials_path, e))
        };
        let mut state = SearchState::new(opts.seed, opts.parallel, sink)?;
        run_search(&plan, &mut sampler, &evaluator, &mut state)?
    };
    let best = best_trial(&trials, budget_max)
        .cloned()
        .ok_or_else(|| Error::Data(format!("search on {} produced no trial at budget {budget_max}", task.name)))?;
    write_json(&opts.out.join(BEST_CONFIG_FILE), &best.config)?;

    let label = task_label(&opts.task.source, opts.task.small);
    let record = RunRecord {
        run_id: format!("search-{label}-s{}", opts.seed),
        kind: RunKind::Search,
        task: label,
        task_source: opts.task.source.to_string(),
        small: opts.task.small,
        seed: opts.seed,
        data_seed: opts.task.data_seed,
        budget_max,
        eta: Some(opts.eta),
        parallel: opts.parallel,
        train: opts.train,
        sampler: Some(opts.sampler),
        weights: opts.weights.clone(),
        trials: Some(TRIALS_FILE.into()),
        best_config: Some(best.config),
    };
    write_json(&opts.out.join(SETTINGS_FILE), &record)?;
    Ok(SearchOutcome {
        dir: opts.out.clone(),
        trials,
        best,
    })
}

#[derive(Clone, Debug)]
pub struct BaselineOptions {
    pub task: TaskOptions,
    /// Defaults to 5 epochs, or 10 for small tasks.
    pub budget: Option<u32>,
    pub seed: u64,
    pub freeze_base: bool,
    pub out: PathBuf,
    pub weights: PathBuf,
    pub train: TrainSettings,
    pub wall_time: bool,
}

impl BaselineOptions {
    pub fn new(task: TaskOptions, out: impl Into<PathBuf>) -> Self {
        Self {
            task,
            budget: None,
            seed: 0,
            freeze_base: false,
            out: out.into(),
            weights: resolve_weights(None),
            train: TrainSettings::default(),
            wall_time: false,
        }
    }
}

/// Trains the single-dense-layer head and writes `baseline.json` and
/// `settings.json` into `opts.out`.
pub fn cmd_baseline(opts: &BaselineOptions) -> Result<Trial> {
    let budget = opts
        .budget
        .unwrap_or(if opts.task.small { SMALL_BASELINE_EPOCHS } else { FULL_BASELINE_EPOCHS });
    let base = EncoderWeights::load(&opts.weights)?;
    let task = opts.task.load()?;
    let config = HeadConfig {
        freeze_base: opts.freeze_base,
        ..baseline_config()
    };
    let mut trial = fine_tune(&config, &task, &base, budget, opts.seed, &opts.train)?;
    if !opts.wall_time {
        trial.wall_ms = 0;
    }
    create_dir(&opts.out)?;
    write_json(&opts.out.join(BASELINE_FILE), &trial)?;
    let label = task_label(&opts.task.source, opts.task.small);
    let frozen = if opts.freeze_base { "-frozen" } else { "" };
    let record = RunRecord {
        run_id: format!("baseline{frozen}-{label}-s{}", opts.seed),
        kind: RunKind::Baseline,
        task: label,
        task_source: opts.task.source.to_string(),
        small: opts.task.small,
        seed: opts.seed,
        data_seed: opts.task.data_seed,
        budget_max: budget,
        eta: None,
        parallel: 1,
        train: opts.train,
        sampler: None,
        weights: opts.weights.clone(),
        trials: None,
        best_config: Some(config),
    };
    write_json(&opts.out.join(SETTINGS_FILE), &record)?;
    Ok(trial)
}

/// Every line of a `trials.jsonl` file.
pub fn read_trials(path: &Path) -> Result<Vec<Trial>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            detail: format!("line {}: {e}", n + 1),
        })?);
    }
    Ok(out)
}

/// A run directory read back from disk.
#[derive(Clone, Debug)]
pub struct LoadedRun {
    pub dir: PathBuf,
    pub record: RunRecord,
    /// The best max-budget trial of a search, or the baseline trial.
    pub result: Trial,
}

pub fn load_run(dir: &Path) -> Result<LoadedRun> {
    let record: RunRecord = read_json(&dir.join(SETTINGS_FILE))?;
    let result = match record.kind {
        RunKind::Baseline => read_json(&dir.join(BASELINE_FILE))?,
        RunKind::Search => {
            let trials = read_trials(&dir.join(record.trials.as_deref().unwrap_or(TRIALS_FILE)))?;
            best_trial(&trials, record.budget_max).cloned().ok_or_else(|| Error::Format {
                path: dir.join(TRIALS_FILE),
                detail: format!("no trial at budget {}", record.budget_max),
            })?
        }
    };
    Ok(LoadedRun {
        dir: dir.to_path_buf(),
        record,
        result,
    })
}

/// Run directories under each path: the path itself if it holds a
/// `settings.json`, otherwise its immediate subdirectories that do.
pub fn discover_runs(paths: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in paths {
        if p.join(SETTINGS_FILE).is_file() {
            out.push(p.clone());
            continue;
        }
        let entries = fs::read_dir(p).map_err(|e| Error::io(p, e))?;
        let mut dirs: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|d| d.join(SETTINGS_FILE).is_file())
            .collect();
        dirs.sort();
        out.extend(dirs);
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct ReportOptions {
    pub runs: Vec<PathBuf>,
    pub out: PathBuf,
    /// Report columns in order; every task found when empty.
    pub tasks: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct Report {
    pub architecture: ArchitectureTable,
    pub accuracy: AccuracyTable,
    pub files: Vec<PathBuf>,
}

fn task_order(name: &str) -> (usize, String) {
    let stem = name.strip_suffix("-small").unwrap_or(name);
    let rank = TaskKind::ALL
        .iter()
        .position(|k| k.name() == stem)
        .unwrap_or(TaskKind::ALL.len());
    (rank, name.to_string())
}

/// Builds both tables from persisted runs and writes `architecture.md`,
/// `architecture.csv`, `accuracy.md` and `accuracy.csv` into `opts.out`.
///
/// Accuracies are test accuracies averaged over every run of a task (one
/// per seed). Frozen-base baselines are ignored. The architecture column
/// shows the search run whose best trial has the highest validation
/// accuracy, ties to the first run in path order.
pub fn cmd_report(opts: &ReportOptions) -> Result<Report> {
    let mut search: BTreeMap<String, Vec<LoadedRun>> = BTreeMap::new();
    let mut base: BTreeMap<String, Vec<LoadedRun>> = BTreeMap::new();
    for dir in discover_runs(&opts.runs)? {
        let run = load_run(&dir)?;
        match run.record.kind {
            RunKind::Search => search.entry(run.record.task.clone()).or_default().push(run),
            RunKind::Baseline if !run.result.config.freeze_base => {
                base.entry(run.record.task.clone()).or_default().push(run)
            }
            RunKind::Baseline => {}
        }
    }
    let tasks = if opts.tasks.is_empty() {
        let mut all: Vec<String> = search.keys().chain(base.keys()).cloned().collect();
        all.sort_by_key(|t| task_order(t));
        all.dedup();
        all
    } else {
        opts.tasks.clone()
    };
    let mut missing = Vec::new();
    for t in &tasks {
        for (kind, map) in [("search", &search), ("baseline", &base)] {
            if !map.contains_key(t) {
                missing.push(format!("{t} ({kind})"));
            }
        }
    }
    if tasks.is_empty() || !missing.is_empty() {
        return Err(Error::Data(if tasks.is_empty() {
            "no runs found".into()
        } else {
            format!("missing runs: {}", missing.join(", "))
        }));
    }

    let mean_test = |runs: &[LoadedRun]| runs.iter().map(|r| r.result.test_acc).sum::<f64>() / runs.len() as f64;
    let base_acc: Vec<f64> = tasks.iter().map(|t| mean_test(&base[t])).collect();
    let tuned_acc: Vec<f64> = tasks.iter().map(|t| mean_test(&search[t])).collect();
    let columns = tasks
        .iter()
        .map(|t| {
            let runs = &search[t];
            let mut best = &runs[0];
            for r in &runs[1..] {
                if r.result.val_acc > best.result.val_acc {
                    best = r;
                }
            }
            ArchitectureColumn::from_config(&best.result.config)
        })
        .collect();
    let architecture = ArchitectureTable {
        tasks: tasks.clone(),
        columns,
    };
    let accuracy = AccuracyTable::new(tasks, base_acc, tuned_acc)?;

    create_dir(&opts.out)?;
    let outputs = [
        ("architecture.md", architecture.to_markdown()),
        ("architecture.csv", architecture.to_csv()?),
        ("accuracy.md", accuracy.to_markdown()),
        ("accuracy.csv", accuracy.to_csv()?),
    ];
    let mut files = Vec::with_capacity(outputs.len());
    for (name, text) in outputs {
        let path = opts.out.join(name);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        files.push(path);
    }
    Ok(Report {
        architecture,
        accuracy,
        files,
    })
}

#[derive(Clone, Debug)]
pub struct PretrainOptions {
    pub out: PathBuf,
    pub seed: u64,
    pub dims: EncoderDims,
    pub settings: PretrainSettings,
}

/// Pretrains a fresh encoder on the synthetic corpus and saves it.
pub fn cmd_pretrain(opts: &PretrainOptions) -> Result<PretrainReport> {
    let corpus = SyntheticCorpus::standard(opts.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let (weights, report) = pretrain(&corpus, opts.dims, &opts.settings, &mut rng)?;
    weights.save(&opts.out)?;
    Ok(report)
}

pub fn cmd_space_cardinality() -> u64 {
    cardinality()
}

/// Violations of the config stored in `path`; empty when it is valid.
pub fn cmd_space_validate(path: &Path, base_dim: usize) -> Result<Vec<String>> {
    let config: HeadConfig = read_json(path)?;
    Ok(config.violations(base_dim).iter().map(ToString::to_string).collect())
}
