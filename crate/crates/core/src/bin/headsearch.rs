use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use headsearch::bohb::SamplerParams;
use headsearch::encoder::{EncoderDims, PretrainSettings};
use headsearch::run::{
    cmd_baseline, cmd_pretrain, cmd_report, cmd_search, cmd_space_cardinality, cmd_space_validate, resolve_weights,
    BaselineOptions, PretrainOptions, ReportOptions, SearchOptions, TaskOptions, TaskSource,
};
use headsearch::trainer::TrainSettings;

#[derive(Parser)]
#[command(name = "headsearch", version, about = "Search classification heads for a pretrained encoder")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain the base encoder on the synthetic corpus.
    Pretrain {
        #[arg(long, default_value_t = PretrainSettings::default().steps)]
        steps: u64,
        /// Defaults to $HEADSEARCH_WEIGHTS or weights/base.hsw.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = PretrainSettings::default().lr)]
        lr: f64,
    },
    /// Hyperband search with density-ratio proposals.
    Search {
        #[command(flatten)]
        common: Common,
        /// Maximum epoch budget R (default 9, or 10 with --small).
        #[arg(long)]
        budget_max: Option<u32>,
        #[arg(long, default_value_t = 3)]
        eta: u32,
        #[arg(long, default_value_t = 1)]
        parallel: usize,
    },
    /// Train the single dense layer baseline.
    Baseline {
        #[command(flatten)]
        common: Common,
        /// Epochs (default 5, or 10 with --small).
        #[arg(long)]
        budget: Option<u32>,
        #[arg(long)]
        freeze_base: bool,
    },
    /// Architecture and accuracy tables from run directories.
    Report {
        /// Run directories, or directories containing them.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, default_value = "report")]
        out: PathBuf,
        /// Comma-separated task columns, in order.
        #[arg(long, value_delimiter = ',')]
        tasks: Vec<String>,
    },
    /// Inspect the head search space.
    Space {
        #[arg(long, conflicts_with = "validate", required_unless_present = "validate")]
        cardinality: bool,
        /// Head config JSON file to check.
        #[arg(long)]
        validate: Option<PathBuf>,
        #[arg(long, default_value_t = EncoderDims::default().dim)]
        base_dim: usize,
    },
}

#[derive(Args)]
struct Common {
    /// Synthetic task name or tsv:<path>.
    #[arg(long)]
    task: TaskSource,
    #[arg(long)]
    small: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0)]
    data_seed: u64,
    #[arg(long, default_value = "sentence")]
    text_column: String,
    #[arg(long, default_value = "label")]
    label_column: String,
    #[arg(long)]
    out: PathBuf,
    /// Defaults to $HEADSEARCH_WEIGHTS or weights/base.hsw.
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long, default_value_t = TrainSettings::default().base_lr)]
    lr: f64,
    #[arg(long, default_value_t = TrainSettings::default().batch_size)]
    batch_size: usize,
    /// Record measured wall time in trials.
    #[arg(long)]
    wall_time: bool,
}

impl Common {
    fn task(&self) -> TaskOptions {
        TaskOptions {
            data_seed: self.data_seed,
            text_column: self.text_column.clone(),
            label_column: self.label_column.clone(),
            ..TaskOptions::new(self.task.clone(), self.small)
        }
    }

    fn train(&self) -> TrainSettings {
        TrainSettings {
            base_lr: self.lr,
            batch_size: self.batch_size,
            ..TrainSettings::default()
        }
    }
}

fn run(cli: Cli) -> headsearch::Result<()> {
    match cli.command {
        Command::Pretrain { steps, out, seed, lr } => {
            let out = resolve_weights(out.as_deref());
            let report = cmd_pretrain(&PretrainOptions {
                out: out.clone(),
                seed,
                dims: EncoderDims::default(),
                settings: PretrainSettings {
                    steps,
                    lr,
                    ..PretrainSettings::default()
                },
            })?;
            println!(
                "wrote {}: mlm loss {:.3} -> {:.3}, order acc {:.3} -> {:.3}",
                out.display(),
                report.initial_mlm_loss,
                report.final_mlm_loss,
                report.initial_order_acc,
                report.final_order_acc
            );
        }
        Command::Search {
            common,
            budget_max,
            eta,
            parallel,
        } => {
            let outcome = cmd_search(&SearchOptions {
                task: common.task(),
                budget_max,
                eta,
                seed: common.seed,
                parallel,
                out: common.out.clone(),
                weights: resolve_weights(common.weights.as_deref()),
                train: common.train(),
                sampler: SamplerParams::default(),
                wall_time: common.wall_time,
            })?;
            println!(
                "{} trials in {}; best trial {} val {:.4} test {:.4}",
                outcome.trials.len(),
                outcome.dir.display(),
                outcome.best.trial_id,
                outcome.best.val_acc,
                outcome.best.test_acc
            );
        }
        Command::Baseline {
            common,
            budget,
            freeze_base,
        } => {
            let trial = cmd_baseline(&BaselineOptions {
                task: common.task(),
                budget,
                seed: common.seed,
                freeze_base,
                out: common.out.clone(),
                weights: resolve_weights(common.weights.as_deref()),
                train: common.train(),
                wall_time: common.wall_time,
            })?;
            println!(
                "baseline {} epochs: val {:.4} test {:.4}",
                trial.budget_epochs, trial.val_acc, trial.test_acc
            );
        }
        Command::Report { runs, out, tasks } => {
            let report = cmd_report(&ReportOptions { runs, out, tasks })?;
            print!("{}\n{}", report.architecture.to_markdown(), report.accuracy.to_markdown());
        }
        Command::Space {
            cardinality,
            validate,
            base_dim,
        } => {
            if cardinality {
                println!("{}", cmd_space_cardinality());
            }
            if let Some(path) = validate {
                let violations = cmd_space_validate(&path, base_dim)?;
                if violations.is_empty() {
                    println!("ok");
                } else {
                    for v in &violations {
                        println!("{v}");
                    }
                    return Err(headsearch::Error::Data(format!(
                        "{}: {} violation(s)",
                        path.display(),
                        violations.len()
                    )));
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
