use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;

use cil_qud::config::step_schedule;
use cil_qud::harness::{load_config, run_bounds_experiment, run_experiment, BoundKind, DatasetSpec, ExperimentConfig, SplitConfig};
use cil_qud::report::{read_records, render_from_records, render_summary};
use cil_qud::synthetic::SyntheticConfig;
use cil_qud::Error;

#[derive(Parser)]
#[command(name = "cilqud", version, about = "Class-incremental training with queried unlabeled data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train through the task stream and write records, summary and plots.
    Run {
        #[command(flatten)]
        common: Common,
    },
    /// Train the non-incremental reference models.
    Bounds {
        #[command(flatten)]
        common: Common,
        /// mt_lower, mt_upper, mtat_lower, mtat_upper or all.
        #[arg(long, default_value = "all")]
        bound: String,
    },
    /// Re-render the summary and plots from records files.
    Report {
        #[arg(long, required = true, num_args = 1..)]
        records: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    /// TOML experiment file. Without one a synthetic 5x2 stream is used.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed; every other seed is derived from it.
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// standard or robust.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    memory_per_class: Option<usize>,
    /// feature_knn, largest_logit, random or none.
    #[arg(long)]
    query_method: Option<String>,
    #[arg(long)]
    query_budget: Option<usize>,
    /// Number of epochs; the learning-rate schedule is rescaled to match.
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    lambda_lwf: Option<f64>,
    #[arg(long)]
    gamma1: Option<f64>,
    #[arg(long)]
    gamma2: Option<f64>,
    #[arg(long)]
    kd_temperature: Option<f64>,
    /// kd or ft.
    #[arg(long)]
    lwf_kind: Option<String>,
    /// rkd, rft, kd or ft.
    #[arg(long)]
    robust_lwf_kind: Option<String>,
    /// queried or stored.
    #[arg(long)]
    lwf_data: Option<String>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    rtc: Option<bool>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    auxiliary_head: Option<bool>,
    #[arg(long)]
    cem_k: Option<usize>,
    #[arg(long)]
    checkpoints: bool,
    /// Print the resolved configuration as TOML and exit.
    #[arg(long)]
    print_config: bool,
}

fn named<T: DeserializeOwned>(flag: &str, value: &str) -> Result<T, Error> {
    serde_json::from_value(serde_json::Value::String(value.to_string()))
        .map_err(|_| Error::Config(format!("unknown value {value:?} for --{flag}")))
}

fn default_config() -> ExperimentConfig {
    let text = "[dataset]\nkind = \"synthetic\"\n[split]\nclasses_per_task = 2\ntask_count = 5\n";
    let cfg: ExperimentConfig = toml::from_str(text).expect("built-in config parses");
    debug_assert!(matches!(cfg.dataset, DatasetSpec::Synthetic(ref s) if *s == SyntheticConfig::default()));
    debug_assert_eq!(cfg.split, SplitConfig { classes_per_task: 2, task_count: 5, class_order_seed: None, validation_fraction: 0.1 });
    cfg
}

fn resolve(c: &Common) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &c.config {
        Some(p) => load_config(p)?,
        None => default_config(),
    };
    if let Some(v) = &c.output_dir {
        cfg.output_dir = v.clone();
    }
    if let Some(v) = &c.mode {
        cfg.mode = named("mode", v)?;
    }
    if let Some(v) = c.memory_per_class {
        cfg.memory_per_class = v;
    }
    if let Some(v) = &c.query_method {
        cfg.query.method = named("query-method", v)?;
    }
    if let Some(v) = c.query_budget {
        cfg.query.budget_per_class = v;
    }
    if c.epochs.is_some() || c.learning_rate.is_some() {
        let epochs = c.epochs.unwrap_or(cfg.session.epochs);
        let lr = c.learning_rate.unwrap_or_else(|| cfg.session.learning_rate(0));
        cfg.session.epochs = epochs;
        cfg.session.lr_schedule = step_schedule(epochs, lr);
    }
    let h = &mut cfg.session.hyperparameters;
    if let Some(v) = c.lambda_lwf {
        h.lambda_lwf = v;
    }
    if let Some(v) = c.gamma1 {
        h.gamma1 = v;
    }
    if let Some(v) = c.gamma2 {
        h.gamma2 = v;
    }
    if let Some(v) = c.kd_temperature {
        h.kd_temperature = v;
    }
    if let Some(v) = &c.lwf_kind {
        h.lwf_kind = named("lwf-kind", v)?;
    }
    if let Some(v) = &c.robust_lwf_kind {
        h.robust_lwf_kind = named("robust-lwf-kind", v)?;
    }
    if let Some(v) = c.rtc {
        h.use_rtc = v;
    }
    if let Some(v) = &c.lwf_data {
        cfg.method.lwf_data = named("lwf-data", v)?;
    }
    if let Some(v) = c.auxiliary_head {
        cfg.method.auxiliary_head = v;
    }
    if let Some(v) = c.cem_k {
        cfg.evaluation.cem.k_neighbors = v;
    }
    cfg.checkpoints |= c.checkpoints;
    cfg.validate()?;
    Ok(cfg)
}

fn print_config(cfg: &ExperimentConfig) -> Result<(), Error> {
    let text = toml::to_string_pretty(cfg).map_err(|e| Error::Config(e.to_string()))?;
    print!("{text}");
    Ok(())
}

fn execute(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Run { common } => {
            let cfg = resolve(&common)?;
            if common.print_config {
                return print_config(&cfg);
            }
            let report = run_experiment(&cfg, common.seed)?;
            print!("{}", render_summary(&report.records()));
            eprintln!("wrote {} ({:.1}s)", cfg.output_dir.display(), report.wall_clock_secs);
        }
        Command::Bounds { common, bound } => {
            let cfg = resolve(&common)?;
            if common.print_config {
                return print_config(&cfg);
            }
            let kinds: Vec<BoundKind> = if bound == "all" { BoundKind::ALL.to_vec() } else { vec![bound.parse()?] };
            for kind in kinds {
                let report = run_bounds_experiment(&cfg, kind, common.seed)?;
                println!("{}", kind.as_str());
                print!("{}", render_summary(&report.records()));
            }
        }
        Command::Report { records, out } => {
            let mut all = Vec::new();
            for p in &records {
                all.extend(read_records(p)?);
            }
            render_from_records(&all, &out)?;
            print!("{}", render_summary(&all));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::FAILURE
        }
    }
}
