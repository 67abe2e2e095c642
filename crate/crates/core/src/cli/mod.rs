//! Command-line entry points: `train`, `evaluate`, `sweep` and `synth`.

mod config;

pub use config::{CheckpointChoice, RunConfig, OUTPUT_ROOT_ENV};

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use crate::data::{self, DataError, Prepared};
use crate::metrics::{self, MetricsError, MetricsReport};
use crate::model::{ModelError, ModelLayout, ModelParams};
use crate::synth;
use crate::trainer::{self, history_csv, TrainError, TrainerConfig};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("cannot write {path}: {source}")]
    Output {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    /// 2: bad configuration or unreadable dataset; 3: non-finite training
    /// values; 4: checkpoint problems; 1: anything else.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Data(_) => 2,
            CliError::Train(TrainError::Config(_)) => 2,
            CliError::Train(TrainError::NonFinite { .. }) => 3,
            CliError::Model(ModelError::Checkpoint { .. }) => 4,
            CliError::Model(ModelError::Config(_)) => 4,
            CliError::Metrics(MetricsError::Model(_)) => 4,
            _ => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "fairmeta", version, about = "Fairness-aware meta-learned cold-start recommender")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Meta-train a model and write checkpoints, history and reports.
    Train(RunArgs),
    /// Evaluate a checkpoint (or a run directory) on the test split.
    Evaluate {
        /// Checkpoint file, or a run directory holding `checkpoint_last.json`/`checkpoint_best.json`.
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Vary λ and γ one at a time over their grids.
    Sweep(RunArgs),
    /// Generate a synthetic dataset in ML-100K layout.
    Synth(RunArgs),
}

#[derive(Debug, Args, Default)]
pub struct RunArgs {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset directory.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub schema: Option<String>,
    #[arg(long)]
    pub sensitive: Option<String>,
    /// One of melu, clover, clover_wo, clover_t2, clover_t1t2.
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Threads for per-task work; results are identical for any value.
    #[arg(long)]
    pub workers: Option<usize>,
    /// Output directory (default: `$FAIRMETA_OUT/<name>` or `runs/<name>`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

impl RunArgs {
    pub fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        let text = |v: &dyn ToString| v.to_string();
        let pairs: [(&str, Option<String>); 10] = [
            ("data", self.data.as_ref().map(|p| p.display().to_string())),
            ("schema", self.schema.clone()),
            ("sensitive", self.sensitive.clone()),
            ("mode", self.mode.clone()),
            ("lambda", self.lambda.as_ref().map(|v| text(v))),
            ("gamma", self.gamma.as_ref().map(|v| text(v))),
            ("seed", self.seed.as_ref().map(|v| text(v))),
            ("epochs", self.epochs.as_ref().map(|v| text(v))),
            ("workers", self.workers.as_ref().map(|v| text(v))),
            ("output", self.out.as_ref().map(|p| p.display().to_string())),
        ];
        for (k, v) in pairs {
            if let Some(v) = v {
                cfg.set(k, &v)?;
            }
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("--set expects KEY=VALUE, got '{kv}'")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|source| CliError::Output {
        path: path.to_path_buf(),
        source,
    })
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|source| CliError::Output {
        path: path.to_path_buf(),
        source,
    })
}

/// Crate version plus `git describe` output when available.
pub fn version_string() -> String {
    let git = std::process::Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".into());
    format!("fairmeta {} (git {git})", env!("CARGO_PKG_VERSION"))
}

pub fn prepare(cfg: &RunConfig) -> Result<Prepared, CliError> {
    if !cfg.data.is_dir() {
        return Err(CliError::Config(format!("dataset directory {} not found", cfg.data.display())));
    }
    let raw = data::load_movielens(&cfg.data, cfg.schema)?;
    Ok(data::prepare(raw, &cfg.sensitive, (0.7, 0.1, 0.2), cfg.split_seed)?)
}

fn write_report(dir: &Path, stem: &str, report: &MetricsReport) -> Result<(), CliError> {
    write(&dir.join(format!("{stem}.json")), report.to_json())?;
    write(&dir.join(format!("{stem}.csv")), report.headline_csv())?;
    write(&dir.join(format!("{stem}_users.csv")), report.per_user_csv())
}

/// Result of one training run as written to its directory.
pub struct TrainRun {
    pub dir: PathBuf,
    pub last: MetricsReport,
    pub best: MetricsReport,
}

/// Trains into `dir`: resolved config, version, seed, per-epoch checkpoint,
/// best checkpoint, history CSV and reports for both checkpoints.
pub fn train_into(cfg: &RunConfig, prepared: &Prepared, dir: &Path) -> Result<TrainRun, CliError> {
    cfg.trainer.validate()?;
    create_dir(dir)?;
    write(&dir.join("config.resolved"), cfg.resolved())?;
    write(&dir.join("VERSION"), version_string() + "\n")?;
    write(&dir.join("seed"), format!("{}\n", cfg.trainer.seed))?;
    let layout = ModelLayout::for_prepared(prepared)?;
    let last_path = dir.join("checkpoint_last.json");
    let mut history = Vec::new();
    let outcome = trainer::train_with(layout, &prepared.tasks, &cfg.trainer, |record, params| {
        history.push(record.clone());
        params
            .save(&last_path)
            .map_err(TrainError::from)
            .and_then(|_| {
                fs::write(dir.join("history.csv"), history_csv(&history))
                    .map_err(|e| TrainError::Config(format!("cannot write history: {e}")))
            })
    });
    let outcome = match outcome {
        Ok(o) => o,
        Err(e @ TrainError::NonFinite { .. }) => {
            write(&dir.join("nan_dump.txt"), format!("{e}\n"))?;
            return Err(e.into());
        }
        Err(e) => return Err(e.into()),
    };
    outcome.params.save(&last_path)?;
    outcome.best_params.save(&dir.join("checkpoint_best.json"))?;
    write(&dir.join("history.csv"), history_csv(&outcome.history))?;
    let last = metrics::evaluate(&outcome.params, &prepared.tasks, &cfg.trainer)?;
    let best = metrics::evaluate(&outcome.best_params, &prepared.tasks, &cfg.trainer)?;
    write_report(dir, "report_last", &last)?;
    write_report(dir, "report_best", &best)?;
    Ok(TrainRun {
        dir: dir.to_path_buf(),
        last,
        best,
    })
}

fn cmd_train(args: &RunArgs) -> Result<(), CliError> {
    let cfg = args.resolve()?;
    let prepared = prepare(&cfg)?;
    let dir = cfg.output_dir(&cfg.run_name());
    let run = train_into(&cfg, &prepared, &dir)?;
    println!("run directory: {}", run.dir.display());
    println!("last epoch:\n{}", run.last.table());
    println!("best validation epoch:\n{}", run.best.table());
    Ok(())
}

fn cmd_evaluate(checkpoint: &Path, args: &RunArgs) -> Result<(), CliError> {
    let cfg = args.resolve()?;
    let path = if checkpoint.is_dir() {
        checkpoint.join(match cfg.checkpoint {
            CheckpointChoice::Last => "checkpoint_last.json",
            CheckpointChoice::Best => "checkpoint_best.json",
        })
    } else {
        checkpoint.to_path_buf()
    };
    let params = ModelParams::load(&path)?;
    let prepared = prepare(&cfg)?;
    let expected = ModelLayout::for_prepared(&prepared)?;
    if params.layout() != &expected {
        return Err(CliError::Model(ModelError::Config(format!(
            "checkpoint {} does not match the configured dataset encoding",
            path.display()
        ))));
    }
    let report = metrics::evaluate(&params, &prepared.tasks, &cfg.trainer)?;
    let dir = match &cfg.output {
        Some(o) => o.clone(),
        None => path.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf),
    };
    create_dir(&dir)?;
    write_report(&dir, "report", &report)?;
    println!("{}", report.table());
    Ok(())
}

/// Vary-one-hold-other grid: every λ at the configured γ, then every γ at the
/// configured λ, without repeating the shared centre cell.
pub fn sweep_cells(cfg: &TrainerConfig, lambdas: &[f64], gammas: &[f64]) -> Vec<(&'static str, f64, f64)> {
    let mut cells: Vec<(&'static str, f64, f64)> = Vec::new();
    for &l in lambdas {
        cells.push(("lambda", l, cfg.gamma));
    }
    for &g in gammas {
        if !cells.iter().any(|c| c.1 == cfg.lambda && c.2 == g) {
            cells.push(("gamma", cfg.lambda, g));
        }
    }
    cells
}

/// Marks, per varied parameter, the cell with the lowest AUC + CF + GF among
/// cells whose MAE is within 0.03 of that row's best MAE. `centre` is the
/// held (λ, γ) pair.
pub fn grid_best(rows: &[(&str, f64, f64, MetricsReport)], centre: (f64, f64)) -> Vec<bool> {
    let mut flags = vec![false; rows.len()];
    for lambda_row in [true, false] {
        let members: Vec<usize> = (0..rows.len())
            .filter(|&i| if lambda_row { rows[i].2 == centre.1 } else { rows[i].1 == centre.0 })
            .collect();
        let best_mae = members.iter().map(|&i| rows[i].3.mae).fold(f64::INFINITY, f64::min);
        let score = |r: &MetricsReport| r.auc.unwrap_or(1.0) + r.cf + r.gf.unwrap_or(1.0);
        if let Some(&b) = members
            .iter()
            .filter(|&&i| rows[i].3.mae <= best_mae + 0.03)
            .min_by(|&&a, &&b| score(&rows[a].3).total_cmp(&score(&rows[b].3)))
        {
            flags[b] = true;
        }
    }
    flags
}

fn cmd_sweep(args: &RunArgs) -> Result<(), CliError> {
    let cfg = args.resolve()?;
    let prepared = prepare(&cfg)?;
    let root = cfg.output_dir(&format!("sweep-{}", cfg.run_name()));
    create_dir(&root)?;
    write(&root.join("config.resolved"), cfg.resolved())?;
    let mut rows = Vec::new();
    for (param, lambda, gamma) in sweep_cells(&cfg.trainer, &cfg.lambda_grid, &cfg.gamma_grid) {
        let mut cell = cfg.clone();
        cell.trainer.lambda = lambda;
        cell.trainer.gamma = gamma;
        let dir = root.join(format!("lambda{lambda}_gamma{gamma}"));
        cell.output = Some(dir.clone());
        log::info!("sweep cell λ={lambda} γ={gamma}");
        let run = train_into(&cell, &prepared, &dir)?;
        rows.push((param, lambda, gamma, run.last));
    }
    let flags = grid_best(&rows, (cfg.trainer.lambda, cfg.trainer.gamma));
    let mut csv = String::from("varied,lambda,gamma,MAE,NDCG,AUC,CF,GF,grid_best\n");
    println!("{:>7} {:>7} {:>7} {:>8} {:>8} {:>8} {:>8} {:>8}", "varied", "lambda", "gamma", "MAE", "NDCG", "AUC", "CF", "GF");
    for ((param, l, g, r), best) in rows.iter().zip(&flags) {
        let vals = r.headline_values();
        let cells: Vec<String> = vals.iter().map(|v| v.map_or("NA".into(), |x| x.to_string())).collect();
        csv.push_str(&format!("{param},{l},{g},{},{best}\n", cells.join(",")));
        let short: Vec<String> = vals.iter().map(|v| v.map_or("NA".into(), |x| format!("{x:.4}"))).collect();
        println!(
            "{param:>7} {l:>7} {g:>7} {} {}",
            short.iter().map(|s| format!("{s:>8}")).collect::<Vec<_>>().join(" "),
            if *best { "*" } else { "" }
        );
    }
    write(&root.join("sweep_summary.csv"), csv)?;
    Ok(())
}

fn cmd_synth(args: &RunArgs) -> Result<(), CliError> {
    let cfg = args.resolve()?;
    let dir = cfg.output_dir(&format!("synth-bias{}-seed{}", cfg.synth.bias_strength, cfg.synth.seed));
    let raw = synth::generate(&cfg.synth)?;
    synth::write_ml100k(&raw, &dir)?;
    write(&dir.join("synth.config"), cfg.resolved())?;
    println!(
        "wrote {} users, {} items, {} ratings to {}",
        raw.users.len(),
        raw.items.len(),
        raw.interactions.len(),
        dir.display()
    );
    Ok(())
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Evaluate { checkpoint, run } => cmd_evaluate(checkpoint, run),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Synth(a) => cmd_synth(a),
    }
}

/// Parses the process arguments, runs the command and maps errors to exit codes.
pub fn main_entry() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
