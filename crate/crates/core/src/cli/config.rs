//! Flat `key = value` run configuration.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::data::Schema;
use crate::synth::SynthConfig;
use crate::trainer::{MetaGrad, Mode, TrainerConfig};

use super::CliError;

/// Environment variable naming the default output root.
pub const OUTPUT_ROOT_ENV: &str = "FAIRMETA_OUT";

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum CheckpointChoice {
    Last,
    Best,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data: PathBuf,
    pub schema: Schema,
    pub sensitive: String,
    pub split_seed: u64,
    pub output: Option<PathBuf>,
    pub trainer: TrainerConfig,
    pub lambda_grid: Vec<f64>,
    pub gamma_grid: Vec<f64>,
    /// Checkpoint `evaluate` reads from a run directory.
    pub checkpoint: CheckpointChoice,
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: PathBuf::from("data/ml-100k"),
            schema: Schema::Ml100k,
            sensitive: "gender".into(),
            split_seed: 0,
            output: None,
            trainer: TrainerConfig::default(),
            lambda_grid: vec![1e-2, 1e-1, 1.0, 5.0],
            gamma_grid: vec![1e-2, 1e-1, 1.0, 5.0],
            checkpoint: CheckpointChoice::Last,
            synth: SynthConfig::default(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, CliError> {
    value
        .parse()
        .map_err(|_| CliError::Config(format!("invalid value '{value}' for '{key}'")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, CliError> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(CliError::Config(format!("invalid boolean '{value}' for '{key}'"))),
    }
}

fn parse_grid(key: &str, value: &str) -> Result<Vec<f64>, CliError> {
    let grid: Vec<f64> = value
        .split(',')
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .map(|v| parse(key, v))
        .collect::<Result<_, _>>()?;
    if grid.is_empty() {
        return Err(CliError::Config(format!("'{key}' must list at least one value")));
    }
    Ok(grid)
}

fn grid_text(grid: &[f64]) -> String {
    grid.iter().map(f64::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Reads a config file on top of the defaults.
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<(), CliError> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let t = &mut self.trainer;
        let s = &mut self.synth;
        match key {
            "data" => self.data = PathBuf::from(value),
            "schema" => self.schema = value.parse().map_err(|e: crate::data::DataError| CliError::Config(e.to_string()))?,
            "sensitive" => self.sensitive = value.to_string(),
            "split_seed" => self.split_seed = parse(key, value)?,
            "output" => self.output = Some(PathBuf::from(value)),
            "alpha" => t.alpha = parse(key, value)?,
            "beta" => t.beta = parse(key, value)?,
            "inner_steps" => t.inner_steps = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "epochs" => t.epochs = parse(key, value)?,
            "lambda" => t.lambda = parse(key, value)?,
            "gamma" => t.gamma = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "mode" => t.mode = value.parse::<Mode>().map_err(CliError::Config)?,
            "grad_clip" => t.grad_clip = parse(key, value)?,
            "meta_grad" => {
                t.meta_grad = match value {
                    "first_order" => MetaGrad::FirstOrder,
                    "second_order" => MetaGrad::SecondOrder,
                    _ => return Err(CliError::Config(format!("invalid meta_grad '{value}'"))),
                }
            }
            "workers" => t.workers = parse(key, value)?,
            "argmax" => t.argmax = parse_bool(key, value)?,
            "lambda_grid" => self.lambda_grid = parse_grid(key, value)?,
            "gamma_grid" => self.gamma_grid = parse_grid(key, value)?,
            "checkpoint" => {
                self.checkpoint = match value {
                    "last" => CheckpointChoice::Last,
                    "best" => CheckpointChoice::Best,
                    _ => return Err(CliError::Config(format!("checkpoint must be last or best, got '{value}'"))),
                }
            }
            "synth.users" => s.n_users = parse(key, value)?,
            "synth.items" => s.n_items = parse(key, value)?,
            "synth.ratings_per_user" => s.ratings_per_user = parse(key, value)?,
            "synth.rating_levels" => s.n_rating_levels = parse(key, value)?,
            "synth.bias" => s.bias_strength = parse(key, value)?,
            "synth.latent_dim" => s.latent_dim = parse(key, value)?,
            "synth.bias_scale" => s.bias_scale = parse(key, value)?,
            "synth.noise" => s.noise = parse(key, value)?,
            "synth.seed" => s.seed = parse(key, value)?,
            other => return Err(CliError::Config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    /// Output directory: explicit setting, else `$FAIRMETA_OUT/<default>`,
    /// else `runs/<default>`.
    pub fn output_dir(&self, default_name: &str) -> PathBuf {
        match &self.output {
            Some(p) => p.clone(),
            None => {
                let root = std::env::var_os(OUTPUT_ROOT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
                root.join(default_name)
            }
        }
    }

    pub fn run_name(&self) -> String {
        format!("{}-seed{}", self.trainer.mode, self.trainer.seed)
    }

    /// Every setting as `key = value`, parseable by [`Self::apply_text`].
    pub fn resolved(&self) -> String {
        let t = &self.trainer;
        let s = &self.synth;
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            writeln!(out, "{k} = {v}").expect("write to string");
        };
        kv("data", self.data.display().to_string());
        kv("schema", self.schema.to_string());
        kv("sensitive", self.sensitive.clone());
        kv("split_seed", self.split_seed.to_string());
        if let Some(o) = &self.output {
            kv("output", o.display().to_string());
        }
        kv("mode", t.mode.to_string());
        kv("alpha", t.alpha.to_string());
        kv("beta", t.beta.to_string());
        kv("inner_steps", t.inner_steps.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("epochs", t.epochs.to_string());
        kv("lambda", t.lambda.to_string());
        kv("gamma", t.gamma.to_string());
        kv("seed", t.seed.to_string());
        kv("grad_clip", t.grad_clip.to_string());
        kv(
            "meta_grad",
            match t.meta_grad {
                MetaGrad::FirstOrder => "first_order",
                MetaGrad::SecondOrder => "second_order",
            }
            .into(),
        );
        kv("workers", t.workers.to_string());
        kv("argmax", t.argmax.to_string());
        kv("lambda_grid", grid_text(&self.lambda_grid));
        kv("gamma_grid", grid_text(&self.gamma_grid));
        kv(
            "checkpoint",
            match self.checkpoint {
                CheckpointChoice::Last => "last",
                CheckpointChoice::Best => "best",
            }
            .into(),
        );
        kv("synth.users", s.n_users.to_string());
        kv("synth.items", s.n_items.to_string());
        kv("synth.ratings_per_user", s.ratings_per_user.to_string());
        kv("synth.rating_levels", s.n_rating_levels.to_string());
        kv("synth.bias", s.bias_strength.to_string());
        kv("synth.latent_dim", s.latent_dim.to_string());
        kv("synth.bias_scale", s.bias_scale.to_string());
        kv("synth.noise", s.noise.to_string());
        kv("synth.seed", s.seed.to_string());
        out
    }
}
