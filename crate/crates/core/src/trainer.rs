//! Bi-level adversarial meta-training.
//!
//! Inner loop: plain gradient steps on a user's support set starting from the
//! meta-parameters. Outer loop: first-order meta-gradients (gradients of the
//! query loss at the adapted point) averaged over a task batch and applied with
//! Adam, descending for the recommender and ascending for the discriminators.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{PairSet, SupportView, TaskSets, UserTask};
use crate::metrics;
use crate::model::{self, Group, ModelError, ModelLayout, ModelParams};
use crate::numerics::{clip_global_norm, BagRows, Direction, NumericsError, Optimizer, Tape};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("non-finite loss in epoch {epoch}, batch {batch}: {detail} (users: {})", users.join(","))]
    NonFinite {
        epoch: usize,
        batch: usize,
        users: Vec<String>,
        detail: String,
    },
}

/// Which tasks the inner loop optimizes. The outer loop always runs both the
/// discriminator and the recommender task, except in `Melu` where the
/// adversary is switched off entirely.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Melu,
    /// Recommender on `l_R`, discriminators trained against it.
    Clover,
    /// Recommender on `l_R` only.
    CloverWo,
    /// Recommender on the full objective, discriminators frozen.
    CloverT2,
    /// Recommender on the full objective, discriminators trained.
    CloverT1t2,
}

impl Mode {
    pub const ALL: [Mode; 5] = [Mode::Melu, Mode::Clover, Mode::CloverWo, Mode::CloverT2, Mode::CloverT1t2];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Melu => "melu",
            Mode::Clover => "clover",
            Mode::CloverWo => "clover_wo",
            Mode::CloverT2 => "clover_t2",
            Mode::CloverT1t2 => "clover_t1t2",
        }
    }

    pub fn adversarial(self) -> bool {
        self != Mode::Melu
    }

    fn inner_trains_disc(self) -> bool {
        matches!(self, Mode::Clover | Mode::CloverT1t2)
    }

    fn inner_uses_objective(self) -> bool {
        matches!(self, Mode::Clover | Mode::CloverT2 | Mode::CloverT1t2)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown mode '{s}' (expected one of melu, clover, clover_wo, clover_t2, clover_t1t2)"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetaGrad {
    FirstOrder,
    /// Not implemented; rejected by [`TrainerConfig::validate`].
    SecondOrder,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainerConfig {
    pub alpha: f64,
    pub beta: f64,
    pub inner_steps: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub lambda: f64,
    pub gamma: f64,
    pub seed: u64,
    pub mode: Mode,
    /// Global-norm clip applied before every update; `0` disables it.
    pub grad_clip: f64,
    pub meta_grad: MetaGrad,
    /// Threads for per-task work inside a batch; results do not depend on it.
    pub workers: usize,
    /// Score items by the most probable rating instead of the expectation.
    pub argmax: bool,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            alpha: 1e-2,
            beta: 1e-3,
            inner_steps: 5,
            batch_size: 32,
            epochs: 50,
            lambda: 1.0,
            gamma: 0.1,
            seed: 0,
            mode: Mode::Clover,
            grad_clip: 5.0,
            meta_grad: MetaGrad::FirstOrder,
            workers: 1,
            argmax: false,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        // α = 0 is allowed: it leaves the meta-initialization unadapted.
        if !(self.alpha >= 0.0 && self.beta > 0.0) {
            return bad(format!("need alpha >= 0 and beta > 0 (alpha={}, beta={})", self.alpha, self.beta));
        }
        if self.inner_steps == 0 || self.batch_size == 0 || self.workers == 0 {
            return bad("inner_steps, batch_size and workers must be at least 1".into());
        }
        if !(self.lambda >= 0.0 && self.gamma >= 0.0) {
            return bad(format!("lambda and gamma must be non-negative ({}, {})", self.lambda, self.gamma));
        }
        if !(self.grad_clip >= 0.0) {
            return bad(format!("grad_clip must be non-negative, got {}", self.grad_clip));
        }
        if self.meta_grad != MetaGrad::FirstOrder {
            return bad("only first-order meta-gradients are supported".into());
        }
        Ok(())
    }

    /// `(λ, γ)` in effect: zero when the adversary is off.
    pub fn weights(&self) -> (f64, f64) {
        if self.mode.adversarial() {
            (self.lambda, self.gamma)
        } else {
            (0.0, 0.0)
        }
    }
}

type GradBuf = Vec<Option<Vec<f64>>>;

/// Writes `grads` into the gradient slots of `groups`, clips, and steps.
fn apply(
    params: &mut ModelParams,
    grads: &GradBuf,
    groups: &[Group],
    opt: &mut Optimizer,
    dir: Direction,
    clip: f64,
) -> Result<(), TrainError> {
    let chosen: Vec<usize> = (0..params.len()).filter(|&i| groups.contains(&params.group(i))).collect();
    for &i in &chosen {
        let t = &mut params.tensors_mut()[i];
        t.clear_grad();
        match &grads[i] {
            Some(g) => t.accumulate_grad(g)?,
            None => t.zero_grad(),
        }
    }
    let mut selected = params.select_mut(groups);
    if clip > 0.0 {
        clip_global_norm(&mut selected, clip);
    }
    opt.step(&mut selected, dir)?;
    params.clear_grads();
    Ok(())
}

fn finite_or(value: f64, what: &str) -> Result<f64, TrainError> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(TrainError::NonFinite {
            epoch: 0,
            batch: 0,
            users: Vec::new(),
            detail: format!("{what} = {value}"),
        })
    }
}

/// Shared inner loop. `label` is `None` whenever only the recommender task
/// runs, so the sensitive attribute is never touched on that path.
fn adapt(
    meta: &ModelParams,
    user_bags: &[BagRows],
    support: &PairSet,
    label: Option<usize>,
    cfg: &TrainerConfig,
) -> Result<ModelParams, TrainError> {
    let mut p = meta.clone();
    if support.is_empty() {
        log::warn!("empty support set, skipping adaptation");
        return Ok(p);
    }
    let (lambda, gamma) = cfg.weights();
    let use_objective = label.is_some() && cfg.mode.inner_uses_objective();
    let train_disc = label.is_some() && cfg.mode.inner_trains_disc();
    // Clover trains the discriminators without letting them steer the recommender.
    let detach = cfg.mode == Mode::Clover;
    let mut opt_r = Optimizer::sgd(cfg.alpha);
    let mut opt_d = Optimizer::sgd(cfg.alpha);
    for _ in 0..cfg.inner_steps {
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape, |g| match g {
            Group::Embedding => false,
            Group::Recommender => true,
            Group::Discriminator => train_disc,
        });
        let fwd = model::forward(&mut tape, &p, &bound, user_bags, &support.item_bags)?;
        let loss = match label {
            Some(a) if use_objective => {
                model::combined_loss(&mut tape, &p, &bound, &fwd, &support.targets, a, lambda, gamma, detach)?.total
            }
            _ => model::rec_loss(&mut tape, &fwd, &support.targets)?,
        };
        finite_or(tape.scalar(loss), "inner loss")?;
        let grads = bound.collect(&tape.backward(loss)?);
        apply(&mut p, &grads, &[Group::Recommender], &mut opt_r, Direction::Descend, cfg.grad_clip)?;
        if train_disc {
            apply(&mut p, &grads, &[Group::Discriminator], &mut opt_d, Direction::Ascend, cfg.grad_clip)?;
        }
    }
    Ok(p)
}

/// Per-user adaptation during meta-training, following the mode's inner tasks.
pub fn inner_adapt(meta: &ModelParams, task: &UserTask, cfg: &TrainerConfig) -> Result<ModelParams, TrainError> {
    let label = if cfg.mode.inner_uses_objective() {
        Some(task.sensitive_label())
    } else {
        None
    };
    adapt(meta, &task.user_bags, &task.support, label, cfg)
}

/// Test-time fine-tuning: recommender task only, no sensitive label in reach.
pub fn finetune_test(meta: &ModelParams, view: SupportView<'_>, cfg: &TrainerConfig) -> Result<ModelParams, TrainError> {
    adapt(meta, view.user_bags, view.support, None, cfg)
}

/// Mean query-set losses of a batch (`None` for a disabled discriminator).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BatchLosses {
    pub rec: f64,
    pub g: Option<f64>,
    pub h: Option<f64>,
    pub tasks: usize,
}

struct TaskGrad {
    grads: GradBuf,
    rec: f64,
    g: Option<f64>,
    h: Option<f64>,
}

fn task_meta_grad(meta: &ModelParams, task: &UserTask, cfg: &TrainerConfig) -> Result<TaskGrad, TrainError> {
    let adapted = inner_adapt(meta, task, cfg)?;
    let adversarial = cfg.mode.adversarial();
    let (lambda, gamma) = cfg.weights();
    let mut tape = Tape::new();
    let bound = adapted.bind(&mut tape, |g| g != Group::Discriminator || adversarial);
    let fwd = model::forward(&mut tape, &adapted, &bound, &task.user_bags, &task.query.item_bags)?;
    let label = if adversarial { task.sensitive_label() } else { 0 };
    let parts = model::combined_loss(&mut tape, &adapted, &bound, &fwd, &task.query.targets, label, lambda, gamma, false)?;
    let grads = bound.collect(&tape.backward(parts.total)?);
    Ok(TaskGrad {
        grads,
        rec: tape.scalar(parts.rec),
        g: parts.g.map(|v| tape.scalar(v)),
        h: parts.h.map(|v| tape.scalar(v)),
    })
}

fn mean_option(values: impl Iterator<Item = Option<f64>>, n: usize) -> Option<f64> {
    let mut total = 0.0;
    for v in values {
        total += v?;
    }
    Some(total / n as f64)
}

/// One meta-update from `batch`. Per-task work may run on `pool`; gradients
/// are reduced in ascending user order, so the result does not depend on it.
pub fn outer_step(
    meta: &mut ModelParams,
    batch: &[&UserTask],
    cfg: &TrainerConfig,
    opt_r: &mut Optimizer,
    opt_d: &mut Optimizer,
    pool: Option<&rayon::ThreadPool>,
) -> Result<BatchLosses, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::Config("empty task batch".into()));
    }
    let mut ordered = batch.to_vec();
    ordered.sort_by_key(|t| t.user);
    let snapshot: &ModelParams = meta;
    let work = |t: &&UserTask| task_meta_grad(snapshot, t, cfg);
    let results: Vec<Result<TaskGrad, TrainError>> = match pool {
        Some(pool) => pool.install(|| ordered.par_iter().map(work).collect()),
        None => ordered.iter().map(work).collect(),
    };
    let results = results.into_iter().collect::<Result<Vec<_>, _>>()?;

    let n = results.len();
    let losses = BatchLosses {
        rec: results.iter().map(|r| r.rec).sum::<f64>() / n as f64,
        g: mean_option(results.iter().map(|r| r.g), n),
        h: mean_option(results.iter().map(|r| r.h), n),
        tasks: n,
    };
    let all = [Some(losses.rec), losses.g, losses.h];
    if all.iter().flatten().any(|v| !v.is_finite()) {
        return Err(TrainError::NonFinite {
            epoch: 0,
            batch: 0,
            users: ordered.iter().map(|t| t.user_id.clone()).collect(),
            detail: format!("batch losses l_R={:?} l_g={:?} l_h={:?}", losses.rec, losses.g, losses.h),
        });
    }

    let mut sum: GradBuf = vec![None; meta.len()];
    for r in &results {
        for (acc, g) in sum.iter_mut().zip(&r.grads) {
            if let Some(g) = g {
                match acc {
                    Some(a) => a.iter_mut().zip(g).for_each(|(a, g)| *a += g),
                    None => *acc = Some(g.clone()),
                }
            }
        }
    }
    let scale = 1.0 / n as f64;
    for g in sum.iter_mut().flatten() {
        g.iter_mut().for_each(|v| *v *= scale);
    }

    apply(meta, &sum, &[Group::Embedding, Group::Recommender], opt_r, Direction::Descend, cfg.grad_clip)?;
    if cfg.mode.adversarial() {
        apply(meta, &sum, &[Group::Discriminator], opt_d, Direction::Ascend, cfg.grad_clip)?;
    }
    if !meta.all_finite() {
        return Err(TrainError::NonFinite {
            epoch: 0,
            batch: 0,
            users: ordered.iter().map(|t| t.user_id.clone()).collect(),
            detail: "parameters became non-finite after the meta-update".into(),
        });
    }
    Ok(losses)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub rec_loss: f64,
    pub disc_g_loss: Option<f64>,
    pub disc_h_loss: Option<f64>,
    pub valid_mae: f64,
}

impl EpochRecord {
    pub const CSV_HEADER: &'static str = "epoch,l_R,l_D_g,l_D_h,valid_MAE";

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{}",
            self.epoch,
            self.rec_loss,
            opt(self.disc_g_loss),
            opt(self.disc_h_loss),
            self.valid_mae
        )
    }
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from(EpochRecord::CSV_HEADER);
    out.push('\n');
    for r in history {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Meta-parameters after the last epoch.
    pub params: ModelParams,
    /// Meta-parameters of the epoch with the lowest validation MAE (the
    /// initialization when no epoch ran).
    pub best_params: ModelParams,
    pub best_epoch: Option<usize>,
    pub history: Vec<EpochRecord>,
}

/// Two-level MAE of fine-tuned predictions on the query sets of `tasks`.
pub fn fine_tuned_mae(meta: &ModelParams, tasks: &[UserTask], cfg: &TrainerConfig) -> Result<f64, TrainError> {
    let mut per_user = Vec::with_capacity(tasks.len());
    for t in tasks {
        let adapted = finetune_test(meta, t.support_view(), cfg)?;
        let (_, pred) = model::predict_ratings(&adapted, &t.user_bags, &t.query.item_bags, cfg.argmax)?;
        per_user.push(metrics::mae(&pred, &t.query.ratings()).map_err(|e| TrainError::Config(e.to_string()))?);
    }
    if per_user.is_empty() {
        return Ok(f64::NAN);
    }
    Ok(per_user.iter().sum::<f64>() / per_user.len() as f64)
}

pub fn train(layout: ModelLayout, tasks: &TaskSets, cfg: &TrainerConfig) -> Result<TrainOutcome, TrainError> {
    train_with(layout, tasks, cfg, |_, _| Ok(()))
}

/// [`train`] with a hook called after every epoch with its record and the
/// current meta-parameters (used for per-epoch checkpoints).
pub fn train_with(
    layout: ModelLayout,
    tasks: &TaskSets,
    cfg: &TrainerConfig,
    mut on_epoch: impl FnMut(&EpochRecord, &ModelParams) -> Result<(), TrainError>,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if tasks.train.is_empty() {
        return Err(TrainError::Config("training split is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut meta = ModelParams::init(layout, &mut rng);
    let pool = if cfg.workers > 1 {
        Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(cfg.workers)
                .build()
                .map_err(|e| TrainError::Config(format!("thread pool: {e}")))?,
        )
    } else {
        None
    };
    let mut opt_r = Optimizer::adam(cfg.beta);
    let mut opt_d = Optimizer::adam(cfg.beta);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best = (f64::INFINITY, None, meta.clone());

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..tasks.train.len()).collect();
        order.shuffle(&mut rng);
        let mut sums = (0.0, Some(0.0), Some(0.0), 0usize);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&UserTask> = chunk.iter().map(|&i| &tasks.train[i]).collect();
            let l = outer_step(&mut meta, &batch, cfg, &mut opt_r, &mut opt_d, pool.as_ref()).map_err(|e| match e {
                TrainError::NonFinite { users, detail, .. } => {
                    let users = if users.is_empty() {
                        batch.iter().map(|t| t.user_id.clone()).collect()
                    } else {
                        users
                    };
                    log::error!("non-finite values in epoch {epoch}, batch {b}: {detail}; users {users:?}");
                    TrainError::NonFinite {
                        epoch,
                        batch: b,
                        users,
                        detail,
                    }
                }
                other => other,
            })?;
            let w = l.tasks as f64;
            sums.0 += l.rec * w;
            sums.1 = sums.1.zip(l.g).map(|(s, g)| s + g * w);
            sums.2 = sums.2.zip(l.h).map(|(s, h)| s + h * w);
            sums.3 += l.tasks;
        }
        let n = sums.3 as f64;
        let record = EpochRecord {
            epoch,
            rec_loss: sums.0 / n,
            disc_g_loss: sums.1.map(|s| s / n),
            disc_h_loss: sums.2.map(|s| s / n),
            valid_mae: fine_tuned_mae(&meta, &tasks.valid, cfg)?,
        };
        log::info!(
            "epoch {epoch}: l_R {:.4} l_g {:?} l_h {:?} valid MAE {:.4}",
            record.rec_loss,
            record.disc_g_loss,
            record.disc_h_loss,
            record.valid_mae
        );
        if record.valid_mae < best.0 {
            best = (record.valid_mae, Some(epoch), meta.clone());
        }
        on_epoch(&record, &meta)?;
        history.push(record);
    }
    Ok(TrainOutcome {
        params: meta,
        best_params: best.2,
        best_epoch: best.1,
        history,
    })
}

/// Meta-parameters a training run starts from (same draws as [`train`]).
pub fn initial_params(layout: ModelLayout, seed: u64) -> ModelParams {
    ModelParams::init(layout, &mut ChaCha8Rng::seed_from_u64(seed))
}
