//! Accuracy and fairness metrics: MAE, NDCG@k, attacker AUC, counterfactual
//! gap and group gap, plus the logistic-regression attacker.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{TaskSets, UserTask};
use crate::model::{self, ModelError, ModelParams};
use crate::numerics::{softmax, Tape};
use crate::trainer::{finetune_test, TrainError, TrainerConfig};

pub const NDCG_K: usize = 3;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("metric contract violated: {0}")]
    Contract(String),
    #[error("metric undefined: {0}")]
    Undefined(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Mean absolute error of one user's predictions.
pub fn mae(pred: &[f64], truth: &[f64]) -> Result<f64, MetricsError> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(MetricsError::Contract(format!(
            "mae needs equal non-empty inputs, got {} and {}",
            pred.len(),
            truth.len()
        )));
    }
    Ok(pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum::<f64>() / pred.len() as f64)
}

fn dcg(gains: impl Iterator<Item = f64>) -> f64 {
    gains
        .enumerate()
        .map(|(r, y)| (2f64.powf(y) - 1.0) / ((r + 2) as f64).log2())
        .sum()
}

/// NDCG@k of the items ranked by descending `scores` (ties: ascending item
/// id), with gain `2^y − 1` and discount `1 / log2(1 + rank)`.
pub fn ndcg_at_k(scores: &[f64], truth: &[f64], items: &[usize], k: usize) -> Result<f64, MetricsError> {
    if scores.len() != truth.len() || items.len() != truth.len() {
        return Err(MetricsError::Contract("ndcg inputs differ in length".into()));
    }
    if truth.len() < k || k == 0 {
        return Err(MetricsError::Contract(format!("ndcg@{k} needs at least {k} items, got {}", truth.len())));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(items[a].cmp(&items[b])));
    let mut ideal = truth.to_vec();
    ideal.sort_by(|a, b| b.total_cmp(a));
    let idcg = dcg(ideal.into_iter().take(k));
    if idcg == 0.0 {
        return Ok(0.0);
    }
    Ok(dcg(order.into_iter().take(k).map(|i| truth[i])) / idcg)
}

/// ROC AUC of `scores` for the positive labels via the Mann–Whitney rank
/// statistic; tied scores count one half.
pub fn auc(scores: &[f64], positive: &[bool]) -> Result<f64, MetricsError> {
    if scores.len() != positive.len() {
        return Err(MetricsError::Contract("auc inputs differ in length".into()));
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricsError::Undefined("auc needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // average 1-based ranks over tie groups
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum_pos += order[i..=j].iter().filter(|&&o| positive[o]).count() as f64 * avg;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

/// `|mean MAE of group 0 − mean MAE of group 1|`.
pub fn group_gap(rows: &[(f64, usize)]) -> Result<f64, MetricsError> {
    let mean = |g: usize| {
        let v: Vec<f64> = rows.iter().filter(|r| r.1 == g).map(|r| r.0).collect();
        if v.is_empty() {
            None
        } else {
            Some(v.iter().sum::<f64>() / v.len() as f64)
        }
    };
    match (mean(0), mean(1)) {
        (Some(a), Some(b)) => Ok((a - b).abs()),
        _ => Err(MetricsError::Undefined("group gap needs both groups".into())),
    }
}

/// Multinomial logistic regression on standardized features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackerModel {
    /// `classes × dim`
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttackerConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub l2: f64,
}

impl Default for AttackerConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            learning_rate: 0.1,
            l2: 1e-4,
        }
    }
}

impl AttackerModel {
    /// Full-batch gradient descent on mean cross-entropy plus `l2/2·‖W‖²`.
    pub fn fit(features: &[Vec<f64>], labels: &[usize], classes: usize, cfg: AttackerConfig) -> Result<Self, MetricsError> {
        if features.is_empty() || features.len() != labels.len() {
            return Err(MetricsError::Contract("attacker needs one label per representation".into()));
        }
        if labels.iter().any(|&l| l >= classes) {
            return Err(MetricsError::Contract("attacker label out of range".into()));
        }
        let mut seen = labels.to_vec();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() < 2 {
            return Err(MetricsError::Undefined("attacker training labels have a single class".into()));
        }
        let dim = features[0].len();
        let n = features.len() as f64;
        let mut mean = vec![0.0; dim];
        for f in features {
            mean.iter_mut().zip(f).for_each(|(m, x)| *m += x / n);
        }
        let mut scale = vec![0.0; dim];
        for f in features {
            scale.iter_mut().zip(f).zip(&mean).for_each(|((s, x), m)| *s += (x - m).powi(2) / n);
        }
        scale.iter_mut().for_each(|s| *s = if *s > 1e-12 { s.sqrt() } else { 1.0 });
        let mut model = Self {
            weights: vec![vec![0.0; dim]; classes],
            bias: vec![0.0; classes],
            mean,
            scale,
        };
        let xs: Vec<Vec<f64>> = features.iter().map(|f| model.standardize(f)).collect();
        for _ in 0..cfg.epochs {
            let mut gw = vec![vec![0.0; dim]; classes];
            let mut gb = vec![0.0; classes];
            for (x, &y) in xs.iter().zip(labels) {
                let p = softmax(&model.logits_std(x));
                for c in 0..classes {
                    let d = (p[c] - if c == y { 1.0 } else { 0.0 }) / n;
                    gb[c] += d;
                    gw[c].iter_mut().zip(x).for_each(|(g, xi)| *g += d * xi);
                }
            }
            for c in 0..classes {
                for (w, g) in model.weights[c].iter_mut().zip(&gw[c]) {
                    *w -= cfg.learning_rate * (g + cfg.l2 * *w);
                }
                model.bias[c] -= cfg.learning_rate * gb[c];
            }
        }
        Ok(model)
    }

    fn standardize(&self, f: &[f64]) -> Vec<f64> {
        f.iter().zip(&self.mean).zip(&self.scale).map(|((x, m), s)| (x - m) / s).collect()
    }

    fn logits_std(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.bias)
            .map(|(w, b)| b + w.iter().zip(x).map(|(w, x)| w * x).sum::<f64>())
            .collect()
    }

    pub fn probabilities(&self, f: &[f64]) -> Vec<f64> {
        softmax(&self.logits_std(&self.standardize(f)))
    }
}

/// Trains the attacker on `train` representations and returns the AUC of its
/// class-1 probability on `test`.
pub fn attacker_auc(
    train: &[Vec<f64>],
    train_labels: &[usize],
    test: &[Vec<f64>],
    test_labels: &[usize],
    cfg: AttackerConfig,
) -> Result<f64, MetricsError> {
    let attacker = AttackerModel::fit(train, train_labels, 2, cfg)?;
    let scores: Vec<f64> = test.iter().map(|f| attacker.probabilities(f)[1]).collect();
    let positive: Vec<bool> = test_labels.iter().map(|&l| l == 1).collect();
    auc(&scores, &positive)
}

/// User embedding `e_u` under `params`.
pub fn user_representation(params: &ModelParams, task: &UserTask) -> Result<Vec<f64>, MetricsError> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, |_| false);
    let e = model::user_embed(&mut tape, params, &bound, &task.user_bags)?;
    Ok(tape.value(e).to_vec())
}

/// Mean `|r(x_u, a) − r(x_u, a′)|` over the query items, with the sensitive
/// block flipped at prediction time only.
pub fn counterfactual_gap(adapted: &ModelParams, task: &UserTask, argmax: bool) -> Result<f64, MetricsError> {
    let flipped = task
        .profile
        .flip_sensitive()
        .map_err(|e| MetricsError::Config(e.to_string()))?
        .bag_rows();
    let (_, factual) = model::predict_ratings(adapted, &task.user_bags, &task.query.item_bags, argmax)?;
    let (_, counter) = model::predict_ratings(adapted, &flipped, &task.query.item_bags, argmax)?;
    mae(&factual, &counter)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserRow {
    pub user: usize,
    pub user_id: String,
    pub mae: f64,
    pub ndcg: f64,
    pub cf: f64,
    pub group: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mae: f64,
    pub ndcg3: f64,
    /// `None` when the test split has a single sensitive class.
    pub auc: Option<f64>,
    pub cf: f64,
    /// `None` when a group is empty.
    pub gf: Option<f64>,
    pub k: usize,
    pub users: usize,
    pub per_user: Vec<UserRow>,
}

impl MetricsReport {
    pub const HEADLINE: [&'static str; 5] = ["MAE", "NDCG", "AUC", "CF", "GF"];

    fn opt(v: Option<f64>) -> String {
        v.map(|x| x.to_string()).unwrap_or_else(|| "NA".into())
    }

    pub fn headline_values(&self) -> [Option<f64>; 5] {
        [Some(self.mae), Some(self.ndcg3), self.auc, Some(self.cf), self.gf]
    }

    /// Headline CSV (header plus one row), full precision.
    pub fn headline_csv(&self) -> String {
        let row: Vec<String> = self.headline_values().iter().map(|v| Self::opt(*v)).collect();
        format!("{}\n{}\n", Self::HEADLINE.join(","), row.join(","))
    }

    pub fn per_user_csv(&self) -> String {
        let mut out = String::from("user_id,mae,ndcg,cf,group\n");
        for r in &self.per_user {
            out.push_str(&format!("{},{},{},{},{}\n", r.user_id, r.mae, r.ndcg, r.cf, r.group));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report is serializable")
    }

    /// Fixed-width table of the headline metrics.
    pub fn table(&self) -> String {
        let cells: Vec<String> = self
            .headline_values()
            .iter()
            .map(|v| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "NA".into()))
            .collect();
        let head: Vec<String> = Self::HEADLINE.iter().map(|h| format!("{h:>8}")).collect();
        let body: Vec<String> = cells.iter().map(|c| format!("{c:>8}")).collect();
        format!("{}\n{}", head.join(" "), body.join(" "))
    }
}

struct Evaluated {
    row: UserRow,
    repr: Vec<f64>,
}

fn evaluate_user(meta: &ModelParams, task: &UserTask, cfg: &TrainerConfig) -> Result<Evaluated, MetricsError> {
    let adapted = finetune_test(meta, task.support_view(), cfg)?;
    let (repr, pred) = model::predict_ratings(&adapted, &task.user_bags, &task.query.item_bags, cfg.argmax)?;
    let truth = task.query.ratings();
    Ok(Evaluated {
        row: UserRow {
            user: task.user,
            user_id: task.user_id.clone(),
            mae: mae(&pred, &truth)?,
            ndcg: ndcg_at_k(&pred, &truth, &task.query.items(), NDCG_K)?,
            cf: counterfactual_gap(&adapted, task, cfg.argmax)?,
            group: task.sensitive_label(),
        },
        repr,
    })
}

fn fine_tuned_representations(meta: &ModelParams, tasks: &[UserTask], cfg: &TrainerConfig) -> Result<Vec<Vec<f64>>, MetricsError> {
    let one = |t: &UserTask| -> Result<Vec<f64>, MetricsError> {
        let adapted = finetune_test(meta, t.support_view(), cfg)?;
        user_representation(&adapted, t)
    };
    if cfg.workers > 1 {
        tasks.par_iter().map(one).collect()
    } else {
        tasks.iter().map(one).collect()
    }
}

/// Full protocol on the test split; the attacker is trained on the train
/// split's fine-tuned user embeddings.
pub fn evaluate(meta: &ModelParams, tasks: &TaskSets, cfg: &TrainerConfig) -> Result<MetricsReport, MetricsError> {
    evaluate_with(meta, tasks, cfg, AttackerConfig::default())
}

pub fn evaluate_with(
    meta: &ModelParams,
    tasks: &TaskSets,
    cfg: &TrainerConfig,
    attacker: AttackerConfig,
) -> Result<MetricsReport, MetricsError> {
    if tasks.test.is_empty() {
        return Err(MetricsError::Contract("no test users to evaluate".into()));
    }
    let mut test = tasks.test.iter().collect::<Vec<_>>();
    test.sort_by_key(|t| t.user);
    let evaluated: Vec<Evaluated> = if cfg.workers > 1 {
        test.par_iter().map(|t| evaluate_user(meta, t, cfg)).collect::<Result<_, _>>()?
    } else {
        test.iter().map(|t| evaluate_user(meta, t, cfg)).collect::<Result<_, _>>()?
    };
    let n = evaluated.len() as f64;
    let per_user: Vec<UserRow> = evaluated.iter().map(|e| e.row.clone()).collect();

    let train_repr = fine_tuned_representations(meta, &tasks.train, cfg)?;
    let train_labels: Vec<usize> = tasks.train.iter().map(UserTask::sensitive_label).collect();
    let test_repr: Vec<Vec<f64>> = evaluated.iter().map(|e| e.repr.clone()).collect();
    let test_labels: Vec<usize> = per_user.iter().map(|r| r.group).collect();
    let auc = match attacker_auc(&train_repr, &train_labels, &test_repr, &test_labels, attacker) {
        Ok(a) => Some(a),
        Err(MetricsError::Undefined(why)) => {
            log::warn!("attacker AUC undefined: {why}");
            None
        }
        Err(e) => return Err(e),
    };
    let groups: Vec<(f64, usize)> = per_user.iter().map(|r| (r.mae, r.group)).collect();
    let gf = group_gap(&groups).ok();

    Ok(MetricsReport {
        mae: per_user.iter().map(|r| r.mae).sum::<f64>() / n,
        ndcg3: per_user.iter().map(|r| r.ndcg).sum::<f64>() / n,
        auc,
        cf: per_user.iter().map(|r| r.cf).sum::<f64>() / n,
        gf,
        k: NDCG_K,
        users: per_user.len(),
        per_user,
    })
}
