//! Recommender network, the two sensitive-attribute discriminators and the
//! composite min-max loss.
//!
//! All parameters live in one ordered [`Vec<Tensor>`]; [`ModelLayout`] fixes
//! the order and assigns every tensor to exactly one [`Group`]:
//!
//! | group | tensors |
//! |---|---|
//! | `Embedding` | one `d_p × 64` table per user content, then per item content |
//! | `Recommender` | user projection, item projection, decision network |
//! | `Discriminator` | `g` network, then `h` network |
//!
//! Embedding tables belong to the recommender parameters but are kept in their
//! own group because only the outer loop updates them.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::EncodedCatalog;
use crate::numerics::{softmax, BagRows, Gradients, NumericsError, Tape, Tensor, Var};

pub const EMBED_DIM: usize = 64;
pub const HIDDEN: usize = 64;
/// Hidden layers of the decision network and of each discriminator.
pub const HIDDEN_LAYERS: usize = 2;

const CHECKPOINT_FORMAT: &str = "fairmeta-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: String, reason: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Embedding,
    Recommender,
    Discriminator,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub name: String,
    pub width: usize,
}

/// Everything needed to rebuild the parameter shapes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelLayout {
    pub user_blocks: Vec<Block>,
    pub item_blocks: Vec<Block>,
    pub sensitive_block: usize,
    pub rating_min: u8,
    pub rating_levels: usize,
    pub sensitive_classes: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub group: Group,
}

impl ModelLayout {
    pub fn from_catalogs(
        users: &EncodedCatalog,
        items: &EncodedCatalog,
        rating_min: u8,
        rating_levels: usize,
    ) -> Result<Self, ModelError> {
        let blocks = |c: &EncodedCatalog| {
            c.vocab
                .iter()
                .map(|v| Block {
                    name: v.name.clone(),
                    width: v.width(),
                })
                .collect::<Vec<_>>()
        };
        let sensitive_block = users
            .sensitive_index
            .ok_or_else(|| ModelError::Config("user catalog has no sensitive block".into()))?;
        Ok(Self {
            user_blocks: blocks(users),
            item_blocks: blocks(items),
            sensitive_block,
            rating_min,
            rating_levels,
            sensitive_classes: users.vocab[sensitive_block].width(),
        })
    }

    pub fn for_prepared(p: &crate::data::Prepared) -> Result<Self, ModelError> {
        Self::from_catalogs(&p.users, &p.items, p.raw.rating_min, p.raw.rating_levels())
    }

    fn mlp_specs(out: &mut Vec<ParamSpec>, prefix: &str, input: usize, output: usize, group: Group) {
        let mut fan_in = input;
        for l in 0..=HIDDEN_LAYERS {
            let fan_out = if l == HIDDEN_LAYERS { output } else { HIDDEN };
            out.push(ParamSpec {
                name: format!("{prefix}.{l}.weight"),
                shape: vec![fan_in, fan_out],
                group,
            });
            out.push(ParamSpec {
                name: format!("{prefix}.{l}.bias"),
                shape: vec![fan_out],
                group,
            });
            fan_in = fan_out;
        }
    }

    /// Parameter specs in storage order.
    pub fn specs(&self) -> Vec<ParamSpec> {
        let mut out = Vec::new();
        for (side, blocks) in [("user", &self.user_blocks), ("item", &self.item_blocks)] {
            for b in blocks {
                out.push(ParamSpec {
                    name: format!("{side}.embedding.{}", b.name),
                    shape: vec![b.width, EMBED_DIM],
                    group: Group::Embedding,
                });
            }
        }
        for (side, n) in [("user", self.user_blocks.len()), ("item", self.item_blocks.len())] {
            out.push(ParamSpec {
                name: format!("{side}.projection.weight"),
                shape: vec![n * EMBED_DIM, EMBED_DIM],
                group: Group::Recommender,
            });
            out.push(ParamSpec {
                name: format!("{side}.projection.bias"),
                shape: vec![EMBED_DIM],
                group: Group::Recommender,
            });
        }
        let y = self.rating_levels;
        let c = self.sensitive_classes;
        Self::mlp_specs(&mut out, "decision", 2 * EMBED_DIM, y, Group::Recommender);
        Self::mlp_specs(&mut out, "disc_g", EMBED_DIM + y, c, Group::Discriminator);
        Self::mlp_specs(&mut out, "disc_h", y + y + EMBED_DIM, c, Group::Discriminator);
        out
    }

    fn user_table(&self, b: usize) -> usize {
        b
    }

    fn item_table(&self, b: usize) -> usize {
        self.user_blocks.len() + b
    }

    fn dense_start(&self) -> usize {
        self.user_blocks.len() + self.item_blocks.len()
    }

    fn user_projection(&self) -> (usize, usize) {
        let s = self.dense_start();
        (s, s + 1)
    }

    fn item_projection(&self) -> (usize, usize) {
        let s = self.dense_start() + 2;
        (s, s + 1)
    }

    fn mlp(&self, which: usize) -> Vec<(usize, usize)> {
        let per = 2 * (HIDDEN_LAYERS + 1);
        let start = self.dense_start() + 4 + which * per;
        (0..=HIDDEN_LAYERS).map(|l| (start + 2 * l, start + 2 * l + 1)).collect()
    }

    fn rating_value(&self, class: usize) -> f64 {
        (self.rating_min as usize + class) as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    layout: ModelLayout,
    specs: Vec<ParamSpec>,
    tensors: Vec<Tensor>,
}

impl ModelParams {
    /// Xavier-uniform weights and tables, zero biases, drawn in storage order.
    pub fn init<R: Rng + ?Sized>(layout: ModelLayout, rng: &mut R) -> Self {
        let specs = layout.specs();
        let tensors = specs
            .iter()
            .map(|s| match s.shape.as_slice() {
                [r, c] => Tensor::xavier_uniform(*r, *c, rng),
                _ => Tensor::zeros(s.shape.clone()).with_requires_grad(true),
            })
            .collect();
        Self {
            layout,
            specs,
            tensors,
        }
    }

    pub fn layout(&self) -> &ModelLayout {
        &self.layout
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn group(&self, i: usize) -> Group {
        self.specs[i].group
    }

    pub fn indices(&self, group: Group) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.group(i) == group).collect()
    }

    /// Mutable references to every tensor in `groups`, in storage order.
    pub fn select_mut(&mut self, groups: &[Group]) -> Vec<&mut Tensor> {
        self.tensors
            .iter_mut()
            .zip(&self.specs)
            .filter(|(_, s)| groups.contains(&s.group))
            .map(|(t, _)| t)
            .collect()
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.specs.iter().position(|s| s.name == name).map(|i| &self.tensors[i])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.specs
            .iter()
            .position(|s| s.name == name)
            .map(move |i| &mut self.tensors[i])
    }

    /// Bitwise fingerprint of one group's values.
    pub fn fingerprint(&self, group: Group) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for i in self.indices(group) {
            for v in self.tensors[i].values() {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.values().iter().all(|v| v.is_finite()))
    }

    /// Zeroes the sensitive content's embedding table, making the user
    /// embedding independent of the sensitive attribute.
    pub fn make_attribute_blind(&mut self) {
        let i = self.layout.user_table(self.layout.sensitive_block);
        self.tensors[i].values_mut().iter_mut().for_each(|v| *v = 0.0);
    }

    /// Records every tensor on `tape`; gradients flow to those whose group
    /// passes `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: impl Fn(Group) -> bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .zip(&self.specs)
            .map(|(t, s)| tape.param(t, trainable(s.group)))
            .collect();
        Bound { vars }
    }

    pub fn clear_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::clear_grad);
    }

    /// Writes a JSON checkpoint that reloads bit-identically.
    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let ck = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            layout: self.layout.clone(),
            tensors: self
                .specs
                .iter()
                .zip(&self.tensors)
                .map(|(s, t)| NamedTensor {
                    name: s.name.clone(),
                    shape: s.shape.clone(),
                    data: t.values().to_vec(),
                })
                .collect(),
        };
        let err = |reason: String| ModelError::Checkpoint {
            path: path.display().to_string(),
            reason,
        };
        let json = serde_json::to_string(&ck).map_err(|e| err(e.to_string()))?;
        fs::write(path, json).map_err(|e| err(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let err = |reason: String| ModelError::Checkpoint {
            path: path.display().to_string(),
            reason,
        };
        let text = fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(err(format!("unsupported format {} v{}", ck.format, ck.version)));
        }
        let specs = ck.layout.specs();
        if specs.len() != ck.tensors.len() {
            return Err(err(format!("{} tensors, layout needs {}", ck.tensors.len(), specs.len())));
        }
        let mut tensors = Vec::with_capacity(specs.len());
        for (s, t) in specs.iter().zip(ck.tensors) {
            if s.name != t.name || s.shape != t.shape {
                return Err(err(format!(
                    "tensor {} {:?} does not match layout entry {} {:?}",
                    t.name, t.shape, s.name, s.shape
                )));
            }
            tensors.push(Tensor::new(t.shape, t.data)?.with_requires_grad(true));
        }
        Ok(Self {
            layout: ck.layout,
            specs,
            tensors,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct NamedTensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    layout: ModelLayout,
    tensors: Vec<NamedTensor>,
}

/// Tape handles of every parameter, in storage order.
#[derive(Clone, Debug)]
pub struct Bound {
    pub vars: Vec<Var>,
}

impl Bound {
    /// Gradient of each parameter (`None` when nothing flowed to it).
    pub fn collect(&self, grads: &Gradients) -> Vec<Option<Vec<f64>>> {
        self.vars.iter().map(|v| grads.wrt(*v).map(<[f64]>::to_vec)).collect()
    }
}

/// Tape handles of one forward pass over a user and `n` items.
#[derive(Clone, Copy, Debug)]
pub struct PairForward {
    /// `1 × 64`
    pub e_u: Var,
    /// `n × 64`
    pub e_i: Var,
    /// `n × |Y|`
    pub logits: Var,
}

fn embed(
    tape: &mut Tape,
    bound: &Bound,
    tables: impl Iterator<Item = usize>,
    bags: &[BagRows],
    (w, b): (usize, usize),
) -> Result<Var, ModelError> {
    let parts = tables
        .zip(bags)
        .map(|(t, bag)| tape.embedding_bag(bound.vars[t], bag.clone()))
        .collect::<Result<Vec<_>, _>>()?;
    let x = tape.concat_cols(&parts)?;
    let z = tape.matmul(x, bound.vars[w])?;
    let z = tape.add_bias(z, bound.vars[b])?;
    Ok(tape.relu(z))
}

fn check_blocks(expected: usize, got: usize, side: &str) -> Result<(), ModelError> {
    if expected != got {
        return Err(ModelError::Config(format!(
            "{side} profile has {got} blocks, model expects {expected}"
        )));
    }
    Ok(())
}

/// `e_u = ReLU(W_U [E_U^1 x^1; …; E_U^P x^P] + b_U)`, shape `1 × 64`.
pub fn user_embed(tape: &mut Tape, params: &ModelParams, bound: &Bound, bags: &[BagRows]) -> Result<Var, ModelError> {
    let l = &params.layout;
    check_blocks(l.user_blocks.len(), bags.len(), "user")?;
    embed(
        tape,
        bound,
        (0..l.user_blocks.len()).map(|b| l.user_table(b)),
        bags,
        l.user_projection(),
    )
}

/// Item embeddings, one row per bag row.
pub fn item_embed(tape: &mut Tape, params: &ModelParams, bound: &Bound, bags: &[BagRows]) -> Result<Var, ModelError> {
    let l = &params.layout;
    check_blocks(l.item_blocks.len(), bags.len(), "item")?;
    embed(
        tape,
        bound,
        (0..l.item_blocks.len()).map(|b| l.item_table(b)),
        bags,
        l.item_projection(),
    )
}

fn layers(bound: &Bound, idx: &[(usize, usize)]) -> Vec<(Var, Var)> {
    idx.iter().map(|&(w, b)| (bound.vars[w], bound.vars[b])).collect()
}

/// Decision network logits for `[e_u; e_i]` rows; `e_u` may be one row that is
/// shared by every item.
pub fn predict(tape: &mut Tape, params: &ModelParams, bound: &Bound, e_u: Var, e_i: Var) -> Result<Var, ModelError> {
    let n = tape.dims(e_i).0;
    let eu = if tape.dims(e_u).0 == 1 && n != 1 {
        tape.repeat_rows(e_u, n)?
    } else {
        e_u
    };
    let x = tape.concat_cols(&[eu, e_i])?;
    Ok(tape.affine_relu_stack(x, &layers(bound, &params.layout.mlp(0)), true)?)
}

pub fn forward(
    tape: &mut Tape,
    params: &ModelParams,
    bound: &Bound,
    user_bags: &[BagRows],
    item_bags: &[BagRows],
) -> Result<PairForward, ModelError> {
    let e_u = user_embed(tape, params, bound, user_bags)?;
    let e_i = item_embed(tape, params, bound, item_bags)?;
    let logits = predict(tape, params, bound, e_u, e_i)?;
    Ok(PairForward { e_u, e_i, logits })
}

/// Mean cross-entropy of the rating classes.
pub fn rec_loss(tape: &mut Tape, fwd: &PairForward, targets: &[usize]) -> Result<Var, ModelError> {
    Ok(tape.cross_entropy(fwd.logits, targets)?)
}

fn one_hot_rows(targets: &[usize], width: usize) -> Vec<f64> {
    let mut v = vec![0.0; targets.len() * width];
    for (r, &t) in targets.iter().enumerate() {
        v[r * width + t] = 1.0;
    }
    v
}

/// Discriminator inputs as seen by the loss. With `detach` the recommender
/// receives no gradient from the discriminator terms.
fn disc_input(tape: &mut Tape, v: Var, detach: bool) -> Var {
    if detach {
        tape.detach(v)
    } else {
        v
    }
}

/// `g([e_u; onehot(y)])` cross-entropy against the sensitive class.
pub fn disc_g_loss(
    tape: &mut Tape,
    params: &ModelParams,
    bound: &Bound,
    fwd: &PairForward,
    targets: &[usize],
    label: usize,
    detach: bool,
) -> Result<Var, ModelError> {
    let n = targets.len();
    let y = params.layout.rating_levels;
    let e_u = disc_input(tape, fwd.e_u, detach);
    let eu = tape.repeat_rows(e_u, n)?;
    let onehot = tape.constant(n, y, one_hot_rows(targets, y))?;
    let x = tape.concat_cols(&[eu, onehot])?;
    let logits = tape.affine_relu_stack(x, &layers(bound, &params.layout.mlp(1)), true)?;
    Ok(tape.cross_entropy(logits, &vec![label; n])?)
}

/// `h([onehot(y); ŷ; e_i])` cross-entropy against the sensitive class.
pub fn disc_h_loss(
    tape: &mut Tape,
    params: &ModelParams,
    bound: &Bound,
    fwd: &PairForward,
    targets: &[usize],
    label: usize,
    detach: bool,
) -> Result<Var, ModelError> {
    let n = targets.len();
    let y = params.layout.rating_levels;
    let onehot = tape.constant(n, y, one_hot_rows(targets, y))?;
    let logits_in = disc_input(tape, fwd.logits, detach);
    let e_i = disc_input(tape, fwd.e_i, detach);
    let x = tape.concat_cols(&[onehot, logits_in, e_i])?;
    let logits = tape.affine_relu_stack(x, &layers(bound, &params.layout.mlp(2)), true)?;
    Ok(tape.cross_entropy(logits, &vec![label; n])?)
}

/// Handles of `L = l_R − λ·l_D^g − γ·l_D^h` and its components. A
/// discriminator whose weight is zero is not evaluated at all.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    pub rec: Var,
    pub g: Option<Var>,
    pub h: Option<Var>,
}

#[allow(clippy::too_many_arguments)]
pub fn combined_loss(
    tape: &mut Tape,
    params: &ModelParams,
    bound: &Bound,
    fwd: &PairForward,
    targets: &[usize],
    label: usize,
    lambda: f64,
    gamma: f64,
    detach: bool,
) -> Result<LossParts, ModelError> {
    if lambda < 0.0 || gamma < 0.0 {
        return Err(ModelError::Config(format!("negative trade-off weights λ={lambda}, γ={gamma}")));
    }
    let rec = rec_loss(tape, fwd, targets)?;
    let mut total = rec;
    let mut g = None;
    let mut h = None;
    if lambda != 0.0 {
        let lg = disc_g_loss(tape, params, bound, fwd, targets, label, detach)?;
        let term = tape.scale(lg, -lambda);
        total = tape.add(total, term)?;
        g = Some(lg);
    }
    if gamma != 0.0 {
        let lh = disc_h_loss(tape, params, bound, fwd, targets, label, detach)?;
        let term = tape.scale(lh, -gamma);
        total = tape.add(total, term)?;
        h = Some(lh);
    }
    Ok(LossParts { total, rec, g, h })
}

/// Softmax-weighted mean of the rating values of each logit row.
pub fn expected_ratings(layout: &ModelLayout, logits: &[f64]) -> Vec<f64> {
    logits
        .chunks_exact(layout.rating_levels)
        .map(|row| {
            softmax(row)
                .iter()
                .enumerate()
                .map(|(c, p)| p * layout.rating_value(c))
                .sum()
        })
        .collect()
}

/// Rating value of the most probable class of each row (first on ties).
pub fn argmax_ratings(layout: &ModelLayout, logits: &[f64]) -> Vec<f64> {
    logits
        .chunks_exact(layout.rating_levels)
        .map(|row| {
            let best = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (c, &v)| if v > acc.1 { (c, v) } else { acc });
            layout.rating_value(best.0)
        })
        .collect()
}

/// Forward values without gradient bookkeeping: `(e_u, logits)`.
pub fn infer(params: &ModelParams, user_bags: &[BagRows], item_bags: &[BagRows]) -> Result<(Vec<f64>, Vec<f64>), ModelError> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, |_| false);
    let fwd = forward(&mut tape, params, &bound, user_bags, item_bags)?;
    Ok((tape.value(fwd.e_u).to_vec(), tape.value(fwd.logits).to_vec()))
}

/// Predicted scalar ratings (softmax expectation, or argmax when requested)
/// together with the user embedding.
pub fn predict_ratings(
    params: &ModelParams,
    user_bags: &[BagRows],
    item_bags: &[BagRows],
    argmax: bool,
) -> Result<(Vec<f64>, Vec<f64>), ModelError> {
    let (e_u, logits) = infer(params, user_bags, item_bags)?;
    let ratings = if argmax {
        argmax_ratings(params.layout(), &logits)
    } else {
        expected_ratings(params.layout(), &logits)
    };
    Ok((e_u, ratings))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn layout() -> ModelLayout {
        ModelLayout {
            user_blocks: vec![
                Block { name: "age".into(), width: 3 },
                Block { name: "gender".into(), width: 2 },
            ],
            item_blocks: vec![Block { name: "genre".into(), width: 4 }],
            sensitive_block: 1,
            rating_min: 1,
            rating_levels: 5,
            sensitive_classes: 2,
        }
    }

    fn bags(rows: Vec<Vec<(usize, f64)>>) -> BagRows {
        Arc::new(rows)
    }

    fn user(age: usize, gender: usize) -> Vec<BagRows> {
        vec![bags(vec![vec![(age, 1.0)]]), bags(vec![vec![(gender, 1.0)]])]
    }

    fn items() -> Vec<BagRows> {
        vec![bags(vec![vec![(0, 1.0)], vec![(1, 0.5), (3, 0.5)], vec![(2, 1.0)]])]
    }

    fn params(seed: u64) -> ModelParams {
        ModelParams::init(layout(), &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn groups_partition_parameters() {
        let p = params(0);
        let total: usize = [Group::Embedding, Group::Recommender, Group::Discriminator]
            .iter()
            .map(|g| p.indices(*g).len())
            .sum();
        assert_eq!(total, p.len());
        assert_eq!(p.indices(Group::Embedding).len(), 3);
        assert_eq!(p.indices(Group::Discriminator).len(), 12);
    }

    #[test]
    fn embeddings_have_width_64_and_logits_5() {
        let p = params(1);
        let mut tape = Tape::new();
        let b = p.bind(&mut tape, |_| false);
        let f = forward(&mut tape, &p, &b, &user(0, 1), &items()).unwrap();
        assert_eq!(tape.dims(f.e_u), (1, 64));
        assert_eq!(tape.dims(f.e_i), (3, 64));
        assert_eq!(tape.dims(f.logits), (3, 5));
    }

    #[test]
    fn zero_projection_with_bias_gives_constant_embedding() {
        let mut p = params(2);
        p.tensor_mut("user.projection.weight").unwrap().values_mut().fill(0.0);
        p.tensor_mut("user.projection.bias").unwrap().values_mut().fill(0.25);
        for (a, g) in [(0, 0), (2, 1)] {
            let mut tape = Tape::new();
            let b = p.bind(&mut tape, |_| false);
            let e = user_embed(&mut tape, &p, &b, &user(a, g)).unwrap();
            assert!(tape.value(e).iter().all(|&v| v == 0.25));
        }
    }

    #[test]
    fn zero_final_layer_predicts_midpoint() {
        let mut p = params(3);
        p.tensor_mut("decision.2.weight").unwrap().values_mut().fill(0.0);
        let (_, logits) = infer(&p, &user(1, 0), &items()).unwrap();
        for r in expected_ratings(p.layout(), &logits) {
            assert!((r - 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn multi_hot_genre_is_mean_of_two_rows() {
        let p = params(4);
        let table = p.tensor("item.embedding.genre").unwrap().values();
        let mut tape = Tape::new();
        let b = p.bind(&mut tape, |_| false);
        let v = tape
            .embedding_bag(b.vars[2], bags(vec![vec![(1, 0.5), (3, 0.5)]]))
            .unwrap();
        for (d, got) in tape.value(v).iter().enumerate() {
            let by_hand = (table[64 + d] + table[3 * 64 + d]) / 2.0;
            assert!((got - by_hand).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_weights_reduce_to_rec_loss() {
        let p = params(5);
        let mut tape = Tape::new();
        let b = p.bind(&mut tape, |_| true);
        let f = forward(&mut tape, &p, &b, &user(0, 0), &items()).unwrap();
        let parts = combined_loss(&mut tape, &p, &b, &f, &[0, 4, 2], 1, 0.0, 0.0, false).unwrap();
        assert_eq!(tape.scalar(parts.total), tape.scalar(parts.rec));
        assert!(parts.g.is_none() && parts.h.is_none());
    }

    #[test]
    fn component_identity_holds() {
        let p = params(6);
        let mut tape = Tape::new();
        let b = p.bind(&mut tape, |_| true);
        let f = forward(&mut tape, &p, &b, &user(2, 1), &items()).unwrap();
        let parts = combined_loss(&mut tape, &p, &b, &f, &[1, 1, 3], 0, 1.0, 0.1, false).unwrap();
        let by_hand = tape.scalar(parts.rec)
            - 1.0 * tape.scalar(parts.g.unwrap())
            - 0.1 * tape.scalar(parts.h.unwrap());
        assert!((tape.scalar(parts.total) - by_hand).abs() < 1e-12);
    }

    #[test]
    fn rec_loss_leaves_discriminators_without_gradient() {
        let p = params(7);
        let mut tape = Tape::new();
        let b = p.bind(&mut tape, |_| true);
        let f = forward(&mut tape, &p, &b, &user(0, 1), &items()).unwrap();
        let l = rec_loss(&mut tape, &f, &[0, 1, 2]).unwrap();
        let grads = b.collect(&tape.backward(l).unwrap());
        for i in p.indices(Group::Discriminator) {
            assert!(grads[i].as_ref().is_none_or(|g| g.iter().all(|&x| x == 0.0)));
        }
    }

    #[test]
    fn argmax_picks_top_class() {
        let l = layout();
        assert_eq!(argmax_ratings(&l, &[0.0, 0.0, 0.0, 2.0, 1.0]), vec![4.0]);
    }

    #[test]
    fn checkpoint_round_trips_bitwise() {
        let p = params(8);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        p.save(&path).unwrap();
        let q = ModelParams::load(&path).unwrap();
        assert_eq!(p.layout(), q.layout());
        for (a, b) in p.tensors().iter().zip(q.tensors()) {
            let bits = |t: &Tensor| t.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
    }

    #[test]
    fn attribute_blind_user_embedding_ignores_flip() {
        let mut p = params(9);
        p.make_attribute_blind();
        let (a, _) = infer(&p, &user(1, 0), &items()).unwrap();
        let (b, _) = infer(&p, &user(1, 1), &items()).unwrap();
        assert_eq!(a, b);
    }
}
