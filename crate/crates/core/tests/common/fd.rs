//! Central finite differences against reverse-mode gradients.

use std::sync::Arc;

use fairmeta::model::{self, Block, ModelLayout, ModelParams};
use fairmeta::numerics::{BagRows, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-4;
/// Floor on the error denominator; FD round-off is ~1e-11 in absolute terms.
const FLOOR: f64 = 1e-6;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let v = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(vec![rows, cols], v).unwrap()
}

/// Scalar readout `r · x · c` with fixed random `r`, `c`, so every entry of `x`
/// receives a distinct upstream weight.
fn readout(tape: &mut Tape, x: Var, rng: &mut ChaCha8Rng) -> Var {
    let (m, n) = tape.dims(x);
    let r = tape.constant(1, m, (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let c = tape.constant(n, 1, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let y = tape.matmul(r, x).unwrap();
    tape.matmul(y, c).unwrap()
}

pub type Build = dyn Fn(&mut Tape, &[Var], &mut ChaCha8Rng) -> Var;

/// Max relative error over every input coordinate. Probes whose ±h points sit
/// on different ReLU pieces are skipped: the derivative is undefined there.
pub fn check(inputs: &[Tensor], build: &Build, seed: u64) -> (f64, usize) {
    let run = |xs: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.param(t, true)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let loss = build(&mut tape, &vars, &mut rng);
        (tape, vars, loss)
    };
    let (tape, vars, loss) = run(inputs);
    let grads = tape.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for (k, t) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[k]).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]);
        for j in 0..t.len() {
            let mut plus = inputs.to_vec();
            plus[k].values_mut()[j] += H;
            let mut minus = inputs.to_vec();
            minus[k].values_mut()[j] -= H;
            let (tp, _, lp) = run(&plus);
            let (tm, _, lm) = run(&minus);
            if tp.relu_pattern() != tm.relu_pattern() {
                continue;
            }
            let numeric = (tp.scalar(lp) - tm.scalar(lm)) / (2.0 * H);
            worst = worst.max(rel_err(analytic[j], numeric));
            checked += 1;
        }
    }
    (worst, checked)
}

pub fn bag(rng: &mut ChaCha8Rng, rows: usize, table: usize) -> BagRows {
    Arc::new(
        (0..rows)
            .map(|_| {
                let k = rng.gen_range(1..=3);
                (0..k).map(|_| (rng.gen_range(0..table), 1.0 / k as f64)).collect()
            })
            .collect(),
    )
}

pub fn primitives(seed: u64) -> Vec<(&'static str, Vec<Tensor>, Box<Build>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let mut r = |m, n| random(&mut rng, m, n);
    let bags = bag(&mut ChaCha8Rng::seed_from_u64(seed), 4, 6);
    let targets: Vec<usize> = (0..4).map(|i| (seed as usize + i * 3) % 5).collect();
    vec![
        (
            "matmul",
            vec![r(3, 4), r(4, 2)],
            Box::new(|t: &mut Tape, v: &[Var], g: &mut ChaCha8Rng| {
                let y = t.matmul(v[0], v[1]).unwrap();
                readout(t, y, g)
            }),
        ),
        (
            "add_bias",
            vec![r(3, 4), r(1, 4)],
            Box::new(|t: &mut Tape, v: &[Var], g: &mut ChaCha8Rng| {
                let y = t.add_bias(v[0], v[1]).unwrap();
                readout(t, y, g)
            }),
        ),
        (
            "relu",
            vec![r(3, 5)],
            Box::new(|t: &mut Tape, v: &[Var], g: &mut ChaCha8Rng| {
                let y = t.relu(v[0]);
                readout(t, y, g)
            }),
        ),
        (
            "concat_cols",
            vec![r(3, 2), r(3, 3)],
            Box::new(|t: &mut Tape, v: &[Var], g: &mut ChaCha8Rng| {
                let y = t.concat_cols(&[v[0], v[1]]).unwrap();
                readout(t, y, g)
            }),
        ),
        (
            "repeat_rows",
            vec![r(1, 4)],
            Box::new(|t: &mut Tape, v: &[Var], g: &mut ChaCha8Rng| {
                let y = t.repeat_rows(v[0], 3).unwrap();
                readout(t, y, g)
            }),
        ),
        (
            "embedding_bag",
            vec![r(6, 3)],
            Box::new(move |t: &mut Tape, v: &[Var], g: &mut ChaCha8Rng| {
                let y = t.embedding_bag(v[0], bags.clone()).unwrap();
                readout(t, y, g)
            }),
        ),
        (
            "scale_add_sum",
            vec![r(2, 3), r(2, 3)],
            Box::new(|t: &mut Tape, v: &[Var], _: &mut ChaCha8Rng| {
                let a = t.scale(v[0], -0.7);
                let s = t.add(a, v[1]).unwrap();
                let s = t.relu(s);
                t.sum(s)
            }),
        ),
        (
            "cross_entropy",
            vec![r(4, 5)],
            Box::new(move |t: &mut Tape, v: &[Var], _: &mut ChaCha8Rng| t.cross_entropy(v[0], &targets).unwrap()),
        ),
        (
            "affine_relu_stack",
            vec![r(3, 4), r(4, 5), r(1, 5), r(5, 2), r(1, 2)],
            Box::new(|t: &mut Tape, v: &[Var], g: &mut ChaCha8Rng| {
                let y = t.affine_relu_stack(v[0], &[(v[1], v[2]), (v[3], v[4])], true).unwrap();
                readout(t, y, g)
            }),
        ),
    ]
}

pub fn toy_layout() -> ModelLayout {
    ModelLayout {
        user_blocks: vec![Block { name: "age".into(), width: 3 }, Block { name: "gender".into(), width: 2 }],
        item_blocks: vec![Block { name: "genre".into(), width: 4 }],
        sensitive_block: 1,
        rating_min: 1,
        rating_levels: 5,
        sensitive_classes: 2,
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Loss {
    Rec,
    G,
    H,
    Combined,
}

pub struct Case {
    pub user: Vec<BagRows>,
    pub items: Vec<BagRows>,
    pub targets: Vec<usize>,
    pub label: usize,
}

pub fn loss_value(p: &ModelParams, case: &Case, which: Loss) -> (f64, Vec<Option<Vec<f64>>>, Vec<bool>) {
    let mut tape = Tape::new();
    let bound = p.bind(&mut tape, |_| true);
    let fwd = model::forward(&mut tape, p, &bound, &case.user, &case.items).unwrap();
    let (t, y, a) = (&case.targets, case.targets.as_slice(), case.label);
    let loss = match which {
        Loss::Rec => model::rec_loss(&mut tape, &fwd, t).unwrap(),
        Loss::G => model::disc_g_loss(&mut tape, p, &bound, &fwd, y, a, false).unwrap(),
        Loss::H => model::disc_h_loss(&mut tape, p, &bound, &fwd, y, a, false).unwrap(),
        Loss::Combined => model::combined_loss(&mut tape, p, &bound, &fwd, y, a, 1.0, 0.1, false).unwrap().total,
    };
    let grads = bound.collect(&tape.backward(loss).unwrap());
    (tape.scalar(loss), grads, tape.relu_pattern())
}


/// Worst relative error of each composed loss at a random toy model and batch,
/// with the number of coordinates compared.
pub fn composed_errors(seed: u64) -> Vec<(Loss, f64, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = ModelParams::init(toy_layout(), &mut rng);
    let n = 3;
    let case = Case {
        user: vec![
            Arc::new(vec![vec![(rng.gen_range(0..3), 1.0)]]),
            Arc::new(vec![vec![(rng.gen_range(0..2), 1.0)]]),
        ],
        items: vec![bag(&mut rng, n, 4)],
        targets: (0..n).map(|_| rng.gen_range(0..5)).collect(),
        label: rng.gen_range(0..2),
    };
    let mut out = Vec::new();
    for which in [Loss::Rec, Loss::G, Loss::H, Loss::Combined] {
        let (_, grads, pattern) = loss_value(&p, &case, which);
        let mut worst: f64 = 0.0;
        let mut checked = 0;
        // Random coordinates from every parameter tensor.
        for i in 0..p.len() {
            let len = p.tensors()[i].len();
            for _ in 0..2 {
                let j = rng.gen_range(0..len);
                let mut plus = p.clone();
                plus.tensors_mut()[i].values_mut()[j] += H;
                let mut minus = p.clone();
                minus.tensors_mut()[i].values_mut()[j] -= H;
                let (fp, _, pp) = loss_value(&plus, &case, which);
                let (fm, _, pm) = loss_value(&minus, &case, which);
                if pp != pattern || pm != pattern {
                    continue;
                }
                let numeric = (fp - fm) / (2.0 * H);
                let analytic = grads[i].as_ref().map_or(0.0, |g| g[j]);
                worst = worst.max(rel_err(analytic, numeric));
                checked += 1;
            }
        }
        out.push((which, worst, checked));
    }
    out
}

/// Number of parameter tensors in the toy model.
pub fn toy_tensor_count() -> usize {
    ModelParams::init(toy_layout(), &mut ChaCha8Rng::seed_from_u64(0)).len()
}
