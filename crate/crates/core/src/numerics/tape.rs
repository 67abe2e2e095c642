//! Reverse-mode differentiation over a dynamically recorded tape.
//!
//! Every forward pass records its operations onto a fresh [`Tape`]; nodes are
//! appended in evaluation order, so reverse iteration is a valid topological
//! order for the backward sweep. All values are row-major matrices.

use std::sync::Arc;

use super::{NumericsError, Tensor};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Sparse weighted rows used by [`Tape::embedding_bag`]: `rows[r]` lists
/// `(table row, weight)` pairs summed into output row `r`.
pub type BagRows = Arc<Vec<Vec<(usize, f64)>>>;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Relu(Var),
    ConcatCols(Vec<Var>),
    RepeatRows(Var),
    EmbeddingBag { table: Var, rows: BagRows },
    Scale(Var, f64),
    Add(Var, Var),
    Sum(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one backward sweep, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn wrt(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `var` (if any) into `tensor`'s gradient slot.
    pub fn accumulate_into(&self, var: Var, tensor: &mut Tensor) -> Result<(), NumericsError> {
        match self.wrt(var) {
            Some(g) => tensor.accumulate_grad(g),
            None => Ok(()),
        }
    }
}

/// `c (+)= a · b` where each operand is described by (rows, cols, row stride,
/// col stride), so transposed views cost nothing.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    c: &mut [f64],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(c.len() >= m * n);
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: strides describe in-bounds views of `a` (m×k), `b` (k×n) and the
    // row-major `c` (m×n); the callers derive them from the node shapes.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Plain matrix product of two row-major buffers.
pub fn matmul_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, a, (k as isize, 1), b, (n as isize, 1), &mut out, false);
    out
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        let n = self.node(v);
        (n.rows, n.cols)
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.node(v).value[0]
    }

    /// Records a tensor as a leaf; gradients flow to it iff it requires them.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let (r, c) = t.dims();
        self.push(r, c, t.values().to_vec(), Op::Leaf, t.requires_grad())
    }

    /// Records a leaf with an explicit gradient flag, overriding the tensor's own.
    pub fn param(&mut self, t: &Tensor, needs_grad: bool) -> Var {
        let (r, c) = t.dims();
        self.push(r, c, t.values().to_vec(), Op::Leaf, needs_grad)
    }

    /// Constant `rows × cols` input.
    pub fn constant(&mut self, rows: usize, cols: usize, value: Vec<f64>) -> Result<Var, NumericsError> {
        if rows * cols != value.len() {
            return Err(NumericsError::Shape {
                op: "constant",
                detail: format!("{rows}x{cols} needs {} values, got {}", rows * cols, value.len()),
            });
        }
        Ok(self.push(rows, cols, value, Op::Leaf, false))
    }

    /// Copy of `v` that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let n = self.node(v);
        let (r, c, value) = (n.rows, n.cols, n.value.clone());
        self.push(r, c, value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(NumericsError::Shape {
                op: "matmul",
                detail: format!("{m}x{k} by {k2}x{n}"),
            });
        }
        let value = matmul_into(self.value(a), self.value(b), m, k, n);
        let ng = self.node(a).needs_grad || self.node(b).needs_grad;
        Ok(self.push(m, n, value, Op::MatMul(a, b), ng))
    }

    /// Adds a `1×n` bias to every row of an `m×n` matrix.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var, NumericsError> {
        let (m, n) = self.dims(x);
        let (br, bc) = self.dims(b);
        if br * bc != n {
            return Err(NumericsError::Shape {
                op: "add_bias",
                detail: format!("{m}x{n} plus bias of {} values", br * bc),
            });
        }
        let bias = self.value(b);
        let mut value = self.value(x).to_vec();
        for row in value.chunks_exact_mut(n) {
            row.iter_mut().zip(bias).for_each(|(v, b)| *v += b);
        }
        let ng = self.node(x).needs_grad || self.node(b).needs_grad;
        Ok(self.push(m, n, value, Op::AddBias(x, b), ng))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let (m, n) = self.dims(x);
        let value = self.value(x).iter().map(|v| v.max(0.0)).collect();
        let ng = self.node(x).needs_grad;
        self.push(m, n, value, Op::Relu(x), ng)
    }

    /// Sign pattern (`input > 0`) of every ReLU input on the tape. Two tapes
    /// with equal patterns lie on the same linear piece.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(x) => Some(self.value(x).iter().map(|&v| v > 0.0)),
                _ => None,
            })
            .flatten()
            .collect()
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let rows = parts.first().map_or(0, |p| self.dims(*p).0);
        if parts.iter().any(|p| self.dims(*p).0 != rows) {
            return Err(NumericsError::Shape {
                op: "concat_cols",
                detail: "row counts differ".into(),
            });
        }
        let cols: usize = parts.iter().map(|p| self.dims(*p).1).sum();
        let mut value = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                let c = self.dims(*p).1;
                value.extend_from_slice(&self.value(*p)[r * c..(r + 1) * c]);
            }
        }
        let ng = parts.iter().any(|p| self.node(*p).needs_grad);
        Ok(self.push(rows, cols, value, Op::ConcatCols(parts.to_vec()), ng))
    }

    /// Tiles a single row `times` times.
    pub fn repeat_rows(&mut self, x: Var, times: usize) -> Result<Var, NumericsError> {
        let (r, c) = self.dims(x);
        if r != 1 {
            return Err(NumericsError::Shape {
                op: "repeat_rows",
                detail: format!("expected one row, got {r}"),
            });
        }
        let value = self.value(x).repeat(times);
        let ng = self.node(x).needs_grad;
        Ok(self.push(times, c, value, Op::RepeatRows(x), ng))
    }

    /// Weighted sums of table rows: `out[r] = Σ w · table[i]` over `rows[r]`.
    /// With one-hot rows this equals `X · table`; with averaged multi-hot rows
    /// it is the mean of the selected embeddings.
    pub fn embedding_bag(&mut self, table: Var, rows: BagRows) -> Result<Var, NumericsError> {
        let (tr, d) = self.dims(table);
        let t = self.value(table);
        let mut value = vec![0.0; rows.len() * d];
        for (r, bag) in rows.iter().enumerate() {
            let out = &mut value[r * d..(r + 1) * d];
            for &(i, w) in bag {
                if i >= tr {
                    return Err(NumericsError::Index { index: i, len: tr });
                }
                out.iter_mut()
                    .zip(&t[i * d..(i + 1) * d])
                    .for_each(|(o, e)| *o += w * e);
            }
        }
        let ng = self.node(table).needs_grad;
        let n = rows.len();
        Ok(self.push(n, d, value, Op::EmbeddingBag { table, rows }, ng))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let (m, n) = self.dims(x);
        let value = self.value(x).iter().map(|v| v * factor).collect();
        let ng = self.node(x).needs_grad;
        self.push(m, n, value, Op::Scale(x, factor), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        if self.dims(a) != self.dims(b) {
            return Err(NumericsError::Shape {
                op: "add",
                detail: format!("{:?} + {:?}", self.dims(a), self.dims(b)),
            });
        }
        let (m, n) = self.dims(a);
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let ng = self.node(a).needs_grad || self.node(b).needs_grad;
        Ok(self.push(m, n, value, Op::Add(a, b), ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = vec![self.value(x).iter().sum()];
        let ng = self.node(x).needs_grad;
        self.push(1, 1, value, Op::Sum(x), ng)
    }

    /// Mean over rows of the softmax cross-entropy between each logit row and
    /// its target class.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var, NumericsError> {
        let (m, c) = self.dims(logits);
        if targets.len() != m || m == 0 {
            return Err(NumericsError::Shape {
                op: "cross_entropy",
                detail: format!("{m} logit rows for {} targets", targets.len()),
            });
        }
        let lv = self.value(logits);
        let mut probs = Vec::with_capacity(m * c);
        let mut total = 0.0;
        for (row, &t) in lv.chunks_exact(c).zip(targets) {
            if t >= c {
                return Err(NumericsError::Index { index: t, len: c });
            }
            total += super::softmax_cross_entropy(row, t)?;
            probs.extend(super::softmax(row));
        }
        let ng = self.node(logits).needs_grad;
        Ok(self.push(
            1,
            1,
            vec![total / m as f64],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// `x ← ReLU(x·W + b)` for every hidden layer; the last layer stays linear
    /// when `final_linear` is set.
    pub fn affine_relu_stack(
        &mut self,
        x: Var,
        layers: &[(Var, Var)],
        final_linear: bool,
    ) -> Result<Var, NumericsError> {
        let mut h = x;
        for (i, &(w, b)) in layers.iter().enumerate() {
            let z = self.matmul(h, w)?;
            h = self.add_bias(z, b)?;
            if !(final_linear && i + 1 == layers.len()) {
                h = self.relu(h);
            }
        }
        Ok(h)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NumericsError> {
        let root = self.node(loss);
        if root.rows * root.cols != 1 {
            return Err(NumericsError::Contract(format!(
                "backward needs a scalar loss, got {}x{}",
                root.rows, root.cols
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if node.needs_grad {
                self.propagate(node, &upstream, &mut grads);
            }
            grads[idx] = Some(upstream);
        }
        for (g, n) in grads.iter_mut().zip(&self.nodes) {
            if !n.needs_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn with_grad(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        let node = &self.nodes[v.0];
        if !node.needs_grad {
            return;
        }
        let g = grads[v.0].get_or_insert_with(|| vec![0.0; node.value.len()]);
        f(g);
    }

    fn propagate(&self, node: &Node, up: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let n = node.cols;
                // dA = dC · Bᵀ
                let bv = self.value(*b);
                self.with_grad(grads, *a, |ga| {
                    gemm(m, n, k, up, (n as isize, 1), bv, (1, n as isize), ga, true)
                });
                // dB = Aᵀ · dC
                let av = self.value(*a);
                self.with_grad(grads, *b, |gb| {
                    gemm(k, m, n, av, (1, k as isize), up, (n as isize, 1), gb, true)
                });
            }
            Op::AddBias(x, b) => {
                self.with_grad(grads, *x, |gx| {
                    gx.iter_mut().zip(up).for_each(|(g, u)| *g += u)
                });
                self.with_grad(grads, *b, |gb| {
                    for row in up.chunks_exact(node.cols) {
                        gb.iter_mut().zip(row).for_each(|(g, u)| *g += u);
                    }
                });
            }
            Op::Relu(x) => {
                self.with_grad(grads, *x, |gx| {
                    for ((g, u), out) in gx.iter_mut().zip(up).zip(&node.value) {
                        if *out > 0.0 {
                            *g += u;
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let c = self.dims(*p).1;
                    self.with_grad(grads, *p, |gp| {
                        for (r, grow) in gp.chunks_exact_mut(c).enumerate() {
                            let start = r * node.cols + offset;
                            grow.iter_mut()
                                .zip(&up[start..start + c])
                                .for_each(|(g, u)| *g += u);
                        }
                    });
                    offset += c;
                }
            }
            Op::RepeatRows(x) => {
                self.with_grad(grads, *x, |gx| {
                    for row in up.chunks_exact(node.cols) {
                        gx.iter_mut().zip(row).for_each(|(g, u)| *g += u);
                    }
                });
            }
            Op::EmbeddingBag { table, rows } => {
                let d = node.cols;
                self.with_grad(grads, *table, |gt| {
                    for (r, bag) in rows.iter().enumerate() {
                        let src = &up[r * d..(r + 1) * d];
                        for &(i, w) in bag {
                            gt[i * d..(i + 1) * d]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(g, u)| *g += w * u);
                        }
                    }
                });
            }
            Op::Scale(x, f) => {
                self.with_grad(grads, *x, |gx| {
                    gx.iter_mut().zip(up).for_each(|(g, u)| *g += f * u)
                });
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    self.with_grad(grads, *v, |gv| {
                        gv.iter_mut().zip(up).for_each(|(g, u)| *g += u)
                    });
                }
            }
            Op::Sum(x) => {
                self.with_grad(grads, *x, |gx| gx.iter_mut().for_each(|g| *g += up[0]));
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let c = self.dims(*logits).1;
                let scale = up[0] / targets.len() as f64;
                self.with_grad(grads, *logits, |gl| {
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            gl[r * c + j] += scale * (probs[r * c + j] - onehot);
                        }
                    }
                });
            }
        }
    }
}
