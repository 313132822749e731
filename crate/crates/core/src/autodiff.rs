//! Recorded-operation reverse-mode differentiation.
//!
//! A [`Tape`] is an append-only arena of primitive operations. Forward values
//! are computed eagerly as operations are recorded; [`Tape::run_backward`]
//! walks the arena in reverse topological order (which is simply reverse
//! insertion order) and accumulates gradients into every registered parameter
//! leaf. Gradient accumulation uses a fixed order, so identical tapes produce
//! bit-identical gradients.

use std::collections::HashMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("backward output must be a scalar, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),
    #[error("tape is not topologically ordered at node {0}")]
    Structural(usize),
    #[error("batch of size {0} in training-mode batch norm (need >= 2)")]
    DegenerateBatch(usize),
    #[error("non-finite value produced by {context}")]
    NonFinite { context: String },
    #[error("epsilon {0} outside [1e-7, 1e-3]")]
    EpsilonRange(f64),
}

/// Identifier a caller assigns to a parameter leaf; gradients are keyed by it.
pub type ParamId = usize;

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Learnable scale/shift plus running statistics for one batch-norm layer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BatchNormState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub epsilon: f64,
}

impl BatchNormState {
    pub fn new(channels: usize) -> Self {
        Self {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: 0.1,
            epsilon: 1e-5,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }
}

/// Whether batch norm standardizes with batch statistics (and updates the
/// running ones) or applies the frozen affine transform.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    /// Block-diagonal product: the same adjacency applied to each batch
    /// element's node block. Input rows are (batch * nodes).
    AdjMatMul {
        adj: Arc<Tensor>,
        input: usize,
    },
    Add(usize, usize),
    /// Matrix plus a row vector broadcast over rows.
    AddRow(usize, usize),
    Mul(usize, usize),
    Relu(usize),
    Sigmoid(usize),
    Softmax(usize),
    SumAll(usize),
    Reshape(usize, Vec<usize>),
    BatchNorm {
        input: usize,
        scale: usize,
        shift: usize,
        mode: Mode,
        epsilon: f64,
        /// Statistics in effect at record time (used in `Infer` mode).
        frozen_mean: Vec<f64>,
        frozen_var: Vec<f64>,
    },
    /// logit[b][c] = sum_i w[c][i] * g[b][i] + bias[c], accumulated strictly
    /// left to right so the per-node products are reusable bit-for-bit as
    /// contribution scores.
    HeadLinear {
        g: usize,
        w: usize,
        bias: usize,
    },
    /// Mean binary cross-entropy on sigmoid(logits), probabilities clamped
    /// to [1e-12, 1 - 1e-12].
    BceWithLogits {
        logits: usize,
        targets: Arc<Vec<f64>>,
    },
    /// Mean multi-class cross-entropy on softmax(logits).
    SoftmaxCe {
        logits: usize,
        labels: Arc<Vec<usize>>,
    },
}

struct Node {
    op: Op,
    value: Tensor,
}

pub const PROB_CLAMP: f64 = 1e-12;

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(ParamId, usize)>,
}

/// The sigmoid used throughout the crate. Exposed so code that re-derives a
/// prediction from a logit (explanations, additivity checks) follows the
/// exact same floating-point path as the forward computation.
pub fn stable_sigmoid(z: f64) -> f64 {
    sigmoid(z)
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softmax_rows(z: &Tensor) -> Tensor {
    let (rows, cols) = (z.rows(), z.cols());
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let row = &z.data()[r * cols..(r + 1) * cols];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (j, &v) in row.iter().enumerate() {
            let e = (v - m).exp();
            out[r * cols + j] = e;
            sum += e;
        }
        for j in 0..cols {
            out[r * cols + j] /= sum;
        }
    }
    Tensor::from_parts(vec![rows, cols], out)
}

fn batch_stats(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (rows, cols) = (x.rows(), x.cols());
    let mut mean = vec![0.0; cols];
    for r in 0..rows {
        for c in 0..cols {
            mean[c] += x.data()[r * cols + c];
        }
    }
    for m in mean.iter_mut() {
        *m /= rows as f64;
    }
    let mut var = vec![0.0; cols];
    for r in 0..rows {
        for c in 0..cols {
            let d = x.data()[r * cols + c] - mean[c];
            var[c] += d * d;
        }
    }
    for v in var.iter_mut() {
        *v /= rows as f64; // biased, used for normalization
    }
    (mean, var)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    /// Records a constant input; it receives no gradient.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value)
    }

    /// Records a parameter leaf; `run_backward` reports a gradient for it
    /// (zeros if the output does not depend on it).
    pub fn param(&mut self, id: ParamId, value: Tensor) -> Var {
        let v = self.push(Op::Leaf, value);
        self.params.push((id, v.0));
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::MatMul(a.0, b.0), value))
    }

    /// Applies `adj` (N x N) to each consecutive N-row block of `input`.
    pub fn adj_matmul(&mut self, adj: Arc<Tensor>, input: Var) -> Result<Var, AutodiffError> {
        let x = self.value(input);
        let n = adj.rows();
        if adj.shape().len() != 2 || adj.cols() != n || x.rows() % n != 0 {
            return Err(TensorError::ShapeMismatch {
                op: "adj_matmul",
                left: adj.shape().to_vec(),
                right: x.shape().to_vec(),
            }
            .into());
        }
        let value = apply_blockwise(&adj, x, false)?;
        Ok(self.push(Op::AdjMatMul { adj, input: input.0 }, value))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (x, y) = (self.value(a), self.value(b));
        if !x.same_shape(y) {
            return Err(shape_err("add", x, y).into());
        }
        let data = x.data().iter().zip(y.data()).map(|(u, v)| u + v).collect();
        let value = Tensor::from_parts(x.shape().to_vec(), data);
        Ok(self.push(Op::Add(a.0, b.0), value))
    }

    pub fn add_row(&mut self, mat: Var, row: Var) -> Result<Var, AutodiffError> {
        let (x, r) = (self.value(mat), self.value(row));
        if x.shape().len() != 2 || r.len() != x.cols() {
            return Err(shape_err("add_row", x, r).into());
        }
        let cols = x.cols();
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + r.data()[i % cols])
            .collect();
        let value = Tensor::from_parts(x.shape().to_vec(), data);
        Ok(self.push(Op::AddRow(mat.0, row.0), value))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (x, y) = (self.value(a), self.value(b));
        if !x.same_shape(y) {
            return Err(shape_err("mul", x, y).into());
        }
        let data = x.data().iter().zip(y.data()).map(|(u, v)| u * v).collect();
        let value = Tensor::from_parts(x.shape().to_vec(), data);
        Ok(self.push(Op::Mul(a.0, b.0), value))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push(Op::Relu(a.0), value)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        self.push(Op::Sigmoid(a.0), value)
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let x = self.value(a);
        if x.shape().len() != 2 {
            return Err(shape_err("softmax", x, x).into());
        }
        let value = softmax_rows(x);
        Ok(self.push(Op::Softmax(a.0), value))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        self.push(Op::SumAll(a.0), Tensor::from_parts(vec![1], vec![s]))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var, AutodiffError> {
        let value = self.value(a).reshape(shape.clone())?;
        Ok(self.push(Op::Reshape(a.0, shape), value))
    }

    /// Batch normalization over rows, per channel (column). In `Train` mode
    /// the running statistics in `state` are updated in place (unbiased
    /// variance, as is conventional for running estimates).
    pub fn batch_norm(
        &mut self,
        input: Var,
        scale: Var,
        shift: Var,
        state: &mut BatchNormState,
        mode: Mode,
    ) -> Result<Var, AutodiffError> {
        let x = self.value(input);
        let c = state.channels();
        if x.shape().len() != 2 || x.cols() != c || self.value(scale).len() != c || self.value(shift).len() != c {
            return Err(shape_err("batch_norm", x, self.value(scale)).into());
        }
        let rows = x.rows();
        if mode == Mode::Train {
            if rows < 2 {
                return Err(AutodiffError::DegenerateBatch(rows));
            }
            let (mean, var) = batch_stats(x);
            let m = state.momentum;
            let unbias = rows as f64 / (rows as f64 - 1.0);
            for ch in 0..c {
                state.running_mean[ch] = (1.0 - m) * state.running_mean[ch] + m * mean[ch];
                state.running_var[ch] = (1.0 - m) * state.running_var[ch] + m * var[ch] * unbias;
            }
        }
        let op = Op::BatchNorm {
            input: input.0,
            scale: scale.0,
            shift: shift.0,
            mode,
            epsilon: state.epsilon,
            frozen_mean: state.running_mean.clone(),
            frozen_var: state.running_var.clone(),
        };
        let value = eval_batch_norm(
            x,
            self.value(scale),
            self.value(shift),
            &op,
        );
        Ok(self.push(op, value))
    }

    /// Interpretable output head; see [`Op::HeadLinear`].
    pub fn head_linear(&mut self, g: Var, w: Var, bias: Var) -> Result<Var, AutodiffError> {
        let (gv, wv, bv) = (self.value(g), self.value(w), self.value(bias));
        if gv.shape().len() != 2
            || wv.shape().len() != 2
            || wv.cols() != gv.cols()
            || bv.len() != wv.rows()
        {
            return Err(shape_err("head_linear", gv, wv).into());
        }
        let value = eval_head_linear(gv, wv, bv);
        Ok(self.push(
            Op::HeadLinear {
                g: g.0,
                w: w.0,
                bias: bias.0,
            },
            value,
        ))
    }

    pub fn bce_with_logits(&mut self, logits: Var, targets: Vec<f64>) -> Result<Var, AutodiffError> {
        let z = self.value(logits);
        if z.len() != targets.len() {
            return Err(shape_err("bce_with_logits", z, z).into());
        }
        let targets = Arc::new(targets);
        let value = eval_bce(z, &targets);
        Ok(self.push(
            Op::BceWithLogits {
                logits: logits.0,
                targets,
            },
            value,
        ))
    }

    pub fn softmax_ce(&mut self, logits: Var, labels: Vec<usize>) -> Result<Var, AutodiffError> {
        let z = self.value(logits);
        if z.shape().len() != 2 || z.rows() != labels.len() {
            return Err(shape_err("softmax_ce", z, z).into());
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= z.cols()) {
            return Err(TensorError::ShapeMismatch {
                op: "softmax_ce label out of range",
                left: vec![bad],
                right: vec![z.cols()],
            }
            .into());
        }
        let labels = Arc::new(labels);
        let value = eval_softmax_ce(z, &labels);
        Ok(self.push(
            Op::SoftmaxCe {
                logits: logits.0,
                labels,
            },
            value,
        ))
    }

    /// Recomputes every forward value from the leaves. Used to check the
    /// replay-determinism invariant.
    pub fn replay_forward(&self) -> Result<Vec<Tensor>, AutodiffError> {
        let mut vals: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for (i, node) in self.nodes.iter().enumerate() {
            for p in op_parents(&node.op) {
                if p >= i {
                    return Err(AutodiffError::Structural(i));
                }
            }
            let v = match &node.op {
                Op::Leaf => node.value.clone(),
                op => eval_op(op, &vals)?,
            };
            vals.push(v);
        }
        Ok(vals)
    }

    /// Reverse pass from a scalar output. Returns d(output)/d(param) for every
    /// registered parameter; parameters the output does not reference get zero
    /// gradients.
    pub fn run_backward(&self, output: Var) -> Result<HashMap<ParamId, Tensor>, AutodiffError> {
        let out_val = self.value(output);
        if !out_val.is_scalar() {
            return Err(AutodiffError::NonScalarOutput(out_val.shape().to_vec()));
        }
        for (i, node) in self.nodes.iter().enumerate() {
            for p in op_parents(&node.op) {
                if p >= i {
                    return Err(AutodiffError::Structural(i));
                }
            }
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Tensor::from_parts(vec![1], vec![1.0]));

        for i in (0..self.nodes.len()).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g); // keep for parameter collection
                }
                Op::MatMul(a, b) => {
                    let da = g.matmul_nt(&self.nodes[*b].value)?;
                    let db = self.nodes[*a].value.matmul_tn(&g)?;
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::AdjMatMul { adj, input } => {
                    let dx = apply_blockwise(adj, &g, true)?;
                    accumulate(&mut grads, *input, dx);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::AddRow(mat, row) => {
                    let cols = self.nodes[*row].value.len();
                    let mut dr = vec![0.0; cols];
                    for (idx, &v) in g.data().iter().enumerate() {
                        dr[idx % cols] += v;
                    }
                    accumulate(&mut grads, *row, Tensor::from_parts(vec![cols], dr));
                    accumulate(&mut grads, *mat, g);
                }
                Op::Mul(a, b) => {
                    let av = &self.nodes[*a].value;
                    let bv = &self.nodes[*b].value;
                    let da = Tensor::from_parts(
                        av.shape().to_vec(),
                        g.data().iter().zip(bv.data()).map(|(u, v)| u * v).collect(),
                    );
                    let db = Tensor::from_parts(
                        bv.shape().to_vec(),
                        g.data().iter().zip(av.data()).map(|(u, v)| u * v).collect(),
                    );
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Relu(a) => {
                    // subgradient at exactly 0 is 0
                    let av = &self.nodes[*a].value;
                    let da = Tensor::from_parts(
                        av.shape().to_vec(),
                        g.data()
                            .iter()
                            .zip(av.data())
                            .map(|(u, v)| if *v > 0.0 { *u } else { 0.0 })
                            .collect(),
                    );
                    accumulate(&mut grads, *a, da);
                }
                Op::Sigmoid(a) => {
                    let yv = &node.value;
                    let da = Tensor::from_parts(
                        yv.shape().to_vec(),
                        g.data()
                            .iter()
                            .zip(yv.data())
                            .map(|(u, y)| u * y * (1.0 - y))
                            .collect(),
                    );
                    accumulate(&mut grads, *a, da);
                }
                Op::Softmax(a) => {
                    let p = &node.value;
                    let (rows, cols) = (p.rows(), p.cols());
                    let mut da = vec![0.0; rows * cols];
                    for r in 0..rows {
                        let pr = &p.data()[r * cols..(r + 1) * cols];
                        let gr = &g.data()[r * cols..(r + 1) * cols];
                        let dot: f64 = pr.iter().zip(gr).map(|(p, g)| p * g).sum();
                        for c in 0..cols {
                            da[r * cols + c] = pr[c] * (gr[c] - dot);
                        }
                    }
                    accumulate(&mut grads, *a, Tensor::from_parts(vec![rows, cols], da));
                }
                Op::SumAll(a) => {
                    let av = &self.nodes[*a].value;
                    let da = Tensor::from_parts(
                        av.shape().to_vec(),
                        vec![g.item(); av.len()],
                    );
                    accumulate(&mut grads, *a, da);
                }
                Op::Reshape(a, _) => {
                    let av = &self.nodes[*a].value;
                    let da = Tensor::from_parts(av.shape().to_vec(), g.data().to_vec());
                    accumulate(&mut grads, *a, da);
                }
                Op::BatchNorm {
                    input,
                    scale,
                    shift,
                    mode,
                    epsilon,
                    frozen_mean,
                    frozen_var,
                } => {
                    let x = &self.nodes[*input].value;
                    let sc = &self.nodes[*scale].value;
                    let (rows, cols) = (x.rows(), x.cols());
                    let (mean, var) = match mode {
                        Mode::Train => batch_stats(x),
                        Mode::Infer => (frozen_mean.clone(), frozen_var.clone()),
                    };
                    let invstd: Vec<f64> =
                        var.iter().map(|v| 1.0 / (v + epsilon).sqrt()).collect();
                    let mut dscale = vec![0.0; cols];
                    let mut dshift = vec![0.0; cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            let xhat = (x.data()[r * cols + c] - mean[c]) * invstd[c];
                            let gy = g.data()[r * cols + c];
                            dscale[c] += gy * xhat;
                            dshift[c] += gy;
                        }
                    }
                    let mut dx = vec![0.0; rows * cols];
                    match mode {
                        Mode::Infer => {
                            for r in 0..rows {
                                for c in 0..cols {
                                    dx[r * cols + c] =
                                        g.data()[r * cols + c] * sc.data()[c] * invstd[c];
                                }
                            }
                        }
                        Mode::Train => {
                            let m = rows as f64;
                            for c in 0..cols {
                                let sum_gy = dshift[c];
                                let sum_gy_xhat = dscale[c];
                                for r in 0..rows {
                                    let xhat = (x.data()[r * cols + c] - mean[c]) * invstd[c];
                                    let gy = g.data()[r * cols + c];
                                    dx[r * cols + c] = sc.data()[c] * invstd[c]
                                        * (gy - sum_gy / m - xhat * sum_gy_xhat / m);
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *input, Tensor::from_parts(vec![rows, cols], dx));
                    accumulate(&mut grads, *scale, Tensor::from_parts(vec![cols], dscale));
                    accumulate(&mut grads, *shift, Tensor::from_parts(vec![cols], dshift));
                }
                Op::HeadLinear { g: gi, w, bias } => {
                    let gv = &self.nodes[*gi].value;
                    let wv = &self.nodes[*w].value;
                    let (batch, n) = (gv.rows(), gv.cols());
                    let k = wv.rows();
                    let mut dg = vec![0.0; batch * n];
                    let mut dw = vec![0.0; k * n];
                    let mut db = vec![0.0; k];
                    for b in 0..batch {
                        for c in 0..k {
                            let gy = g.data()[b * k + c];
                            db[c] += gy;
                            for i in 0..n {
                                dg[b * n + i] += gy * wv.data()[c * n + i];
                                dw[c * n + i] += gy * gv.data()[b * n + i];
                            }
                        }
                    }
                    accumulate(&mut grads, *gi, Tensor::from_parts(vec![batch, n], dg));
                    accumulate(&mut grads, *w, Tensor::from_parts(vec![k, n], dw));
                    accumulate(&mut grads, *bias, Tensor::from_parts(vec![k], db));
                }
                Op::BceWithLogits { logits, targets } => {
                    let z = &self.nodes[*logits].value;
                    let scale = g.item() / targets.len() as f64;
                    let dz: Vec<f64> = z
                        .data()
                        .iter()
                        .zip(targets.iter())
                        .map(|(&zi, &y)| {
                            let p = sigmoid(zi);
                            if p < PROB_CLAMP || p > 1.0 - PROB_CLAMP {
                                0.0 // loss is flat in the clamped region
                            } else {
                                scale * (p - y)
                            }
                        })
                        .collect();
                    accumulate(&mut grads, *logits, Tensor::from_parts(z.shape().to_vec(), dz));
                }
                Op::SoftmaxCe { logits, labels } => {
                    let z = &self.nodes[*logits].value;
                    let p = softmax_rows(z);
                    let (rows, cols) = (z.rows(), z.cols());
                    let scale = g.item() / rows as f64;
                    let mut dz = vec![0.0; rows * cols];
                    for r in 0..rows {
                        let y = labels[r];
                        if p.data()[r * cols + y] < PROB_CLAMP {
                            continue; // clamped: flat
                        }
                        for c in 0..cols {
                            let indicator = if c == y { 1.0 } else { 0.0 };
                            dz[r * cols + c] = scale * (p.data()[r * cols + c] - indicator);
                        }
                    }
                    accumulate(&mut grads, *logits, Tensor::from_parts(vec![rows, cols], dz));
                }
            }
        }

        let mut out = HashMap::new();
        for &(id, idx) in &self.params {
            let g = grads[idx]
                .clone()
                .unwrap_or_else(|| Tensor::zeros(self.nodes[idx].value.shape().to_vec()));
            out.insert(id, g);
        }
        Ok(out)
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn accumulate(grads: &mut [Option<Tensor>], idx: usize, g: Tensor) {
    match &mut grads[idx] {
        Some(existing) => {
            let data = existing
                .data()
                .iter()
                .zip(g.data())
                .map(|(a, b)| a + b)
                .collect();
            *existing = Tensor::from_parts(existing.shape().to_vec(), data);
        }
        slot @ None => *slot = Some(g),
    }
}

/// adj (or its transpose) applied to each N-row block of x.
fn apply_blockwise(adj: &Tensor, x: &Tensor, transpose: bool) -> Result<Tensor, TensorError> {
    let n = adj.rows();
    let blocks = x.rows() / n;
    let cols = x.cols();
    let mut out = vec![0.0; x.len()];
    for b in 0..blocks {
        let block = Tensor::from_parts(
            vec![n, cols],
            x.data()[b * n * cols..(b + 1) * n * cols].to_vec(),
        );
        let prod = if transpose {
            adj.matmul_tn(&block)?
        } else {
            adj.matmul(&block)?
        };
        out[b * n * cols..(b + 1) * n * cols].copy_from_slice(prod.data());
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

fn eval_batch_norm(x: &Tensor, scale: &Tensor, shift: &Tensor, op: &Op) -> Tensor {
    let (mode, epsilon, frozen_mean, frozen_var) = match op {
        Op::BatchNorm {
            mode,
            epsilon,
            frozen_mean,
            frozen_var,
            ..
        } => (*mode, *epsilon, frozen_mean, frozen_var),
        _ => unreachable!(),
    };
    let (rows, cols) = (x.rows(), x.cols());
    let (mean, var) = match mode {
        Mode::Train => batch_stats(x),
        Mode::Infer => (frozen_mean.clone(), frozen_var.clone()),
    };
    let invstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + epsilon).sqrt()).collect();
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            let xhat = (x.data()[r * cols + c] - mean[c]) * invstd[c];
            out[r * cols + c] = scale.data()[c] * xhat + shift.data()[c];
        }
    }
    Tensor::from_parts(vec![rows, cols], out)
}

fn eval_head_linear(g: &Tensor, w: &Tensor, bias: &Tensor) -> Tensor {
    let (batch, n) = (g.rows(), g.cols());
    let k = w.rows();
    let mut out = vec![0.0; batch * k];
    for b in 0..batch {
        for c in 0..k {
            let mut acc = 0.0;
            for i in 0..n {
                acc += w.data()[c * n + i] * g.data()[b * n + i];
            }
            out[b * k + c] = acc + bias.data()[c];
        }
    }
    Tensor::from_parts(vec![batch, k], out)
}

fn eval_bce(z: &Tensor, targets: &[f64]) -> Tensor {
    let mut total = 0.0;
    for (&zi, &y) in z.data().iter().zip(targets) {
        let p = sigmoid(zi).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        total += -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());
    }
    Tensor::from_parts(vec![1], vec![total / targets.len() as f64])
}

fn eval_softmax_ce(z: &Tensor, labels: &[usize]) -> Tensor {
    let p = softmax_rows(z);
    let cols = z.cols();
    let mut total = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        total += -p.data()[r * cols + y].max(PROB_CLAMP).ln();
    }
    Tensor::from_parts(vec![1], vec![total / labels.len() as f64])
}

fn op_parents(op: &Op) -> Vec<usize> {
    match op {
        Op::Leaf => vec![],
        Op::MatMul(a, b) | Op::Add(a, b) | Op::AddRow(a, b) | Op::Mul(a, b) => vec![*a, *b],
        Op::AdjMatMul { input, .. } => vec![*input],
        Op::Relu(a) | Op::Sigmoid(a) | Op::Softmax(a) | Op::SumAll(a) | Op::Reshape(a, _) => {
            vec![*a]
        }
        Op::BatchNorm {
            input,
            scale,
            shift,
            ..
        } => vec![*input, *scale, *shift],
        Op::HeadLinear { g, w, bias } => vec![*g, *w, *bias],
        Op::BceWithLogits { logits, .. } | Op::SoftmaxCe { logits, .. } => vec![*logits],
    }
}

fn eval_op(op: &Op, vals: &[Tensor]) -> Result<Tensor, AutodiffError> {
    Ok(match op {
        Op::Leaf => unreachable!("leaves carry their own value"),
        Op::MatMul(a, b) => vals[*a].matmul(&vals[*b])?,
        Op::AdjMatMul { adj, input } => apply_blockwise(adj, &vals[*input], false)?,
        Op::Add(a, b) => {
            let data = vals[*a]
                .data()
                .iter()
                .zip(vals[*b].data())
                .map(|(u, v)| u + v)
                .collect();
            Tensor::from_parts(vals[*a].shape().to_vec(), data)
        }
        Op::AddRow(a, b) => {
            let cols = vals[*b].len();
            let data = vals[*a]
                .data()
                .iter()
                .enumerate()
                .map(|(i, v)| v + vals[*b].data()[i % cols])
                .collect();
            Tensor::from_parts(vals[*a].shape().to_vec(), data)
        }
        Op::Mul(a, b) => {
            let data = vals[*a]
                .data()
                .iter()
                .zip(vals[*b].data())
                .map(|(u, v)| u * v)
                .collect();
            Tensor::from_parts(vals[*a].shape().to_vec(), data)
        }
        Op::Relu(a) => vals[*a].map(|v| if v > 0.0 { v } else { 0.0 }),
        Op::Sigmoid(a) => vals[*a].map(sigmoid),
        Op::Softmax(a) => softmax_rows(&vals[*a]),
        Op::SumAll(a) => Tensor::from_parts(vec![1], vec![vals[*a].data().iter().sum()]),
        Op::Reshape(a, shape) => Tensor::from_parts(shape.clone(), vals[*a].data().to_vec()),
        Op::BatchNorm {
            input,
            scale,
            shift,
            ..
        } => eval_batch_norm(&vals[*input], &vals[*scale], &vals[*shift], op),
        Op::HeadLinear { g, w, bias } => eval_head_linear(&vals[*g], &vals[*w], &vals[*bias]),
        Op::BceWithLogits { logits, targets } => eval_bce(&vals[*logits], targets),
        Op::SoftmaxCe { logits, labels } => eval_softmax_ce(&vals[*logits], labels),
    })
}

/// Compares the tape gradient of a scalar function against central finite
/// differences. Returns the max over coordinates of
/// |analytic - numeric| / max(1, |analytic|, |numeric|).
pub fn grad_check<F>(build: F, point: &Tensor, epsilon: f64) -> Result<f64, AutodiffError>
where
    F: Fn(&mut Tape, Var) -> Result<Var, AutodiffError>,
{
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(AutodiffError::EpsilonRange(epsilon));
    }
    let eval = |t: &Tensor| -> Result<f64, AutodiffError> {
        let mut tape = Tape::new();
        let v = tape.param(0, t.clone());
        let out = build(&mut tape, v)?;
        let val = tape.value(out);
        if !val.is_scalar() {
            return Err(AutodiffError::NonScalarOutput(val.shape().to_vec()));
        }
        let y = val.item();
        if !y.is_finite() {
            return Err(AutodiffError::NonFinite {
                context: "grad_check function value".into(),
            });
        }
        Ok(y)
    };

    let mut tape = Tape::new();
    let v = tape.param(0, point.clone());
    let out = build(&mut tape, v)?;
    let grads = tape.run_backward(out)?;
    let analytic = grads.get(&0).expect("param 0 registered");

    let mut max_err: f64 = 0.0;
    for i in 0..point.len() {
        let mut plus = point.data().to_vec();
        plus[i] += epsilon;
        let mut minus = point.data().to_vec();
        minus[i] -= epsilon;
        let fp = eval(&Tensor::from_parts(point.shape().to_vec(), plus))?;
        let fm = eval(&Tensor::from_parts(point.shape().to_vec(), minus))?;
        let numeric = (fp - fm) / (2.0 * epsilon);
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / 1.0f64.max(a.abs()).max(numeric.abs());
        max_err = max_err.max(err);
    }
    Ok(max_err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn relu_sum_gradient() {
        // f(w) = sum(relu(w)) at w = [1, -2, 3] -> grad [1, 0, 1]
        let mut tape = Tape::new();
        let w = tape.param(0, Tensor::vector(vec![1.0, -2.0, 3.0]).unwrap());
        let r = tape.relu(w);
        let s = tape.sum_all(r);
        let grads = tape.run_backward(s).unwrap();
        assert_eq!(grads[&0].data(), &[1.0, 0.0, 1.0]);
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let mut tape = Tape::new();
        let w = tape.param(0, Tensor::scalar(0.0).unwrap());
        let s = tape.sigmoid(w);
        let out = tape.sum_all(s);
        let grads = tape.run_backward(out).unwrap();
        assert!((grads[&0].data()[0] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn matmul_gradient_is_column_sums() {
        // f(W) = sum(X * W), X = [[1,2],[3,4]] -> dW = column sums of X = [[4],[6]]
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let w = tape.param(0, Tensor::matrix(2, 1, vec![0.5, -0.3]).unwrap());
        let y = tape.matmul(x, w).unwrap();
        let s = tape.sum_all(y);
        let grads = tape.run_backward(s).unwrap();
        assert_eq!(grads[&0].data(), &[4.0, 6.0]);
    }

    #[test]
    fn unreferenced_param_gets_zero_gradient() {
        let mut tape = Tape::new();
        let a = tape.param(0, Tensor::scalar(2.0).unwrap());
        let _unused = tape.param(1, Tensor::vector(vec![1.0, 2.0]).unwrap());
        let s = tape.sum_all(a);
        let grads = tape.run_backward(s).unwrap();
        assert_eq!(grads[&1].data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_output_rejected() {
        let mut tape = Tape::new();
        let a = tape.param(0, Tensor::vector(vec![1.0, 2.0]).unwrap());
        assert!(matches!(
            tape.run_backward(a),
            Err(AutodiffError::NonScalarOutput(_))
        ));
    }

    #[test]
    fn grad_check_quadratic() {
        // f(w) = w^2 at w = 3: analytic 6, central difference exact to roundoff.
        let err = grad_check(
            |t, w| {
                let sq = t.mul(w, w)?;
                Ok(t.sum_all(sq))
            },
            &Tensor::scalar(3.0).unwrap(),
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-6, "err = {err}");
    }

    #[test]
    fn grad_check_sigmoid_vector() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let data: Vec<f64> = (0..10).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let err = grad_check(
            |t, w| {
                let s = t.sigmoid(w);
                Ok(t.sum_all(s))
            },
            &Tensor::vector(data).unwrap(),
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-6, "err = {err}");
    }

    #[test]
    fn grad_check_epsilon_bounds() {
        let p = Tensor::scalar(1.0).unwrap();
        assert!(grad_check(|t, w| Ok(t.sum_all(w)), &p, 1e-8).is_err());
        assert!(grad_check(|t, w| Ok(t.sum_all(w)), &p, 1e-2).is_err());
    }

    #[test]
    fn primitive_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        // A composite touching matmul, add_row, relu, sigmoid, mul, batchnorm-free path.
        let fixed: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let point: Vec<f64> = (0..12)
            .map(|_| loop {
                // keep clear of relu kinks
                let v: f64 = rng.gen_range(-1.0..1.0);
                if v.abs() > 1e-3 {
                    break v;
                }
            })
            .collect();
        let fixed_t = Tensor::matrix(4, 3, fixed).unwrap();
        let err = grad_check(
            |t, w| {
                let x = t.leaf(fixed_t.clone());
                let wm = t.reshape(w, vec![3, 4])?;
                let h = t.matmul(x, wm)?;
                let r = t.relu(h);
                let s = t.sigmoid(r);
                let m = t.mul(s, s)?;
                Ok(t.sum_all(m))
            },
            &Tensor::vector(point).unwrap(),
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-6, "err = {err}");
    }

    #[test]
    fn batch_norm_training_standardizes() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::matrix(4, 1, vec![-1.5, -0.5, 0.5, 1.5]).unwrap());
        let scale = tape.param(0, Tensor::vector(vec![1.0]).unwrap());
        let shift = tape.param(1, Tensor::vector(vec![0.0]).unwrap());
        let mut state = BatchNormState::new(1);
        let y = tape
            .batch_norm(x, scale, shift, &mut state, Mode::Train)
            .unwrap();
        let out = tape.value(y).data().to_vec();
        // input already has mean 0; variance 1.25, so output is a rescaling
        let std = (1.25f64 + 1e-5).sqrt();
        for (o, i) in out.iter().zip([-1.5, -0.5, 0.5, 1.5]) {
            assert!((o - i / std).abs() < 1e-12);
        }
        assert!(state.running_mean[0].abs() < 1e-15);
        assert!(state.running_var[0] > 0.0);
    }

    #[test]
    fn batch_norm_constant_channel_yields_shift() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::matrix(3, 1, vec![5.0, 5.0, 5.0]).unwrap());
        let scale = tape.leaf(Tensor::vector(vec![2.0]).unwrap());
        let shift = tape.leaf(Tensor::vector(vec![0.7]).unwrap());
        let mut state = BatchNormState::new(1);
        let y = tape
            .batch_norm(x, scale, shift, &mut state, Mode::Train)
            .unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 0.7).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_norm_rejects_single_row_in_training() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
        let scale = tape.leaf(Tensor::vector(vec![1.0, 1.0]).unwrap());
        let shift = tape.leaf(Tensor::vector(vec![0.0, 0.0]).unwrap());
        let mut state = BatchNormState::new(2);
        assert!(matches!(
            tape.batch_norm(x, scale, shift, &mut state, Mode::Train),
            Err(AutodiffError::DegenerateBatch(1))
        ));
    }

    #[test]
    fn inference_batch_norm_is_affine() {
        let mut state = BatchNormState::new(3);
        state.running_mean = vec![0.3, -1.0, 2.0];
        state.running_var = vec![0.5, 2.0, 1.0];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let bn = |x: &Tensor, state: &mut BatchNormState| {
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone());
            let sc = tape.leaf(Tensor::vector(vec![1.3, 0.5, 2.0]).unwrap());
            let sh = tape.leaf(Tensor::vector(vec![0.1, -0.2, 0.3]).unwrap());
            let y = tape.batch_norm(xv, sc, sh, state, Mode::Infer).unwrap();
            tape.value(y).clone()
        };
        let zero = bn(&Tensor::zeros(vec![1, 3]), &mut state);
        for _ in 0..20 {
            let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let alpha: f64 = rng.gen_range(0.1..4.0);
            let ax: Vec<f64> = x.iter().map(|v| alpha * v).collect();
            let y = bn(&Tensor::matrix(1, 3, x).unwrap(), &mut state);
            let yax = bn(&Tensor::matrix(1, 3, ax).unwrap(), &mut state);
            for c in 0..3 {
                let lhs = yax.data()[c] - zero.data()[c];
                let rhs = alpha * (y.data()[c] - zero.data()[c]);
                assert!((lhs - rhs).abs() < 1e-9, "channel {c}: {lhs} vs {rhs}");
            }
        }
    }

    #[test]
    fn batch_norm_train_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let point: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let err = grad_check(
            |t, w| {
                let x = t.reshape(w, vec![4, 2])?;
                let sc = t.leaf(Tensor::vector(vec![1.2, 0.8]).unwrap());
                let sh = t.leaf(Tensor::vector(vec![0.1, -0.1]).unwrap());
                let mut state = BatchNormState::new(2);
                let y = t.batch_norm(x, sc, sh, &mut state, Mode::Train)?;
                let s = t.sigmoid(y);
                Ok(t.sum_all(s))
            },
            &Tensor::vector(point).unwrap(),
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-6, "err = {err}");
    }

    #[test]
    fn replay_is_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut tape = Tape::new();
        let x = tape.leaf(
            Tensor::matrix(4, 3, (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap(),
        );
        let w = tape.param(
            0,
            Tensor::matrix(3, 2, (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap(),
        );
        let h = tape.matmul(x, w).unwrap();
        let r = tape.relu(h);
        let s = tape.sigmoid(r);
        let _ = tape.sum_all(s);
        let replayed = tape.replay_forward().unwrap();
        for (i, v) in replayed.iter().enumerate() {
            assert_eq!(v.data(), tape.nodes[i].value.data(), "node {i}");
        }
    }

    #[test]
    fn bce_loss_values_and_gradient() {
        // uniform prediction: loss = ln 2
        let mut tape = Tape::new();
        let z = tape.param(0, Tensor::matrix(1, 1, vec![0.0]).unwrap());
        let l = tape.bce_with_logits(z, vec![1.0]).unwrap();
        assert!((tape.value(l).item() - std::f64::consts::LN_2).abs() < 1e-15);
        // gradient wrt logit is p - y
        let grads = tape.run_backward(l).unwrap();
        assert!((grads[&0].data()[0] - (0.5 - 1.0)).abs() < 1e-15);
    }

    #[test]
    fn softmax_ce_matches_closed_form_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let z: Vec<f64> = (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let labels = vec![2usize, 0];
        let mut tape = Tape::new();
        let zv = tape.param(0, Tensor::matrix(2, 3, z.clone()).unwrap());
        let l = tape.softmax_ce(zv, labels.clone()).unwrap();
        let grads = tape.run_backward(l).unwrap();
        let p = softmax_rows(&Tensor::matrix(2, 3, z).unwrap());
        for r in 0..2 {
            for c in 0..3 {
                let ind = if c == labels[r] { 1.0 } else { 0.0 };
                let expect = (p.data()[r * 3 + c] - ind) / 2.0;
                assert!((grads[&0].data()[r * 3 + c] - expect).abs() < 1e-12);
            }
        }
    }
}
