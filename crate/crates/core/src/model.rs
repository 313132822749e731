//! The IGNNet forward computation.
//!
//! Pipeline per instance: a shared 1->64 linear embedding per node, a stack
//! of message-passing layers relu((A~ H) W) with residual skips, batch-norm +
//! node-wise linear ("widen") blocks interleaved, a per-node linear FNN
//! readout ending in a sigmoid that yields one score g_i in [0,1] per
//! feature, and an output head. The interpretable head computes
//! link(sum_i w_i g_i + b) along a fixed left-to-right accumulation so the
//! per-feature products w_i * g_i are reusable bit-for-bit as contribution
//! scores. The opaque head (used in ablations) replaces that sum with an MLP
//! over the concatenated node representations, forfeiting additivity.

use std::collections::HashMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, BatchNormState, Mode, Tape, Var};
use crate::data::{DatasetSchema, Preprocessor};
use crate::graph::FeatureGraph;
use crate::tensor::Tensor;

pub const MODEL_FORMAT: &str = "ignnet-model/1";

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("non-finite value in {layer}")]
    NonFinite { layer: String },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("unsupported model format '{found}' (expected '{expected}')")]
    Version { found: String, expected: String },
    #[error("unreadable model file: {0}")]
    Integrity(String),
    #[error("operation requires the interpretable head")]
    OpaqueHead,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HeadKind {
    Interpretable,
    Opaque,
}

/// Batch-norm followed by a node-wise linear map + relu, inserted after a
/// given message-passing layer (1-based).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PostBlock {
    pub after_layer: usize,
    pub out_width: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArchitectureConfig {
    pub embedding_width: usize,
    /// Output width of each message-passing layer.
    pub mp_widths: Vec<usize>,
    /// Residual (input-to-output) skip per message-passing layer.
    pub mp_skips: Vec<bool>,
    pub post_blocks: Vec<PostBlock>,
    /// FNN widths from input to output; the last must be 1.
    pub readout_widths: Vec<usize>,
    /// 1-based readout matrix indices followed by a batch norm.
    pub readout_bn_after: Vec<usize>,
    pub head: HeadKind,
    pub n_classes: usize,
    pub opaque_hidden: usize,
}

impl ArchitectureConfig {
    /// The standard wiring for 6, 3, or 1 message-passing layers: widths 64
    /// up to the first batch-norm block, 128 after, FNN
    /// (128, 64, 32, 16, 8, 4, 2, 1) with batch norms after its 2nd, 4th and
    /// 6th matrices.
    pub fn standard(mp_layers: usize, n_classes: usize, head: HeadKind) -> Result<Self, ModelError> {
        let (mp_widths, mp_skips, post_blocks) = match mp_layers {
            6 => (
                vec![64, 64, 64, 128, 128, 128],
                vec![false, true, false, true, true, true],
                vec![
                    PostBlock { after_layer: 3, out_width: 128 },
                    PostBlock { after_layer: 4, out_width: 128 },
                    PostBlock { after_layer: 6, out_width: 128 },
                ],
            ),
            3 => (
                vec![64, 64, 64],
                vec![false, true, false],
                vec![PostBlock { after_layer: 3, out_width: 128 }],
            ),
            1 => (
                vec![64],
                vec![false],
                vec![PostBlock { after_layer: 1, out_width: 128 }],
            ),
            other => {
                return Err(ModelError::Config(format!(
                    "unsupported message-passing depth {other} (use 6, 3, or 1)"
                )))
            }
        };
        let config = Self {
            embedding_width: 64,
            mp_widths,
            mp_skips,
            post_blocks,
            readout_widths: vec![128, 64, 32, 16, 8, 4, 2, 1],
            readout_bn_after: vec![2, 4, 6],
            head,
            n_classes,
            opaque_hidden: 1024,
        };
        config.validate()?;
        Ok(config)
    }

    /// Number of output logits: 1 for binary, K for K >= 3 classes.
    pub fn n_outputs(&self) -> usize {
        if self.n_classes == 2 {
            1
        } else {
            self.n_classes
        }
    }

    /// Node representation width entering the readout FNN.
    pub fn final_node_width(&self) -> usize {
        self.readout_widths[0]
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.n_classes < 2 {
            return Err(ModelError::Config(format!(
                "need at least 2 classes, got {}",
                self.n_classes
            )));
        }
        if self.mp_widths.is_empty() || self.mp_widths.len() != self.mp_skips.len() {
            return Err(ModelError::Config(
                "mp_widths and mp_skips must be non-empty and equal length".into(),
            ));
        }
        if self.readout_widths.len() < 2 || *self.readout_widths.last().unwrap() != 1 {
            return Err(ModelError::Config("readout must end at width 1".into()));
        }
        for &pos in &self.readout_bn_after {
            if pos == 0 || pos >= self.readout_widths.len() {
                return Err(ModelError::Config(format!(
                    "readout batch-norm position {pos} out of range"
                )));
            }
        }
        let mut blocks = self.post_blocks.iter().peekable();
        let mut width = self.embedding_width;
        for (l, (&out, &skip)) in self.mp_widths.iter().zip(&self.mp_skips).enumerate() {
            if skip && out != width {
                return Err(ModelError::Config(format!(
                    "skip at message-passing layer {} needs width {width} == {out}",
                    l + 1
                )));
            }
            width = out;
            while blocks.peek().map(|b| b.after_layer) == Some(l + 1) {
                width = blocks.next().unwrap().out_width;
            }
        }
        if let Some(b) = blocks.next() {
            return Err(ModelError::Config(format!(
                "post block after layer {} beyond the {} message-passing layers",
                b.after_layer,
                self.mp_widths.len()
            )));
        }
        if width != self.readout_widths[0] {
            return Err(ModelError::Config(format!(
                "node width {width} does not match readout input {}",
                self.readout_widths[0]
            )));
        }
        Ok(())
    }
}

/// All learnable tensors in a fixed order, plus batch-norm running
/// statistics. The fixed order is what the optimizer and the tape's parameter
/// ids key on.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IgnnetParams {
    pub tensors: Vec<Tensor>,
    pub bn_states: Vec<BatchNormState>,
    layout: ParamLayout,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ParamLayout {
    embed: usize,
    mp: Vec<usize>,
    post_bn: Vec<(usize, usize)>,
    green: Vec<usize>,
    readout: Vec<usize>,
    readout_bn: Vec<(usize, usize)>,
    head_w: usize,
    head_b: usize,
    opaque: Option<(usize, usize, usize, usize)>,
    /// post-block states come first in `bn_states`, then readout ones
    n_post_bn: usize,
}

fn glorot(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::from_parts(
        vec![rows, cols],
        (0..rows * cols).map(|_| rng.gen_range(-a..a)).collect(),
    )
}

/// Glorot-uniform weights, zero biases, batch-norm scale 1 / shift 0;
/// deterministic under `seed`.
pub fn init_params(
    config: &ArchitectureConfig,
    n_nodes: usize,
    seed: u64,
) -> Result<IgnnetParams, ModelError> {
    config.validate()?;
    if n_nodes == 0 {
        return Err(ModelError::Config("need at least one node".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tensors: Vec<Tensor> = Vec::new();
    let mut bn_states: Vec<BatchNormState> = Vec::new();
    let push = |tensors: &mut Vec<Tensor>, t: Tensor| -> usize {
        tensors.push(t);
        tensors.len() - 1
    };

    let embed = push(&mut tensors, glorot(&mut rng, 1, config.embedding_width));

    let mut mp = Vec::new();
    let mut post_bn = Vec::new();
    let mut green = Vec::new();
    let mut blocks = config.post_blocks.iter().peekable();
    let mut width = config.embedding_width;
    for (l, &out) in config.mp_widths.iter().enumerate() {
        mp.push(push(&mut tensors, glorot(&mut rng, width, out)));
        width = out;
        while blocks.peek().map(|b| b.after_layer) == Some(l + 1) {
            let b = blocks.next().unwrap();
            let scale = push(&mut tensors, Tensor::from_parts(vec![width], vec![1.0; width]));
            let shift = push(&mut tensors, Tensor::zeros(vec![width]));
            post_bn.push((scale, shift));
            bn_states.push(BatchNormState::new(width));
            green.push(push(&mut tensors, glorot(&mut rng, width, b.out_width)));
            width = b.out_width;
        }
    }
    let n_post_bn = bn_states.len();

    let mut readout = Vec::new();
    let mut readout_bn = Vec::new();
    for w in config.readout_widths.windows(2) {
        readout.push(push(&mut tensors, glorot(&mut rng, w[0], w[1])));
        let matrix_index = readout.len();
        if config.readout_bn_after.contains(&matrix_index) {
            let c = w[1];
            let scale = push(&mut tensors, Tensor::from_parts(vec![c], vec![1.0; c]));
            let shift = push(&mut tensors, Tensor::zeros(vec![c]));
            readout_bn.push((scale, shift));
            bn_states.push(BatchNormState::new(c));
        }
    }

    let k = config.n_outputs();
    let head_w = push(&mut tensors, glorot(&mut rng, k, n_nodes));
    let head_b = push(&mut tensors, Tensor::zeros(vec![k]));

    let opaque = match config.head {
        HeadKind::Interpretable => None,
        HeadKind::Opaque => {
            let concat = n_nodes * config.final_node_width();
            let hw = push(&mut tensors, glorot(&mut rng, concat, config.opaque_hidden));
            let hb = push(&mut tensors, Tensor::zeros(vec![config.opaque_hidden]));
            let ow = push(&mut tensors, glorot(&mut rng, config.opaque_hidden, k));
            let ob = push(&mut tensors, Tensor::zeros(vec![k]));
            Some((hw, hb, ow, ob))
        }
    };

    Ok(IgnnetParams {
        tensors,
        bn_states,
        layout: ParamLayout {
            embed,
            mp,
            post_bn,
            green,
            readout,
            readout_bn,
            head_w,
            head_b,
            opaque,
            n_post_bn,
        },
    })
}

impl IgnnetParams {
    pub fn head_weights(&self) -> &Tensor {
        &self.tensors[self.layout.head_w]
    }

    pub fn head_bias(&self) -> &Tensor {
        &self.tensors[self.layout.head_b]
    }

    /// Applies a gradient map keyed by the fixed parameter order.
    pub fn grads_in_order(&self, grads: &HashMap<usize, Tensor>) -> Vec<Tensor> {
        (0..self.tensors.len())
            .map(|i| {
                grads
                    .get(&i)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(self.tensors[i].shape().to_vec()))
            })
            .collect()
    }
}

/// Handles into the tape for one recorded forward pass.
pub struct ForwardPass {
    /// Pre-link output, shape (batch, n_outputs).
    pub logits: Var,
    /// Per-node scores in [0,1], shape (batch, n_nodes).
    pub g: Var,
    /// Final node representations entering the readout, (batch*n_nodes, d).
    pub node_repr: Var,
    /// Link applied to the logits: sigmoid column for binary, softmax rows
    /// for multi-class.
    pub predictions: Var,
}

fn check_finite(tape: &Tape, v: Var, layer: &str) -> Result<(), ModelError> {
    if tape.value(v).first_nonfinite().is_some() {
        return Err(ModelError::NonFinite {
            layer: layer.to_string(),
        });
    }
    Ok(())
}

/// Records the full forward computation for a batch on `tape`, registering
/// every learnable tensor as a tape parameter (id = its index in
/// `params.tensors`). `x` has shape (batch, n_nodes) with entries in [0,1].
/// In `Train` mode batch-norm running statistics in `params` are updated.
pub fn forward(
    tape: &mut Tape,
    config: &ArchitectureConfig,
    params: &mut IgnnetParams,
    adj: Arc<Tensor>,
    x: &Tensor,
    mode: Mode,
) -> Result<ForwardPass, ModelError> {
    let n = adj.rows();
    let batch = x.rows();
    if x.cols() != n {
        return Err(ModelError::Config(format!(
            "input has {} node values but the graph has {n} nodes",
            x.cols()
        )));
    }
    let vars: Vec<Var> = params
        .tensors
        .iter()
        .enumerate()
        .map(|(i, t)| tape.param(i, t.clone()))
        .collect();
    let layout = params.layout.clone();

    let x_var = tape.leaf(x.clone());
    let flat = tape.reshape(x_var, vec![batch * n, 1])?;
    let mut h = tape.matmul(flat, vars[layout.embed])?;
    check_finite(tape, h, "embedding")?;

    let mut block_idx = 0usize;
    let mut blocks = config.post_blocks.iter().peekable();
    for (l, &w_idx) in layout.mp.iter().enumerate() {
        let h_in = h;
        let agg = tape.adj_matmul(adj.clone(), h)?;
        let lin = tape.matmul(agg, vars[w_idx])?;
        let act = tape.relu(lin);
        h = if config.mp_skips[l] {
            tape.add(act, h_in)?
        } else {
            act
        };
        check_finite(tape, h, &format!("message-passing layer {}", l + 1))?;
        while blocks.peek().map(|b| b.after_layer) == Some(l + 1) {
            blocks.next();
            let (scale, shift) = layout.post_bn[block_idx];
            let bn = tape.batch_norm(
                h,
                vars[scale],
                vars[shift],
                &mut params.bn_states[block_idx],
                mode,
            )?;
            let lin = tape.matmul(bn, vars[layout.green[block_idx]])?;
            h = tape.relu(lin);
            check_finite(tape, h, &format!("node transform block {}", block_idx + 1))?;
            block_idx += 1;
        }
    }
    let node_repr = h;

    // linear readout: matrices and batch norms only, no elementwise
    // nonlinearity before the terminal sigmoid
    let mut r = h;
    let mut bn_idx = 0usize;
    for (i, &w_idx) in layout.readout.iter().enumerate() {
        r = tape.matmul(r, vars[w_idx])?;
        if config.readout_bn_after.contains(&(i + 1)) {
            let (scale, shift) = layout.readout_bn[bn_idx];
            r = tape.batch_norm(
                r,
                vars[scale],
                vars[shift],
                &mut params.bn_states[layout.n_post_bn + bn_idx],
                mode,
            )?;
            bn_idx += 1;
        }
        check_finite(tape, r, &format!("readout layer {}", i + 1))?;
    }
    let g_flat = tape.sigmoid(r);
    let g = tape.reshape(g_flat, vec![batch, n])?;

    let logits = match config.head {
        HeadKind::Interpretable => {
            tape.head_linear(g, vars[layout.head_w], vars[layout.head_b])?
        }
        HeadKind::Opaque => {
            let (hw, hb, ow, ob) = layout.opaque.ok_or(ModelError::Config(
                "opaque head configured but no opaque parameters".into(),
            ))?;
            let concat = tape.reshape(node_repr, vec![batch, n * config.final_node_width()])?;
            let hidden_lin = tape.matmul(concat, vars[hw])?;
            let hidden_b = tape.add_row(hidden_lin, vars[hb])?;
            let hidden = tape.relu(hidden_b);
            let out_lin = tape.matmul(hidden, vars[ow])?;
            tape.add_row(out_lin, vars[ob])?
        }
    };
    check_finite(tape, logits, "output head")?;

    let predictions = if config.n_outputs() == 1 {
        tape.sigmoid(logits)
    } else {
        tape.softmax(logits)?
    };

    Ok(ForwardPass {
        logits,
        g,
        node_repr,
        predictions,
    })
}

/// Inference convenience: one batch in `Infer` mode on a throwaway tape.
/// Returns (predictions, g, logits).
pub fn predict(
    config: &ArchitectureConfig,
    params: &IgnnetParams,
    adj: &Arc<Tensor>,
    x: &Tensor,
) -> Result<(Tensor, Tensor, Tensor), ModelError> {
    let mut scratch = params.clone(); // Infer mode leaves bn_states untouched
    let mut tape = Tape::new();
    let pass = forward(&mut tape, config, &mut scratch, adj.clone(), x, Mode::Infer)?;
    Ok((
        tape.value(pass.predictions).clone(),
        tape.value(pass.g).clone(),
        tape.value(pass.logits).clone(),
    ))
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainMetadata {
    pub seed: u64,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub dev_auc: Option<f64>,
    pub dataset: Option<String>,
}

/// A trained model with everything needed to score raw rows: schema,
/// preprocessor, feature graph, architecture, and parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SavedModel {
    pub format: String,
    pub config: ArchitectureConfig,
    pub params: IgnnetParams,
    pub schema: DatasetSchema,
    pub preprocessor: Preprocessor,
    pub graph: FeatureGraph,
    pub metadata: TrainMetadata,
}

impl SavedModel {
    pub fn new(
        config: ArchitectureConfig,
        params: IgnnetParams,
        schema: DatasetSchema,
        preprocessor: Preprocessor,
        graph: FeatureGraph,
        metadata: TrainMetadata,
    ) -> Self {
        Self {
            format: MODEL_FORMAT.to_string(),
            config,
            params,
            schema,
            preprocessor,
            graph,
            metadata,
        }
    }

    pub fn adjacency(&self) -> Arc<Tensor> {
        Arc::new(Tensor::from_parts(
            vec![self.graph.n, self.graph.n],
            self.graph.normalized.clone(),
        ))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("model serializes")
    }

    pub fn from_json(json: &str) -> Result<Self, ModelError> {
        let value: serde_json::Value =
            serde_json::from_str(json).map_err(|e| ModelError::Integrity(e.to_string()))?;
        let found = value
            .get("format")
            .and_then(|v| v.as_str())
            .unwrap_or("")
            .to_string();
        if found != MODEL_FORMAT {
            return Err(ModelError::Version {
                found,
                expected: MODEL_FORMAT.to_string(),
            });
        }
        serde_json::from_value(value).map_err(|e| ModelError::Integrity(e.to_string()))
    }
}
