//! Minibatch training with cross-entropy loss, dev-set AUC evaluation,
//! early stopping, and best-checkpoint selection.

use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Mode, Tape, PROB_CLAMP};
use crate::graph::FeatureGraph;
use crate::metrics::{auc_binary, auc_weighted, MetricError};
use crate::model::{forward, init_params, ArchitectureConfig, IgnnetParams, ModelError};
use crate::optim::{adam_step, AdamConfig, AdamState, OptimError};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("label {label} out of range for {n_classes} classes")]
    Label { label: usize, n_classes: usize },
    #[error("evaluation error: {0}")]
    Evaluation(#[from] MetricError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Autodiff(#[from] crate::autodiff::AutodiffError),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub batch_size: usize,
    /// Dev evaluations without improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 200,
            batch_size: 128,
            patience: 20,
            seed: 0,
            adam: AdamConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_auc: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopReason {
    Patience,
    MaxEpochs,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_dev_auc: f64,
    pub stop: StopReason,
}

/// Cross-entropy of one prediction. A single probability is treated as the
/// positive-class probability of a binary task; a longer slice as a
/// probability vector indexed by the label.
pub fn cross_entropy_loss(probs: &[f64], label: usize) -> Result<f64, TrainError> {
    if probs.len() == 1 {
        if label > 1 {
            return Err(TrainError::Label {
                label,
                n_classes: 2,
            });
        }
        let p = probs[0].clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        Ok(if label == 1 { -p.ln() } else { -(1.0 - p).ln() })
    } else {
        let p = *probs.get(label).ok_or(TrainError::Label {
            label,
            n_classes: probs.len(),
        })?;
        Ok(-p.max(PROB_CLAMP).ln())
    }
}

/// Scores dev rows in inference mode and returns the early-stopping AUC
/// (binary AUC for 2 classes, support-weighted one-vs-rest otherwise).
pub fn evaluate_auc(
    config: &ArchitectureConfig,
    params: &IgnnetParams,
    adj: &Arc<Tensor>,
    x: &Tensor,
    labels: &[usize],
) -> Result<f64, TrainError> {
    let scores = batched_scores(config, params, adj, x)?;
    let auc = if config.n_classes == 2 {
        auc_binary(&scores, labels)?
    } else {
        auc_weighted(&scores, config.n_classes, labels)?
    };
    Ok(auc)
}

/// Predicted scores for each row of `x`: one column for binary, K columns
/// (row-major) for multi-class. Chunked to bound peak memory.
pub fn batched_scores(
    config: &ArchitectureConfig,
    params: &IgnnetParams,
    adj: &Arc<Tensor>,
    x: &Tensor,
) -> Result<Vec<f64>, TrainError> {
    let n = x.cols();
    let rows = x.rows();
    let chunk = 256usize;
    let mut out = Vec::with_capacity(rows * config.n_outputs());
    let mut start = 0;
    while start < rows {
        let end = (start + chunk).min(rows);
        let block = Tensor::from_parts(
            vec![end - start, n],
            x.data()[start * n..end * n].to_vec(),
        );
        let (pred, _, _) = crate::model::predict(config, params, adj, &block)?;
        out.extend_from_slice(pred.data());
        start = end;
    }
    Ok(out)
}

/// Algorithm: seeded shuffled minibatches with Adam, one dev evaluation per
/// epoch with batch norms frozen, best checkpoint kept, early stop on
/// `patience` evaluations without dev-AUC improvement. Returns the best
/// checkpoint (never the final parameters) and the full report.
pub fn train(
    config: &TrainConfig,
    arch: &ArchitectureConfig,
    graph: &FeatureGraph,
    x_train: &Tensor,
    y_train: &[usize],
    x_dev: &Tensor,
    y_dev: &[usize],
) -> Result<(IgnnetParams, TrainReport), TrainError> {
    if config.patience < 1 {
        return Err(TrainError::Config("patience must be >= 1".into()));
    }
    if config.batch_size < 2 {
        return Err(TrainError::Config("batch size must be >= 2".into()));
    }
    if x_train.rows() != y_train.len() || x_dev.rows() != y_dev.len() {
        return Err(TrainError::Config(
            "row/label counts do not match".into(),
        ));
    }
    if x_train.rows() == 0 || x_dev.rows() == 0 {
        return Err(TrainError::Config("empty train or dev split".into()));
    }
    for &l in y_train.iter().chain(y_dev) {
        if l >= arch.n_classes {
            return Err(TrainError::Label {
                label: l,
                n_classes: arch.n_classes,
            });
        }
    }
    let n = graph.n;
    let adj = Arc::new(Tensor::from_parts(
        vec![n, n],
        graph.normalized.clone(),
    ));
    let mut params = init_params(arch, n, config.seed)?;
    let mut adam = AdamState::new(&params.tensors, config.adam);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));

    let mut best: Option<IgnnetParams> = None;
    let mut best_auc = f64::NEG_INFINITY;
    let mut best_epoch = 0usize;
    let mut since_improve = 0usize;
    let mut records = Vec::new();
    let mut stop = StopReason::MaxEpochs;

    let mut order: Vec<usize> = (0..x_train.rows()).collect();
    for epoch in 1..=config.max_epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for batch in order.chunks(config.batch_size) {
            let mut data = Vec::with_capacity(batch.len() * n);
            for &r in batch {
                data.extend_from_slice(&x_train.data()[r * n..(r + 1) * n]);
            }
            let xb = Tensor::from_parts(vec![batch.len(), n], data);
            let mut tape = Tape::new();
            let pass = forward(&mut tape, arch, &mut params, adj.clone(), &xb, Mode::Train)?;
            let loss = if arch.n_classes == 2 {
                let targets: Vec<f64> = batch.iter().map(|&r| y_train[r] as f64).collect();
                tape.bce_with_logits(pass.logits, targets)?
            } else {
                let labels: Vec<usize> = batch.iter().map(|&r| y_train[r]).collect();
                tape.softmax_ce(pass.logits, labels)?
            };
            loss_sum += tape.value(loss).item() * batch.len() as f64;
            seen += batch.len();
            let grads = tape.run_backward(loss)?;
            let ordered = params.grads_in_order(&grads);
            adam_step(&mut params.tensors, &ordered, &mut adam)?;
        }
        let train_loss = loss_sum / seen as f64;
        let dev_auc = evaluate_auc(arch, &params, &adj, x_dev, y_dev)?;
        let seconds = started.elapsed().as_secs_f64();
        records.push(EpochRecord {
            epoch,
            train_loss,
            dev_auc,
            seconds,
        });
        eprintln!(
            "epoch {epoch:4} | loss {train_loss:.4} | dev auc {dev_auc:.4} | {seconds:.1}s"
        );
        if dev_auc > best_auc {
            best_auc = dev_auc;
            best_epoch = epoch;
            best = Some(params.clone());
            since_improve = 0;
        } else {
            since_improve += 1;
            if since_improve >= config.patience {
                stop = StopReason::Patience;
                break;
            }
        }
    }

    let best = best.expect("at least one epoch ran");
    Ok((
        best,
        TrainReport {
            epochs: records,
            best_epoch,
            best_dev_auc: best_auc,
            stop,
        },
    ))
}
