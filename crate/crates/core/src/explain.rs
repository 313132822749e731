//! Per-feature contribution scores and explanation artifacts.
//!
//! For the interpretable head the prediction is link(sum_i w_i g_i + b), so
//! tau_i = w_i * g_i is an exact decomposition: summing the scores in node
//! order and adding the bias reproduces the model's logit bit for bit.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::stable_sigmoid;
use crate::data::Preprocessor;
use crate::model::{predict, HeadKind, ModelError, SavedModel};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum ExplainError {
    #[error("explanations require the interpretable head; audit the opaque head with kernel_shap instead")]
    OpaqueHead,
    #[error("alignment error: explanation has {tau} scores but the preprocessor expands to {nodes} nodes")]
    Alignment { tau: usize, nodes: usize },
    #[error("instance must be a single row of {expected} node values, got shape {found:?}")]
    BadInstance { expected: usize, found: Vec<usize> },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupedScore {
    pub column: String,
    pub score: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Explanation {
    pub node_names: Vec<String>,
    /// Per-node contribution scores for the explained class, in node order.
    pub tau: Vec<f64>,
    pub bias: f64,
    pub logit: f64,
    /// Probability of the explained class.
    pub prediction: f64,
    pub predicted_class: usize,
    /// Per-node scores for every class (multi-class models, on request).
    pub all_class_tau: Option<Vec<Vec<f64>>>,
    pub grouped: Option<Vec<GroupedScore>>,
}

impl Explanation {
    /// Indices into `tau` ordered by |tau| descending (stable on ties).
    pub fn top_k(&self, k: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.tau.len()).collect();
        idx.sort_by(|&a, &b| {
            self.tau[b]
                .abs()
                .partial_cmp(&self.tau[a].abs())
                .unwrap()
                .then(a.cmp(&b))
        });
        idx.truncate(k);
        idx
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("explanation serializes")
    }
}

/// Extracts tau_i = w_i * g_i for one preprocessed instance. Multi-class
/// models are explained against the predicted class's weight vector; set
/// `all_classes` to also get every class's score vector.
pub fn explain_instance(
    model: &SavedModel,
    x: &Tensor,
    all_classes: bool,
) -> Result<Explanation, ExplainError> {
    if model.config.head != HeadKind::Interpretable {
        return Err(ExplainError::OpaqueHead);
    }
    let n = model.graph.n;
    if x.shape() != [1, n] {
        return Err(ExplainError::BadInstance {
            expected: n,
            found: x.shape().to_vec(),
        });
    }
    let adj = model.adjacency();
    let (pred, g, logits) = predict(&model.config, &model.params, &adj, x)?;
    let w = model.params.head_weights();
    let b = model.params.head_bias();

    let tau_for = |class_row: usize| -> Vec<f64> {
        (0..n)
            .map(|i| w.data()[class_row * n + i] * g.data()[i])
            .collect()
    };

    let (predicted_class, class_row) = if model.config.n_classes == 2 {
        (usize::from(pred.data()[0] >= 0.5), 0)
    } else {
        let c = pred
            .data()
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap();
        (c, c)
    };

    let all_class_tau = if all_classes && model.config.n_classes > 2 {
        Some((0..model.config.n_classes).map(tau_for).collect())
    } else {
        None
    };

    let prediction = if model.config.n_classes == 2 {
        pred.data()[0]
    } else {
        pred.data()[predicted_class]
    };

    Ok(Explanation {
        node_names: model.graph.node_names.clone(),
        tau: tau_for(class_row),
        bias: b.data()[class_row],
        logit: logits.data()[class_row],
        prediction,
        predicted_class,
        all_class_tau,
        grouped: None,
    })
}

/// Sums one-hot node scores back to their original columns; numeric columns
/// pass through.
pub fn group_scores(
    explanation: &Explanation,
    preprocessor: &Preprocessor,
) -> Result<Vec<GroupedScore>, ExplainError> {
    if preprocessor.n_nodes != explanation.tau.len() {
        return Err(ExplainError::Alignment {
            tau: explanation.tau.len(),
            nodes: preprocessor.n_nodes,
        });
    }
    Ok(preprocessor
        .expansions
        .iter()
        .map(|e| GroupedScore {
            column: e.name.clone(),
            score: explanation.tau[e.start..e.start + e.len].iter().sum(),
        })
        .collect())
}

/// Horizontal bar chart of the top-k scores by |tau|, annotated with the bias
/// and the prediction. Deterministic: identical explanations yield
/// byte-identical SVG.
pub fn emit_chart(explanation: &Explanation, k: usize) -> String {
    let order = explanation.top_k(k.max(1));
    let max_abs = order
        .iter()
        .map(|&i| explanation.tau[i].abs())
        .fold(f64::MIN_POSITIVE, f64::max);
    let bar_h = 22.0;
    let gap = 6.0;
    let label_w = 220.0;
    let plot_w = 360.0;
    let top = 52.0;
    let height = top + order.len() as f64 * (bar_h + gap) + 16.0;
    let width = label_w + plot_w + 40.0;
    let mid = label_w + plot_w / 2.0;

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"{width:.0}\" height=\"{height:.0}\" font-family=\"monospace\" font-size=\"12\">\n"
    ));
    svg.push_str(&format!(
        "  <text x=\"12\" y=\"20\">prediction {:.4} (class {})</text>\n",
        explanation.prediction, explanation.predicted_class
    ));
    svg.push_str(&format!(
        "  <text x=\"12\" y=\"38\">bias {:.4}</text>\n",
        explanation.bias
    ));
    svg.push_str(&format!(
        "  <line x1=\"{mid:.1}\" y1=\"{top:.1}\" x2=\"{mid:.1}\" y2=\"{:.1}\" stroke=\"#888\"/>\n",
        height - 12.0
    ));
    for (row, &i) in order.iter().enumerate() {
        let tau = explanation.tau[i];
        let y = top + row as f64 * (bar_h + gap);
        let w = (tau.abs() / max_abs) * (plot_w / 2.0 - 4.0);
        let (x, color) = if tau >= 0.0 {
            (mid, "#2b8a3e")
        } else {
            (mid - w, "#c92a2a")
        };
        svg.push_str(&format!(
            "  <rect x=\"{x:.2}\" y=\"{y:.2}\" width=\"{w:.2}\" height=\"{bar_h:.0}\" fill=\"{color}\"/>\n"
        ));
        svg.push_str(&format!(
            "  <text x=\"12\" y=\"{:.2}\">{}</text>\n",
            y + bar_h - 6.0,
            xml_escape(&explanation.node_names[i])
        ));
        svg.push_str(&format!(
            "  <text x=\"{:.2}\" y=\"{:.2}\">{tau:.4}</text>\n",
            label_w + plot_w + 6.0,
            y + bar_h - 6.0
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

pub(crate) fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// The additivity identity: recomputes link(sum tau + bias) along the same
/// floating-point path as the forward head and compares with the stored
/// values. Returns (recomputed logit, recomputed prediction).
pub fn additivity_check(explanation: &Explanation) -> (f64, f64) {
    let mut acc = 0.0;
    for t in &explanation.tau {
        acc += t;
    }
    acc += explanation.bias;
    (acc, stable_sigmoid(acc))
}
