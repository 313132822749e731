//! KernelSHAP with a constrained weighted-least-squares solve, an exact
//! Shapley brute-force oracle for small feature counts, and a convergence
//! audit comparing sampled SHAP values against the model's additive
//! per-feature scores.
//!
//! The Shapley game is defined on masked inputs: features outside a
//! coalition are replaced with a single background row (the training mean).
//! Attributions therefore satisfy local accuracy exactly: they sum to
//! f(instance) - f(background) by construction of the constrained solve.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::explain::{explain_instance, ExplainError};
use crate::metrics::{cosine, spearman_rho, MetricError};
use crate::model::{predict, HeadKind, ModelError, SavedModel};
use crate::tensor::Tensor;

pub const EXACT_LIMIT: usize = 15;

#[derive(Debug, Error)]
pub enum ShapError {
    #[error("need at least 2 features, got {0}")]
    TooFewFeatures(usize),
    #[error("exact Shapley supports at most {EXACT_LIMIT} features, got {0}")]
    TooManyFeatures(usize),
    #[error("instance and background lengths differ: {instance} vs {background}")]
    LengthMismatch { instance: usize, background: usize },
    #[error("singular weighted least squares system; draw more samples")]
    Singular,
    #[error("configuration error: {0}")]
    Config(String),
    #[error("audit requires the interpretable head")]
    OpaqueHead,
    #[error(transparent)]
    Explain(#[from] ExplainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShapResult {
    /// One attribution per feature.
    pub phi: Vec<f64>,
    /// f(background): the value attributions are measured against.
    pub base: f64,
    /// Number of distinct coalitions that entered the solve.
    pub coalitions: usize,
    /// Whether every coalition 0 < |z| < M was enumerated (the solve is then
    /// exact, not sampled).
    pub full_enumeration: bool,
}

fn binomial(n: usize, k: usize) -> f64 {
    let k = k.min(n - k);
    let mut c = 1.0;
    for i in 0..k {
        c = c * (n - i) as f64 / (i + 1) as f64;
    }
    c
}

/// The KernelSHAP weight pi(M, s) = (M-1) / (C(M,s) * s * (M-s)).
pub fn kernel_weight(m: usize, size: usize) -> f64 {
    (m as f64 - 1.0) / (binomial(m, size) * size as f64 * (m - size) as f64)
}

fn masked_input(instance: &[f64], background: &[f64], mask: u64) -> Vec<f64> {
    instance
        .iter()
        .zip(background)
        .enumerate()
        .map(|(i, (&x, &b))| if mask >> i & 1 == 1 { x } else { b })
        .collect()
}

/// Solves A x = b (dense, small) by LU with partial pivoting.
fn solve_dense(mut a: Vec<f64>, mut b: Vec<f64>, n: usize) -> Result<Vec<f64>, ShapError> {
    for col in 0..n {
        let mut pivot = col;
        for r in col + 1..n {
            if a[r * n + col].abs() > a[pivot * n + col].abs() {
                pivot = r;
            }
        }
        if a[pivot * n + col].abs() < 1e-12 {
            return Err(ShapError::Singular);
        }
        if pivot != col {
            for c in 0..n {
                a.swap(col * n + c, pivot * n + c);
            }
            b.swap(col, pivot);
        }
        for r in col + 1..n {
            let factor = a[r * n + col] / a[col * n + col];
            for c in col..n {
                a[r * n + c] -= factor * a[col * n + c];
            }
            b[r] -= factor * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let mut acc = b[r];
        for c in r + 1..n {
            acc -= a[r * n + c] * x[c];
        }
        x[r] = acc / a[r * n + r];
    }
    Ok(x)
}

/// KernelSHAP attributions for `scorer` at `instance` against a single
/// background row. When `total_samples` covers all 2^M - 2 proper coalitions
/// the full set is enumerated with exact kernel weights and the result equals
/// the true Shapley values; otherwise coalitions are drawn in complementary
/// pairs from the kernel's size distribution.
pub fn kernel_shap<F: Fn(&[f64]) -> f64>(
    scorer: F,
    instance: &[f64],
    background: &[f64],
    total_samples: usize,
    seed: u64,
) -> Result<ShapResult, ShapError> {
    let m = instance.len();
    if m < 2 {
        return Err(ShapError::TooFewFeatures(m));
    }
    if background.len() != m {
        return Err(ShapError::LengthMismatch {
            instance: m,
            background: background.len(),
        });
    }
    let base = scorer(background);
    let full = scorer(instance);
    let delta = full - base;

    // coalition mask -> (aggregate weight, scorer value)
    let mut coalitions: HashMap<u64, (f64, f64)> = HashMap::new();
    let n_proper = if m < 63 { (1u64 << m) - 2 } else { u64::MAX };
    let full_enumeration = m <= 26 && total_samples as u64 >= n_proper;

    if full_enumeration {
        for mask in 1..(1u64 << m) - 1 {
            let size = mask.count_ones() as usize;
            let value = scorer(&masked_input(instance, background, mask));
            coalitions.insert(mask, (kernel_weight(m, size), value));
        }
    } else {
        // size distribution proportional to sum of kernel weights per size
        let sizes: Vec<usize> = (1..m).collect();
        let size_probs: Vec<f64> = sizes
            .iter()
            .map(|&s| (m as f64 - 1.0) / (s as f64 * (m - s) as f64))
            .collect();
        let total_p: f64 = size_probs.iter().sum();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut drawn = 0usize;
        let mut indices: Vec<usize> = (0..m).collect();
        while drawn < total_samples {
            let mut u = rng.gen_range(0.0..total_p);
            let mut size = sizes[sizes.len() - 1];
            for (&s, &p) in sizes.iter().zip(&size_probs) {
                if u < p {
                    size = s;
                    break;
                }
                u -= p;
            }
            // uniform subset of that size via partial Fisher-Yates
            for i in 0..size {
                let j = rng.gen_range(i..m);
                indices.swap(i, j);
            }
            let mut mask = 0u64;
            for &i in &indices[..size] {
                mask |= 1 << i;
            }
            for pair_mask in [mask, !mask & ((1 << m) - 1)] {
                if drawn >= total_samples {
                    break;
                }
                let entry = coalitions.entry(pair_mask).or_insert_with(|| {
                    let value = scorer(&masked_input(instance, background, pair_mask));
                    (0.0, value)
                });
                entry.0 += 1.0;
                drawn += 1;
            }
        }
    }

    // constrained WLS: phi_M is substituted out via sum(phi) = delta, leaving
    // an (M-1)-dimensional system over x'_j = z_j - z_M, y' = v - base - z_M*delta
    let d = m - 1;
    let mut ata = vec![0.0; d * d];
    let mut atb = vec![0.0; d];
    let mut masks: Vec<u64> = coalitions.keys().copied().collect();
    masks.sort_unstable(); // deterministic accumulation order
    for mask in masks {
        let (weight, value) = coalitions[&mask];
        let z_last = (mask >> (m - 1) & 1) as f64;
        let y = value - base - z_last * delta;
        let x: Vec<f64> = (0..d)
            .map(|j| (mask >> j & 1) as f64 - z_last)
            .collect();
        for j in 0..d {
            if x[j] == 0.0 {
                continue;
            }
            atb[j] += weight * x[j] * y;
            for l in 0..d {
                ata[j * d + l] += weight * x[j] * x[l];
            }
        }
    }
    if !full_enumeration {
        // paired complements contribute identical outer products, so small
        // draws can leave the system rank-deficient; a vanishing ridge keeps
        // it solvable without perturbing converged estimates (the additivity
        // constraint is enforced by substitution regardless)
        let trace: f64 = (0..d).map(|j| ata[j * d + j]).sum();
        let ridge = 1e-9 * (trace / d as f64).max(1.0);
        for j in 0..d {
            ata[j * d + j] += ridge;
        }
    }
    let head = solve_dense(ata, atb, d)?;
    let mut phi = head;
    let sum_head: f64 = phi.iter().sum();
    phi.push(delta - sum_head);

    Ok(ShapResult {
        phi,
        base,
        coalitions: coalitions.len(),
        full_enumeration,
    })
}

/// Classic Shapley values by full enumeration (2^M scorer evaluations).
pub fn exact_shapley<F: Fn(&[f64]) -> f64>(
    scorer: F,
    instance: &[f64],
    background: &[f64],
) -> Result<Vec<f64>, ShapError> {
    let m = instance.len();
    if m > EXACT_LIMIT {
        return Err(ShapError::TooManyFeatures(m));
    }
    if m < 1 {
        return Err(ShapError::TooFewFeatures(m));
    }
    if background.len() != m {
        return Err(ShapError::LengthMismatch {
            instance: m,
            background: background.len(),
        });
    }
    let mut values = vec![0.0; 1 << m];
    for (mask, v) in values.iter_mut().enumerate() {
        *v = scorer(&masked_input(instance, background, mask as u64));
    }
    let mut factorial = vec![1.0; m + 1];
    for i in 1..=m {
        factorial[i] = factorial[i - 1] * i as f64;
    }
    let mut phi = vec![0.0; m];
    for j in 0..m {
        for mask in 0..(1u64 << m) {
            if mask >> j & 1 == 1 {
                continue;
            }
            let s = mask.count_ones() as usize;
            let weight = factorial[s] * factorial[m - s - 1] / factorial[m];
            phi[j] += weight * (values[(mask | 1 << j) as usize] - values[mask as usize]);
        }
    }
    Ok(phi)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InstanceAudit {
    pub cosine: Vec<f64>,
    pub spearman: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShapAuditReport {
    pub schedule: Vec<usize>,
    /// Original-column names; one Shapley player per original feature (a
    /// categorical column's one-hot nodes are masked together).
    pub feature_names: Vec<String>,
    pub per_instance: Vec<InstanceAudit>,
    pub mean_cosine: Vec<f64>,
    pub std_cosine: Vec<f64>,
    pub mean_spearman: Vec<f64>,
    pub std_spearman: Vec<f64>,
    /// Instances whose attribution or score vector was all-zero at some
    /// schedule point (cosine defined as 0 there).
    pub degenerate_instances: usize,
}

impl ShapAuditReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Runs KernelSHAP on the pre-link logit at each schedule point for every
/// instance, comparing the attributions against the model's
/// background-centered tau scores — `tau(instance) − tau(background)` — with
/// cosine and Spearman similarity. Attribution is per original feature: a
/// categorical column's one-hot nodes form a single Shapley player, and the
/// corresponding tau scores are summed per column.
///
/// Centering is what makes the comparison well-posed: Shapley values measure
/// the change from the background, so for an exactly additive model
/// `phi_i = tau_i(instance) − tau_i(background)` holds with equality, while
/// raw scores only agree when the background's scores are all zero. The
/// all-zeros row (each feature at its training minimum, every one-hot
/// category absent) is the recommended background: a mean row places one-hot
/// nodes at fractional values no real instance has, which distorts every
/// masked evaluation.
pub fn convergence_audit(
    model: &SavedModel,
    instances: &Tensor,
    background: &[f64],
    schedule: &[usize],
    seed: u64,
) -> Result<ShapAuditReport, ShapError> {
    if model.config.head != HeadKind::Interpretable {
        return Err(ShapError::OpaqueHead);
    }
    if schedule.len() < 2 {
        return Err(ShapError::Config(
            "schedule needs at least 2 points".into(),
        ));
    }
    if schedule.windows(2).any(|w| w[1] <= w[0]) {
        return Err(ShapError::Config("schedule must be strictly increasing".into()));
    }
    let n = model.graph.n;
    if instances.cols() != n || background.len() != n {
        return Err(ShapError::LengthMismatch {
            instance: instances.cols(),
            background: background.len(),
        });
    }
    let adj = model.adjacency();
    let background_expl = {
        let xb = Tensor::from_parts(vec![1, n], background.to_vec());
        explain_instance(model, &xb, true)?
    };

    // Shapley players are the original columns: a categorical column's one-hot
    // nodes join or leave a coalition together. Masking them independently
    // would score the model on rows where a category is fractionally present,
    // which no real instance exhibits.
    let groups: Vec<(usize, usize)> = model
        .preprocessor
        .expansions
        .iter()
        .map(|e| (e.start, e.len))
        .collect();
    let feature_names: Vec<String> = model
        .preprocessor
        .expansions
        .iter()
        .map(|e| e.name.clone())
        .collect();
    let m = groups.len();
    if m < 2 {
        return Err(ShapError::TooFewFeatures(m));
    }
    let group_sum = |per_node: &[f64]| -> Vec<f64> {
        groups
            .iter()
            .map(|&(start, len)| per_node[start..start + len].iter().sum())
            .collect()
    };

    let mut per_instance = Vec::with_capacity(instances.rows());
    let mut degenerate = 0usize;
    for r in 0..instances.rows() {
        let row = &instances.data()[r * n..(r + 1) * n];
        let x = Tensor::from_parts(vec![1, n], row.to_vec());
        let expl = explain_instance(model, &x, false)?;
        let class_row = if model.config.n_classes == 2 {
            0
        } else {
            expl.predicted_class
        };
        // Background scores for the same class the instance is explained
        // against; binary models have a single weight row.
        let background_tau: &[f64] = match (&background_expl.all_class_tau, class_row) {
            (Some(all), c) => &all[c],
            (None, _) => &background_expl.tau,
        };
        let centered_tau: Vec<f64> = expl
            .tau
            .iter()
            .zip(background_tau)
            .map(|(t, b)| t - b)
            .collect();
        let grouped_tau = group_sum(&centered_tau);
        // The coalition game in player space: present players contribute
        // their nodes' instance values, absent players the background's.
        let scorer = |z: &[f64]| -> f64 {
            let mut masked = background.to_vec();
            for (j, &(start, len)) in groups.iter().enumerate() {
                if z[j] != 0.0 {
                    masked[start..start + len].copy_from_slice(&row[start..start + len]);
                }
            }
            let xm = Tensor::from_parts(vec![1, n], masked);
            let (_, _, logits) =
                predict(&model.config, &model.params, &adj, &xm).expect("forward");
            logits.data()[class_row]
        };
        let present = vec![1.0; m];
        let absent = vec![0.0; m];
        let mut audit = InstanceAudit {
            cosine: Vec::with_capacity(schedule.len()),
            spearman: Vec::with_capacity(schedule.len()),
        };
        let mut flagged = false;
        for (k, &samples) in schedule.iter().enumerate() {
            let result = kernel_shap(
                &scorer,
                &present,
                &absent,
                samples,
                seed ^ (r as u64) ^ ((k as u64) << 32),
            )?;
            let (cos, flag) = cosine(&result.phi, &grouped_tau)?;
            flagged |= flag;
            audit.cosine.push(cos);
            audit.spearman.push(spearman_rho(&result.phi, &grouped_tau)?);
        }
        if flagged {
            degenerate += 1;
        }
        per_instance.push(audit);
    }

    let mut mean_cosine = Vec::new();
    let mut std_cosine = Vec::new();
    let mut mean_spearman = Vec::new();
    let mut std_spearman = Vec::new();
    for k in 0..schedule.len() {
        let cos: Vec<f64> = per_instance.iter().map(|a| a.cosine[k]).collect();
        let rho: Vec<f64> = per_instance.iter().map(|a| a.spearman[k]).collect();
        let (mc, sc) = mean_std(&cos);
        let (mr, sr) = mean_std(&rho);
        mean_cosine.push(mc);
        std_cosine.push(sc);
        mean_spearman.push(mr);
        std_spearman.push(sr);
    }

    Ok(ShapAuditReport {
        schedule: schedule.to_vec(),
        feature_names,
        per_instance,
        mean_cosine,
        std_cosine,
        mean_spearman,
        std_spearman,
        degenerate_instances: degenerate,
    })
}

/// Line chart of mean +/- std cosine and Spearman similarity against sample
/// count. Deterministic output.
pub fn audit_chart(report: &ShapAuditReport) -> String {
    let width = 640.0;
    let height = 360.0;
    let left = 60.0;
    let bottom = height - 40.0;
    let plot_w = width - left - 20.0;
    let plot_h = bottom - 30.0;
    let k = report.schedule.len();
    let x_at = |i: usize| left + plot_w * i as f64 / (k - 1) as f64;
    let y_at = |v: f64| bottom - plot_h * (v.clamp(-1.0, 1.0) + 1.0) / 2.0;

    let polyline = |values: &[f64], color: &str, dash: &str| -> String {
        let points: Vec<String> = values
            .iter()
            .enumerate()
            .map(|(i, &v)| format!("{:.2},{:.2}", x_at(i), y_at(v)))
            .collect();
        format!(
            "  <polyline points=\"{}\" fill=\"none\" stroke=\"{color}\"{dash} stroke-width=\"2\"/>\n",
            points.join(" ")
        )
    };
    let band = |mean: &[f64], std: &[f64], color: &str| -> String {
        let mut points = Vec::new();
        for i in 0..k {
            points.push(format!("{:.2},{:.2}", x_at(i), y_at(mean[i] + std[i])));
        }
        for i in (0..k).rev() {
            points.push(format!("{:.2},{:.2}", x_at(i), y_at(mean[i] - std[i])));
        }
        format!(
            "  <polygon points=\"{}\" fill=\"{color}\" opacity=\"0.15\"/>\n",
            points.join(" ")
        )
    };

    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"{width:.0}\" height=\"{height:.0}\" font-family=\"monospace\" font-size=\"12\">\n"
    );
    svg.push_str(&format!(
        "  <line x1=\"{left}\" y1=\"{bottom}\" x2=\"{:.0}\" y2=\"{bottom}\" stroke=\"#333\"/>\n",
        left + plot_w
    ));
    svg.push_str(&format!(
        "  <line x1=\"{left}\" y1=\"{bottom}\" x2=\"{left}\" y2=\"{:.0}\" stroke=\"#333\"/>\n",
        bottom - plot_h
    ));
    for (i, &s) in report.schedule.iter().enumerate() {
        svg.push_str(&format!(
            "  <text x=\"{:.2}\" y=\"{:.0}\" text-anchor=\"middle\">{s}</text>\n",
            x_at(i),
            bottom + 16.0
        ));
    }
    for v in [-1.0, 0.0, 0.5, 0.9, 1.0] {
        svg.push_str(&format!(
            "  <text x=\"{:.0}\" y=\"{:.2}\" text-anchor=\"end\">{v:.1}</text>\n",
            left - 6.0,
            y_at(v) + 4.0
        ));
    }
    svg.push_str(&band(&report.mean_cosine, &report.std_cosine, "#1864ab"));
    svg.push_str(&band(
        &report.mean_spearman,
        &report.std_spearman,
        "#e8590c",
    ));
    svg.push_str(&polyline(&report.mean_cosine, "#1864ab", ""));
    svg.push_str(&polyline(
        &report.mean_spearman,
        "#e8590c",
        " stroke-dasharray=\"6 3\"",
    ));
    svg.push_str(&format!(
        "  <text x=\"{:.0}\" y=\"20\">cosine (solid) / spearman (dashed) vs samples</text>\n",
        left
    ));
    svg.push_str("</svg>\n");
    svg
}
