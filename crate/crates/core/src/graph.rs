//! Feature graph construction: Pearson correlations over the training node
//! matrix, threshold/fallback edge pruning, weighted self-loops, and the GCN
//! style symmetric degree normalization A~ = D^(-1/2) A D^(-1/2) with
//! D_ii = sum_j A_ij.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const PRIMARY_THRESHOLD: f64 = 0.2;
pub const FALLBACK_THRESHOLD: f64 = 0.05;

/// Self-loop weight search grid; raw diagonal weights, not post-normalization
/// fractions.
pub const DELTA_GRID: [f64; 13] = [
    1.0, 2.0, 3.0, 4.0, 10.0, 15.0, 20.0, 30.0, 40.0, 50.0, 60.0, 80.0, 400.0,
];

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("sample-size error: Pearson correlation needs at least 2 rows, got {0}")]
    SampleSize(usize),
    #[error("self-loop weight must be positive, got {0}")]
    NonPositiveDelta(f64),
    #[error("degree error: node {node} ('{name}') has non-positive weighted degree {degree}")]
    Degree {
        node: usize,
        name: String,
        degree: f64,
    },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorrelationMatrix {
    pub n: usize,
    /// Row-major n x n Pearson coefficients.
    pub values: Vec<f64>,
}

impl CorrelationMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AppliedThreshold {
    Primary,
    Fallback,
    /// No off-diagonal edge survived either threshold; self-loops only.
    None,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureGraph {
    pub n: usize,
    pub node_names: Vec<String>,
    /// Row-major raw adjacency with delta on the diagonal.
    pub raw: Vec<f64>,
    /// Row-major normalized adjacency.
    pub normalized: Vec<f64>,
    pub primary_threshold: f64,
    pub fallback_threshold: f64,
    pub applied: AppliedThreshold,
    pub self_loop_weight: f64,
    pub null_graph: bool,
}

impl FeatureGraph {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("feature graph serializes")
    }

    pub fn from_json(json: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(json)
    }
}

/// Pearson coefficients over a row-major `n_rows x n_cols` training matrix.
/// Columns with zero variance correlate 0 with everything (diagonal stays 1).
pub fn pearson_matrix(
    values: &[f64],
    n_rows: usize,
    n_cols: usize,
) -> Result<CorrelationMatrix, GraphError> {
    if n_rows < 2 {
        return Err(GraphError::SampleSize(n_rows));
    }
    if values.len() != n_rows * n_cols {
        return Err(GraphError::Dimension(format!(
            "expected {} values for {n_rows}x{n_cols}, got {}",
            n_rows * n_cols,
            values.len()
        )));
    }
    let mut means = vec![0.0; n_cols];
    for r in 0..n_rows {
        for c in 0..n_cols {
            means[c] += values[r * n_cols + c];
        }
    }
    for m in &mut means {
        *m /= n_rows as f64;
    }
    // centered column norms
    let mut norms = vec![0.0; n_cols];
    for r in 0..n_rows {
        for c in 0..n_cols {
            let d = values[r * n_cols + c] - means[c];
            norms[c] += d * d;
        }
    }
    let mut out = vec![0.0; n_cols * n_cols];
    for i in 0..n_cols {
        out[i * n_cols + i] = 1.0;
        for j in (i + 1)..n_cols {
            let denom = (norms[i] * norms[j]).sqrt();
            let r = if denom > 0.0 {
                let mut cov = 0.0;
                for row in 0..n_rows {
                    cov += (values[row * n_cols + i] - means[i])
                        * (values[row * n_cols + j] - means[j]);
                }
                (cov / denom).clamp(-1.0, 1.0)
            } else {
                0.0
            };
            out[i * n_cols + j] = r;
            out[j * n_cols + i] = r;
        }
    }
    Ok(CorrelationMatrix {
        n: n_cols,
        values: out,
    })
}

/// Raw adjacency: off-diagonal entries keep their signed correlation when
/// |corr| >= threshold; the fallback threshold activates only when the primary
/// one removes every edge; the diagonal is the self-loop weight.
pub fn build_adjacency(
    corr: &CorrelationMatrix,
    primary: f64,
    fallback: f64,
    delta: f64,
) -> Result<(Vec<f64>, AppliedThreshold), GraphError> {
    if delta <= 0.0 {
        return Err(GraphError::NonPositiveDelta(delta));
    }
    let n = corr.n;
    let keep = |threshold: f64| -> (Vec<f64>, usize) {
        let mut a = vec![0.0; n * n];
        let mut edges = 0;
        for i in 0..n {
            a[i * n + i] = delta;
            for j in 0..n {
                if i != j {
                    let r = corr.get(i, j);
                    if r.abs() >= threshold {
                        a[i * n + j] = r;
                        edges += 1;
                    }
                }
            }
        }
        (a, edges)
    };
    let (a, edges) = keep(primary);
    if edges > 0 {
        return Ok((a, AppliedThreshold::Primary));
    }
    let (a, edges) = keep(fallback);
    if edges > 0 {
        return Ok((a, AppliedThreshold::Fallback));
    }
    Ok((a, AppliedThreshold::None))
}

/// Symmetric degree normalization with D_ii = sum_j A_ij.
pub fn normalize_adjacency(
    a: &[f64],
    n: usize,
    node_names: &[String],
) -> Result<Vec<f64>, GraphError> {
    if a.len() != n * n {
        return Err(GraphError::Dimension(format!(
            "adjacency length {} is not {n}x{n}",
            a.len()
        )));
    }
    let mut degree = vec![0.0; n];
    for i in 0..n {
        let d: f64 = a[i * n..(i + 1) * n].iter().sum();
        if d <= 0.0 {
            return Err(GraphError::Degree {
                node: i,
                name: node_names
                    .get(i)
                    .cloned()
                    .unwrap_or_else(|| format!("node_{i}")),
                degree: d,
            });
        }
        degree[i] = d;
    }
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = a[i * n + j] / (degree[i] * degree[j]).sqrt();
        }
    }
    Ok(out)
}

/// Average over nodes of A~_ii / sum_j |A~_ij|: the share of each node's
/// weighted summation carried by its own self-loop.
pub fn average_diagonal_mass(normalized: &[f64], n: usize) -> f64 {
    let mut total = 0.0;
    for i in 0..n {
        let abs_sum: f64 = normalized[i * n..(i + 1) * n].iter().map(|v| v.abs()).sum();
        if abs_sum > 0.0 {
            total += normalized[i * n + i] / abs_sum;
        }
    }
    total / n as f64
}

/// Smallest grid delta whose normalized graph puts the average diagonal mass
/// in [0.70, 0.90]. Falls back to the smallest delta exceeding 0.90 (a
/// stronger self-loop never hurts interpretability) if no grid value lands in
/// the band.
pub fn calibrate_delta(corr: &CorrelationMatrix) -> Result<f64, GraphError> {
    let names: Vec<String> = (0..corr.n).map(|i| format!("node_{i}")).collect();
    let mut first_valid = None;
    for &delta in &DELTA_GRID {
        let (a, _) = build_adjacency(corr, PRIMARY_THRESHOLD, FALLBACK_THRESHOLD, delta)?;
        let normalized = match normalize_adjacency(&a, corr.n, &names) {
            Ok(m) => m,
            Err(GraphError::Degree { .. }) => continue,
            Err(e) => return Err(e),
        };
        let mass = average_diagonal_mass(&normalized, corr.n);
        if (0.70..=0.90).contains(&mass) {
            return Ok(delta);
        }
        if first_valid.is_none() && mass > 0.90 {
            first_valid = Some(delta);
        }
    }
    first_valid.ok_or_else(|| GraphError::Dimension("no grid delta yields a usable graph".into()))
}

/// Full construction. If the requested delta leaves some node with a
/// non-positive weighted degree (possible with strong negative edges), the
/// next larger grid delta is tried and the effective value is recorded in the
/// result.
pub fn build_feature_graph(
    corr: &CorrelationMatrix,
    delta: f64,
    node_names: Vec<String>,
) -> Result<FeatureGraph, GraphError> {
    if node_names.len() != corr.n {
        return Err(GraphError::Dimension(format!(
            "{} node names for {} nodes",
            node_names.len(),
            corr.n
        )));
    }
    let mut candidates = vec![delta];
    candidates.extend(DELTA_GRID.iter().copied().filter(|&d| d > delta));
    let mut last_err = None;
    for d in candidates {
        let (raw, applied) = build_adjacency(corr, PRIMARY_THRESHOLD, FALLBACK_THRESHOLD, d)?;
        match normalize_adjacency(&raw, corr.n, &node_names) {
            Ok(normalized) => {
                if d != delta {
                    eprintln!(
                        "feature graph: raised self-loop weight {delta} -> {d} to keep all weighted degrees positive"
                    );
                }
                return Ok(FeatureGraph {
                    n: corr.n,
                    node_names,
                    raw,
                    normalized,
                    primary_threshold: PRIMARY_THRESHOLD,
                    fallback_threshold: FALLBACK_THRESHOLD,
                    applied,
                    self_loop_weight: d,
                    null_graph: applied == AppliedThreshold::None,
                });
            }
            Err(e @ GraphError::Degree { .. }) => last_err = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last_err.unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn corr_from(values: Vec<f64>, n: usize) -> CorrelationMatrix {
        CorrelationMatrix { n, values }
    }

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("node_{i}")).collect()
    }

    #[test]
    fn pearson_perfect_relations() {
        // columns: x=(1,2,3), y=(2,4,6), z=(3,2,1)
        let m = pearson_matrix(&[1.0, 2.0, 3.0, 2.0, 4.0, 2.0, 3.0, 6.0, 1.0], 3, 3).unwrap();
        assert!((m.get(0, 1) - 1.0).abs() < 1e-15);
        assert!((m.get(0, 2) + 1.0).abs() < 1e-15);
    }

    #[test]
    fn pearson_half_correlation() {
        // x=(1,2,3), y=(1,3,2) -> r = 0.5
        let m = pearson_matrix(&[1.0, 1.0, 2.0, 3.0, 3.0, 2.0], 3, 2).unwrap();
        assert!((m.get(0, 1) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn constant_column_is_zero_off_diagonal_one_on_diagonal() {
        let m = pearson_matrix(&[1.0, 7.0, 2.0, 7.0, 3.0, 7.0], 3, 2).unwrap();
        assert_eq!(m.get(0, 1), 0.0);
        assert_eq!(m.get(1, 1), 1.0);
    }

    #[test]
    fn fewer_than_two_rows_is_sample_size_error() {
        assert!(matches!(
            pearson_matrix(&[1.0, 2.0], 1, 2),
            Err(GraphError::SampleSize(1))
        ));
    }

    #[test]
    fn affine_rescaling_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n_rows = 40;
        let base: Vec<f64> = (0..n_rows * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let m0 = pearson_matrix(&base, n_rows, 3).unwrap();
        let mut scaled = base.clone();
        for r in 0..n_rows {
            scaled[r * 3] = 3.5 * scaled[r * 3] + 2.0;
        }
        let m1 = pearson_matrix(&scaled, n_rows, 3).unwrap();
        for (a, b) in m0.values.iter().zip(&m1.values) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn primary_threshold_keeps_only_strong_edge() {
        let corr = corr_from(
            vec![1.0, 0.5, 0.1, 0.5, 1.0, 0.0, 0.1, 0.0, 1.0],
            3,
        );
        let (a, applied) = build_adjacency(&corr, 0.2, 0.05, 4.0).unwrap();
        assert_eq!(applied, AppliedThreshold::Primary);
        assert_eq!(a[1], 0.5);
        assert_eq!(a[2], 0.0); // 0.1 pruned
        assert_eq!(a[0], 4.0);
        assert_eq!(a[4], 4.0);
    }

    #[test]
    fn threshold_tie_is_kept() {
        let corr = corr_from(vec![1.0, 0.2, 0.2, 1.0], 2);
        let (a, applied) = build_adjacency(&corr, 0.2, 0.05, 1.0).unwrap();
        assert_eq!(applied, AppliedThreshold::Primary);
        assert_eq!(a[1], 0.2);
    }

    #[test]
    fn fallback_activates_when_primary_removes_everything() {
        let corr = corr_from(vec![1.0, 0.07, 0.07, 1.0], 2);
        let (a, applied) = build_adjacency(&corr, 0.2, 0.05, 1.0).unwrap();
        assert_eq!(applied, AppliedThreshold::Fallback);
        assert_eq!(a[1], 0.07);
    }

    #[test]
    fn uncorrelated_matrix_yields_null_graph() {
        let corr = corr_from(vec![1.0, 0.0, 0.0, 1.0], 2);
        let g = build_feature_graph(&corr, 3.0, names(2)).unwrap();
        assert!(g.null_graph);
        assert_eq!(g.applied, AppliedThreshold::None);
        assert_eq!(g.raw, vec![3.0, 0.0, 0.0, 3.0]);
    }

    #[test]
    fn negative_edges_keep_sign() {
        let corr = corr_from(vec![1.0, -0.6, -0.6, 1.0], 2);
        let (a, _) = build_adjacency(&corr, 0.2, 0.05, 4.0).unwrap();
        assert_eq!(a[1], -0.6);
    }

    #[test]
    fn raising_threshold_never_adds_edges() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 6;
        let mut values = vec![0.0; n * n];
        for i in 0..n {
            values[i * n + i] = 1.0;
            for j in (i + 1)..n {
                let r: f64 = rng.gen_range(-1.0..1.0);
                values[i * n + j] = r;
                values[j * n + i] = r;
            }
        }
        let corr = corr_from(values, n);
        let edges_at = |t: f64| -> usize {
            let (a, _) = build_adjacency(&corr, t, t, 1.0).unwrap();
            (0..n * n)
                .filter(|&k| k / n != k % n && a[k] != 0.0)
                .count()
        };
        let mut last = usize::MAX;
        for t in [0.05, 0.2, 0.4, 0.6, 0.8] {
            let e = edges_at(t);
            assert!(e <= last);
            last = e;
        }
    }

    #[test]
    fn diagonal_matrix_normalizes_to_identity() {
        let a = vec![2.0, 0.0, 0.0, 2.0];
        let norm = normalize_adjacency(&a, 2, &names(2)).unwrap();
        assert_eq!(norm, vec![1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn all_ones_normalizes_to_halves() {
        let a = vec![1.0, 1.0, 1.0, 1.0];
        let norm = normalize_adjacency(&a, 2, &names(2)).unwrap();
        for v in norm {
            assert!((v - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn normalization_matches_brute_force_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..100 {
            let n = rng.gen_range(2..8);
            let mut a = vec![0.0; n * n];
            for i in 0..n {
                a[i * n + i] = rng.gen_range(0.5..5.0);
                for j in (i + 1)..n {
                    let v: f64 = rng.gen_range(0.0..1.0);
                    a[i * n + j] = v;
                    a[j * n + i] = v;
                }
            }
            let norm = normalize_adjacency(&a, n, &names(n)).unwrap();
            // independent dense evaluation of D^(-1/2) A D^(-1/2)
            let mut d = vec![0.0; n];
            for i in 0..n {
                d[i] = a[i * n..(i + 1) * n].iter().sum();
            }
            for i in 0..n {
                for j in 0..n {
                    let expected = a[i * n + j] / (d[i].sqrt() * d[j].sqrt());
                    assert!((norm[i * n + j] - expected).abs() < 1e-12);
                    assert!((norm[i * n + j] - norm[j * n + i]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn unit_degree_symmetric_matrix_is_fixed_point() {
        let a = vec![0.5, 0.5, 0.5, 0.5];
        let norm = normalize_adjacency(&a, 2, &names(2)).unwrap();
        for (x, y) in norm.iter().zip(&a) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn non_positive_degree_names_the_node() {
        let a = vec![0.5, -1.0, -1.0, 2.0];
        match normalize_adjacency(&a, 2, &names(2)) {
            Err(GraphError::Degree { node, name, .. }) => {
                assert_eq!(node, 0);
                assert_eq!(name, "node_0");
            }
            other => panic!("expected degree error, got {other:?}"),
        }
    }

    #[test]
    fn feature_graph_raises_delta_past_negative_degrees() {
        // node 0 row sum 1 - 0.9 - 0.9 < 0 at delta 1
        let corr = corr_from(
            vec![1.0, -0.9, -0.9, -0.9, 1.0, 0.0, -0.9, 0.0, 1.0],
            3,
        );
        let g = build_feature_graph(&corr, 1.0, names(3)).unwrap();
        assert!(g.self_loop_weight > 1.0);
        for i in 0..3 {
            let d: f64 = g.raw[i * 3..(i + 1) * 3].iter().sum();
            assert!(d > 0.0);
        }
    }

    #[test]
    fn calibration_lands_in_band() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n_rows = 200;
        let n = 8;
        // correlated columns: shared latent plus noise
        let mut values = vec![0.0; n_rows * n];
        for r in 0..n_rows {
            let latent: f64 = rng.gen_range(-1.0..1.0);
            for c in 0..n {
                values[r * n + c] = latent + rng.gen_range(-0.8..0.8);
            }
        }
        let corr = pearson_matrix(&values, n_rows, n).unwrap();
        let delta = calibrate_delta(&corr).unwrap();
        let g = build_feature_graph(&corr, delta, names(n)).unwrap();
        let mass = average_diagonal_mass(&g.normalized, n);
        assert!((0.70..=0.90).contains(&mass), "mass {mass} at delta {delta}");
    }

    #[test]
    fn json_round_trip() {
        let corr = corr_from(vec![1.0, 0.5, 0.5, 1.0], 2);
        let g = build_feature_graph(&corr, 4.0, names(2)).unwrap();
        let back = FeatureGraph::from_json(&g.to_json()).unwrap();
        assert_eq!(back.raw, g.raw);
        assert_eq!(back.normalized, g.normalized);
        assert_eq!(back.self_loop_weight, g.self_loop_weight);
        assert_eq!(back.node_names, g.node_names);
    }
}
