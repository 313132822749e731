//! Ranking metrics: AUC (binary and support-weighted one-vs-rest), cosine
//! similarity, and Spearman rank correlation.
//!
//! Binary AUC uses the Mann-Whitney rank form in O(n log n): ties in scores
//! receive average ranks, which credits tied positive/negative pairs 0.5.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("scores ({scores}) and labels ({labels}) differ in length")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("AUC undefined: class {0} absent")]
    MissingClass(usize),
    #[error("need at least 2 elements, got {0}")]
    TooFew(usize),
    #[error("score matrix has {cols} columns but labels reference class {class}")]
    ClassOutOfRange { class: usize, cols: usize },
}

/// Average ranks (1-based), ties averaged.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).expect("finite values"));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            ranks[order[k]] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Probability that a random positive outranks a random negative, ties 0.5.
pub fn auc_binary(scores: &[f64], labels: &[usize]) -> Result<f64, MetricError> {
    if scores.len() != labels.len() {
        return Err(MetricError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 {
        return Err(MetricError::MissingClass(1));
    }
    if neg == 0 {
        return Err(MetricError::MissingClass(0));
    }
    let ranks = average_ranks(scores);
    let rank_sum_pos: f64 = ranks
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l == 1)
        .map(|(r, _)| r)
        .sum();
    let u = rank_sum_pos - pos as f64 * (pos as f64 + 1.0) / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

/// Support-weighted one-vs-rest AUC for a score matrix laid out row-major as
/// `n_rows x n_classes`.
pub fn auc_weighted(
    scores: &[f64],
    n_classes: usize,
    labels: &[usize],
) -> Result<f64, MetricError> {
    let n = labels.len();
    if scores.len() != n * n_classes {
        return Err(MetricError::LengthMismatch {
            scores: scores.len(),
            labels: n * n_classes,
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(MetricError::ClassOutOfRange {
            class: bad,
            cols: n_classes,
        });
    }
    let mut total = 0.0;
    for c in 0..n_classes {
        let support = labels.iter().filter(|&&l| l == c).count();
        if support == 0 {
            return Err(MetricError::MissingClass(c));
        }
        let col: Vec<f64> = (0..n).map(|r| scores[r * n_classes + c]).collect();
        let binary: Vec<usize> = labels.iter().map(|&l| (l == c) as usize).collect();
        total += support as f64 / n as f64 * auc_binary(&col, &binary)?;
    }
    Ok(total)
}

/// Cosine similarity; a zero vector yields 0 (flagged by the bool).
pub fn cosine(a: &[f64], b: &[f64]) -> Result<(f64, bool), MetricError> {
    if a.len() != b.len() {
        return Err(MetricError::LengthMismatch {
            scores: a.len(),
            labels: b.len(),
        });
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Ok((0.0, true));
    }
    Ok((dot / (na * nb), false))
}

/// Spearman rank correlation: Pearson on average-ranked data.
pub fn spearman_rho(a: &[f64], b: &[f64]) -> Result<f64, MetricError> {
    if a.len() != b.len() {
        return Err(MetricError::LengthMismatch {
            scores: a.len(),
            labels: b.len(),
        });
    }
    if a.len() < 2 {
        return Err(MetricError::TooFew(a.len()));
    }
    let ra = average_ranks(a);
    let rb = average_ranks(b);
    Ok(pearson(&ra, &rb))
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (a, b) in x.iter().zip(y) {
        cov += (a - mx) * (b - my);
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return 0.0;
    }
    cov / (vx * vy).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// O(n^2) pair-counting oracle, independent of the rank-based path.
    pub fn auc_pair_counting(scores: &[f64], labels: &[usize]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for (i, (&si, &li)) in scores.iter().zip(labels).enumerate() {
            if li != 1 {
                continue;
            }
            for (j, (&sj, &lj)) in scores.iter().zip(labels).enumerate() {
                if i == j || lj != 0 {
                    continue;
                }
                pairs += 1.0;
                if si > sj {
                    wins += 1.0;
                } else if si == sj {
                    wins += 0.5;
                }
            }
        }
        wins / pairs
    }

    #[test]
    fn perfect_ranking() {
        assert_eq!(auc_binary(&[0.9, 0.8, 0.1], &[1, 1, 0]).unwrap(), 1.0);
    }

    #[test]
    fn full_tie_is_half() {
        assert_eq!(auc_binary(&[0.5, 0.5], &[1, 0]).unwrap(), 0.5);
    }

    #[test]
    fn pair_counting_examples() {
        assert_eq!(
            auc_binary(&[0.2, 0.6, 0.4, 0.8], &[0, 1, 0, 1]).unwrap(),
            1.0
        );
        assert_eq!(
            auc_binary(&[0.2, 0.6, 0.7, 0.8], &[0, 1, 0, 1]).unwrap(),
            0.75
        );
    }

    #[test]
    fn single_class_is_error() {
        assert!(matches!(
            auc_binary(&[0.5, 0.6], &[1, 1]),
            Err(MetricError::MissingClass(0))
        ));
    }

    #[test]
    fn matches_pair_counting_oracle_on_random_fixtures() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..200 {
            let n = rng.gen_range(4..40);
            // coarse grid to force ties
            let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..10) as f64 / 10.0).collect();
            let mut labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..2)).collect();
            labels[0] = 0;
            labels[1] = 1;
            let fast = auc_binary(&scores, &labels).unwrap();
            let slow = auc_pair_counting(&scores, &labels);
            assert!((fast - slow).abs() < 1e-12, "{fast} vs {slow}");
        }
    }

    #[test]
    fn auc_complement_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..50 {
            let n = rng.gen_range(4..30);
            let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..8) as f64).collect();
            let mut labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..2)).collect();
            labels[0] = 0;
            labels[1] = 1;
            let flipped: Vec<usize> = labels.iter().map(|&l| 1 - l).collect();
            let a = auc_binary(&scores, &labels).unwrap();
            let b = auc_binary(&scores, &flipped).unwrap();
            assert!((a + b - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn auc_invariant_under_monotone_transform() {
        let scores = vec![0.1, 0.4, 0.35, 0.8, 0.65];
        let labels = vec![0, 0, 1, 1, 1];
        let a = auc_binary(&scores, &labels).unwrap();
        let transformed: Vec<f64> = scores.iter().map(|s| (s * 3.0).exp()).collect();
        let b = auc_binary(&transformed, &labels).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn weighted_auc_perfect_one_hot() {
        let scores = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        assert_eq!(auc_weighted(&scores, 3, &[0, 1, 2]).unwrap(), 1.0);
    }

    #[test]
    fn weighted_auc_binary_consistency() {
        let labels = vec![0, 1, 1, 0, 1];
        let pos: Vec<f64> = vec![0.2, 0.7, 0.6, 0.4, 0.9];
        let matrix: Vec<f64> = pos.iter().flat_map(|&p| [1.0 - p, p]).collect();
        let w = auc_weighted(&matrix, 2, &labels).unwrap();
        let b = auc_binary(&pos, &labels).unwrap();
        // positive-class AUC and negative-class AUC are equal, so the
        // support-weighted average equals the binary AUC
        assert!((w - b).abs() < 1e-12);
    }

    #[test]
    fn weighted_auc_hand_fixture() {
        // 3 classes, 6 rows; support 3/2/1
        let labels = vec![0, 0, 0, 1, 1, 2];
        #[rustfmt::skip]
        let scores = vec![
            0.7, 0.2, 0.1,
            0.6, 0.3, 0.1,
            0.4, 0.4, 0.2,
            0.3, 0.5, 0.2,
            0.5, 0.3, 0.2,
            0.2, 0.3, 0.5,
        ];
        // hand-computed per-class pair counting
        let c0 = auc_binary(
            &[0.7, 0.6, 0.4, 0.3, 0.5, 0.2],
            &[1, 1, 1, 0, 0, 0],
        )
        .unwrap();
        let c1 = auc_binary(
            &[0.2, 0.3, 0.4, 0.5, 0.3, 0.3],
            &[0, 0, 0, 1, 1, 0],
        )
        .unwrap();
        let c2 = auc_binary(
            &[0.1, 0.1, 0.2, 0.2, 0.2, 0.5],
            &[0, 0, 0, 0, 0, 1],
        )
        .unwrap();
        let expected = 3.0 / 6.0 * c0 + 2.0 / 6.0 * c1 + 1.0 / 6.0 * c2;
        let got = auc_weighted(&scores, 3, &labels).unwrap();
        assert!((got - expected).abs() < 1e-12);
    }

    #[test]
    fn spearman_basics() {
        let a = vec![1.0, 2.0, 3.0, 4.0];
        assert_eq!(spearman_rho(&a, &a).unwrap(), 1.0);
        let rev = vec![4.0, 3.0, 2.0, 1.0];
        assert_eq!(spearman_rho(&a, &rev).unwrap(), -1.0);
        let b = vec![1.0, 3.0, 2.0, 4.0];
        // 1 - 6*2/(4*15) = 0.8
        assert!((spearman_rho(&a, &b).unwrap() - 0.8).abs() < 1e-12);
    }

    #[test]
    fn spearman_rank_difference_closed_form_on_tiefree() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..50 {
            let n = rng.gen_range(3..20);
            let mut a: Vec<f64> = (0..n).map(|i| i as f64).collect();
            let mut b: Vec<f64> = (0..n).map(|i| i as f64).collect();
            use rand::seq::SliceRandom;
            a.shuffle(&mut rng);
            b.shuffle(&mut rng);
            let ra = average_ranks(&a);
            let rb = average_ranks(&b);
            let d2: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - y) * (x - y)).sum();
            let nf = n as f64;
            let closed = 1.0 - 6.0 * d2 / (nf * (nf * nf - 1.0));
            let rho = spearman_rho(&a, &b).unwrap();
            assert!((rho - closed).abs() < 1e-12);
        }
    }

    #[test]
    fn spearman_monotone_invariance() {
        let a = vec![0.5, 2.0, -1.0, 3.0, 0.0];
        let b = vec![1.0, 0.0, 2.0, 5.0, 3.0];
        let r1 = spearman_rho(&a, &b).unwrap();
        let ta: Vec<f64> = a.iter().map(|v| v.exp()).collect();
        let tb: Vec<f64> = b.iter().map(|v| v * 10.0 + 3.0).collect();
        assert_eq!(r1, spearman_rho(&ta, &tb).unwrap());
    }

    #[test]
    fn cosine_basics() {
        let (c, flag) = cosine(&[1.0, 2.0], &[1.0, 2.0]).unwrap();
        assert!((c - 1.0).abs() < 1e-15 && !flag);
        let (z, flag) = cosine(&[0.0, 0.0], &[1.0, 2.0]).unwrap();
        assert_eq!(z, 0.0);
        assert!(flag);
        // positive scaling invariance
        let (a, _) = cosine(&[1.0, -2.0, 3.0], &[0.5, 1.0, -0.25]).unwrap();
        let (b, _) = cosine(&[2.0, -4.0, 6.0], &[0.5, 1.0, -0.25]).unwrap();
        assert!((a - b).abs() < 1e-15);
    }
}
