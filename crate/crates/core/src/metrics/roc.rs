use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    /// Scores at or above this value are called positive. Infinite for the origin.
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

/// ROC curve over every distinct score and its trapezoidal area.
///
/// Tied scores move the curve diagonally, which credits positive/negative
/// ties with one half, so the area equals the Mann-Whitney statistic.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<(Vec<RocPoint>, f64)> {
    if scores.len() != labels.len() {
        return Err(Error::Contract(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::Domain(format!("non-finite score {bad}")));
    }
    let positives = labels.iter().filter(|&&l| l).count() as u64;
    let negatives = labels.len() as u64 - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::UndefinedMetric("ROC needs both positive and negative cases".into()));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut points = vec![RocPoint { threshold: f64::INFINITY, fpr: 0.0, tpr: 0.0 }];
    let (mut tp, mut fp) = (0u64, 0u64);
    // Twice the area in units of one positive-negative pair.
    let mut doubled_area: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        let (mut group_tp, mut group_fp) = (0u64, 0u64);
        while i < order.len() && scores[order[i]] == threshold {
            if labels[order[i]] {
                group_tp += 1;
            } else {
                group_fp += 1;
            }
            i += 1;
        }
        doubled_area += group_fp as u128 * (2 * tp + group_tp) as u128;
        tp += group_tp;
        fp += group_fp;
        points.push(RocPoint {
            threshold,
            fpr: fp as f64 / negatives as f64,
            tpr: tp as f64 / positives as f64,
        });
    }
    let auc = doubled_area as f64 / (2.0 * positives as f64 * negatives as f64);
    Ok((points, auc))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    /// Probability a random positive outscores a random negative, ties count
    /// one half, by enumerating every pair.
    fn pairwise_auc(scores: &[f64], labels: &[bool]) -> f64 {
        let (mut wins, mut pairs) = (0.0, 0.0);
        for (i, &li) in labels.iter().enumerate() {
            for (j, &lj) in labels.iter().enumerate() {
                if li && !lj {
                    pairs += 1.0;
                    if scores[i] > scores[j] {
                        wins += 1.0;
                    } else if scores[i] == scores[j] {
                        wins += 0.5;
                    }
                }
            }
        }
        wins / pairs
    }

    /// Plain trapezoid sum over the returned curve.
    fn trapezoid(points: &[RocPoint]) -> f64 {
        points.windows(2).map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0).sum()
    }

    #[test]
    fn small_example() {
        let (_, auc) = roc_auc(&[0.4, 0.8, 0.1, 0.5], &[true, true, false, false]).unwrap();
        assert_eq!(auc, 0.75);
    }

    #[test]
    fn separation_and_ties() {
        let (_, auc) = roc_auc(&[0.9, 0.8, 0.2, 0.1], &[true, true, false, false]).unwrap();
        assert_eq!(auc, 1.0);
        let (points, auc) = roc_auc(&[0.3; 6], &[true, false, true, false, false, true]).unwrap();
        assert_eq!(auc, 0.5);
        assert_eq!(points.len(), 2);
    }

    #[test]
    fn single_class_is_undefined() {
        assert!(matches!(roc_auc(&[0.1, 0.2], &[true, true]), Err(Error::UndefinedMetric(_))));
        assert!(matches!(roc_auc(&[0.1, f64::NAN], &[true, false]), Err(Error::Domain(_))));
    }

    #[test]
    fn area_matches_pairwise_rank_statistic() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
        for _ in 0..200 {
            let n = rng.random_range(2..=50);
            // Coarse scores so ties are common.
            let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..8) as f64 / 8.0).collect();
            let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
            labels[0] = true;
            labels[1] = false;
            let (points, auc) = roc_auc(&scores, &labels).unwrap();
            assert!((auc - pairwise_auc(&scores, &labels)).abs() <= 1e-12);
            assert!((auc - trapezoid(&points)).abs() <= 1e-12);
            let last = points.last().unwrap();
            assert_eq!((last.fpr, last.tpr), (1.0, 1.0));
        }
    }
}
