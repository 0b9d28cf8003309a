//! Bootstrap percentile intervals and paired two-sided permutation tests.
//!
//! Draw `i` always uses the generator `draw_rng(seed, i)`, so results do not
//! depend on how draws are scheduled across threads.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::draw_rng;

/// Redraw attempts per bootstrap replicate when the statistic is undefined.
pub const MAX_REDRAWS: usize = 100;

/// Permutation draws with an undefined metric may make up at most this
/// fraction of all draws.
pub const MAX_EXCLUDED_FRACTION: f64 = 0.5;

/// Linear-interpolation percentile of sorted data.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Percentile bootstrap interval, resampling records with replacement.
///
/// A replicate on which `statistic` returns `None` is redrawn, up to
/// [`MAX_REDRAWS`] times.
pub fn bootstrap_ci<T, F>(sample: &[T], statistic: F, resamples: usize, level: f64, seed: u64) -> Result<(f64, f64)>
where
    T: Clone + Send + Sync,
    F: Fn(&[T]) -> Option<f64> + Sync,
{
    if sample.is_empty() {
        return Err(Error::Domain("bootstrap of an empty sample".into()));
    }
    if resamples < 100 {
        return Err(Error::Domain(format!("bootstrap needs at least 100 resamples, got {resamples}")));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Domain(format!("confidence level {level} must lie in (0, 1)")));
    }
    let n = sample.len();
    let replicates: Result<Vec<f64>> = (0..resamples)
        .into_par_iter()
        .map(|draw| {
            let mut rng = draw_rng(seed, draw as u64);
            let mut buf = Vec::with_capacity(n);
            for _ in 0..=MAX_REDRAWS {
                buf.clear();
                buf.extend((0..n).map(|_| sample[rng.random_range(0..n)].clone()));
                if let Some(v) = statistic(&buf).filter(|v| v.is_finite()) {
                    return Ok(v);
                }
            }
            Err(Error::UndefinedMetric(format!(
                "statistic undefined on {} consecutive redraws of bootstrap replicate {draw}",
                MAX_REDRAWS + 1
            )))
        })
        .collect();
    let mut replicates = replicates?;
    replicates.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    Ok((percentile(&replicates, tail), percentile(&replicates, 1.0 - tail)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PermutationMode {
    /// Exhaustive when `2^n <= permutations`, Monte Carlo otherwise.
    Auto,
    MonteCarlo,
    Exhaustive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PermutationResult {
    /// metric(A) - metric(B)
    pub observed: f64,
    pub p_value: f64,
    /// Draws with a defined metric.
    pub draws: u64,
    /// Draws dropped because the metric was undefined.
    pub excluded: u64,
    pub exhaustive: bool,
}

/// Two-sided paired permutation test of `metric(A) - metric(B)`.
///
/// `paired` holds per-image (prediction A, prediction B, reference). Under
/// the null each image's A and B predictions are exchangeable, so every null
/// draw swaps them independently with probability one half.
pub fn permutation_test<P, R, M>(paired: &[(P, P, R)], metric: M, permutations: usize, seed: u64) -> Result<PermutationResult>
where
    P: Copy + Send + Sync,
    R: Copy + Send + Sync,
    M: Fn(&[(P, R)]) -> Option<f64> + Sync,
{
    permutation_test_with(paired, metric, permutations, seed, PermutationMode::Auto)
}

pub fn permutation_test_with<P, R, M>(
    paired: &[(P, P, R)],
    metric: M,
    permutations: usize,
    seed: u64,
    mode: PermutationMode,
) -> Result<PermutationResult>
where
    P: Copy + Send + Sync,
    R: Copy + Send + Sync,
    M: Fn(&[(P, R)]) -> Option<f64> + Sync,
{
    let n = paired.len();
    if n == 0 {
        return Err(Error::Domain("permutation test on empty data".into()));
    }
    let feasible = n < 63 && (1u64 << n) <= permutations as u64;
    let exhaustive = match mode {
        PermutationMode::Auto => feasible,
        PermutationMode::MonteCarlo => false,
        PermutationMode::Exhaustive => {
            if n >= 31 {
                return Err(Error::Domain(format!("exhaustive enumeration of 2^{n} swaps is infeasible")));
            }
            true
        }
    };
    if !exhaustive && permutations < 1000 {
        return Err(Error::Domain(format!("Monte Carlo permutation test needs at least 1000 draws, got {permutations}")));
    }

    let difference = |swap: &dyn Fn(usize) -> bool| -> Option<f64> {
        let mut a = Vec::with_capacity(n);
        let mut b = Vec::with_capacity(n);
        for (i, &(pa, pb, r)) in paired.iter().enumerate() {
            if swap(i) {
                a.push((pb, r));
                b.push((pa, r));
            } else {
                a.push((pa, r));
                b.push((pb, r));
            }
        }
        Some(metric(&a)? - metric(&b)?)
    };

    let observed = difference(&|_| false)
        .ok_or_else(|| Error::UndefinedMetric("metric undefined on the observed data".into()))?;
    let tolerance = 1e-12 * observed.abs().max(1.0);

    let total_draws: u64 = if exhaustive { 1u64 << n } else { permutations as u64 };
    let nulls: Vec<Option<f64>> = (0..total_draws)
        .into_par_iter()
        .map(|draw| {
            if exhaustive {
                difference(&|i| draw >> i & 1 == 1)
            } else {
                let mut rng = draw_rng(seed, draw);
                let swaps: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
                difference(&|i| swaps[i])
            }
        })
        .collect();

    let excluded = nulls.iter().filter(|v| v.is_none()).count() as u64;
    if excluded as f64 > MAX_EXCLUDED_FRACTION * total_draws as f64 {
        return Err(Error::UndefinedMetric(format!(
            "metric undefined on {excluded} of {total_draws} permutation draws"
        )));
    }
    let valid = total_draws - excluded;
    let extreme = nulls.iter().flatten().filter(|d| d.abs() >= observed.abs() - tolerance).count() as u64;
    let p_value = if exhaustive {
        // The identity relabelling is one of the enumerated draws.
        extreme as f64 / valid as f64
    } else {
        (1 + extreme) as f64 / (1 + valid) as f64
    };
    Ok(PermutationResult { observed, p_value, draws: valid, excluded, exhaustive })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mean(xs: &[f64]) -> Option<f64> {
        Some(xs.iter().sum::<f64>() / xs.len() as f64)
    }

    #[test]
    fn constant_statistic_gives_degenerate_interval() {
        let data = vec![1.0; 30];
        assert_eq!(bootstrap_ci(&data, |_| Some(4.2), 200, 0.95, 1).unwrap(), (4.2, 4.2));
    }

    #[test]
    fn mean_interval_matches_normal_approximation() {
        let data: Vec<f64> = (1..=100).map(f64::from).collect();
        let (lo, hi) = bootstrap_ci(&data, |s| mean(s), 2000, 0.95, 42).unwrap();
        assert!(lo < 50.5 && 50.5 < hi);
        // Analytic: SE = sigma / sqrt(n) with the population sigma of 1..100.
        let var = data.iter().map(|x| (x - 50.5).powi(2)).sum::<f64>() / 100.0;
        let width = 2.0 * 1.959964 * (var / 100.0).sqrt();
        assert!(((hi - lo) - width).abs() / width < 0.15, "{} vs {width}", hi - lo);
    }

    #[test]
    fn bootstrap_is_seed_deterministic() {
        let data: Vec<f64> = (0..50).map(|i| (i * 7 % 13) as f64).collect();
        let a = bootstrap_ci(&data, |s| mean(s), 500, 0.9, 9).unwrap();
        let b = bootstrap_ci(&data, |s| mean(s), 500, 0.9, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn bootstrap_redraws_undefined_replicates() {
        // Undefined unless the resample contains a 1; 2 of 3 elements are 0.
        let data = vec![0u8, 0, 1];
        let r = bootstrap_ci(&data, |s| s.contains(&1).then_some(1.0), 100, 0.95, 3).unwrap();
        assert_eq!(r, (1.0, 1.0));
        assert!(matches!(
            bootstrap_ci(&[0u8], |_| None, 100, 0.95, 3),
            Err(Error::UndefinedMetric(_))
        ));
        assert!(bootstrap_ci(&[1.0], |s| mean(s), 10, 0.95, 3).is_err());
    }

    fn accuracy(pairs: &[(bool, bool)]) -> Option<f64> {
        Some(pairs.iter().filter(|(p, r)| p == r).count() as f64 / pairs.len() as f64)
    }

    #[test]
    fn identical_predictions_give_p_one() {
        let paired: Vec<(bool, bool, bool)> = (0..40).map(|i| (i % 3 == 0, i % 3 == 0, i % 2 == 0)).collect();
        let r = permutation_test(&paired, accuracy, 2000, 5).unwrap();
        assert_eq!(r.observed, 0.0);
        assert_eq!(r.p_value, 1.0);
    }

    #[test]
    fn monte_carlo_agrees_with_exhaustive() {
        for n in [4usize, 8, 12] {
            let paired: Vec<(bool, bool, bool)> =
                (0..n).map(|i| (i % 4 != 0, i % 3 == 0, true)).collect();
            let exact = permutation_test_with(&paired, accuracy, 0, 0, PermutationMode::Exhaustive).unwrap();
            let draws = 4000;
            let mc = permutation_test_with(&paired, accuracy, draws, 17, PermutationMode::MonteCarlo).unwrap();
            assert!(exact.exhaustive && !mc.exhaustive);
            assert!(
                (exact.p_value - mc.p_value).abs() <= 3.0 / (draws as f64).sqrt(),
                "n={n}: {} vs {}",
                exact.p_value,
                mc.p_value
            );
        }
    }

    #[test]
    fn exhaustive_small_case_by_hand() {
        // A right, B wrong on both images: observed 1. Swaps give {1, 0, 0, -1}.
        let paired = vec![(true, false, true), (true, false, true)];
        let r = permutation_test(&paired, accuracy, 1000, 0).unwrap();
        assert!(r.exhaustive);
        assert_eq!(r.draws, 4);
        assert_eq!(r.p_value, 0.5);
    }

    #[test]
    fn permutation_preconditions() {
        let paired: Vec<(bool, bool, bool)> = (0..100).map(|i| (i % 2 == 0, true, true)).collect();
        assert!(matches!(permutation_test(&paired, accuracy, 500, 1), Err(Error::Domain(_))));
        assert!(matches!(permutation_test(&[] as &[(bool, bool, bool)], accuracy, 5000, 1), Err(Error::Domain(_))));
        let never = |_: &[(bool, bool)]| None;
        assert!(matches!(permutation_test(&paired, never, 1000, 1), Err(Error::UndefinedMetric(_))));
    }
}
