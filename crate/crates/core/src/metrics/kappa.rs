use super::ConfusionMatrix;
use crate::error::{Error, Result};

fn weighted_kappa(cm: &ConfusionMatrix, weight: impl Fn(usize, usize) -> f64) -> Result<f64> {
    let k = cm.size();
    if k < 2 {
        return Err(Error::Domain("kappa needs at least two categories".into()));
    }
    let total = cm.total();
    if total == 0 {
        return Err(Error::UndefinedMetric("kappa of an empty matrix".into()));
    }
    let n = total as f64;
    let rows = cm.row_totals();
    let cols = cm.column_totals();
    let (mut observed, mut expected) = (0.0, 0.0);
    for i in 0..k {
        for j in 0..k {
            let w = weight(i, j);
            observed += w * cm.counts[i][j] as f64 / n;
            expected += w * (rows[i] as f64 / n) * (cols[j] as f64 / n);
        }
    }
    if expected <= 0.0 {
        return Err(Error::UndefinedMetric(
            "kappa undefined: both raters put all mass in one category".into(),
        ));
    }
    Ok(1.0 - observed / expected)
}

/// Cohen's kappa with quadratic disagreement weights `(i-j)^2 / (k-1)^2`.
pub fn quadratic_weighted_kappa(cm: &ConfusionMatrix) -> Result<f64> {
    let k = cm.size();
    let denom = ((k.max(2) - 1) * (k.max(2) - 1)) as f64;
    weighted_kappa(cm, |i, j| {
        let d = i as f64 - j as f64;
        d * d / denom
    })
}

pub fn unweighted_kappa(cm: &ConfusionMatrix) -> Result<f64> {
    weighted_kappa(cm, |i, j| if i == j { 0.0 } else { 1.0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cm(counts: Vec<Vec<u64>>) -> ConfusionMatrix {
        let k = counts.len();
        ConfusionMatrix::from_counts((0..k).map(|i| i.to_string()).collect(), counts).unwrap()
    }

    #[test]
    fn diagonal_is_perfect() {
        assert_eq!(quadratic_weighted_kappa(&cm(vec![vec![5, 0, 0], vec![0, 3, 0], vec![0, 0, 9]])).unwrap(), 1.0);
    }

    #[test]
    fn degenerate_marginals() {
        let m = cm(vec![vec![10, 0], vec![0, 0]]);
        assert!(matches!(quadratic_weighted_kappa(&m), Err(Error::UndefinedMetric(_))));
        assert!(matches!(quadratic_weighted_kappa(&cm(vec![vec![0, 0], vec![0, 0]])), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn hand_computed_two_by_two() {
        // With two categories quadratic and unweighted kappa coincide.
        // po = 0.7, pe = 0.5*0.6 + 0.5*0.4 = 0.5 -> kappa 0.4
        let m = cm(vec![vec![4, 1], vec![2, 3]]);
        assert!((quadratic_weighted_kappa(&m).unwrap() - 0.4).abs() < 1e-12);
        assert!((unweighted_kappa(&m).unwrap() - 0.4).abs() < 1e-12);
    }

    fn arb_matrix() -> impl Strategy<Value = Vec<Vec<u64>>> {
        (2usize..6).prop_flat_map(|k| prop::collection::vec(prop::collection::vec(0u64..50, k), k))
    }

    proptest! {
        #[test]
        fn consistent_permutation_reverses_only_with_reversal(counts in arb_matrix()) {
            // Quadratic weights depend on |i-j|, so reversing the category order
            // (the only nontrivial distance-preserving relabelling) keeps kappa.
            let k = counts.len();
            let reversed: Vec<Vec<u64>> = (0..k).map(|i| (0..k).map(|j| counts[k - 1 - i][k - 1 - j]).collect()).collect();
            match (quadratic_weighted_kappa(&cm(counts)), quadratic_weighted_kappa(&cm(reversed))) {
                (Ok(a), Ok(b)) => prop_assert!((a - b).abs() < 1e-12),
                (Err(_), Err(_)) => {}
                _ => prop_assert!(false, "definedness changed under relabelling"),
            }
        }

        #[test]
        fn kappa_invariant_under_consistent_relabelling(counts in arb_matrix(), shuffle_seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let k = counts.len();
            let mut perm: Vec<usize> = (0..k).collect();
            perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(shuffle_seed));
            let mut inverse = vec![0; k];
            for (i, &p) in perm.iter().enumerate() {
                inverse[p] = i;
            }
            let mut permuted = vec![vec![0; k]; k];
            for i in 0..k {
                for j in 0..k {
                    permuted[perm[i]][perm[j]] = counts[i][j];
                }
            }
            let quad = |i: usize, j: usize| ((i as f64 - j as f64) / (k as f64 - 1.0)).powi(2);
            let original = weighted_kappa(&cm(counts), quad);
            let relabelled = weighted_kappa(&cm(permuted), |a, b| quad(inverse[a], inverse[b]));
            match (original, relabelled) {
                (Ok(a), Ok(b)) => prop_assert!((a - b).abs() < 1e-12),
                (Err(_), Err(_)) => {}
                _ => prop_assert!(false, "definedness changed under relabelling"),
            }
        }

        #[test]
        fn independent_outer_product_has_zero_kappa(
            rows in prop::collection::vec(1u64..20, 2..6),
            seed_cols in prop::collection::vec(1u64..20, 6),
        ) {
            let k = rows.len();
            let cols = &seed_cols[..k];
            let counts: Vec<Vec<u64>> = rows.iter().map(|r| cols.iter().map(|c| r * c).collect()).collect();
            let kappa = quadratic_weighted_kappa(&cm(counts)).unwrap();
            prop_assert!(kappa.abs() < 1e-12);
        }
    }
}
