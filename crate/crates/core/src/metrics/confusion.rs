use std::fmt::Display;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::MergedDr;

/// Square count matrix indexed `[reference][predicted]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub categories: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn zeros(categories: Vec<String>) -> Self {
        let k = categories.len();
        ConfusionMatrix { categories, counts: vec![vec![0; k]; k] }
    }

    pub fn from_counts(categories: Vec<String>, counts: Vec<Vec<u64>>) -> Result<Self> {
        if counts.len() != categories.len() || counts.iter().any(|row| row.len() != categories.len()) {
            return Err(Error::Domain(format!(
                "confusion matrix must be {0}x{0}",
                categories.len()
            )));
        }
        Ok(ConfusionMatrix { categories, counts })
    }

    /// Tallies (reference, predicted) pairs over the given category order.
    pub fn from_pairs<T, I>(pairs: I, categories: &[T]) -> Result<Self>
    where
        T: PartialEq + Display,
        I: IntoIterator<Item = (T, T)>,
    {
        let mut cm = ConfusionMatrix::zeros(categories.iter().map(|c| c.to_string()).collect());
        let index = |v: &T| {
            categories
                .iter()
                .position(|c| c == v)
                .ok_or_else(|| Error::Domain(format!("value {v} is not one of the categories")))
        };
        for (reference, predicted) in pairs {
            let (i, j) = (index(&reference)?, index(&predicted)?);
            cm.counts[i][j] += 1;
        }
        Ok(cm)
    }

    /// Four-category merged DR matrix.
    pub fn merged_dr<I: IntoIterator<Item = (MergedDr, MergedDr)>>(pairs: I) -> Self {
        let mut cm = ConfusionMatrix::zeros(MergedDr::ALL.iter().map(|c| c.label().to_owned()).collect());
        for (r, p) in pairs {
            cm.counts[r.index()][p.index()] += 1;
        }
        cm
    }

    pub fn size(&self) -> usize {
        self.categories.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn row_totals(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn column_totals(&self) -> Vec<u64> {
        (0..self.size()).map(|j| self.counts.iter().map(|r| r[j]).sum()).collect()
    }

    /// Proportion of pairs on the diagonal.
    pub fn agreement(&self) -> Option<f64> {
        let total = self.total();
        (total > 0).then(|| (0..self.size()).map(|i| self.counts[i][i]).sum::<u64>() as f64 / total as f64)
    }

    /// Expands counts back into (reference index, predicted index) pairs, row-major.
    pub fn expand(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.total() as usize);
        for (i, row) in self.counts.iter().enumerate() {
            for (j, &c) in row.iter().enumerate() {
                out.extend(std::iter::repeat_n((i, j), c as usize));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn empty_input_gives_zero_matrix() {
        let cm = ConfusionMatrix::from_pairs(Vec::<(u8, u8)>::new(), &[0u8, 1, 2]).unwrap();
        assert_eq!(cm.total(), 0);
        assert_eq!(cm.counts, vec![vec![0; 3]; 3]);
    }

    #[test]
    fn unknown_category_is_rejected() {
        assert!(matches!(ConfusionMatrix::from_pairs([(0u8, 5u8)], &[0u8, 1]), Err(Error::Domain(_))));
    }

    #[test]
    fn random_pairs_match_hand_tally() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let pairs: Vec<(u8, u8)> = (0..10).map(|_| (rng.random_range(0..3), rng.random_range(0..3))).collect();
        let cm = ConfusionMatrix::from_pairs(pairs.iter().copied(), &[0u8, 1, 2]).unwrap();
        for i in 0..3u8 {
            for j in 0..3u8 {
                let tally = pairs.iter().filter(|&&(r, p)| r == i && p == j).count() as u64;
                assert_eq!(cm.counts[i as usize][j as usize], tally);
            }
        }
        assert_eq!(cm.expand().len(), 10);
    }

    #[test]
    fn merged_dr_cell_positions() {
        let cm = ConfusionMatrix::merged_dr([(MergedDr::Moderate, MergedDr::NoOrMild); 729]);
        assert_eq!(cm.counts[1][0], 729);
        assert_eq!(cm.categories[0], "No/Mild");
    }
}
