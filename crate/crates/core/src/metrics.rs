//! Hard assignments and partition agreement.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{PgmmError, Result};
use crate::mixture::Responsibilities;

/// Cross-tabulation of two labelings. Rows follow the sorted distinct labels of
/// the first argument, columns those of the second.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContingencyTable {
    pub counts: Vec<Vec<u64>>,
    pub row_totals: Vec<u64>,
    pub col_totals: Vec<u64>,
    pub n: u64,
    pub row_labels: Vec<usize>,
    pub col_labels: Vec<usize>,
}

fn index_of(labels: &[usize]) -> BTreeMap<usize, usize> {
    let mut map = BTreeMap::new();
    for &l in labels {
        map.entry(l).or_insert(0);
    }
    for (k, v) in map.values_mut().enumerate() {
        *v = k;
    }
    map
}

impl ContingencyTable {
    pub fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        if a.len() != b.len() {
            return Err(PgmmError::contract(format!(
                "label vectors differ in length ({} vs {})",
                a.len(),
                b.len()
            )));
        }
        let rows = index_of(a);
        let cols = index_of(b);
        let mut counts = vec![vec![0u64; cols.len()]; rows.len()];
        for (x, y) in a.iter().zip(b) {
            counts[rows[x]][cols[y]] += 1;
        }
        let row_totals = counts.iter().map(|r| r.iter().sum()).collect();
        let col_totals = (0..cols.len()).map(|j| counts.iter().map(|r| r[j]).sum()).collect();
        Ok(ContingencyTable {
            counts,
            row_totals,
            col_totals,
            n: a.len() as u64,
            row_labels: rows.into_keys().collect(),
            col_labels: cols.into_keys().collect(),
        })
    }

    /// True when the two labelings are the same partition.
    pub fn is_bijective(&self) -> bool {
        self.row_totals.len() == self.col_totals.len()
            && self
                .counts
                .iter()
                .all(|r| r.iter().filter(|&&c| c > 0).count() == 1)
    }
}

/// Index of the largest responsibility in each row; ties go to the smallest index.
pub fn map_labels(resp: &Responsibilities) -> Vec<usize> {
    resp.values()
        .row_iter()
        .map(|row| {
            let mut best = 0;
            for (g, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = g;
                }
            }
            best
        })
        .collect()
}

fn pairs(x: u64) -> i128 {
    let x = x as i128;
    x * (x - 1) / 2
}

/// Hubert-Arabie adjusted Rand index.
///
/// Pair counts are combined in exact integer arithmetic, with a single
/// floating-point division at the end. When both partitions are trivial in the
/// same way the adjustment is undefined; the result is then 1 if the
/// partitions coincide and 0 otherwise.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() < 2 {
        return Err(PgmmError::contract("ARI needs at least two observations"));
    }
    let table = ContingencyTable::new(a, b)?;
    let index: i128 = table.counts.iter().flatten().map(|&c| pairs(c)).sum();
    let sum_a: i128 = table.row_totals.iter().map(|&c| pairs(c)).sum();
    let sum_b: i128 = table.col_totals.iter().map(|&c| pairs(c)).sum();
    let total = pairs(table.n);
    let numerator = 2 * (index * total - sum_a * sum_b);
    let denominator = (sum_a + sum_b) * total - 2 * sum_a * sum_b;
    if denominator == 0 {
        return Ok(if table.is_bijective() { 1.0 } else { 0.0 });
    }
    Ok(numerator as f64 / denominator as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Restricted growth strings enumerate every set partition exactly once.
    fn all_partitions(n: usize) -> Vec<Vec<usize>> {
        fn extend(prefix: &mut Vec<usize>, n: usize, out: &mut Vec<Vec<usize>>) {
            if prefix.len() == n {
                out.push(prefix.clone());
                return;
            }
            let next = prefix.iter().max().map_or(0, |m| m + 1);
            for label in 0..=next {
                prefix.push(label);
                extend(prefix, n, out);
                prefix.pop();
            }
        }
        let mut out = Vec::new();
        extend(&mut Vec::new(), n, &mut out);
        out
    }

    /// Counts over all unordered observation pairs, no contingency table.
    fn pair_counting_oracle(a: &[usize], b: &[usize]) -> f64 {
        let (mut both, mut only_a, mut only_b, mut neither) = (0i64, 0i64, 0i64, 0i64);
        for i in 0..a.len() {
            for j in i + 1..a.len() {
                match (a[i] == a[j], b[i] == b[j]) {
                    (true, true) => both += 1,
                    (true, false) => only_a += 1,
                    (false, true) => only_b += 1,
                    (false, false) => neither += 1,
                }
            }
        }
        let den = (both + only_a) * (only_a + neither) + (both + only_b) * (only_b + neither);
        if den == 0 {
            return if only_a == 0 && only_b == 0 { 1.0 } else { 0.0 };
        }
        (2 * (both * neither - only_a * only_b)) as f64 / den as f64
    }

    #[test]
    fn six_element_partitions_match_oracle() {
        let parts = all_partitions(6);
        assert_eq!(parts.len(), 203);
        for a in &parts {
            for b in &parts {
                assert_eq!(adjusted_rand_index(a, b).unwrap(), pair_counting_oracle(a, b), "{a:?} {b:?}");
            }
        }
    }

    #[test]
    fn relabeling_and_identity() {
        assert_eq!(adjusted_rand_index(&[0, 0, 1, 1], &[1, 1, 0, 0]).unwrap(), 1.0);
        assert_eq!(adjusted_rand_index(&[3, 1, 4, 1, 5], &[3, 1, 4, 1, 5]).unwrap(), 1.0);
        assert_eq!(adjusted_rand_index(&[0, 0, 0], &[0, 0, 0]).unwrap(), 1.0);
        assert_eq!(adjusted_rand_index(&[0, 1, 2], &[5, 6, 7]).unwrap(), 1.0);
        assert_eq!(adjusted_rand_index(&[0, 0, 0], &[0, 1, 2]).unwrap(), 0.0);
        assert!(adjusted_rand_index(&[0, 1], &[0]).is_err());
        assert!(adjusted_rand_index(&[0], &[0]).is_err());
    }

    #[test]
    fn shuffled_labels_average_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let truth: Vec<usize> = (0..60).map(|i| i % 3).collect();
        let mut other = truth.clone();
        let mean = (0..2000)
            .map(|_| {
                other.shuffle(&mut rng);
                adjusted_rand_index(&truth, &other).unwrap()
            })
            .sum::<f64>()
            / 2000.0;
        assert!(mean.abs() < 0.02, "{mean}");
    }

    #[test]
    fn map_label_ties_and_one_hot() {
        let z = Responsibilities::new(DMatrix::from_row_slice(3, 2, &[0.5, 0.5, 0.0, 1.0, 1.0, 0.0])).unwrap();
        assert_eq!(map_labels(&z), vec![0, 1, 0]);
    }

    #[test]
    fn contingency_marginals() {
        let t = ContingencyTable::new(&[0, 0, 1, 2], &[1, 1, 1, 0]).unwrap();
        assert_eq!(t.counts, vec![vec![0, 2], vec![0, 1], vec![1, 0]]);
        assert_eq!(t.row_totals, vec![2, 1, 1]);
        assert_eq!(t.col_totals, vec![1, 3]);
        assert_eq!(t.n, 4);
    }

    proptest! {
        #[test]
        fn symmetric_and_relabel_invariant(
            a in prop::collection::vec(0usize..4, 2..40),
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let b: Vec<usize> = a.iter().map(|_| rand::Rng::random_range(&mut rng, 0..3)).collect();
            let ab = adjusted_rand_index(&a, &b).unwrap();
            prop_assert_eq!(ab, adjusted_rand_index(&b, &a).unwrap());
            prop_assert!(ab <= 1.0);
            let mut perm = vec![7usize, 2, 9, 4];
            perm.shuffle(&mut rng);
            let relabeled: Vec<usize> = a.iter().map(|&l| perm[l]).collect();
            prop_assert_eq!(ab, adjusted_rand_index(&relabeled, &b).unwrap());
        }

        #[test]
        fn map_labels_in_range(rows in prop::collection::vec(prop::collection::vec(0.01f64..1.0, 4), 1..30)) {
            let n = rows.len();
            let z = DMatrix::from_fn(n, 4, |i, k| rows[i][k] / rows[i].iter().sum::<f64>());
            let labels = map_labels(&Responsibilities::new(z).unwrap());
            prop_assert!(labels.iter().all(|&l| l < 4));
        }
    }
}
