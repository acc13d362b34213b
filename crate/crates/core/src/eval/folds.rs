//! K-fold partitions, stratified by class unless asked otherwise.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    /// fold id of every sample
    pub assignments: Vec<usize>,
    pub stratified: bool,
    pub seed: u64,
}

impl FoldPlan {
    pub fn test_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.assignments.len()).filter(|&i| self.assignments[i] == fold).collect()
    }

    pub fn train_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.assignments.len()).filter(|&i| self.assignments[i] != fold).collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.k];
        self.assignments.iter().for_each(|&f| s[f] += 1);
        s
    }
}

/// Shuffles each class (or the whole set) with `seed` and deals the members
/// round-robin over the folds, carrying the position across classes so fold
/// sizes stay within one of each other.
pub fn kfold_plan(labels: &[usize], k: usize, stratified: bool, seed: u64) -> Result<FoldPlan> {
    let n = labels.len();
    if k < 2 {
        return arg_err(format!("K must be at least 2, got {k}"));
    }
    if k > n {
        return arg_err(format!("K = {k} exceeds the {n} samples"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let groups: Vec<Vec<usize>> = if stratified {
        let classes = labels.iter().max().map_or(0, |m| m + 1);
        let mut g = vec![Vec::new(); classes];
        for (i, &l) in labels.iter().enumerate() {
            g[l].push(i);
        }
        g.retain(|v| !v.is_empty());
        if let Some(small) = g.iter().map(Vec::len).min().filter(|&m| m < k) {
            log::warn!("smallest class has {small} samples, fewer than K = {k}; some folds will miss it");
        }
        g
    } else {
        vec![(0..n).collect()]
    };
    let mut assignments = vec![0; n];
    let mut pos = 0;
    for mut members in groups {
        members.shuffle(&mut rng);
        for i in members {
            assignments[i] = pos % k;
            pos += 1;
        }
    }
    Ok(FoldPlan { k, assignments, stratified, seed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn even_and_stratified() {
        let p = kfold_plan(&[0; 10], 5, false, 1).unwrap();
        assert_eq!(p.fold_sizes(), vec![2; 5]);
        let labels: Vec<usize> = (0..20).map(|i| i / 10).collect();
        let p = kfold_plan(&labels, 5, true, 3).unwrap();
        for f in 0..5 {
            let t = p.test_indices(f);
            assert_eq!(t.iter().filter(|&&i| labels[i] == 0).count(), 2);
            assert_eq!(t.iter().filter(|&&i| labels[i] == 1).count(), 2);
        }
        assert_eq!(p, kfold_plan(&labels, 5, true, 3).unwrap());
        assert!(kfold_plan(&[0, 1, 0], 4, true, 0).is_err());
        assert!(kfold_plan(&[0, 1, 0], 1, true, 0).is_err());
    }

    proptest! {
        #[test]
        fn folds_partition(labels in prop::collection::vec(0usize..4, 2..80), k in 2usize..8, seed in any::<u64>(), strat in any::<bool>()) {
            prop_assume!(k <= labels.len());
            let p = kfold_plan(&labels, k, strat, seed).unwrap();
            let mut seen = vec![0; labels.len()];
            for f in 0..k {
                for i in p.test_indices(f) {
                    seen[i] += 1;
                }
                prop_assert_eq!(p.test_indices(f).len() + p.train_indices(f).len(), labels.len());
            }
            prop_assert!(seen.iter().all(|&s| s == 1));
            let sizes = p.fold_sizes();
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
            if strat {
                for c in 0..4 {
                    let per: Vec<usize> = (0..k)
                        .map(|f| p.test_indices(f).iter().filter(|&&i| labels[i] == c).count())
                        .collect();
                    prop_assert!(per.iter().max().unwrap() - per.iter().min().unwrap() <= 1);
                }
            }
        }
    }
}
