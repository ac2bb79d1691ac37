use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FoldConfig {
    pub folds: usize,
    pub test_size: usize,
    pub valid_fraction: f64,
    pub seed: u64,
}

impl Default for FoldConfig {
    fn default() -> Self {
        FoldConfig { folds: 5, test_size: 500, valid_fraction: 0.1, seed: 0 }
    }
}

/// One fold: disjoint test ids, the remaining training ids, and a
/// validation slice drawn from the training ids.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub fold: usize,
    pub test: Vec<String>,
    pub train: Vec<String>,
    pub valid: Vec<String>,
}

impl DatasetSplit {
    /// Training ids not held out for validation.
    pub fn fit_ids(&self) -> Vec<String> {
        let valid: std::collections::HashSet<&String> = self.valid.iter().collect();
        self.train.iter().filter(|id| !valid.contains(id)).cloned().collect()
    }
}

/// Pseudo k-fold split: one shuffle, consecutive disjoint test chunks, the
/// rest as training, and a per-fold seeded validation slice.
pub fn make_folds(ids: &[String], config: &FoldConfig) -> Result<Vec<DatasetSplit>> {
    if config.folds == 0 || config.test_size == 0 {
        return Err(Error::config("folds", "fold count and test size must be positive"));
    }
    if !(0.0..1.0).contains(&config.valid_fraction) {
        return Err(Error::config("folds.valid_fraction", "must lie in [0, 1)"));
    }
    if config.folds * config.test_size > ids.len() {
        return Err(Error::InvalidArgument(format!(
            "{} folds of {} need {} samples, only {} available",
            config.folds,
            config.test_size,
            config.folds * config.test_size,
            ids.len()
        )));
    }
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed));
    (0..config.folds)
        .map(|fold| {
            let (lo, hi) = (fold * config.test_size, (fold + 1) * config.test_size);
            let test = order[lo..hi].iter().map(|&i| ids[i].clone()).collect();
            let mut train: Vec<String> = order[..lo].iter().chain(&order[hi..]).map(|&i| ids[i].clone()).collect();
            train.sort();
            let n_valid = (train.len() as f64 * config.valid_fraction).round() as usize;
            let mut shuffled = train.clone();
            shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1 + fold as u64)));
            let mut valid: Vec<String> = shuffled.into_iter().take(n_valid).collect();
            valid.sort();
            Ok(DatasetSplit { fold, test, train, valid })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("s{i:05}")).collect()
    }

    #[test]
    fn paper_scale_split() {
        let splits = make_folds(&ids(9585), &FoldConfig::default()).unwrap();
        assert_eq!(splits.len(), 5);
        let mut all_test = HashSet::new();
        for s in &splits {
            assert_eq!(s.test.len(), 500);
            assert_eq!(s.train.len(), 9085);
            assert_eq!(s.valid.len(), 909);
            let train: HashSet<_> = s.train.iter().collect();
            assert!(s.test.iter().all(|t| !train.contains(t)));
            assert!(s.valid.iter().all(|v| train.contains(v)));
            assert_eq!(s.fit_ids().len(), 9085 - 909);
            all_test.extend(s.test.iter().cloned());
        }
        assert_eq!(all_test.len(), 2500);
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let cfg = FoldConfig { folds: 3, test_size: 10, valid_fraction: 0.1, seed: 5 };
        assert_eq!(make_folds(&ids(50), &cfg).unwrap(), make_folds(&ids(50), &cfg).unwrap());
        let other = FoldConfig { seed: 6, ..cfg.clone() };
        assert_ne!(make_folds(&ids(50), &cfg).unwrap(), make_folds(&ids(50), &other).unwrap());
    }

    #[test]
    fn too_few_samples() {
        assert!(make_folds(&ids(20), &FoldConfig { folds: 5, test_size: 5, ..Default::default() }).is_err());
    }
}
