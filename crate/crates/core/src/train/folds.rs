use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const N_FOLDS: usize = 5;

/// Amount of training data per run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSetting {
    /// All four training folds.
    #[default]
    Large,
    /// `floor(0.1·|fold|)` samples from each training fold.
    Small,
}

impl DataSetting {
    pub fn as_str(self) -> &'static str {
        match self {
            DataSetting::Large => "large",
            DataSetting::Small => "small",
        }
    }
}

impl std::fmt::Display for DataSetting {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for DataSetting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "large" => Ok(DataSetting::Large),
            "small" => Ok(DataSetting::Small),
            other => Err(Error::InvalidArgument(format!("unknown data setting '{other}'"))),
        }
    }
}

/// Five disjoint index sets covering the dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldPlan {
    folds: Vec<Vec<usize>>,
    seed: u64,
}

fn split_balanced<T: Clone>(items: &[T]) -> Vec<Vec<T>> {
    let n = items.len();
    (0..N_FOLDS)
        .map(|f| items[f * n / N_FOLDS..(f + 1) * n / N_FOLDS].to_vec())
        .collect()
}

/// Seeded shuffle of `0..n_items` cut into five folds whose sizes differ by at most one.
pub fn make_folds(n_items: usize, seed: u64) -> Result<FoldPlan> {
    if n_items < N_FOLDS {
        return Err(Error::InvalidArgument(format!(
            "{n_items} items cannot fill {N_FOLDS} folds"
        )));
    }
    let mut perm: Vec<usize> = (0..n_items).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(FoldPlan {
        folds: split_balanced(&perm),
        seed,
    })
}

impl FoldPlan {
    /// Folds over distinct source ids, so that every sample cut from one
    /// source lands in the same fold.
    pub fn grouped<S: AsRef<str>>(sources: &[S], seed: u64) -> Result<FoldPlan> {
        let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, s) in sources.iter().enumerate() {
            groups.entry(s.as_ref()).or_default().push(i);
        }
        let keys: Vec<&str> = groups.keys().copied().collect();
        let by_source = make_folds(keys.len(), seed)?;
        let folds = by_source
            .folds
            .iter()
            .map(|f| {
                let mut idx: Vec<usize> = f.iter().flat_map(|&k| groups[keys[k]].iter().copied()).collect();
                idx.sort_unstable();
                idx
            })
            .collect();
        Ok(FoldPlan { folds, seed })
    }

    pub fn folds(&self) -> &[Vec<usize>] {
        &self.folds
    }

    pub fn n_items(&self) -> usize {
        self.folds.iter().map(Vec::len).sum()
    }

    pub fn test(&self, fold: usize) -> &[usize] {
        &self.folds[fold]
    }

    /// Fixed 10% subset of `fold`, independent of which fold is held out.
    pub fn small_subset(&self, fold: usize) -> Vec<usize> {
        let mut f = self.folds[fold].clone();
        let take = f.len() / 10;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(1 + fold as u64);
        f.shuffle(&mut rng);
        f.truncate(take);
        f.sort_unstable();
        f
    }

    pub fn train(&self, test_fold: usize, setting: DataSetting) -> Result<Vec<usize>> {
        if test_fold >= N_FOLDS {
            return Err(Error::InvalidArgument(format!("fold {test_fold} out of range 0..{N_FOLDS}")));
        }
        let mut out = Vec::new();
        for f in (0..N_FOLDS).filter(|&f| f != test_fold) {
            match setting {
                DataSetting::Large => out.extend_from_slice(&self.folds[f]),
                DataSetting::Small => out.extend(self.small_subset(f)),
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ten_items() {
        let p = make_folds(10, 3).unwrap();
        assert!(p.folds().iter().all(|f| f.len() == 2));
        let mut all: Vec<usize> = p.folds().concat();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(p, make_folds(10, 3).unwrap());
    }

    #[test]
    fn balanced_sizes() {
        let mut sizes: Vec<usize> = make_folds(103, 0).unwrap().folds().iter().map(Vec::len).collect();
        sizes.sort();
        assert_eq!(sizes, [20, 20, 21, 21, 21]);
        assert!(make_folds(4, 0).is_err());
    }

    #[test]
    fn grouped_keeps_sources_together() {
        let sources: Vec<String> = (0..60).map(|i| format!("img{}", i / 6)).collect();
        let p = FoldPlan::grouped(&sources, 1).unwrap();
        for f in p.folds() {
            assert_eq!(f.len(), 12);
            for &i in f {
                let twin = p.folds().iter().position(|g| g.contains(&(i / 6 * 6))).unwrap();
                assert!(p.folds()[twin].contains(&i));
            }
        }
    }
}
