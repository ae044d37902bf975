//! Deterministic train/eval partitions.

use std::collections::{HashMap, HashSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::{seed, Error, Result};

/// Train fraction plus the seed that drives the shuffle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub fraction: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub eval: Vec<usize>,
}

impl Split {
    pub fn is_partition_of(&self, n: usize) -> bool {
        let mut seen = vec![false; n];
        for &i in self.train.iter().chain(&self.eval) {
            if i >= n || seen[i] {
                return false;
            }
            seen[i] = true;
        }
        seen.into_iter().all(|s| s)
    }
}

/// Number of training items: `fraction * n` rounded half-up.
pub fn train_count(n_items: usize, fraction: f64) -> usize {
    (fraction * n_items as f64 + 0.5).floor() as usize
}

/// Shuffles `0..n_items` with a generator seeded only by `spec.seed` and
/// cuts it at [`train_count`]. Both sides are returned in ascending order.
pub fn deterministic_split(n_items: usize, spec: SplitSpec) -> Result<Split> {
    if n_items < 2 {
        return Err(Error::InvalidSplit(format!(
            "need at least 2 items, got {n_items}"
        )));
    }
    if !(spec.fraction > 0.0 && spec.fraction < 1.0) {
        return Err(Error::InvalidSplit(format!(
            "fraction must lie in (0, 1), got {}",
            spec.fraction
        )));
    }
    let k = train_count(n_items, spec.fraction);
    if k == 0 || k == n_items {
        return Err(Error::InvalidSplit(format!(
            "fraction {} of {n_items} items leaves one side empty",
            spec.fraction
        )));
    }
    let mut order: Vec<usize> = (0..n_items).collect();
    order.shuffle(&mut seed::rng(seed::derive(spec.seed, "split")));
    let mut train = order[..k].to_vec();
    let mut eval = order[k..].to_vec();
    train.sort_unstable();
    eval.sort_unstable();
    Ok(Split { train, eval })
}

/// Partition by an explicit evaluation list of item ids.
pub fn explicit_split(ids: &[String], eval_ids: &[String]) -> Result<Split> {
    let position: HashMap<&str, usize> = ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();
    if position.len() != ids.len() {
        return Err(Error::InvalidSplit("item ids are not unique".into()));
    }
    let mut eval_set = HashSet::with_capacity(eval_ids.len());
    for id in eval_ids {
        let Some(&i) = position.get(id.as_str()) else {
            return Err(Error::InvalidSplit(format!(
                "evaluation id `{id}` is not in the dataset"
            )));
        };
        if !eval_set.insert(i) {
            return Err(Error::InvalidSplit(format!(
                "evaluation id `{id}` listed twice"
            )));
        }
    }
    let mut eval: Vec<usize> = eval_set.into_iter().collect();
    eval.sort_unstable();
    let train: Vec<usize> = (0..ids.len())
        .filter(|i| eval.binary_search(i).is_err())
        .collect();
    if train.is_empty() || eval.is_empty() {
        return Err(Error::InvalidSplit(
            "explicit evaluation list leaves one side empty".into(),
        ));
    }
    Ok(Split { train, eval })
}
