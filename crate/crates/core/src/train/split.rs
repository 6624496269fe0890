//! Four-way disjoint split of a sample pool.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MIN_POOL: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub victim_train: Vec<usize>,
    pub victim_test: Vec<usize>,
    pub shadow_train: Vec<usize>,
    pub shadow_test: Vec<usize>,
    pub seed: u64,
}

impl SplitPlan {
    pub fn subsets(&self) -> [&[usize]; 4] {
        [&self.victim_train, &self.victim_test, &self.shadow_train, &self.shadow_test]
    }
}

/// Shuffle `0..pool_size` with `seed` and cut it into four runs.
///
/// Sizes are `pool_size / 4`, with the remainder handed one each to the
/// first subsets in the order victim_train, victim_test, shadow_train.
pub fn make_split(pool_size: usize, seed: u64) -> Result<SplitPlan> {
    if pool_size < MIN_POOL {
        return Err(Error::domain(format!("pool of {pool_size} is below the minimum of {MIN_POOL}")));
    }
    let mut idx: Vec<usize> = (0..pool_size).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let base = pool_size / 4;
    let rem = pool_size % 4;
    let mut parts = Vec::with_capacity(4);
    let mut start = 0;
    for i in 0..4 {
        let len = base + usize::from(i < rem);
        parts.push(idx[start..start + len].to_vec());
        start += len;
    }
    let mut it = parts.into_iter();
    let mut next = || it.next().expect("four parts");
    Ok(SplitPlan {
        victim_train: next(),
        victim_test: next(),
        shadow_train: next(),
        shadow_test: next(),
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn remainder_goes_to_the_first_subsets() {
        let p = make_split(10, 3).unwrap();
        let sizes: Vec<usize> = p.subsets().iter().map(|s| s.len()).collect();
        assert_eq!(sizes, vec![3, 3, 2, 2]);
    }

    #[test]
    fn small_pool_is_rejected() {
        assert!(make_split(7, 0).is_err());
    }

    #[test]
    fn deterministic() {
        assert_eq!(make_split(50, 9).unwrap(), make_split(50, 9).unwrap());
    }
}
