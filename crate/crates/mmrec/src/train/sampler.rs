//! Triple sampling for the pairwise ranking loss.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::InteractionSet;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triple {
    pub user: u32,
    pub pos: u32,
    pub neg: u32,
}

pub type TripleBatch = Vec<Triple>;

const MAX_REJECTIONS: usize = 100;

/// Draw `batch_size` (user, positive, negative) triples. Users arrive by
/// sampling positive pairs uniformly; negatives are drawn uniformly from
/// `pool` with rejection against the user's positives, falling back to a
/// linear scan after [`MAX_REJECTIONS`] tries. Users whose positives cover
/// the whole pool are skipped and resampled.
pub fn sample_triples(
    train: &InteractionSet,
    pool: &[u32],
    batch_size: usize,
    rng: &mut impl Rng,
) -> Result<TripleBatch> {
    if train.pairs().is_empty() {
        return Err(Error::EmptyDataset("no training pairs to sample".into()));
    }
    if pool.len() < 2 {
        return Err(Error::Data("negative pool needs at least two items".into()));
    }
    let mut batch = Vec::with_capacity(batch_size);
    let mut skips = 0usize;
    while batch.len() < batch_size {
        let &(user, pos) = &train.pairs()[rng.random_range(0..train.pairs().len())];
        match draw_negative(train, pool, user, rng) {
            Some(neg) => {
                batch.push(Triple { user, pos, neg });
                skips = 0;
            }
            None => {
                skips += 1;
                if skips > MAX_REJECTIONS * batch_size.max(1) {
                    return Err(Error::Data(
                        "every sampled user already interacts with the whole pool".into(),
                    ));
                }
            }
        }
    }
    Ok(batch)
}

fn draw_negative(
    train: &InteractionSet,
    pool: &[u32],
    user: u32,
    rng: &mut impl Rng,
) -> Option<u32> {
    for _ in 0..MAX_REJECTIONS {
        let candidate = pool[rng.random_range(0..pool.len())];
        if !train.contains(user, candidate) {
            return Some(candidate);
        }
    }
    // scan from a random offset so the fallback stays unbiased across items
    let start = rng.random_range(0..pool.len());
    for k in 0..pool.len() {
        let candidate = pool[(start + k) % pool.len()];
        if !train.contains(user, candidate) {
            return Some(candidate);
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn forced_negative() {
        let train = InteractionSet::from_clean_pairs(1, 2, vec![(0, 0)]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batch = sample_triples(&train, &[0, 1], 16, &mut rng).unwrap();
        assert!(batch.iter().all(|t| t.user == 0 && t.pos == 0 && t.neg == 1));
    }

    #[test]
    fn negatives_are_uniform_over_the_pool() {
        // one user, positive item 10, ten equally likely negatives 0..10
        let train = InteractionSet::from_clean_pairs(1, 11, vec![(0, 10)]);
        let pool: Vec<u32> = (0..11).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut counts = [0usize; 10];
        let n = 100_000;
        for t in sample_triples(&train, &pool, n, &mut rng).unwrap() {
            assert_ne!(t.neg, 10);
            counts[t.neg as usize] += 1;
        }
        for &c in &counts {
            let freq = c as f64 / n as f64;
            assert!((freq - 0.1).abs() < 0.01, "freq {freq}");
        }
    }

    #[test]
    fn fixed_seed_reproduces_the_batch_sequence() {
        let train =
            InteractionSet::from_clean_pairs(3, 8, vec![(0, 1), (0, 2), (1, 3), (2, 5)]);
        let pool: Vec<u32> = (0..8).collect();
        let mut a = ChaCha8Rng::seed_from_u64(9);
        let mut b = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..5 {
            let ba = sample_triples(&train, &pool, 32, &mut a).unwrap();
            let bb = sample_triples(&train, &pool, 32, &mut b).unwrap();
            assert_eq!(ba, bb);
        }
    }

    #[test]
    fn saturated_users_are_skipped() {
        // user 0 owns the whole pool; user 1 has a free item
        let train =
            InteractionSet::from_clean_pairs(2, 3, vec![(0, 0), (0, 1), (0, 2), (1, 0)]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let batch = sample_triples(&train, &[0, 1, 2], 20, &mut rng).unwrap();
        assert!(batch.iter().all(|t| t.user == 1));
    }

    #[test]
    fn fully_saturated_dataset_errors() {
        let train = InteractionSet::from_clean_pairs(1, 2, vec![(0, 0), (0, 1)]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(sample_triples(&train, &[0, 1], 4, &mut rng).is_err());
    }

    #[test]
    fn positives_come_from_the_training_pairs() {
        let train =
            InteractionSet::from_clean_pairs(4, 10, vec![(0, 1), (1, 2), (2, 3), (3, 4)]);
        let pool: Vec<u32> = (0..10).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for t in sample_triples(&train, &pool, 200, &mut rng).unwrap() {
            assert!(train.contains(t.user, t.pos));
            assert!(!train.contains(t.user, t.neg));
        }
    }
}
