//! Modality-missingness protocols applied on top of a split bundle.
//!
//! `Ftmt` keeps training features complete and knocks one modality out of
//! half of the held-out items; `Mtmt` additionally hits 30% of the warm
//! training items; `Custom` takes its ratios and per-item missing counts
//! from [`MissingnessParams`]. Val and test pools are treated
//! symmetrically under every protocol.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::DatasetBundle;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    /// Full training, full test: no missingness anywhere.
    Ftft,
    /// Full training, missing test: 50% of held-out items lose one modality.
    Ftmt,
    /// Missing training, missing test: Ftmt plus 30% of warm items lose one.
    Mtmt,
    /// Ratios and per-item missing counts from [`MissingnessParams`].
    Custom,
}

impl Protocol {
    pub fn label(&self) -> &'static str {
        match self {
            Protocol::Ftft => "FTFT",
            Protocol::Ftmt => "FTMT",
            Protocol::Mtmt => "MTMT",
            Protocol::Custom => "custom",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MissingnessParams {
    pub train_missing_ratio: f64,
    pub test_missing_ratio: f64,
    pub max_missing_per_item: usize,
}

impl Default for MissingnessParams {
    fn default() -> Self {
        Self { train_missing_ratio: 0.3, test_missing_ratio: 0.5, max_missing_per_item: 1 }
    }
}

/// Rewrite the bundle's masks according to the protocol. Both masks start
/// from all-available; an item never loses more than M-1 modalities.
pub fn apply_missingness(
    bundle: &mut DatasetBundle,
    protocol: Protocol,
    params: &MissingnessParams,
    seed: u64,
) -> Result<()> {
    let n_modalities = bundle.features.n_modalities();
    let n_items = bundle.features.n_items();
    let (train_ratio, test_ratio, max_missing) = match protocol {
        Protocol::Ftft => (0.0, 0.0, 1),
        Protocol::Ftmt => (0.0, 0.5, 1),
        Protocol::Mtmt => (0.3, 0.5, 1),
        Protocol::Custom => (
            params.train_missing_ratio,
            params.test_missing_ratio,
            params.max_missing_per_item,
        ),
    };
    if !(0.0..=1.0).contains(&train_ratio) || !(0.0..=1.0).contains(&test_ratio) {
        return Err(Error::Protocol(format!(
            "missing ratios must lie in [0,1], got train={train_ratio} test={test_ratio}"
        )));
    }
    if max_missing >= n_modalities {
        return Err(Error::Protocol(format!(
            "max_missing_per_item={max_missing} would strip all of {n_modalities} modalities"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train_mask = super::AvailabilityMask::all_available(n_items, n_modalities);
    let mut test_mask = super::AvailabilityMask::all_available(n_items, n_modalities);

    if train_ratio > 0.0 {
        let warm = bundle.warm_items();
        knock_out(&mut train_mask, &warm, train_ratio, max_missing, &mut rng);
    }
    if test_ratio > 0.0 {
        let val = bundle.val_items.clone();
        let test = bundle.test_items.clone();
        knock_out(&mut test_mask, &val, test_ratio, max_missing, &mut rng);
        knock_out(&mut test_mask, &test, test_ratio, max_missing, &mut rng);
    }
    bundle.train_mask = train_mask;
    bundle.test_mask = test_mask;
    bundle.protocol = protocol;
    Ok(())
}

/// Pick `round(ratio * pool)` items and remove modalities from them,
/// spreading the picked items as evenly as possible over missing counts
/// 1..=max_missing (extras go to the smaller counts).
fn knock_out(
    mask: &mut super::AvailabilityMask,
    pool: &[u32],
    ratio: f64,
    max_missing: usize,
    rng: &mut ChaCha8Rng,
) {
    let n_hit = (ratio * pool.len() as f64).round() as usize;
    if n_hit == 0 {
        return;
    }
    let hit: Vec<u32> = sample(rng, pool.len(), n_hit).into_iter().map(|i| pool[i]).collect();
    let n_modalities = mask.n_modalities();
    let base = n_hit / max_missing;
    let extra = n_hit % max_missing;
    let mut cursor = 0usize;
    for count in 1..=max_missing {
        let group = base + usize::from(count <= extra);
        for &item in &hit[cursor..cursor + group] {
            for m in sample(rng, n_modalities, count) {
                mask.set(item, m, false);
            }
        }
        cursor += group;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_new_item_split, InteractionSet, ModalityFeatureBank};
    use ndarray::Array2;

    fn bundle(n_items: usize, n_modalities: usize) -> DatasetBundle {
        let n_users = 30;
        let mut pairs = Vec::new();
        for u in 0..n_users as u32 {
            for i in 0..n_items as u32 {
                if (u as usize + i as usize) % 4 == 0 {
                    pairs.push((u, i));
                }
            }
        }
        let set = InteractionSet::from_clean_pairs(n_users, n_items, pairs);
        let mats = (0..n_modalities)
            .map(|m| Array2::from_shape_fn((n_items, 3 + m), |(j, c)| (j + c) as f64))
            .collect();
        let bank = ModalityFeatureBank::new(mats).unwrap();
        make_new_item_split(&set, &bank, 0.5, 5).unwrap()
    }

    fn rows_missing(mask: &crate::data::AvailabilityMask, items: &[u32], count: usize) -> usize {
        items.iter().filter(|&&j| mask.missing_count(j) == count).count()
    }

    #[test]
    fn ftmt_hits_half_the_held_out_items_only() {
        let mut b = bundle(400, 2);
        apply_missingness(&mut b, Protocol::Ftmt, &MissingnessParams::default(), 9).unwrap();
        assert!(b.train_mask.entries().iter().all(|&v| v == 1));
        assert_eq!(rows_missing(&b.test_mask, &b.test_items, 1), b.test_items.len() / 2);
        assert_eq!(rows_missing(&b.test_mask, &b.val_items, 1), b.val_items.len() / 2);
        // warm rows untouched in the test mask
        assert_eq!(rows_missing(&b.test_mask, &b.warm_items(), 0), b.warm_items().len());
    }

    #[test]
    fn mtmt_additionally_hits_warm_items() {
        let mut b = bundle(400, 2);
        apply_missingness(&mut b, Protocol::Mtmt, &MissingnessParams::default(), 9).unwrap();
        let warm = b.warm_items();
        let expected = (0.3 * warm.len() as f64).round() as usize;
        assert_eq!(rows_missing(&b.train_mask, &warm, 1), expected);
        assert_eq!(rows_missing(&b.test_mask, &b.test_items, 1), b.test_items.len() / 2);
    }

    #[test]
    fn custom_three_group_split() {
        let mut b = bundle(400, 3);
        let params = MissingnessParams {
            train_missing_ratio: 0.0,
            test_missing_ratio: 0.9,
            max_missing_per_item: 2,
        };
        apply_missingness(&mut b, Protocol::Custom, &params, 21).unwrap();
        let test = &b.test_items;
        assert_eq!(test.len(), 100);
        assert_eq!(rows_missing(&b.test_mask, test, 0), 10);
        assert_eq!(rows_missing(&b.test_mask, test, 1), 45);
        assert_eq!(rows_missing(&b.test_mask, test, 2), 45);
    }

    #[test]
    fn max_missing_must_leave_one_modality() {
        let mut b = bundle(40, 2);
        let params = MissingnessParams {
            train_missing_ratio: 0.0,
            test_missing_ratio: 0.5,
            max_missing_per_item: 2,
        };
        assert!(matches!(
            apply_missingness(&mut b, Protocol::Custom, &params, 0),
            Err(Error::Protocol(_))
        ));
    }

    #[test]
    fn every_row_keeps_a_modality() {
        let mut b = bundle(200, 3);
        let params = MissingnessParams {
            train_missing_ratio: 0.7,
            test_missing_ratio: 1.0,
            max_missing_per_item: 2,
        };
        apply_missingness(&mut b, Protocol::Custom, &params, 13).unwrap();
        for j in 0..200u32 {
            assert!(b.train_mask.missing_count(j) < 3);
            assert!(b.test_mask.missing_count(j) < 3);
        }
    }

    #[test]
    fn same_seed_same_masks() {
        let mut a = bundle(120, 2);
        let mut b = bundle(120, 2);
        apply_missingness(&mut a, Protocol::Mtmt, &MissingnessParams::default(), 77).unwrap();
        apply_missingness(&mut b, Protocol::Mtmt, &MissingnessParams::default(), 77).unwrap();
        assert_eq!(a.train_mask, b.train_mask);
        assert_eq!(a.test_mask, b.test_mask);
    }
}
