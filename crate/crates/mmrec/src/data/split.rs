//! New-item split: hold out a fraction of items, move their interactions
//! to val/test pools, and keep a replayable manifest.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

use super::{AvailabilityMask, DatasetBundle, InteractionSet, ModalityFeatureBank};
use crate::error::{Error, Result};

/// Replayable record of a split: item pools plus the seed that drew them.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SplitManifest {
    pub seed: u64,
    pub warm: Vec<u32>,
    pub val: Vec<u32>,
    pub test: Vec<u32>,
}

/// Hold out `new_ratio` of the item universe as new items: half val, half
/// test. All their interactions leave the training set.
pub fn make_new_item_split(
    interactions: &InteractionSet,
    features: &ModalityFeatureBank,
    new_ratio: f64,
    seed: u64,
) -> Result<DatasetBundle> {
    if !(0.0 < new_ratio && new_ratio < 1.0) {
        return Err(Error::Split(format!("new_ratio must be in (0,1), got {new_ratio}")));
    }
    let n_items = interactions.n_items();
    if features.n_items() != n_items {
        return Err(Error::Dimension(format!(
            "feature bank has {} items, interactions have {n_items}",
            features.n_items()
        )));
    }
    let n_new = (new_ratio * n_items as f64).floor() as usize;
    if n_new < 2 {
        return Err(Error::Split(format!(
            "new_ratio {new_ratio} over {n_items} items yields {n_new} new items; need >= 2"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let drawn: Vec<u32> = rand::seq::index::sample(&mut rng, n_items, n_new)
        .into_iter()
        .map(|i| i as u32)
        .collect();
    let n_val = n_new / 2;
    let mut val_items: Vec<u32> = drawn[..n_val].to_vec();
    let mut test_items: Vec<u32> = drawn[n_val..].to_vec();
    val_items.sort_unstable();
    test_items.sort_unstable();

    assemble(interactions, features, val_items, test_items, seed)
}

/// Rebuild the bundle recorded in a manifest. Masks default to all-ones
/// when the caller has none saved.
pub fn bundle_from_manifest(
    interactions: &InteractionSet,
    features: &ModalityFeatureBank,
    manifest: &SplitManifest,
    train_mask: Option<AvailabilityMask>,
    test_mask: Option<AvailabilityMask>,
) -> Result<DatasetBundle> {
    let n_items = interactions.n_items();
    let mut seen = BTreeSet::new();
    for &j in manifest.warm.iter().chain(&manifest.val).chain(&manifest.test) {
        if j as usize >= n_items {
            return Err(Error::Split(format!("manifest item {j} out of range")));
        }
        if !seen.insert(j) {
            return Err(Error::Split(format!("manifest lists item {j} twice")));
        }
    }
    if seen.len() != n_items {
        return Err(Error::Split(format!(
            "manifest covers {} items, universe has {n_items}",
            seen.len()
        )));
    }
    let mut bundle = assemble(
        interactions,
        features,
        manifest.val.clone(),
        manifest.test.clone(),
        manifest.seed,
    )?;
    let m = features.n_modalities();
    if let Some(mask) = train_mask {
        check_mask_shape(&mask, n_items, m, "train")?;
        bundle.train_mask = mask;
    }
    if let Some(mask) = test_mask {
        check_mask_shape(&mask, n_items, m, "test")?;
        bundle.test_mask = mask;
    }
    Ok(bundle)
}

/// Extract the replayable manifest of an assembled bundle.
pub fn manifest_of(bundle: &DatasetBundle) -> SplitManifest {
    SplitManifest {
        seed: bundle.split_seed,
        warm: bundle.warm_items(),
        val: bundle.val_items.clone(),
        test: bundle.test_items.clone(),
    }
}

fn assemble(
    interactions: &InteractionSet,
    features: &ModalityFeatureBank,
    val_items: Vec<u32>,
    test_items: Vec<u32>,
    seed: u64,
) -> Result<DatasetBundle> {
    let val_set: BTreeSet<u32> = val_items.iter().copied().collect();
    let test_set: BTreeSet<u32> = test_items.iter().copied().collect();
    if val_set.intersection(&test_set).next().is_some() {
        return Err(Error::Split("val and test item pools overlap".into()));
    }
    let mut train_pairs = Vec::new();
    let mut val_pairs = Vec::new();
    let mut test_pairs = Vec::new();
    for &(u, i) in interactions.pairs() {
        if val_set.contains(&i) {
            val_pairs.push((u, i));
        } else if test_set.contains(&i) {
            test_pairs.push((u, i));
        } else {
            train_pairs.push((u, i));
        }
    }
    let train = InteractionSet::from_clean_pairs(
        interactions.n_users(),
        interactions.n_items(),
        train_pairs,
    );
    let n_items = interactions.n_items();
    let m = features.n_modalities();
    Ok(DatasetBundle {
        train,
        val_items,
        test_items,
        val_pairs,
        test_pairs,
        features: features.clone(),
        train_mask: AvailabilityMask::all_available(n_items, m),
        test_mask: AvailabilityMask::all_available(n_items, m),
        split_seed: seed,
        protocol: super::Protocol::Ftft,
    })
}

fn check_mask_shape(
    mask: &AvailabilityMask,
    n_items: usize,
    n_modalities: usize,
    which: &str,
) -> Result<()> {
    if mask.n_items() != n_items || mask.n_modalities() != n_modalities {
        return Err(Error::Dimension(format!(
            "{which} mask is {}x{}, expected {n_items}x{n_modalities}",
            mask.n_items(),
            mask.n_modalities()
        )));
    }
    Ok(())
}
