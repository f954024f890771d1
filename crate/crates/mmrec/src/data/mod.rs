//! Dataset model: implicit interactions, per-modality feature banks,
//! availability masks, and the train/val/test bundle produced by the
//! new-item split.

mod impute;
mod io;
mod missing;
mod split;
mod synthetic;

pub use impute::{fit_cross_modal_map, impute, CrossModalMap, ImputeStrategy};
pub use io::{
    load_features_binary, load_features_csv, load_interactions, load_mask_csv, read_manifest,
    write_features_binary, write_interactions, write_manifest, write_mask_csv, FEATURES_MAGIC,
};
pub use missing::{apply_missingness, MissingnessParams, Protocol};
pub use split::{bundle_from_manifest, make_new_item_split, manifest_of, SplitManifest};
pub use synthetic::generate_synthetic;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

use crate::error::{Error, Result};

/// Implicit user-item interactions with contiguous integer ids.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionSet {
    n_users: usize,
    n_items: usize,
    pairs: Vec<(u32, u32)>,
    /// Inverse view of `pairs`: sorted positive item ids per user.
    per_user: Vec<Vec<u32>>,
}

impl InteractionSet {
    /// Build from raw pairs. Duplicates are collapsed. Ids are kept as-is
    /// when they already cover at least half of `[0, max]`; sparser id
    /// spaces are re-indexed to a contiguous range in ascending id order.
    pub fn from_pairs(raw: Vec<(u32, u32)>) -> Result<Self> {
        if raw.is_empty() {
            return Err(Error::EmptyDataset("no interaction pairs".into()));
        }
        let users: BTreeSet<u32> = raw.iter().map(|p| p.0).collect();
        let items: BTreeSet<u32> = raw.iter().map(|p| p.1).collect();
        let user_map = contiguous_map(&users);
        let item_map = contiguous_map(&items);
        let n_users = match &user_map {
            Some(m) => m.len(),
            None => *users.iter().next_back().unwrap() as usize + 1,
        };
        let n_items = match &item_map {
            Some(m) => m.len(),
            None => *items.iter().next_back().unwrap() as usize + 1,
        };
        let mut pairs: Vec<(u32, u32)> = raw
            .into_iter()
            .map(|(u, i)| {
                let u = user_map.as_ref().map_or(u, |m| m[&u]);
                let i = item_map.as_ref().map_or(i, |m| m[&i]);
                (u, i)
            })
            .collect();
        pairs.sort_unstable();
        pairs.dedup();
        Ok(Self::from_clean_pairs(n_users, n_items, pairs))
    }

    /// Build from pairs already known to be deduplicated and in range.
    pub fn from_clean_pairs(n_users: usize, n_items: usize, pairs: Vec<(u32, u32)>) -> Self {
        let mut per_user = vec![Vec::new(); n_users];
        for &(u, i) in &pairs {
            per_user[u as usize].push(i);
        }
        for list in &mut per_user {
            list.sort_unstable();
        }
        Self { n_users, n_items, pairs, per_user }
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn pairs(&self) -> &[(u32, u32)] {
        &self.pairs
    }

    pub fn positives(&self, user: u32) -> &[u32] {
        &self.per_user[user as usize]
    }

    pub fn contains(&self, user: u32, item: u32) -> bool {
        self.per_user[user as usize].binary_search(&item).is_ok()
    }
}

/// When used ids cover less than half of `[0, max]`, return a dense
/// remapping in ascending id order; otherwise keep the raw range.
fn contiguous_map(used: &BTreeSet<u32>) -> Option<std::collections::HashMap<u32, u32>> {
    let max = *used.iter().next_back().unwrap() as usize;
    if used.len() * 2 > max + 1 {
        return None;
    }
    Some(used.iter().enumerate().map(|(new, &old)| (old, new as u32)).collect())
}

/// Per-modality dense feature matrices, one row per item.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityFeatureBank {
    mats: Vec<Array2<f64>>,
}

impl ModalityFeatureBank {
    pub fn new(mats: Vec<Array2<f64>>) -> Result<Self> {
        if mats.is_empty() {
            return Err(Error::Data("feature bank needs at least one modality".into()));
        }
        let n_items = mats[0].nrows();
        for (m, mat) in mats.iter().enumerate() {
            if mat.nrows() != n_items {
                return Err(Error::Dimension(format!(
                    "modality {m} has {} rows, expected {n_items}",
                    mat.nrows()
                )));
            }
            if !mat.iter().all(|v| v.is_finite()) {
                return Err(Error::Data(format!("modality {m} contains non-finite values")));
            }
        }
        Ok(Self { mats })
    }

    pub fn n_items(&self) -> usize {
        self.mats[0].nrows()
    }

    /// Modality count M.
    pub fn n_modalities(&self) -> usize {
        self.mats.len()
    }

    pub fn dims(&self) -> Vec<usize> {
        self.mats.iter().map(|m| m.ncols()).collect()
    }

    pub fn matrix(&self, m: usize) -> &Array2<f64> {
        &self.mats[m]
    }

    pub fn matrices(&self) -> &[Array2<f64>] {
        &self.mats
    }

    /// Restrict the bank to the given item rows, in the given order.
    pub fn select_rows(&self, items: &[u32]) -> Self {
        let mats = self
            .mats
            .iter()
            .map(|mat| {
                let mut out = Array2::zeros((items.len(), mat.ncols()));
                for (r, &j) in items.iter().enumerate() {
                    out.row_mut(r).assign(&mat.row(j as usize));
                }
                out
            })
            .collect();
        Self { mats }
    }
}

/// Binary item-by-modality availability matrix. Rows always keep at least
/// one available modality.
#[derive(Debug, Clone, PartialEq)]
pub struct AvailabilityMask {
    entries: Array2<u8>,
}

impl AvailabilityMask {
    pub fn new(entries: Array2<u8>) -> Result<Self> {
        for (j, row) in entries.outer_iter().enumerate() {
            if row.iter().any(|&v| v > 1) {
                return Err(Error::Data(format!("mask row {j} has a non-binary entry")));
            }
            if row.iter().all(|&v| v == 0) {
                return Err(Error::Data(format!("item {j} has no available modality")));
            }
        }
        Ok(Self { entries })
    }

    pub fn all_available(n_items: usize, n_modalities: usize) -> Self {
        Self { entries: Array2::ones((n_items, n_modalities)) }
    }

    pub fn n_items(&self) -> usize {
        self.entries.nrows()
    }

    pub fn n_modalities(&self) -> usize {
        self.entries.ncols()
    }

    pub fn is_available(&self, item: u32, modality: usize) -> bool {
        self.entries[(item as usize, modality)] == 1
    }

    /// Number of missing modalities for an item.
    pub fn missing_count(&self, item: u32) -> usize {
        self.entries
            .row(item as usize)
            .iter()
            .filter(|&&v| v == 0)
            .count()
    }

    pub fn entries(&self) -> &Array2<u8> {
        &self.entries
    }

    pub fn select_rows(&self, items: &[u32]) -> Self {
        let mut out = Array2::zeros((items.len(), self.n_modalities()));
        for (r, &j) in items.iter().enumerate() {
            out.row_mut(r).assign(&self.entries.row(j as usize));
        }
        Self { entries: out }
    }

    pub(crate) fn set(&mut self, item: u32, modality: usize, available: bool) {
        self.entries[(item as usize, modality)] = available as u8;
    }
}

/// Train/val/test view of a dataset after the new-item split.
#[derive(Debug, Clone)]
pub struct DatasetBundle {
    pub train: InteractionSet,
    pub val_items: Vec<u32>,
    pub test_items: Vec<u32>,
    pub val_pairs: Vec<(u32, u32)>,
    pub test_pairs: Vec<(u32, u32)>,
    pub features: ModalityFeatureBank,
    pub train_mask: AvailabilityMask,
    pub test_mask: AvailabilityMask,
    /// Seed the split was drawn with, kept for replay manifests.
    pub split_seed: u64,
    /// Missingness protocol the masks were produced under.
    pub protocol: Protocol,
}

/// Which held-out pool to evaluate against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalSplit {
    Val,
    Test,
}

impl DatasetBundle {
    /// Items that stayed in training (universe minus val and test items).
    pub fn warm_items(&self) -> Vec<u32> {
        let held: BTreeSet<u32> =
            self.val_items.iter().chain(self.test_items.iter()).copied().collect();
        (0..self.train.n_items() as u32).filter(|j| !held.contains(j)).collect()
    }

    pub fn split_items(&self, split: EvalSplit) -> &[u32] {
        match split {
            EvalSplit::Val => &self.val_items,
            EvalSplit::Test => &self.test_items,
        }
    }

    pub fn split_pairs(&self, split: EvalSplit) -> &[(u32, u32)] {
        match split {
            EvalSplit::Val => &self.val_pairs,
            EvalSplit::Test => &self.test_pairs,
        }
    }

    /// Warm-item feature rows and mask rows, the only legal source of
    /// imputation statistics.
    pub fn warm_reference(&self) -> (ModalityFeatureBank, AvailabilityMask) {
        let warm = self.warm_items();
        (self.features.select_rows(&warm), self.train_mask.select_rows(&warm))
    }
}

/// Parameters for the synthetic benchmark generator.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SyntheticSpec {
    pub n_users: usize,
    pub n_items: usize,
    /// Latent dimension of the ground-truth factors.
    pub k: usize,
    pub dims: Vec<usize>,
    pub noise_std: f64,
    pub interactions_per_user: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn n_modalities(&self) -> usize {
        self.dims.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(Error::Config("synthetic k must be >= 1".into()));
        }
        if self.interactions_per_user < 1 {
            return Err(Error::Config("interactions_per_user must be >= 1".into()));
        }
        if self.interactions_per_user > self.n_items {
            return Err(Error::Config("interactions_per_user exceeds n_items".into()));
        }
        if self.dims.is_empty() {
            return Err(Error::Config("synthetic spec needs at least one modality".into()));
        }
        if self.dims.iter().any(|&d| d < self.k) {
            return Err(Error::Config("every modality dim must be >= k".into()));
        }
        Ok(())
    }
}
