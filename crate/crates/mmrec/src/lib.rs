//! Multimodal new-item recommender with invariant training under missing
//! modalities.
//!
//! Items are described by precomputed per-modality feature vectors which
//! may be partially missing. Per-modality affine extractors are aligned
//! across modalities, fused under simplex weights, and trained with a
//! pairwise ranking loss whose variance across randomly reweighted fusion
//! environments is penalized, so the learned user preferences transfer to
//! new items with arbitrary missing modalities.

pub mod cli;
pub mod data;
pub mod envs;
pub mod error;
pub mod eval;
pub mod model;
pub mod train;

pub use error::{Error, Result};
