//! Command-line configuration: one JSON document, every flag mirrors a
//! config key, flags override the file.

mod commands;

pub use commands::run;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use crate::data::{EvalSplit, ImputeStrategy, MissingnessParams, Protocol, SyntheticSpec};
use crate::envs::EnvVariant;
use crate::error::{Error, Result};
use crate::train::TrainConfig;

#[derive(Debug, Parser)]
#[command(
    name = "mmrec",
    about = "Multimodal new-item recommender: synthetic benchmarks, splits, \
             invariant training, and ranking evaluation",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// JSON config file; flags override its keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (manifest.json, ckpt/, history.jsonl, metrics/).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset: interactions.tsv, features_<m>.bin,
    /// dataset.json.
    Generate {
        #[arg(long)]
        n_users: Option<usize>,
        #[arg(long)]
        n_items: Option<usize>,
        #[arg(long)]
        latent_dim: Option<usize>,
        /// Comma-separated per-modality feature dims.
        #[arg(long)]
        dims: Option<String>,
        #[arg(long)]
        noise_std: Option<f64>,
        #[arg(long)]
        interactions_per_user: Option<usize>,
    },
    /// Draw the new-item split and missingness masks; writes manifest.json
    /// plus train_mask.csv / test_mask.csv.
    Split {
        #[arg(long)]
        interactions: Option<PathBuf>,
        /// Comma-separated feature files (binary or CSV).
        #[arg(long)]
        features: Option<String>,
        #[arg(long)]
        new_ratio: Option<f64>,
        #[arg(long)]
        protocol: Option<String>,
        #[arg(long)]
        train_missing_ratio: Option<f64>,
        #[arg(long)]
        test_missing_ratio: Option<f64>,
        #[arg(long)]
        max_missing_per_item: Option<usize>,
    },
    /// Train on the split; writes ckpt/best.ckpt and history.jsonl.
    Train {
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        gamma_reg: Option<f64>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        max_epochs: Option<usize>,
        #[arg(long)]
        patience: Option<usize>,
        #[arg(long)]
        d: Option<usize>,
        /// full | no_e0 | no_cs | frozen | single_equal
        #[arg(long)]
        env_variant: Option<String>,
        /// zero | mean | map
        #[arg(long)]
        imputation: Option<String>,
        /// Ablation preset applied on top of the config
        /// (full|no_cmam|no_ceim|no_both|env:*|impute:*).
        #[arg(long)]
        variant: Option<String>,
    },
    /// Rank a split's items under a checkpoint; writes metrics JSON + CSV.
    Evaluate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// val | test
        #[arg(long)]
        split: Option<String>,
        #[arg(long)]
        imputation: Option<String>,
    },
    /// Verify analytic gradients against central finite differences.
    Gradcheck {
        #[arg(long)]
        tolerance: Option<f64>,
        /// Deliberately corrupt one gradient entry (negative control).
        #[arg(long, hide = true)]
        corrupt: bool,
    },
    /// Train and evaluate a list of variants over one shared split; writes
    /// metrics/ablate.csv.
    Ablate {
        /// Comma-separated variant labels.
        #[arg(long)]
        variants: Option<String>,
    },
}

fn default_synthetic() -> SyntheticSpec {
    SyntheticSpec {
        n_users: 500,
        n_items: 300,
        k: 8,
        dims: vec![16, 16],
        noise_std: 0.1,
        interactions_per_user: 20,
        seed: 0,
    }
}

/// All run settings. Deserialized from the `--config` JSON; unknown keys
/// are rejected.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,

    pub d: usize,
    pub beta: f64,
    pub lambda: f64,
    pub alpha: f64,
    pub gamma_reg: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub eval_every: usize,
    pub env_variant: EnvVariant,
    pub imputation: ImputeStrategy,

    pub interactions: Option<PathBuf>,
    pub features: Vec<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub train_mask: Option<PathBuf>,
    pub test_mask: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,

    pub protocol: Protocol,
    pub new_ratio: f64,
    pub train_missing_ratio: f64,
    pub test_missing_ratio: f64,
    pub max_missing_per_item: usize,

    pub ks: Vec<usize>,
    pub eval_split: EvalSplit,
    pub variants: Vec<String>,
    pub gradcheck_tolerance: f64,

    pub synthetic: SyntheticSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        Self {
            seed: None,
            out: None,
            d: train.d,
            beta: train.beta,
            lambda: train.lambda,
            alpha: train.alpha,
            gamma_reg: train.gamma_reg,
            lr: train.lr,
            batch_size: train.batch_size,
            max_epochs: train.max_epochs,
            patience: train.patience,
            eval_every: train.eval_every,
            env_variant: train.env_variant,
            imputation: train.imputation,
            interactions: None,
            features: Vec::new(),
            manifest: None,
            train_mask: None,
            test_mask: None,
            checkpoint: None,
            protocol: Protocol::Ftmt,
            new_ratio: 0.2,
            train_missing_ratio: 0.3,
            test_missing_ratio: 0.5,
            max_missing_per_item: 1,
            ks: vec![10, 20],
            variants: vec![
                "full".into(),
                "no_cmam".into(),
                "no_ceim".into(),
                "no_both".into(),
            ],
            gradcheck_tolerance: 1e-4,
            eval_split: EvalSplit::Test,
            synthetic: default_synthetic(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("bad config {}: {e}", path.display())))
    }

    /// File config first, then global flags on top.
    pub fn resolve(cli: &Cli) -> Result<Self> {
        let mut cfg = match &cli.config {
            Some(path) => Self::load(path)?,
            None => Self::default(),
        };
        if let Some(seed) = cli.seed {
            cfg.seed = Some(seed);
        }
        if let Some(out) = &cli.out {
            cfg.out = Some(out.clone());
        }
        Ok(cfg)
    }

    pub fn seed(&self) -> Result<u64> {
        self.seed.ok_or_else(|| Error::Config("seed is required (--seed or config)".into()))
    }

    pub fn out_dir(&self) -> Result<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| Error::Config("output directory is required (--out or config)".into()))
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        Ok(TrainConfig {
            d: self.d,
            beta: self.beta,
            lambda: self.lambda,
            alpha: self.alpha,
            gamma_reg: self.gamma_reg,
            lr: self.lr,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            patience: self.patience,
            eval_every: self.eval_every,
            seed: self.seed()?,
            env_variant: self.env_variant,
            imputation: self.imputation,
        })
    }

    pub fn missingness(&self) -> MissingnessParams {
        MissingnessParams {
            train_missing_ratio: self.train_missing_ratio,
            test_missing_ratio: self.test_missing_ratio,
            max_missing_per_item: self.max_missing_per_item,
        }
    }
}

pub(crate) fn parse_protocol(s: &str) -> Result<Protocol> {
    match s.to_ascii_lowercase().as_str() {
        "ftft" => Ok(Protocol::Ftft),
        "ftmt" => Ok(Protocol::Ftmt),
        "mtmt" => Ok(Protocol::Mtmt),
        "custom" => Ok(Protocol::Custom),
        other => Err(Error::Config(format!("unknown protocol {other:?}"))),
    }
}

pub(crate) fn parse_env_variant(s: &str) -> Result<EnvVariant> {
    match s.to_ascii_lowercase().as_str() {
        "full" => Ok(EnvVariant::Full),
        "no_e0" => Ok(EnvVariant::NoE0),
        "no_cs" | "no_cyclic_shift" => Ok(EnvVariant::NoCyclicShift),
        "frozen" => Ok(EnvVariant::Frozen),
        "single_equal" => Ok(EnvVariant::SingleEqual),
        other => Err(Error::Config(format!("unknown env variant {other:?}"))),
    }
}

pub(crate) fn parse_imputation(s: &str) -> Result<ImputeStrategy> {
    match s.to_ascii_lowercase().as_str() {
        "zero" => Ok(ImputeStrategy::Zero),
        "mean" => Ok(ImputeStrategy::Mean),
        "map" => Ok(ImputeStrategy::Map),
        other => Err(Error::Config(format!("unknown imputation {other:?}"))),
    }
}

pub(crate) fn parse_eval_split(s: &str) -> Result<EvalSplit> {
    match s.to_ascii_lowercase().as_str() {
        "val" => Ok(EvalSplit::Val),
        "test" => Ok(EvalSplit::Test),
        other => Err(Error::Config(format!("unknown split {other:?}"))),
    }
}
