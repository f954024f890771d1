//! The optimization loop: sample triples, rebuild environments, take exact
//! gradient steps, track validation recall, and keep the best checkpoint.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

use super::{backward, sample_triples, AdamState, TrainConfig};
use crate::data::{impute, DatasetBundle, EvalSplit};
use crate::envs::{build_environments, EnvVariant, EnvironmentSet};
use crate::error::{Error, Result};
use crate::eval;
use crate::model::{init_params, ModelParams};

const TRIPLE_STREAM: u64 = 0x9E37_79B9_7F4A_7C15;
const ENV_STREAM: u64 = 0x2545_F491_4F6C_DD1D;

/// One epoch of history: batch-averaged loss pieces plus validation
/// metrics when evaluated that epoch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub env_losses: Vec<f64>,
    pub mean_env_loss: f64,
    pub env_variance: f64,
    pub align_loss: f64,
    pub reg_loss: f64,
    pub total: f64,
    /// Batch-mean of `max_e L_e - min_e L_e`.
    pub env_loss_spread: f64,
    pub val_recall20: Option<f64>,
    pub val_ndcg20: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxEpochs,
    EarlyStopped,
    Diverged,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Best-validation parameters, or the last finite ones when no
    /// validation metric was available.
    pub params: ModelParams,
    pub history: Vec<EpochRecord>,
    pub stop: StopReason,
    pub best_epoch: Option<usize>,
    pub best_val_recall: Option<f64>,
}

/// Train on the bundle's warm interactions. Features are imputed once with
/// the train mask and warm-reference statistics; alignment sees the raw
/// mask so imputed rows never produce alignment gradients.
pub fn train(bundle: &DatasetBundle, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if bundle.train.pairs().is_empty() {
        return Err(Error::EmptyDataset("no training interactions".into()));
    }
    let pool = bundle.warm_items();
    if pool.len() < 2 {
        return Err(Error::Data("fewer than two warm items".into()));
    }
    let m_count = bundle.features.n_modalities();
    let (ref_bank, ref_mask) = bundle.warm_reference();
    let train_features = impute(
        &bundle.features,
        &bundle.train_mask,
        config.imputation,
        (&ref_bank, &ref_mask),
    )?;

    let mut params = init_params(
        bundle.train.n_users(),
        &bundle.features.dims(),
        config.d,
        config.seed,
    )?;
    let mut adam = AdamState::new(&params);
    let mut rng_triples = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(TRIPLE_STREAM));
    let mut rng_envs = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(ENV_STREAM));
    let alpha = vec![config.alpha; m_count];

    let frozen: Option<EnvironmentSet> = if config.env_variant == EnvVariant::Frozen {
        Some(build_environments(&alpha, &mut rng_envs, EnvVariant::Frozen)?)
    } else {
        None
    };

    let steps_per_epoch = bundle.train.pairs().len().div_ceil(config.batch_size).max(1);
    let mut history = Vec::new();
    let mut best_params: Option<ModelParams> = None;
    let mut best_epoch = None;
    let mut best_val: Option<f64> = None;
    let mut evals_since_best = 0usize;

    for epoch in 1..=config.max_epochs {
        let mut acc = EpochAccumulator::default();
        for _ in 0..steps_per_epoch {
            let batch =
                sample_triples(&bundle.train, &pool, config.batch_size, &mut rng_triples)?;
            let envs = match &frozen {
                Some(set) => set.clone(),
                None => build_environments(&alpha, &mut rng_envs, config.env_variant)?,
            };
            let (bd, grads) =
                backward(&params, &batch, &envs, &train_features, &bundle.train_mask, config)?;
            if !bd.total.is_finite() {
                return Ok(diverged(params, best_params, history, best_epoch, best_val));
            }
            if super::adam_step(&mut adam, &mut params, &grads, config.lr).is_err() {
                return Ok(diverged(params, best_params, history, best_epoch, best_val));
            }
            acc.add(&bd);
        }

        let mut record = acc.finish(epoch);
        if epoch % config.eval_every == 0 {
            match eval::evaluate(
                bundle,
                &params,
                EvalSplit::Val,
                &[20],
                false,
                config.imputation,
            ) {
                Ok(report) => {
                    record.val_recall20 = report.recall(20);
                    record.val_ndcg20 = report.ndcg(20);
                }
                Err(Error::EmptyDataset(_)) => {}
                Err(e) => return Err(e),
            }
            if let Some(recall) = record.val_recall20 {
                if best_val.map_or(true, |b| recall > b) {
                    best_val = Some(recall);
                    best_epoch = Some(epoch);
                    best_params = Some(params.clone());
                    evals_since_best = 0;
                } else {
                    evals_since_best += 1;
                }
            }
        }
        history.push(record);
        if config.patience > 0 && evals_since_best >= config.patience {
            return Ok(TrainOutcome {
                params: best_params.unwrap_or(params),
                history,
                stop: StopReason::EarlyStopped,
                best_epoch,
                best_val_recall: best_val,
            });
        }
    }

    Ok(TrainOutcome {
        params: best_params.unwrap_or(params),
        history,
        stop: StopReason::MaxEpochs,
        best_epoch,
        best_val_recall: best_val,
    })
}

fn diverged(
    current: ModelParams,
    best: Option<ModelParams>,
    history: Vec<EpochRecord>,
    best_epoch: Option<usize>,
    best_val: Option<f64>,
) -> TrainOutcome {
    TrainOutcome {
        params: best.unwrap_or(current),
        history,
        stop: StopReason::Diverged,
        best_epoch,
        best_val_recall: best_val,
    }
}

#[derive(Default)]
struct EpochAccumulator {
    steps: usize,
    env_losses: Vec<f64>,
    mean_env_loss: f64,
    env_variance: f64,
    align_loss: f64,
    reg_loss: f64,
    total: f64,
    spread: f64,
}

impl EpochAccumulator {
    fn add(&mut self, bd: &super::LossBreakdown) {
        if self.env_losses.is_empty() {
            self.env_losses = vec![0.0; bd.env_losses.len()];
        }
        for (acc, l) in self.env_losses.iter_mut().zip(&bd.env_losses) {
            *acc += l;
        }
        let max = bd.env_losses.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min = bd.env_losses.iter().cloned().fold(f64::INFINITY, f64::min);
        self.spread += max - min;
        self.mean_env_loss += bd.mean_env_loss;
        self.env_variance += bd.env_variance;
        self.align_loss += bd.align_loss;
        self.reg_loss += bd.reg_loss;
        self.total += bd.total;
        self.steps += 1;
    }

    fn finish(self, epoch: usize) -> EpochRecord {
        let n = self.steps.max(1) as f64;
        EpochRecord {
            epoch,
            env_losses: self.env_losses.iter().map(|l| l / n).collect(),
            mean_env_loss: self.mean_env_loss / n,
            env_variance: self.env_variance / n,
            align_loss: self.align_loss / n,
            reg_loss: self.reg_loss / n,
            total: self.total / n,
            env_loss_spread: self.spread / n,
            val_recall20: None,
            val_ndcg20: None,
        }
    }
}

/// Append-style JSONL history writer, one record per line.
pub fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for record in history {
        serde_json::to_writer(&mut out, record)?;
        writeln!(out)?;
    }
    Ok(())
}
