//! Training objective: per-environment ranking loss, variance penalty,
//! alignment term, L2, exact gradients, and the optimization loop.

mod adam;
mod grad;
pub mod gradcheck;
mod sampler;
mod trainer;

pub use adam::{adam_step, AdamState};
pub use grad::{backward, Gradients};
pub use sampler::{sample_triples, Triple, TripleBatch};
pub use trainer::{train, write_history, EpochRecord, StopReason, TrainOutcome};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

use crate::data::{AvailabilityMask, ImputeStrategy, ModalityFeatureBank};
use crate::envs::{EnvVariant, EnvironmentSet};
use crate::error::{Error, Result};
use crate::model::{self, ModelParams};

/// Hyperparameters of one training run.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainConfig {
    /// Preference-representation dimension.
    pub d: usize,
    /// Variance-penalty weight.
    pub beta: f64,
    /// Alignment-loss weight.
    pub lambda: f64,
    /// Dirichlet concentration, shared across modalities.
    pub alpha: f64,
    /// L2 coefficient over batch-touched parameters.
    pub gamma_reg: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Evaluations without improvement before stopping.
    pub patience: usize,
    /// Run the validation metric every this many epochs.
    pub eval_every: usize,
    pub seed: u64,
    pub env_variant: EnvVariant,
    pub imputation: ImputeStrategy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            d: model::DEFAULT_DIM,
            beta: 1000.0,
            lambda: 0.05,
            alpha: 0.01,
            gamma_reg: 1e-5,
            lr: 0.001,
            batch_size: 2048,
            max_epochs: 200,
            patience: 10,
            eval_every: 1,
            seed: 0,
            env_variant: EnvVariant::Full,
            imputation: ImputeStrategy::Mean,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beta < 0.0 || self.lambda < 0.0 || self.gamma_reg < 0.0 {
            return Err(Error::Config("beta, lambda, gamma_reg must be >= 0".into()));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::Config("alpha must be > 0".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("lr must be > 0".into()));
        }
        if self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::Config("batch_size and eval_every must be >= 1".into()));
        }
        if self.d == 0 {
            return Err(Error::Config("d must be >= 1".into()));
        }
        if self.env_variant == EnvVariant::SingleEqual && self.beta > 0.0 {
            return Err(Error::Contract(
                "variance penalty needs at least two environments".into(),
            ));
        }
        Ok(())
    }
}

/// Loss pieces of one step. `total` always equals
/// `mean_env_loss + beta*env_variance + lambda*align_loss +
/// gamma_reg*reg_loss`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub env_losses: Vec<f64>,
    pub mean_env_loss: f64,
    pub env_variance: f64,
    pub align_loss: f64,
    pub reg_loss: f64,
    pub total: f64,
}

/// Mean of the per-environment losses plus `beta` times their population
/// variance.
pub fn invariant_loss(env_losses: &[f64], beta: f64) -> Result<f64> {
    let (mean, var) = mean_and_variance(env_losses, beta)?;
    Ok(mean + beta * var)
}

fn mean_and_variance(env_losses: &[f64], beta: f64) -> Result<(f64, f64)> {
    if env_losses.is_empty() {
        return Err(Error::Contract("no environment losses".into()));
    }
    if env_losses.len() == 1 && beta > 0.0 {
        return Err(Error::Contract(
            "variance penalty over a single environment is undefined".into(),
        ));
    }
    let n = env_losses.len() as f64;
    let mean = env_losses.iter().sum::<f64>() / n;
    let var = env_losses.iter().map(|l| (l - mean) * (l - mean)).sum::<f64>() / n;
    Ok((mean, var))
}

/// Numerically stable `ln(1 + e^t)`.
pub(crate) fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

/// Logistic function evaluated stably for any argument.
pub(crate) fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// Per-batch cache: deduplicated items, their modality representations,
/// and the touched user rows.
pub(crate) struct BatchContext {
    /// Unique item ids touched by the batch, ascending.
    pub items: Vec<u32>,
    pub slot: HashMap<u32, usize>,
    /// Per modality, `items.len() x d` representation rows.
    pub reps: Vec<Array2<f64>>,
    /// Feature rows of `items`, per modality (kept for the weight grads).
    pub feat_rows: Vec<Array2<f64>>,
    /// Mask rows of `items`.
    pub avail: Array2<u8>,
    /// Unique user ids touched by the batch, ascending.
    pub users: Vec<u32>,
}

impl BatchContext {
    pub fn new(
        params: &ModelParams,
        batch: &TripleBatch,
        features: &ModalityFeatureBank,
        mask: &AvailabilityMask,
    ) -> Result<Self> {
        if batch.is_empty() {
            return Err(Error::Contract("empty triple batch".into()));
        }
        let mut items: Vec<u32> = batch.iter().flat_map(|t| [t.pos, t.neg]).collect();
        items.sort_unstable();
        items.dedup();
        let mut users: Vec<u32> = batch.iter().map(|t| t.user).collect();
        users.sort_unstable();
        users.dedup();
        let slot: HashMap<u32, usize> =
            items.iter().enumerate().map(|(s, &j)| (j, s)).collect();

        let m_count = features.n_modalities();
        let mut reps = Vec::with_capacity(m_count);
        let mut feat_rows = Vec::with_capacity(m_count);
        for m in 0..m_count {
            let rows = gather_rows(features.matrix(m), &items);
            reps.push(model::extract_rows(params, m, rows.view())?);
            feat_rows.push(rows);
        }
        let mut avail = Array2::zeros((items.len(), m_count));
        for (s, &j) in items.iter().enumerate() {
            for m in 0..m_count {
                avail[(s, m)] = mask.entries()[(j as usize, m)];
            }
        }
        Ok(Self { items, slot, reps, feat_rows, avail, users })
    }

    /// Fused item representations under one environment's weights.
    pub fn fused(&self, theta: &[f64]) -> Result<Array2<f64>> {
        model::fuse_rows(&self.reps, theta)
    }
}

fn gather_rows(mat: &Array2<f64>, items: &[u32]) -> Array2<f64> {
    let mut out = Array2::zeros((items.len(), mat.ncols()));
    for (r, &j) in items.iter().enumerate() {
        out.row_mut(r).assign(&mat.row(j as usize));
    }
    out
}

/// Mean `-ln sigma(yhat_pos - yhat_neg)` over the batch under one
/// environment's fusion weights, evaluated as `softplus(-delta)`.
pub fn env_bpr_loss(
    params: &ModelParams,
    batch: &TripleBatch,
    features: &ModalityFeatureBank,
    env_theta: &[f64],
) -> Result<f64> {
    let mask = AvailabilityMask::all_available(features.n_items(), features.n_modalities());
    let ctx = BatchContext::new(params, batch, features, &mask)?;
    env_bpr_loss_ctx(params, batch, &ctx, env_theta)
}

pub(crate) fn env_bpr_loss_ctx(
    params: &ModelParams,
    batch: &TripleBatch,
    ctx: &BatchContext,
    env_theta: &[f64],
) -> Result<f64> {
    let fused = ctx.fused(env_theta)?;
    Ok(bpr_terms(params, batch, ctx, &fused).0)
}

/// Mean ranking loss over a batch given fused item rows, together with
/// `sigma(-delta_t)` per triple (the quantity the gradient reuses).
pub(crate) fn bpr_terms(
    params: &ModelParams,
    batch: &TripleBatch,
    ctx: &BatchContext,
    fused: &Array2<f64>,
) -> (f64, Vec<f64>) {
    let mut acc = 0.0;
    let mut sig = Vec::with_capacity(batch.len());
    for t in batch {
        let user = params.user_embeddings.row(t.user as usize);
        let zp = fused.row(ctx.slot[&t.pos]);
        let zn = fused.row(ctx.slot[&t.neg]);
        let delta = user.dot(&zp) - user.dot(&zn);
        acc += softplus(-delta);
        sig.push(sigmoid(-delta));
    }
    (acc / batch.len() as f64, sig)
}

/// Assemble the full objective for one batch.
pub fn total_loss(
    params: &ModelParams,
    batch: &TripleBatch,
    envs: &EnvironmentSet,
    features: &ModalityFeatureBank,
    mask: &AvailabilityMask,
    config: &TrainConfig,
) -> Result<LossBreakdown> {
    let ctx = BatchContext::new(params, batch, features, mask)?;
    total_loss_ctx(params, batch, envs, &ctx, config)
}

pub(crate) fn total_loss_ctx(
    params: &ModelParams,
    batch: &TripleBatch,
    envs: &EnvironmentSet,
    ctx: &BatchContext,
    config: &TrainConfig,
) -> Result<LossBreakdown> {
    let env_losses: Vec<f64> = envs
        .envs()
        .iter()
        .map(|env| env_bpr_loss_ctx(params, batch, ctx, &env.theta))
        .collect::<Result<_>>()?;
    let (mean_env_loss, env_variance) = mean_and_variance(&env_losses, config.beta)?;
    let align_loss = model::alignment_loss(&ctx.reps, ctx.avail.view());
    let reg_loss = reg_term(params, &ctx.users);
    let total = mean_env_loss
        + config.beta * env_variance
        + config.lambda * align_loss
        + config.gamma_reg * reg_loss;
    Ok(LossBreakdown { env_losses, mean_env_loss, env_variance, align_loss, reg_loss, total })
}

/// Squared norms of the parameters the batch touches: its user rows plus
/// every extractor weight and bias.
fn reg_term(params: &ModelParams, users: &[u32]) -> f64 {
    let mut acc = 0.0;
    for &u in users {
        let row = params.user_embeddings.row(u as usize);
        acc += row.dot(&row);
    }
    for w in &params.weights {
        acc += w.iter().map(|v| v * v).sum::<f64>();
    }
    for b in &params.biases {
        acc += b.dot(b);
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::build_environments;
    use ndarray::{array, Array1};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn tiny_instance(
        seed: u64,
        n_users: usize,
        n_items: usize,
        m_count: usize,
        d: usize,
        dx: usize,
    ) -> (ModelParams, ModalityFeatureBank, AvailabilityMask, TripleBatch) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = crate::model::init_params(
            n_users,
            &vec![dx; m_count],
            d,
            seed,
        )
        .unwrap();
        for w in &mut params.weights {
            w.mapv_inplace(|_| rng.random::<f64>() * 0.8 - 0.4);
        }
        for b in &mut params.biases {
            b.mapv_inplace(|_| rng.random::<f64>() * 0.2 - 0.1);
        }
        params.user_embeddings.mapv_inplace(|_| rng.random::<f64>() * 0.8 - 0.4);

        let mats = (0..m_count)
            .map(|_| {
                Array2::from_shape_fn((n_items, dx), |_| rng.random::<f64>() * 2.0 - 1.0)
            })
            .collect();
        let features = ModalityFeatureBank::new(mats).unwrap();
        let mut entries = Array2::ones((n_items, m_count));
        for j in 0..n_items {
            if m_count > 1 && rng.random::<f64>() < 0.4 {
                entries[(j, rng.random_range(0..m_count))] = 0;
            }
        }
        let mask = AvailabilityMask::new(entries).unwrap();

        let mut batch = Vec::new();
        for _ in 0..8 {
            let user = rng.random_range(0..n_users) as u32;
            let pos = rng.random_range(0..n_items) as u32;
            let neg = loop {
                let j = rng.random_range(0..n_items) as u32;
                if j != pos {
                    break j;
                }
            };
            batch.push(Triple { user, pos, neg });
        }
        (params, features, mask, batch)
    }

    #[test]
    fn invariant_loss_worked_example() {
        let v = invariant_loss(&[1.0, 2.0, 3.0], 1.0).unwrap();
        assert!((v - (2.0 + 2.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn invariant_loss_reductions() {
        let equal = invariant_loss(&[0.7, 0.7, 0.7], 5.0).unwrap();
        assert!((equal - 0.7).abs() < 1e-15);
        let erm = invariant_loss(&[1.0, 3.0], 0.0).unwrap();
        assert_eq!(erm, 2.0);
    }

    #[test]
    fn invariant_loss_contract_errors() {
        assert!(matches!(invariant_loss(&[], 0.0), Err(Error::Contract(_))));
        assert!(matches!(invariant_loss(&[1.0], 2.0), Err(Error::Contract(_))));
        assert!(invariant_loss(&[1.0], 0.0).is_ok());
    }

    #[test]
    fn bpr_loss_symmetric_point() {
        // all-zero parameters make every score 0, so the loss is ln 2
        let params = crate::model::init_params(2, &[3], 2, 0).unwrap();
        let mut zeroed = params.clone();
        zeroed.user_embeddings.fill(0.0);
        let features = ModalityFeatureBank::new(vec![array![
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
        ]])
        .unwrap();
        let batch = vec![Triple { user: 0, pos: 0, neg: 1 }];
        let loss = env_bpr_loss(&zeroed, &batch, &features, &[1.0]).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn bpr_loss_unit_margin() {
        // delta = 1 for the single triple
        let mut params = crate::model::init_params(1, &[1], 1, 0).unwrap();
        params.user_embeddings = array![[1.0]];
        params.weights[0] = array![[1.0]];
        params.biases[0] = Array1::zeros(1);
        let features = ModalityFeatureBank::new(vec![array![[1.0], [0.0]]]).unwrap();
        let batch = vec![Triple { user: 0, pos: 0, neg: 1 }];
        let loss = env_bpr_loss(&params, &batch, &features, &[1.0]).unwrap();
        let expected = (1.0 + (-1.0f64).exp()).ln();
        assert!((loss - expected).abs() < 1e-12);
        assert!((expected - 0.313_261_687_518_222_8).abs() < 1e-12);
    }

    #[test]
    fn bpr_loss_saturates_without_overflow() {
        let mut params = crate::model::init_params(1, &[1], 1, 0).unwrap();
        params.user_embeddings = array![[1.0]];
        params.weights[0] = array![[1.0]];
        let features = ModalityFeatureBank::new(vec![array![[50.0], [0.0]]]).unwrap();
        let batch = vec![Triple { user: 0, pos: 0, neg: 1 }];
        let loss = env_bpr_loss(&params, &batch, &features, &[1.0]).unwrap();
        assert!(loss.is_finite());
        assert!(loss < 1e-9, "loss {loss}");
        // and the mirrored direction stays finite too
        let flipped = vec![Triple { user: 0, pos: 1, neg: 0 }];
        let loss = env_bpr_loss(&params, &flipped, &features, &[1.0]).unwrap();
        assert!(loss.is_finite() && loss > 49.0);
    }

    #[test]
    fn total_loss_reduces_to_mean_env_loss() {
        let (params, features, mask, batch) = tiny_instance(5, 4, 6, 2, 3, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let envs = build_environments(&[0.5, 0.5], &mut rng, EnvVariant::Full).unwrap();
        let config = TrainConfig {
            beta: 0.0,
            lambda: 0.0,
            gamma_reg: 0.0,
            ..TrainConfig::default()
        };
        let bd = total_loss(&params, &batch, &envs, &features, &mask, &config).unwrap();
        assert!((bd.total - bd.mean_env_loss).abs() < 1e-15);
    }

    #[test]
    fn identical_representations_kill_the_alignment_term() {
        let (mut params, features, _, batch) = tiny_instance(6, 4, 6, 2, 3, 5);
        // same weights and biases for both modalities, and identical
        // feature matrices, make c^1 = c^2 for every item
        params.weights[1] = params.weights[0].clone();
        params.biases[1] = params.biases[0].clone();
        let shared = features.matrix(0).clone();
        let features =
            ModalityFeatureBank::new(vec![shared.clone(), shared]).unwrap();
        let mask = AvailabilityMask::all_available(6, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let envs = build_environments(&[0.5, 0.5], &mut rng, EnvVariant::Full).unwrap();
        let config = TrainConfig { lambda: 3.0, ..TrainConfig::default() };
        let bd = total_loss(&params, &batch, &envs, &features, &mask, &config).unwrap();
        assert_eq!(bd.align_loss, 0.0);
    }

    #[test]
    fn breakdown_recomposes_to_total() {
        let (params, features, mask, batch) = tiny_instance(7, 4, 6, 2, 3, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let envs = build_environments(&[0.5, 0.5], &mut rng, EnvVariant::Full).unwrap();
        let config = TrainConfig {
            beta: 2.5,
            lambda: 0.7,
            gamma_reg: 1e-3,
            ..TrainConfig::default()
        };
        let bd = total_loss(&params, &batch, &envs, &features, &mask, &config).unwrap();
        let recomposed = bd.mean_env_loss
            + config.beta * bd.env_variance
            + config.lambda * bd.align_loss
            + config.gamma_reg * bd.reg_loss;
        assert!((bd.total - recomposed).abs() < 1e-9);
        assert_eq!(bd.env_losses.len(), 3);
    }

    #[test]
    fn softplus_matches_reference_values() {
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((softplus(-1.0) - 0.313_261_687_518_222_8).abs() < 1e-12);
        assert_eq!(softplus(-800.0), 0.0);
        assert!((softplus(800.0) - 800.0).abs() < 1e-12);
    }
}
