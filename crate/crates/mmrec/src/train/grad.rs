//! Exact analytic gradients of the full objective.
//!
//! The variance penalty couples the environments: with population
//! variance over `|E|` environments, `d total / d L_e` is
//! `(1 + 2 beta (L_e - mean)) / |E|`, and every per-environment ranking
//! gradient is scaled by that weight before flowing into the shared
//! parameters.

use ndarray::{Array1, Array2, Axis};

use super::{bpr_terms, mean_and_variance, reg_term, BatchContext, LossBreakdown, TrainConfig};
use crate::data::{AvailabilityMask, ModalityFeatureBank};
use crate::envs::EnvironmentSet;
use crate::error::Result;
use crate::model::{self, ModelParams};
use crate::train::TripleBatch;

/// Gradient tensors mirroring [`ModelParams`]. User rows the batch never
/// touches stay zero.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub user_embeddings: Array2<f64>,
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl Gradients {
    pub fn zeros_like(params: &ModelParams) -> Self {
        Self {
            user_embeddings: Array2::zeros(params.user_embeddings.raw_dim()),
            weights: params.weights.iter().map(|w| Array2::zeros(w.raw_dim())).collect(),
            biases: params.biases.iter().map(|b| Array1::zeros(b.raw_dim())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.user_embeddings.iter().all(|v| v.is_finite())
            && self.weights.iter().all(|w| w.iter().all(|v| v.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|v| v.is_finite()))
    }
}

/// Differentiate the batch objective with respect to every parameter,
/// returning the loss pieces alongside.
pub fn backward(
    params: &ModelParams,
    batch: &TripleBatch,
    envs: &EnvironmentSet,
    features: &ModalityFeatureBank,
    mask: &AvailabilityMask,
    config: &TrainConfig,
) -> Result<(LossBreakdown, Gradients)> {
    let ctx = BatchContext::new(params, batch, features, mask)?;
    backward_ctx(params, batch, envs, &ctx, config)
}

pub(crate) fn backward_ctx(
    params: &ModelParams,
    batch: &TripleBatch,
    envs: &EnvironmentSet,
    ctx: &BatchContext,
    config: &TrainConfig,
) -> Result<(LossBreakdown, Gradients)> {
    let n_env = envs.len();
    let mut fused = Vec::with_capacity(n_env);
    let mut env_losses = Vec::with_capacity(n_env);
    let mut sigs = Vec::with_capacity(n_env);
    for env in envs.envs() {
        let z = ctx.fused(&env.theta)?;
        let (loss, sig) = bpr_terms(params, batch, ctx, &z);
        fused.push(z);
        env_losses.push(loss);
        sigs.push(sig);
    }
    let (mean_env_loss, env_variance) = mean_and_variance(&env_losses, config.beta)?;
    let align_loss = model::alignment_loss(&ctx.reps, ctx.avail.view());
    let reg_loss = reg_term(params, &ctx.users);
    let total = mean_env_loss
        + config.beta * env_variance
        + config.lambda * align_loss
        + config.gamma_reg * reg_loss;
    let breakdown = LossBreakdown {
        env_losses: env_losses.clone(),
        mean_env_loss,
        env_variance,
        align_loss,
        reg_loss,
        total,
    };

    let mut grads = Gradients::zeros_like(params);
    let batch_len = batch.len() as f64;
    let env_weight: Vec<f64> = env_losses
        .iter()
        .map(|l| (1.0 + 2.0 * config.beta * (l - mean_env_loss)) / n_env as f64)
        .collect();

    // ranking term: accumulate into user rows and fused-item rows
    let n_unique = ctx.items.len();
    let d = params.dim();
    let mut grad_fused: Vec<Array2<f64>> =
        (0..n_env).map(|_| Array2::zeros((n_unique, d))).collect();
    for e in 0..n_env {
        let we = env_weight[e];
        if we == 0.0 {
            continue;
        }
        for (t, triple) in batch.iter().enumerate() {
            let coeff = -we * sigs[e][t] / batch_len;
            let ps = ctx.slot[&triple.pos];
            let ns = ctx.slot[&triple.neg];
            {
                let zp = fused[e].row(ps);
                let zn = fused[e].row(ns);
                let mut gu = grads.user_embeddings.row_mut(triple.user as usize);
                gu.scaled_add(coeff, &zp);
                gu.scaled_add(-coeff, &zn);
            }
            let user = params.user_embeddings.row(triple.user as usize);
            grad_fused[e].row_mut(ps).scaled_add(coeff, &user);
            grad_fused[e].row_mut(ns).scaled_add(-coeff, &user);
        }
    }

    // chain through the fusion weights into per-modality representations
    let m_count = ctx.reps.len();
    let mut grad_reps: Vec<Array2<f64>> =
        (0..m_count).map(|_| Array2::zeros((n_unique, d))).collect();
    for (e, env) in envs.envs().iter().enumerate() {
        for m in 0..m_count {
            grad_reps[m].scaled_add(env.theta[m], &grad_fused[e]);
        }
    }

    // alignment term over available pairs, normalized like the loss
    if config.lambda > 0.0 {
        let mut pairs = 0usize;
        for s in 0..n_unique {
            for m in 0..m_count {
                if ctx.avail[(s, m)] == 0 {
                    continue;
                }
                for m2 in m + 1..m_count {
                    if ctx.avail[(s, m2)] == 1 {
                        pairs += 1;
                    }
                }
            }
        }
        if pairs > 0 {
            let scale = 2.0 * config.lambda / pairs as f64;
            for s in 0..n_unique {
                for m in 0..m_count {
                    if ctx.avail[(s, m)] == 0 {
                        continue;
                    }
                    for m2 in m + 1..m_count {
                        if ctx.avail[(s, m2)] == 0 {
                            continue;
                        }
                        let diff = &ctx.reps[m].row(s) - &ctx.reps[m2].row(s);
                        grad_reps[m].row_mut(s).scaled_add(scale, &diff);
                        grad_reps[m2].row_mut(s).scaled_add(-scale, &diff);
                    }
                }
            }
        }
    }

    // through the affine extractors
    for m in 0..m_count {
        grads.weights[m] = grad_reps[m].t().dot(&ctx.feat_rows[m]);
        grads.biases[m] = grad_reps[m].sum_axis(Axis(0));
    }

    // L2 over touched parameters
    if config.gamma_reg > 0.0 {
        let two_gamma = 2.0 * config.gamma_reg;
        for &u in &ctx.users {
            let row = params.user_embeddings.row(u as usize).to_owned();
            grads.user_embeddings.row_mut(u as usize).scaled_add(two_gamma, &row);
        }
        for m in 0..m_count {
            grads.weights[m].scaled_add(two_gamma, &params.weights[m]);
            grads.biases[m].scaled_add(two_gamma, &params.biases[m]);
        }
    }

    Ok((breakdown, grads))
}
