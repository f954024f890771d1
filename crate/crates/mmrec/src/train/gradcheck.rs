//! Central finite-difference verification of the analytic gradients,
//! runnable from tests and from the command line.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::time::Instant;

use super::{backward, total_loss, TrainConfig, Triple, TripleBatch};
use crate::data::{AvailabilityMask, ModalityFeatureBank};
use crate::envs::{build_environments, EnvVariant, EnvironmentSet};
use crate::error::Result;
use crate::model::ModelParams;

const STEP: f64 = 1e-4;

/// One randomized trial configuration.
#[derive(Debug, Clone)]
pub struct TrialSpec {
    pub n_users: usize,
    pub n_items: usize,
    pub n_modalities: usize,
    pub d: usize,
    pub dx: usize,
    pub batch: usize,
    pub beta: f64,
    pub lambda: f64,
    pub gamma_reg: f64,
    pub masked: bool,
    pub seed: u64,
}

impl TrialSpec {
    fn label(&self) -> String {
        format!(
            "beta={} lambda={} gamma={} m={} masked={}",
            self.beta, self.lambda, self.gamma_reg, self.n_modalities, self.masked
        )
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GroupWorst {
    pub group: String,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct InstanceResult {
    pub label: String,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub n_instances: usize,
    pub tolerance: f64,
    pub max_rel_err: f64,
    pub pass: bool,
    pub groups: Vec<GroupWorst>,
    pub instances: Vec<InstanceResult>,
    pub elapsed_ms: u128,
}

/// The standard grid: every (beta, lambda) corner with and without masked
/// modalities, plus regularized and three-modality variants.
pub fn default_trials(seed: u64) -> Vec<TrialSpec> {
    let mut trials = Vec::new();
    let mut k = 0u64;
    for &beta in &[0.0, 1.0, 1000.0] {
        for &lambda in &[0.0, 0.05, 1.0] {
            for &masked in &[false, true] {
                trials.push(TrialSpec {
                    n_users: 4,
                    n_items: 6,
                    n_modalities: 2,
                    d: 3,
                    dx: 5,
                    batch: 8,
                    beta,
                    lambda,
                    gamma_reg: 0.0,
                    masked,
                    seed: seed.wrapping_add(k),
                });
                k += 1;
            }
        }
    }
    for &gamma in &[1e-5, 1e-2] {
        trials.push(TrialSpec {
            n_users: 4,
            n_items: 6,
            n_modalities: 2,
            d: 3,
            dx: 5,
            batch: 8,
            beta: 50.0,
            lambda: 0.5,
            gamma_reg: gamma,
            masked: true,
            seed: seed.wrapping_add(100 + k),
        });
        k += 1;
    }
    for &masked in &[false, true] {
        trials.push(TrialSpec {
            n_users: 5,
            n_items: 7,
            n_modalities: 3,
            d: 3,
            dx: 4,
            batch: 10,
            beta: 10.0,
            lambda: 0.2,
            gamma_reg: 1e-4,
            masked,
            seed: seed.wrapping_add(200 + k),
        });
        k += 1;
    }
    trials
}

/// Run every trial and report worst relative errors per parameter group.
/// `corrupt` perturbs one analytic gradient entry, as a negative control
/// for the command-line wrapper.
pub fn finite_diff_check(
    trials: &[TrialSpec],
    tolerance: f64,
    corrupt: bool,
) -> Result<GradCheckReport> {
    let start = Instant::now();
    let mut groups: Vec<GroupWorst> = Vec::new();
    let mut instances = Vec::new();
    let mut global_worst = 0.0f64;

    for trial in trials {
        let (params, features, mask, batch, envs, config) = build_instance(trial)?;
        let (_, mut grads) = backward(&params, &batch, &envs, &features, &mask, &config)?;
        if corrupt {
            grads.user_embeddings[(0, 0)] += 1.0;
        }

        let mut instance_worst = 0.0f64;
        let mut probe = params.clone();
        let loss = |p: &ModelParams| -> Result<f64> {
            Ok(total_loss(p, &batch, &envs, &features, &mask, &config)?.total)
        };

        // user table
        let mut worst_user = 0.0f64;
        for r in 0..probe.user_embeddings.nrows() {
            for c in 0..probe.user_embeddings.ncols() {
                let orig = probe.user_embeddings[(r, c)];
                probe.user_embeddings[(r, c)] = orig + STEP;
                let plus = loss(&probe)?;
                probe.user_embeddings[(r, c)] = orig - STEP;
                let minus = loss(&probe)?;
                probe.user_embeddings[(r, c)] = orig;
                let rel = rel_err(grads.user_embeddings[(r, c)], plus, minus);
                worst_user = worst_user.max(rel);
            }
        }
        record_group(&mut groups, "user_embeddings", worst_user);
        instance_worst = instance_worst.max(worst_user);

        for m in 0..probe.weights.len() {
            let mut worst_w = 0.0f64;
            for r in 0..probe.weights[m].nrows() {
                for c in 0..probe.weights[m].ncols() {
                    let orig = probe.weights[m][(r, c)];
                    probe.weights[m][(r, c)] = orig + STEP;
                    let plus = loss(&probe)?;
                    probe.weights[m][(r, c)] = orig - STEP;
                    let minus = loss(&probe)?;
                    probe.weights[m][(r, c)] = orig;
                    worst_w = worst_w.max(rel_err(grads.weights[m][(r, c)], plus, minus));
                }
            }
            record_group(&mut groups, &format!("weights[{m}]"), worst_w);
            instance_worst = instance_worst.max(worst_w);

            let mut worst_b = 0.0f64;
            for i in 0..probe.biases[m].len() {
                let orig = probe.biases[m][i];
                probe.biases[m][i] = orig + STEP;
                let plus = loss(&probe)?;
                probe.biases[m][i] = orig - STEP;
                let minus = loss(&probe)?;
                probe.biases[m][i] = orig;
                worst_b = worst_b.max(rel_err(grads.biases[m][i], plus, minus));
            }
            record_group(&mut groups, &format!("biases[{m}]"), worst_b);
            instance_worst = instance_worst.max(worst_b);
        }

        instances.push(InstanceResult { label: trial.label(), max_rel_err: instance_worst });
        global_worst = global_worst.max(instance_worst);
    }

    Ok(GradCheckReport {
        n_instances: trials.len(),
        tolerance,
        max_rel_err: global_worst,
        pass: global_worst <= tolerance,
        groups,
        instances,
        elapsed_ms: start.elapsed().as_millis(),
    })
}

fn rel_err(analytic: f64, plus: f64, minus: f64) -> f64 {
    let numeric = (plus - minus) / (2.0 * STEP);
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

fn record_group(groups: &mut Vec<GroupWorst>, name: &str, err: f64) {
    match groups.iter_mut().find(|g| g.group == name) {
        Some(g) => g.max_rel_err = g.max_rel_err.max(err),
        None => groups.push(GroupWorst { group: name.into(), max_rel_err: err }),
    }
}

type Instance = (
    ModelParams,
    ModalityFeatureBank,
    AvailabilityMask,
    TripleBatch,
    EnvironmentSet,
    TrainConfig,
);

fn build_instance(trial: &TrialSpec) -> Result<Instance> {
    let mut rng = ChaCha8Rng::seed_from_u64(trial.seed);
    let dims = vec![trial.dx; trial.n_modalities];
    let mut params = crate::model::init_params(trial.n_users, &dims, trial.d, trial.seed)?;
    params.user_embeddings.mapv_inplace(|_| rng.random::<f64>() * 0.8 - 0.4);
    for w in &mut params.weights {
        w.mapv_inplace(|_| rng.random::<f64>() * 0.8 - 0.4);
    }
    for b in &mut params.biases {
        b.mapv_inplace(|_| rng.random::<f64>() * 0.2 - 0.1);
    }

    let mats = (0..trial.n_modalities)
        .map(|_| {
            Array2::from_shape_fn((trial.n_items, trial.dx), |_| {
                rng.random::<f64>() * 2.0 - 1.0
            })
        })
        .collect();
    let features = ModalityFeatureBank::new(mats)?;

    let mut entries = Array2::ones((trial.n_items, trial.n_modalities));
    if trial.masked {
        for j in 0..trial.n_items {
            if rng.random::<f64>() < 0.5 {
                entries[(j, rng.random_range(0..trial.n_modalities))] = 0;
            }
        }
    }
    let mask = AvailabilityMask::new(entries)?;

    let mut batch = Vec::with_capacity(trial.batch);
    for _ in 0..trial.batch {
        let user = rng.random_range(0..trial.n_users) as u32;
        let pos = rng.random_range(0..trial.n_items) as u32;
        let neg = loop {
            let j = rng.random_range(0..trial.n_items) as u32;
            if j != pos {
                break j;
            }
        };
        batch.push(Triple { user, pos, neg });
    }

    let envs = build_environments(
        &vec![0.5; trial.n_modalities],
        &mut rng,
        EnvVariant::Full,
    )?;
    let config = TrainConfig {
        d: trial.d,
        beta: trial.beta,
        lambda: trial.lambda,
        gamma_reg: trial.gamma_reg,
        seed: trial.seed,
        ..TrainConfig::default()
    };
    Ok((params, features, mask, batch, envs, config))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_grid_passes_the_tolerance() {
        let trials = default_trials(7);
        assert!(trials.len() >= 20);
        let report = finite_diff_check(&trials, 1e-4, false).unwrap();
        assert!(report.pass, "max rel err {}", report.max_rel_err);
        assert!(report.groups.len() >= 3);
    }

    #[test]
    fn extreme_variance_weight_stays_conditioned() {
        let trials = vec![TrialSpec {
            n_users: 4,
            n_items: 6,
            n_modalities: 2,
            d: 3,
            dx: 5,
            batch: 8,
            beta: 1000.0,
            lambda: 0.0,
            gamma_reg: 0.0,
            masked: false,
            seed: 99,
        }];
        let report = finite_diff_check(&trials, 1e-3, false).unwrap();
        assert!(report.pass, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn alignment_only_gradient_is_nearly_exact() {
        // the alignment term is quadratic in the parameters, so central
        // differences carry no truncation error
        let trials = vec![TrialSpec {
            n_users: 4,
            n_items: 6,
            n_modalities: 2,
            d: 3,
            dx: 5,
            batch: 8,
            beta: 0.0,
            lambda: 1.0,
            gamma_reg: 0.0,
            masked: true,
            seed: 5,
        }];
        let report = finite_diff_check(&trials, 1e-4, false).unwrap();
        let weight_groups: Vec<&GroupWorst> = report
            .groups
            .iter()
            .filter(|g| g.group.starts_with("weights") || g.group.starts_with("biases"))
            .collect();
        assert!(!weight_groups.is_empty());
        // ranking gradients share these groups, so check the full-report
        // bound and the dedicated tight bound on a pure-alignment config
        assert!(report.max_rel_err <= 1e-4);
        let pure = vec![TrialSpec { batch: 1, ..trials[0].clone() }];
        let pure_report = finite_diff_check(&pure, 1e-4, false).unwrap();
        assert!(pure_report.max_rel_err <= 1e-4);
    }

    #[test]
    fn corruption_is_detected() {
        let trials = default_trials(3);
        let report = finite_diff_check(&trials[..2], 1e-4, true).unwrap();
        assert!(!report.pass);
    }
}
