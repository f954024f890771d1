//! Heterogeneous fusion-weight environments: one Dirichlet draw over the
//! modalities, cyclically shifted so every modality dominates exactly one
//! environment, plus the equal-weight environment the inference path uses.

use rand::Rng;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fusion weights of one environment. `env_id` 0 is the equal-weight
/// environment; ids 1..=M are the mixup environments.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvironmentWeights {
    pub env_id: usize,
    pub theta: Vec<f64>,
}

/// Ordered set of environments used by one optimization step.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvironmentSet {
    envs: Vec<EnvironmentWeights>,
}

impl EnvironmentSet {
    /// Wrap explicit weight vectors, validating each as a simplex point.
    pub fn from_weights(envs: Vec<EnvironmentWeights>) -> Result<Self> {
        if envs.is_empty() {
            return Err(Error::Config("environment set cannot be empty".into()));
        }
        for env in &envs {
            if env.theta.iter().any(|&t| t < 0.0 || !t.is_finite()) {
                return Err(Error::Contract(format!(
                    "environment {} has a negative or non-finite weight",
                    env.env_id
                )));
            }
            let sum: f64 = env.theta.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::Contract(format!(
                    "environment {} weights sum to {sum}",
                    env.env_id
                )));
            }
        }
        Ok(Self { envs })
    }

    pub fn envs(&self) -> &[EnvironmentWeights] {
        &self.envs
    }

    pub fn len(&self) -> usize {
        self.envs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.envs.is_empty()
    }
}

/// How the per-step environment set is constructed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EnvVariant {
    /// Equal weights plus one Dirichlet draw and its M-1 cyclic shifts,
    /// resampled every step.
    #[default]
    Full,
    /// Drop the equal-weight environment.
    NoE0,
    /// Independent Dirichlet draws instead of cyclic shifts.
    NoCyclicShift,
    /// Sample and shift once at training start, reuse forever.
    Frozen,
    /// Only the equal-weight environment (the ERM reduction).
    SingleEqual,
}

impl EnvVariant {
    pub fn label(&self) -> &'static str {
        match self {
            EnvVariant::Full => "full",
            EnvVariant::NoE0 => "no_e0",
            EnvVariant::NoCyclicShift => "no_cs",
            EnvVariant::Frozen => "frozen",
            EnvVariant::SingleEqual => "single_equal",
        }
    }
}

pub fn equal_weights(m: usize) -> Vec<f64> {
    vec![1.0 / m as f64; m]
}

/// One Dirichlet(alpha) draw: independent Gamma(alpha_m, 1) variates
/// normalized by their sum. Shapes below one use the boost transform
/// (draw at shape+1, multiply by U^(1/shape)); the normalization runs on
/// log-values so that tiny shapes cannot underflow to a 0/0.
pub fn sample_dirichlet(alpha: &[f64], rng: &mut impl Rng) -> Result<Vec<f64>> {
    if alpha.is_empty() {
        return Err(Error::Config("alpha must be non-empty".into()));
    }
    if alpha.iter().any(|&a| !(a > 0.0)) {
        return Err(Error::Config(format!("alpha entries must be positive, got {alpha:?}")));
    }
    let logs: Vec<f64> = alpha.iter().map(|&a| log_gamma_draw(a, rng)).collect();
    let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut theta: Vec<f64> = logs.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = theta.iter().sum();
    for t in &mut theta {
        *t /= sum;
    }
    Ok(theta)
}

/// Log of one Gamma(shape, 1) draw via Marsaglia-Tsang, boosted below
/// shape 1.
fn log_gamma_draw(shape: f64, rng: &mut impl Rng) -> f64 {
    if shape < 1.0 {
        let u = open01(rng);
        marsaglia_tsang(shape + 1.0, rng).ln() + u.ln() / shape
    } else {
        marsaglia_tsang(shape, rng).ln()
    }
}

/// Marsaglia-Tsang squeeze sampler for Gamma(shape, 1), shape >= 1.
fn marsaglia_tsang(shape: f64, rng: &mut impl Rng) -> f64 {
    let d = shape - 1.0 / 3.0;
    let c = 1.0 / (9.0 * d).sqrt();
    loop {
        let x: f64 = rand_distr::StandardNormal.sample(rng);
        let v_cbrt = 1.0 + c * x;
        if v_cbrt <= 0.0 {
            continue;
        }
        let v = v_cbrt * v_cbrt * v_cbrt;
        let u = open01(rng);
        let x2 = x * x;
        if u < 1.0 - 0.0331 * x2 * x2 || u.ln() < 0.5 * x2 + d * (1.0 - v + v.ln()) {
            return d * v;
        }
    }
}

fn open01(rng: &mut impl Rng) -> f64 {
    rng.sample(rand::distr::Open01)
}

/// Rotate the weights one step: the last entry moves to the front.
pub fn cyclic_shift(theta: &[f64]) -> Vec<f64> {
    if theta.is_empty() {
        return Vec::new();
    }
    let mut out = Vec::with_capacity(theta.len());
    out.push(theta[theta.len() - 1]);
    out.extend_from_slice(&theta[..theta.len() - 1]);
    out
}

/// Build one step's environment set. `alpha` has one entry per modality.
pub fn build_environments(
    alpha: &[f64],
    rng: &mut impl Rng,
    variant: EnvVariant,
) -> Result<EnvironmentSet> {
    let m = alpha.len();
    if m < 2 && variant != EnvVariant::SingleEqual {
        return Err(Error::Config(format!("need at least 2 modalities, got {m}")));
    }
    let equal = EnvironmentWeights { env_id: 0, theta: equal_weights(m) };
    let envs = match variant {
        EnvVariant::SingleEqual => vec![equal],
        EnvVariant::NoCyclicShift => {
            let mut envs = vec![equal];
            for e in 1..=m {
                envs.push(EnvironmentWeights {
                    env_id: e,
                    theta: sample_dirichlet(alpha, rng)?,
                });
            }
            envs
        }
        EnvVariant::Full | EnvVariant::Frozen | EnvVariant::NoE0 => {
            let mut envs = Vec::with_capacity(m + 1);
            if variant != EnvVariant::NoE0 {
                envs.push(equal);
            }
            let mut theta = sample_dirichlet(alpha, rng)?;
            for e in 1..=m {
                envs.push(EnvironmentWeights { env_id: e, theta: theta.clone() });
                if e < m {
                    theta = cyclic_shift(&theta);
                }
            }
            envs
        }
    };
    Ok(EnvironmentSet { envs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn argmax(v: &[f64]) -> usize {
        v.iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap()
    }

    #[test]
    fn dirichlet_draws_live_on_the_simplex() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &alpha in &[0.01, 0.1, 1.0, 10.0, 100.0] {
            for m in [2usize, 3, 5] {
                for _ in 0..500 {
                    let theta = sample_dirichlet(&vec![alpha; m], &mut rng).unwrap();
                    assert!(theta.iter().all(|&t| t >= 0.0 && t.is_finite()));
                    let sum: f64 = theta.iter().sum();
                    assert!((sum - 1.0).abs() <= 1e-9, "sum {sum} at alpha {alpha}");
                }
            }
        }
    }

    #[test]
    fn huge_alpha_concentrates_at_the_center() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let theta = sample_dirichlet(&[1e6, 1e6], &mut rng).unwrap();
            assert!((theta[0] - 0.5).abs() < 0.01);
            assert!((theta[1] - 0.5).abs() < 0.01);
        }
    }

    #[test]
    fn unit_alpha_mean_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 100_000;
        let mut acc = 0.0;
        for _ in 0..n {
            acc += sample_dirichlet(&[1.0, 1.0], &mut rng).unwrap()[0];
        }
        let mean = acc / n as f64;
        assert!((mean - 0.5).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn tiny_alpha_is_near_one_hot() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut extreme = 0usize;
        let n = 10_000;
        for _ in 0..n {
            let theta = sample_dirichlet(&[0.01, 0.01], &mut rng).unwrap();
            if theta.iter().cloned().fold(0.0, f64::max) > 0.9 {
                extreme += 1;
            }
        }
        assert!(extreme * 2 > n, "only {extreme}/{n} draws were extreme");
    }

    #[test]
    fn non_positive_alpha_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        assert!(sample_dirichlet(&[0.5, 0.0], &mut rng).is_err());
        assert!(sample_dirichlet(&[0.5, -1.0], &mut rng).is_err());
        assert!(sample_dirichlet(&[], &mut rng).is_err());
    }

    #[test]
    fn cyclic_shift_matches_the_rotation_pattern() {
        assert_eq!(cyclic_shift(&[0.7, 0.2, 0.1]), vec![0.1, 0.7, 0.2]);
    }

    proptest! {
        #[test]
        fn m_shifts_recover_the_input(v in proptest::collection::vec(0.0f64..1.0, 1..6)) {
            let mut rotated = v.clone();
            for _ in 0..v.len() {
                rotated = cyclic_shift(&rotated);
            }
            prop_assert_eq!(rotated, v);
        }

        #[test]
        fn shift_preserves_the_multiset(v in proptest::collection::vec(0.0f64..1.0, 1..6)) {
            let mut a = v.clone();
            let mut b = cyclic_shift(&v);
            a.sort_by(f64::total_cmp);
            b.sort_by(f64::total_cmp);
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn full_variant_shape_and_equal_env() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let set = build_environments(&[0.5; 3], &mut rng, EnvVariant::Full).unwrap();
        assert_eq!(set.len(), 4);
        assert_eq!(set.envs()[0].env_id, 0);
        for &t in &set.envs()[0].theta {
            assert!((t - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn one_shift_for_two_modalities() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let set = build_environments(&[0.3, 0.3], &mut rng, EnvVariant::Full).unwrap();
        let t1 = &set.envs()[1].theta;
        let t2 = &set.envs()[2].theta;
        assert_eq!(t2, &cyclic_shift(t1));
        assert_eq!(t2[0], t1[1]);
        assert_eq!(t2[1], t1[0]);
    }

    #[test]
    fn each_modality_dominates_exactly_one_environment() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for m in [2usize, 3, 4, 6] {
            let set = build_environments(&vec![0.2; m], &mut rng, EnvVariant::Full).unwrap();
            let t1 = &set.envs()[1].theta;
            let unique_max = {
                let mx = t1.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                t1.iter().filter(|&&t| t == mx).count() == 1
            };
            if !unique_max {
                continue;
            }
            let mut seen = vec![false; m];
            for env in &set.envs()[1..] {
                let a = argmax(&env.theta);
                assert!(!seen[a], "modality {a} dominates twice");
                seen[a] = true;
            }
            assert!(seen.iter().all(|&s| s));
        }
    }

    #[test]
    fn variant_environment_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = 3;
        let alpha = vec![0.5; m];
        assert_eq!(build_environments(&alpha, &mut rng, EnvVariant::Full).unwrap().len(), m + 1);
        assert_eq!(build_environments(&alpha, &mut rng, EnvVariant::NoE0).unwrap().len(), m);
        assert_eq!(
            build_environments(&alpha, &mut rng, EnvVariant::NoCyclicShift).unwrap().len(),
            m + 1
        );
        assert_eq!(
            build_environments(&alpha, &mut rng, EnvVariant::Frozen).unwrap().len(),
            m + 1
        );
        assert_eq!(
            build_environments(&alpha, &mut rng, EnvVariant::SingleEqual).unwrap().len(),
            1
        );
    }

    #[test]
    fn no_e0_omits_the_equal_environment() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let set = build_environments(&[0.01, 0.01], &mut rng, EnvVariant::NoE0).unwrap();
        assert!(set.envs().iter().all(|e| e.env_id > 0));
    }

    #[test]
    fn consecutive_builds_differ() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = build_environments(&[0.5, 0.5], &mut rng, EnvVariant::Full).unwrap();
        let b = build_environments(&[0.5, 0.5], &mut rng, EnvVariant::Full).unwrap();
        assert_ne!(a.envs()[1].theta, b.envs()[1].theta);
    }

    #[test]
    fn too_few_modalities_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        assert!(build_environments(&[1.0], &mut rng, EnvVariant::Full).is_err());
    }

    #[test]
    fn no_cyclic_shift_samples_are_independent_draws() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let set =
            build_environments(&[5.0, 5.0, 5.0], &mut rng, EnvVariant::NoCyclicShift).unwrap();
        let t1 = &set.envs()[1].theta;
        let t2 = &set.envs()[2].theta;
        assert_ne!(t2, &cyclic_shift(t1));
    }
}
