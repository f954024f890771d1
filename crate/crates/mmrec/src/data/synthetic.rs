//! Synthetic benchmark generator: Gaussian latent factors, per-modality
//! random projections of the item latents, and Gumbel-perturbed top-k
//! interactions so every user has a fixed number of positives.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{InteractionSet, ModalityFeatureBank, SyntheticSpec};
use crate::error::Result;

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(InteractionSet, ModalityFeatureBank)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let normal = |rng: &mut ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };

    let item_latents: Array2<f64> =
        Array2::from_shape_fn((spec.n_items, spec.k), |_| normal(&mut rng));
    let user_latents: Array2<f64> =
        Array2::from_shape_fn((spec.n_users, spec.k), |_| normal(&mut rng));

    let scale = 1.0 / (spec.k as f64).sqrt();
    let mut mats = Vec::with_capacity(spec.dims.len());
    for &dim in &spec.dims {
        let projection: Array2<f64> =
            Array2::from_shape_fn((spec.k, dim), |_| normal(&mut rng) * scale);
        let mut mat = item_latents.dot(&projection);
        if spec.noise_std > 0.0 {
            for v in mat.iter_mut() {
                *v += normal(&mut rng) * spec.noise_std;
            }
        }
        mats.push(mat);
    }

    let mut pairs = Vec::with_capacity(spec.n_users * spec.interactions_per_user);
    let mut scored: Vec<(f64, u32)> = Vec::with_capacity(spec.n_items);
    for u in 0..spec.n_users {
        scored.clear();
        let user = user_latents.row(u);
        for j in 0..spec.n_items {
            let affinity = user.dot(&item_latents.row(j));
            scored.push((affinity + gumbel(&mut rng), j as u32));
        }
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        for &(_, j) in scored.iter().take(spec.interactions_per_user) {
            pairs.push((u as u32, j));
        }
    }
    pairs.sort_unstable();

    let interactions =
        InteractionSet::from_clean_pairs(spec.n_users, spec.n_items, pairs);
    let bank = ModalityFeatureBank::new(mats)?;
    Ok((interactions, bank))
}

fn gumbel(rng: &mut ChaCha8Rng) -> f64 {
    // open interval keeps both logs finite
    let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    -(-u.ln()).ln()
}
