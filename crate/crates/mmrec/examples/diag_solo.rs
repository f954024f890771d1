//! Diagnostic: within-group ranking quality (temporary).
//!
//! Builds filtered bundles whose test pool is a single missingness group,
//! so group NDCG reflects channel quality without cross-group burial.

use mmrec::data::{
    apply_missingness, generate_synthetic, make_new_item_split, DatasetBundle, EvalSplit,
    ImputeStrategy, MissingnessParams, Protocol, SyntheticSpec,
};
use mmrec::envs::EnvVariant;
use mmrec::eval::evaluate;
use mmrec::train::{train, TrainConfig};

fn filtered(bundle: &DatasetBundle, keep: &dyn Fn(u32) -> bool) -> DatasetBundle {
    let mut b = bundle.clone();
    b.test_items.retain(|&j| keep(j));
    b.test_pairs.retain(|&(_, j)| keep(j));
    b
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(300);
    let beta: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0.0);
    let lambda: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(0.0);
    let noise: f64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(0.5);
    let dim0: usize = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(16);
    let dim1: usize = args.get(6).and_then(|s| s.parse().ok()).unwrap_or(32);
    let alpha: f64 = args.get(7).and_then(|s| s.parse().ok()).unwrap_or(0.01);
    let ipu: usize = args.get(8).and_then(|s| s.parse().ok()).unwrap_or(10);
    let new_ratio: f64 = args.get(9).and_then(|s| s.parse().ok()).unwrap_or(0.2);

    println!(
        "epochs={epochs} beta={beta} lambda={lambda} noise={noise} dims=[{dim0},{dim1}] \
         alpha={alpha} ipu={ipu}"
    );

    for seed in [101u64, 202, 303, 404, 505] {
        let spec = SyntheticSpec {
            n_users: 500,
            n_items: 300,
            k: 8,
            dims: vec![dim0, dim1],
            noise_std: noise,
            interactions_per_user: ipu,
            seed,
        };
        let (set, bank) = generate_synthetic(&spec).unwrap();
        let mut bundle = make_new_item_split(&set, &bank, new_ratio, seed).unwrap();
        apply_missingness(
            &mut bundle,
            Protocol::Ftmt,
            &MissingnessParams::default(),
            seed.wrapping_add(1),
        )
        .unwrap();

        let base = TrainConfig {
            d: 64,
            beta,
            lambda,
            alpha,
            gamma_reg: 1e-5,
            lr: 0.001,
            batch_size: 2048,
            max_epochs: epochs,
            patience: 0,
            eval_every: usize::MAX - 1,
            seed,
            env_variant: EnvVariant::Full,
            imputation: ImputeStrategy::Mean,
        };
        let mut erm = base.clone();
        erm.beta = 0.0;
        erm.lambda = 0.0;
        erm.env_variant = EnvVariant::SingleEqual;

        let run_full = train(&bundle, &base).unwrap();
        let run_erm = train(&bundle, &erm).unwrap();

        // per-group pools: miss0 = items missing weak modality 0,
        // miss1 = items missing strong modality 1, full = complete items
        let tm = bundle.test_mask.clone();
        let pools: Vec<(&str, DatasetBundle)> = vec![
            ("full ", filtered(&bundle, &|j| tm.missing_count(j) == 0)),
            ("miss0", filtered(&bundle, &|j| !tm.is_available(j, 0))),
            ("miss1", filtered(&bundle, &|j| !tm.is_available(j, 1))),
        ];
        print!("seed {seed}:");
        for (name, pool) in &pools {
            let f = evaluate(pool, &run_full.params, EvalSplit::Test, &[20], false, ImputeStrategy::Mean);
            let e = evaluate(pool, &run_erm.params, EvalSplit::Test, &[20], false, ImputeStrategy::Mean);
            match (f, e) {
                (Ok(f), Ok(e)) => print!(
                    "  {name} F={:.3} E={:.3} d={:+.3}",
                    f.ndcg(20).unwrap(),
                    e.ndcg(20).unwrap(),
                    f.ndcg(20).unwrap() - e.ndcg(20).unwrap()
                ),
                _ => print!("  {name} n/a"),
            }
        }
        println!();
    }
}
