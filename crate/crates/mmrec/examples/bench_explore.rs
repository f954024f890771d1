//! Scratch explorer for synthetic-benchmark settings (temporary).

use mmrec::data::{
    apply_missingness, generate_synthetic, make_new_item_split, EvalSplit, ImputeStrategy,
    MissingnessParams, Protocol, SyntheticSpec,
};
use mmrec::envs::EnvVariant;
use mmrec::eval::evaluate;
use mmrec::train::{train, TrainConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(60);
    let batch: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(2048);
    let d: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(64);
    let beta: f64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(50.0);
    let lambda: f64 = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(0.05);
    let noise: f64 = args.get(6).and_then(|s| s.parse().ok()).unwrap_or(0.1);
    let dim0: usize = args.get(7).and_then(|s| s.parse().ok()).unwrap_or(16);
    let dim1: usize = args.get(8).and_then(|s| s.parse().ok()).unwrap_or(16);
    let alpha: f64 = args.get(9).and_then(|s| s.parse().ok()).unwrap_or(0.01);
    let ipu: usize = args.get(10).and_then(|s| s.parse().ok()).unwrap_or(20);
    let new_ratio: f64 = args.get(11).and_then(|s| s.parse().ok()).unwrap_or(0.2);

    println!(
        "epochs={epochs} batch={batch} d={d} beta={beta} lambda={lambda} noise={noise} \
         dims=[{dim0},{dim1}] alpha={alpha} ipu={ipu}"
    );
    let start = std::time::Instant::now();

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
            d,
            beta,
            lambda,
            alpha,
            gamma_reg: 1e-5,
            lr: 0.001,
            batch_size: batch,
            max_epochs: epochs,
            patience: 10,
            eval_every: 2,
            seed,
            env_variant: EnvVariant::Full,
            imputation: ImputeStrategy::Mean,
        };
        let mut beta0 = base.clone();
        beta0.beta = 0.0;
        let mut erm = base.clone();
        erm.beta = 0.0;
        erm.lambda = 0.0;
        erm.env_variant = EnvVariant::SingleEqual;

        let run_full = train(&bundle, &base).unwrap();
        let run_beta0 = train(&bundle, &beta0).unwrap();
        let run_erm = train(&bundle, &erm).unwrap();

        let tail = |h: &[mmrec::train::EpochRecord]| {
            let n = h.len().min(5);
            h[h.len() - n..].iter().map(|r| r.env_loss_spread).sum::<f64>() / n as f64
        };
        let spread_full = tail(&run_full.history);
        let spread_beta0 = tail(&run_beta0.history);

        let rep_full = evaluate(
            &bundle,
            &run_full.params,
            EvalSplit::Test,
            &[20],
            true,
            ImputeStrategy::Mean,
        )
        .unwrap();
        let rep_erm = evaluate(
            &bundle,
            &run_erm.params,
            EvalSplit::Test,
            &[20],
            true,
            ImputeStrategy::Mean,
        )
        .unwrap();

        let nf = rep_full.ndcg(20).unwrap();
        let ne = rep_erm.ndcg(20).unwrap();
        let gf_full = rep_full.group_ndcg("full", 20).unwrap_or(f64::NAN);
        let ge_full = rep_erm.group_ndcg("full", 20).unwrap_or(f64::NAN);
        let gf_miss = rep_full.group_ndcg("missing_one", 20).unwrap_or(f64::NAN);
        let ge_miss = rep_erm.group_ndcg("missing_one", 20).unwrap_or(f64::NAN);
        let impr_full = (gf_full - ge_full) / ge_full;
        let impr_miss = (gf_miss - ge_miss) / ge_miss;
        println!(
            "seed {seed}: spread b{beta}={spread_full:.4} b0={spread_beta0:.4} | \
             ndcg full={nf:.4} erm={ne:.4} | grp_full F={gf_full:.3} E={ge_full:.3} | \
             grp_miss F={gf_miss:.3} E={ge_miss:.3} | impr full={impr_full:+.3} miss={impr_miss:+.3} | \
             loss={:.4}",
            run_full.history.last().unwrap().mean_env_loss
        );
    }
    println!("elapsed: {:.1}s", start.elapsed().as_secs_f64());
}
