//! Command implementations. Each command is a pure function of the
//! resolved config, the input files, and the seed; outputs land in the
//! fixed layout under `--out`.

use std::fs;
use std::io::Read;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::{
    parse_env_variant, parse_eval_split, parse_imputation, parse_protocol, Cli, Command,
    RunConfig,
};
use crate::data::{
    apply_missingness, bundle_from_manifest, generate_synthetic, load_features_binary,
    load_features_csv, load_interactions, load_mask_csv, make_new_item_split, manifest_of,
    read_manifest, write_features_binary, write_interactions, write_manifest, write_mask_csv,
    DatasetBundle, ModalityFeatureBank, FEATURES_MAGIC,
};
use crate::error::{Error, Result};
use crate::eval::{
    evaluate, run_ablation, write_ablation_csv, write_metrics_csv, AblationVariant,
};
use crate::model::{load_checkpoint, save_checkpoint};
use crate::train::{gradcheck, train, write_history, StopReason};

/// Entry point used by the binary.
pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = RunConfig::resolve(&cli)?;
    match &cli.command {
        Command::Generate {
            n_users,
            n_items,
            latent_dim,
            dims,
            noise_std,
            interactions_per_user,
        } => {
            if let Some(v) = n_users {
                cfg.synthetic.n_users = *v;
            }
            if let Some(v) = n_items {
                cfg.synthetic.n_items = *v;
            }
            if let Some(v) = latent_dim {
                cfg.synthetic.k = *v;
            }
            if let Some(list) = dims {
                cfg.synthetic.dims = parse_usize_list(list)?;
            }
            if let Some(v) = noise_std {
                cfg.synthetic.noise_std = *v;
            }
            if let Some(v) = interactions_per_user {
                cfg.synthetic.interactions_per_user = *v;
            }
            cmd_generate(&cfg)
        }
        Command::Split {
            interactions,
            features,
            new_ratio,
            protocol,
            train_missing_ratio,
            test_missing_ratio,
            max_missing_per_item,
        } => {
            if let Some(p) = interactions {
                cfg.interactions = Some(p.clone());
            }
            if let Some(list) = features {
                cfg.features = parse_path_list(list);
            }
            if let Some(v) = new_ratio {
                cfg.new_ratio = *v;
            }
            if let Some(p) = protocol {
                cfg.protocol = parse_protocol(p)?;
            }
            if let Some(v) = train_missing_ratio {
                cfg.train_missing_ratio = *v;
            }
            if let Some(v) = test_missing_ratio {
                cfg.test_missing_ratio = *v;
            }
            if let Some(v) = max_missing_per_item {
                cfg.max_missing_per_item = *v;
            }
            cmd_split(&cfg)
        }
        Command::Train {
            beta,
            lambda,
            alpha,
            gamma_reg,
            lr,
            batch_size,
            max_epochs,
            patience,
            d,
            env_variant,
            imputation,
            variant,
        } => {
            if let Some(v) = beta {
                cfg.beta = *v;
            }
            if let Some(v) = lambda {
                cfg.lambda = *v;
            }
            if let Some(v) = alpha {
                cfg.alpha = *v;
            }
            if let Some(v) = gamma_reg {
                cfg.gamma_reg = *v;
            }
            if let Some(v) = lr {
                cfg.lr = *v;
            }
            if let Some(v) = batch_size {
                cfg.batch_size = *v;
            }
            if let Some(v) = max_epochs {
                cfg.max_epochs = *v;
            }
            if let Some(v) = patience {
                cfg.patience = *v;
            }
            if let Some(v) = d {
                cfg.d = *v;
            }
            if let Some(s) = env_variant {
                cfg.env_variant = parse_env_variant(s)?;
            }
            if let Some(s) = imputation {
                cfg.imputation = parse_imputation(s)?;
            }
            cmd_train(&cfg, variant.as_deref())
        }
        Command::Evaluate { checkpoint, split, imputation } => {
            if let Some(p) = checkpoint {
                cfg.checkpoint = Some(p.clone());
            }
            if let Some(s) = split {
                cfg.eval_split = parse_eval_split(s)?;
            }
            if let Some(s) = imputation {
                cfg.imputation = parse_imputation(s)?;
            }
            cmd_evaluate(&cfg)
        }
        Command::Gradcheck { tolerance, corrupt } => {
            if let Some(v) = tolerance {
                cfg.gradcheck_tolerance = *v;
            }
            cmd_gradcheck(&cfg, *corrupt)
        }
        Command::Ablate { variants } => {
            if let Some(list) = variants {
                cfg.variants = list.split(',').map(|s| s.trim().to_string()).collect();
            }
            cmd_ablate(&cfg)
        }
    }
}

/// Files a `generate` run leaves behind, so later commands can find them.
#[derive(Debug, Serialize, Deserialize)]
struct DatasetManifest {
    seed: u64,
    spec: crate::data::SyntheticSpec,
    interactions: PathBuf,
    features: Vec<PathBuf>,
}

fn cmd_generate(cfg: &RunConfig) -> Result<()> {
    let seed = cfg.seed()?;
    let out = cfg.out_dir()?;
    fs::create_dir_all(out)?;
    let mut spec = cfg.synthetic.clone();
    spec.seed = seed;
    let (interactions, bank) = generate_synthetic(&spec)?;

    let inter_path = out.join("interactions.tsv");
    write_interactions(&inter_path, &interactions)?;
    let mut feature_paths = Vec::new();
    for m in 0..bank.n_modalities() {
        let path = out.join(format!("features_{m}.bin"));
        write_features_binary(&path, bank.matrix(m))?;
        feature_paths.push(path);
    }
    let manifest = DatasetManifest {
        seed,
        spec: spec.clone(),
        interactions: inter_path.clone(),
        features: feature_paths.clone(),
    };
    fs::write(out.join("dataset.json"), serde_json::to_string_pretty(&manifest)?)?;
    println!(
        "generated {} users x {} items, {} pairs, {} modalities -> {}",
        interactions.n_users(),
        interactions.n_items(),
        interactions.pairs().len(),
        bank.n_modalities(),
        out.display()
    );
    Ok(())
}

fn cmd_split(cfg: &RunConfig) -> Result<()> {
    let seed = cfg.seed()?;
    let out = cfg.out_dir()?;
    fs::create_dir_all(out)?;
    let interactions = load_interactions(&resolve_interactions(cfg)?)?;
    let bank = load_feature_bank(&resolve_features(cfg)?)?;
    let mut bundle = make_new_item_split(&interactions, &bank, cfg.new_ratio, seed)?;
    apply_missingness(&mut bundle, cfg.protocol, &cfg.missingness(), seed.wrapping_add(1))?;

    write_manifest(&out.join("manifest.json"), &manifest_of(&bundle))?;
    write_mask_csv(&out.join("train_mask.csv"), &bundle.train_mask)?;
    write_mask_csv(&out.join("test_mask.csv"), &bundle.test_mask)?;
    println!(
        "split {} items -> warm {} / val {} / test {} under {}",
        interactions.n_items(),
        bundle.warm_items().len(),
        bundle.val_items.len(),
        bundle.test_items.len(),
        cfg.protocol.label()
    );
    Ok(())
}

fn cmd_train(cfg: &RunConfig, variant: Option<&str>) -> Result<()> {
    let out = cfg.out_dir()?;
    let bundle = load_bundle(cfg)?;
    let mut train_cfg = cfg.train_config()?;
    if let Some(label) = variant {
        train_cfg = AblationVariant::parse(label)?.apply(&train_cfg);
    }
    let outcome = train(&bundle, &train_cfg)?;

    fs::create_dir_all(out.join("ckpt"))?;
    save_checkpoint(&out.join("ckpt/best.ckpt"), &outcome.params)?;
    write_history(&out.join("history.jsonl"), &outcome.history)?;
    println!(
        "trained {} epochs, stop={:?}, best_val_recall20={:?}",
        outcome.history.len(),
        outcome.stop,
        outcome.best_val_recall
    );
    if outcome.stop == StopReason::Diverged {
        return Err(Error::Numerical(
            "training diverged; last good checkpoint written".into(),
        ));
    }
    Ok(())
}

fn cmd_evaluate(cfg: &RunConfig) -> Result<()> {
    let out = cfg.out_dir()?;
    let bundle = load_bundle(cfg)?;
    let ckpt = cfg
        .checkpoint
        .clone()
        .unwrap_or_else(|| out.join("ckpt/best.ckpt"));
    let params = load_checkpoint(&ckpt)?;
    let report = evaluate(&bundle, &params, cfg.eval_split, &cfg.ks, true, cfg.imputation)?;

    fs::create_dir_all(out.join("metrics"))?;
    let name = match cfg.eval_split {
        crate::data::EvalSplit::Val => "val",
        crate::data::EvalSplit::Test => "test",
    };
    let json = serde_json::to_string_pretty(&report)?;
    fs::write(out.join(format!("metrics/{name}.json")), &json)?;
    write_metrics_csv(&out.join(format!("metrics/{name}.csv")), &report)?;
    println!("{json}");
    Ok(())
}

fn cmd_gradcheck(cfg: &RunConfig, corrupt: bool) -> Result<()> {
    let seed = cfg.seed()?;
    let trials = gradcheck::default_trials(seed);
    let report = gradcheck::finite_diff_check(&trials, cfg.gradcheck_tolerance, corrupt)?;
    if let Ok(out) = cfg.out_dir() {
        fs::create_dir_all(out.join("metrics"))?;
        fs::write(
            out.join("metrics/gradcheck.json"),
            serde_json::to_string_pretty(&report)?,
        )?;
    }
    println!(
        "gradcheck: {} instances, max_rel_err {:.3e} (tolerance {:.0e}) in {} ms",
        report.n_instances, report.max_rel_err, report.tolerance, report.elapsed_ms
    );
    for group in &report.groups {
        println!("  {:<18} {:.3e}", group.group, group.max_rel_err);
    }
    if !report.pass {
        return Err(Error::Numerical(format!(
            "gradient check failed: max_rel_err {} > {}",
            report.max_rel_err, report.tolerance
        )));
    }
    Ok(())
}

fn cmd_ablate(cfg: &RunConfig) -> Result<()> {
    let out = cfg.out_dir()?;
    let bundle = load_bundle(cfg)?;
    let train_cfg = cfg.train_config()?;
    let variants: Vec<AblationVariant> = cfg
        .variants
        .iter()
        .map(|s| AblationVariant::parse(s))
        .collect::<Result<_>>()?;
    let rows = run_ablation(&bundle, &train_cfg, &variants, &cfg.ks)?;

    fs::create_dir_all(out.join("metrics"))?;
    write_ablation_csv(&out.join("metrics/ablate.csv"), &rows)?;
    for (label, report) in &rows {
        let file = out.join(format!("metrics/ablate_{}.json", label.replace(':', "_")));
        fs::write(file, serde_json::to_string_pretty(report)?)?;
        println!(
            "{label:<14} recall@20={:?} ndcg@20={:?}",
            report.recall(20),
            report.ndcg(20)
        );
    }
    Ok(())
}

fn resolve_interactions(cfg: &RunConfig) -> Result<PathBuf> {
    if let Some(path) = &cfg.interactions {
        return Ok(path.clone());
    }
    let fallback = cfg.out_dir()?.join("interactions.tsv");
    if fallback.exists() {
        return Ok(fallback);
    }
    Err(Error::Config("no interactions file (config key `interactions`)".into()))
}

fn resolve_features(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    if !cfg.features.is_empty() {
        return Ok(cfg.features.clone());
    }
    let manifest = cfg.out_dir()?.join("dataset.json");
    if manifest.exists() {
        let text = fs::read_to_string(&manifest)?;
        let ds: DatasetManifest = serde_json::from_str(&text)?;
        return Ok(ds.features);
    }
    Err(Error::Config("no feature files (config key `features`)".into()))
}

fn load_bundle(cfg: &RunConfig) -> Result<DatasetBundle> {
    let out = cfg.out_dir()?;
    let interactions = load_interactions(&resolve_interactions(cfg)?)?;
    let bank = load_feature_bank(&resolve_features(cfg)?)?;
    let manifest_path = cfg.manifest.clone().unwrap_or_else(|| out.join("manifest.json"));
    let manifest = read_manifest(&manifest_path)?;
    let train_mask_path =
        cfg.train_mask.clone().unwrap_or_else(|| out.join("train_mask.csv"));
    let test_mask_path = cfg.test_mask.clone().unwrap_or_else(|| out.join("test_mask.csv"));
    let train_mask =
        train_mask_path.exists().then(|| load_mask_csv(&train_mask_path)).transpose()?;
    let test_mask =
        test_mask_path.exists().then(|| load_mask_csv(&test_mask_path)).transpose()?;
    let mut bundle =
        bundle_from_manifest(&interactions, &bank, &manifest, train_mask, test_mask)?;
    bundle.protocol = cfg.protocol;
    Ok(bundle)
}

/// Load one matrix per modality, sniffing the binary magic.
fn load_feature_bank(paths: &[PathBuf]) -> Result<ModalityFeatureBank> {
    if paths.is_empty() {
        return Err(Error::Config("at least one feature file is required".into()));
    }
    let mut mats = Vec::with_capacity(paths.len());
    for path in paths {
        let mut head = [0u8; 8];
        let is_binary = std::fs::File::open(path)
            .and_then(|mut f| f.read_exact(&mut head))
            .map(|_| &head == FEATURES_MAGIC)
            .unwrap_or(false);
        let mat = if is_binary {
            load_features_binary(path)?
        } else {
            load_features_csv(path)?
        };
        mats.push(mat);
    }
    ModalityFeatureBank::new(mats)
}

fn parse_usize_list(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("invalid integer {t:?}")))
        })
        .collect()
}

fn parse_path_list(s: &str) -> Vec<PathBuf> {
    s.split(',').map(|t| PathBuf::from(t.trim())).collect()
}
