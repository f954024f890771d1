//! New-item inference and ranking evaluation: full ranking over the
//! held-out item pool, Recall@K / NDCG@K, per-missingness-group
//! breakdowns, and the ablation runner.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write;
use std::path::Path;

use crate::data::{impute, DatasetBundle, EvalSplit, ImputeStrategy, ModalityFeatureBank};
use crate::envs::{equal_weights, EnvVariant};
use crate::error::{Error, Result};
use crate::model::{extract_rows, fuse_rows, ModelParams};
use crate::train::{train, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricPair {
    pub recall: f64,
    pub ndcg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    #[serde(rename = "K")]
    pub per_k: BTreeMap<String, MetricPair>,
    pub n_users: usize,
}

/// Aggregated ranking metrics, shaped for the JSON report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub protocol: String,
    #[serde(rename = "K")]
    pub per_k: BTreeMap<String, MetricPair>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub groups: Option<BTreeMap<String, GroupMetrics>>,
    pub n_users: usize,
    pub seed: u64,
}

impl MetricReport {
    pub fn recall(&self, k: usize) -> Option<f64> {
        self.per_k.get(&k.to_string()).map(|p| p.recall)
    }

    pub fn ndcg(&self, k: usize) -> Option<f64> {
        self.per_k.get(&k.to_string()).map(|p| p.ndcg)
    }

    pub fn group_ndcg(&self, group: &str, k: usize) -> Option<f64> {
        self.groups
            .as_ref()?
            .get(group)?
            .per_k
            .get(&k.to_string())
            .map(|p| p.ndcg)
    }
}

/// Fraction of the relevant items found in the top K.
pub fn recall_at_k(ranking: &[u32], relevant: &BTreeSet<u32>, k: usize) -> f64 {
    debug_assert!(!relevant.is_empty());
    if relevant.is_empty() {
        return 0.0;
    }
    let hits = ranking.iter().take(k).filter(|j| relevant.contains(j)).count();
    hits as f64 / relevant.len() as f64
}

/// Binary-gain DCG@K with `1/log2(rank+1)` discounts, normalized by the
/// ideal ordering.
pub fn ndcg_at_k(ranking: &[u32], relevant: &BTreeSet<u32>, k: usize) -> f64 {
    debug_assert!(!relevant.is_empty());
    if relevant.is_empty() {
        return 0.0;
    }
    let mut dcg = 0.0;
    for (idx, j) in ranking.iter().take(k).enumerate() {
        if relevant.contains(j) {
            dcg += 1.0 / ((idx + 2) as f64).log2();
        }
    }
    let ideal_hits = relevant.len().min(k);
    let idcg: f64 = (0..ideal_hits).map(|idx| 1.0 / ((idx + 2) as f64).log2()).sum();
    if idcg == 0.0 {
        0.0
    } else {
        dcg / idcg
    }
}

/// Candidate ids ordered by descending score, ties by ascending id.
pub fn rank_items(candidates: &[u32], scores: &[f64]) -> Vec<u32> {
    debug_assert_eq!(candidates.len(), scores.len());
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b].total_cmp(&scores[a]).then(candidates[a].cmp(&candidates[b]))
    });
    order.into_iter().map(|i| candidates[i]).collect()
}

/// Scores for each listed user against every candidate row, through the
/// equal-weight fusion path used at inference. Users outside the embedding
/// table are skipped with a warning; the returned user list names the rows
/// of the score matrix.
pub fn infer_new_item_scores(
    params: &ModelParams,
    candidate_features: &ModalityFeatureBank,
    users: &[u32],
) -> Result<(Vec<u32>, Array2<f64>)> {
    let m_count = candidate_features.n_modalities();
    if m_count != params.n_modalities() {
        return Err(Error::Dimension(format!(
            "bank has {m_count} modalities, model has {}",
            params.n_modalities()
        )));
    }
    let mut reps = Vec::with_capacity(m_count);
    for m in 0..m_count {
        reps.push(extract_rows(params, m, candidate_features.matrix(m).view())?);
    }
    let fused = fuse_rows(&reps, &equal_weights(m_count))?;

    let kept: Vec<u32> = users
        .iter()
        .copied()
        .filter(|&u| {
            let known = (u as usize) < params.n_users();
            if !known {
                eprintln!("warning: skipping unknown user {u}");
            }
            known
        })
        .collect();
    let mut scores = Array2::zeros((kept.len(), fused.nrows()));
    for (r, &u) in kept.iter().enumerate() {
        let user = params.user_embeddings.row(u as usize);
        for j in 0..fused.nrows() {
            scores[(r, j)] = user.dot(&fused.row(j));
        }
    }
    Ok((kept, scores))
}

/// Rank the split's new items for every eligible user and average the
/// metrics. Eligible users hold at least one relevant item in the split
/// and at least one training interaction (their embedding saw gradients).
pub fn evaluate(
    bundle: &DatasetBundle,
    params: &ModelParams,
    split: EvalSplit,
    ks: &[usize],
    group_breakdown: bool,
    strategy: ImputeStrategy,
) -> Result<MetricReport> {
    let candidates = bundle.split_items(split);
    if candidates.is_empty() {
        return Err(Error::EmptyDataset("split has no candidate items".into()));
    }
    let candidate_bank = bundle.features.select_rows(candidates);
    let candidate_mask = bundle.test_mask.select_rows(candidates);
    let (ref_bank, ref_mask) = bundle.warm_reference();
    let imputed = impute(&candidate_bank, &candidate_mask, strategy, (&ref_bank, &ref_mask))?;

    // relevance from the held-out pairs, restricted to trained users
    let mut relevant: HashMap<u32, BTreeSet<u32>> = HashMap::new();
    for &(u, j) in bundle.split_pairs(split) {
        if (u as usize) < params.n_users() && !bundle.train.positives(u).is_empty() {
            relevant.entry(u).or_default().insert(j);
        }
    }
    let mut users: Vec<u32> = relevant.keys().copied().collect();
    users.sort_unstable();
    if users.is_empty() {
        return Err(Error::EmptyDataset("no eligible users in the split".into()));
    }

    let (kept, scores) = infer_new_item_scores(params, &imputed, &users)?;
    debug_assert_eq!(kept, users);

    let group_of: Vec<&'static str> =
        candidates.iter().map(|&j| group_name(bundle.test_mask.missing_count(j))).collect();
    let item_group: HashMap<u32, &'static str> =
        candidates.iter().copied().zip(group_of.iter().copied()).collect();

    let mut overall: BTreeMap<String, (f64, f64)> = BTreeMap::new();
    let mut groups: BTreeMap<String, (BTreeMap<String, (f64, f64)>, usize)> = BTreeMap::new();

    for (r, &u) in kept.iter().enumerate() {
        let row: Vec<f64> = scores.row(r).to_vec();
        let ranking = rank_items(candidates, &row);
        let rel = &relevant[&u];
        for &k in ks {
            let entry = overall.entry(k.to_string()).or_insert((0.0, 0.0));
            entry.0 += recall_at_k(&ranking, rel, k);
            entry.1 += ndcg_at_k(&ranking, rel, k);
        }
        if group_breakdown {
            let mut by_group: HashMap<&str, BTreeSet<u32>> = HashMap::new();
            for &j in rel {
                by_group.entry(item_group[&j]).or_default().insert(j);
            }
            for (name, rel_g) in by_group {
                let slot = groups.entry(name.to_string()).or_default();
                slot.1 += 1;
                for &k in ks {
                    let entry = slot.0.entry(k.to_string()).or_insert((0.0, 0.0));
                    entry.0 += recall_at_k(&ranking, &rel_g, k);
                    entry.1 += ndcg_at_k(&ranking, &rel_g, k);
                }
            }
        }
    }

    let n_users = kept.len();
    let per_k = overall
        .into_iter()
        .map(|(k, (r, n))| {
            (k, MetricPair { recall: r / n_users as f64, ndcg: n / n_users as f64 })
        })
        .collect();
    let groups = group_breakdown.then(|| {
        groups
            .into_iter()
            .map(|(name, (per_k, count))| {
                let per_k = per_k
                    .into_iter()
                    .map(|(k, (r, n))| {
                        (k, MetricPair { recall: r / count as f64, ndcg: n / count as f64 })
                    })
                    .collect();
                (name, GroupMetrics { per_k, n_users: count })
            })
            .collect()
    });

    Ok(MetricReport {
        protocol: bundle.protocol.label().to_string(),
        per_k,
        groups,
        n_users,
        seed: bundle.split_seed,
    })
}

fn group_name(missing: usize) -> &'static str {
    match missing {
        0 => "full",
        1 => "missing_one",
        2 => "missing_two",
        _ => "missing_many",
    }
}

/// Ablation and comparison variants over a shared split and seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AblationVariant {
    Full,
    NoCmam,
    NoCeim,
    NoBoth,
    EnvNoE0,
    EnvNoCs,
    EnvFrozen,
    ImputeZero,
    ImputeMean,
    ImputeMap,
}

impl AblationVariant {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "full" => Self::Full,
            "no_cmam" => Self::NoCmam,
            "no_ceim" => Self::NoCeim,
            "no_both" => Self::NoBoth,
            "env:no_e0" => Self::EnvNoE0,
            "env:no_cs" => Self::EnvNoCs,
            "env:frozen" => Self::EnvFrozen,
            "impute:zero" => Self::ImputeZero,
            "impute:mean" => Self::ImputeMean,
            "impute:map" => Self::ImputeMap,
            other => return Err(Error::Config(format!("unknown variant {other:?}"))),
        })
    }

    pub fn label(&self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::NoCmam => "no_cmam",
            Self::NoCeim => "no_ceim",
            Self::NoBoth => "no_both",
            Self::EnvNoE0 => "env:no_e0",
            Self::EnvNoCs => "env:no_cs",
            Self::EnvFrozen => "env:frozen",
            Self::ImputeZero => "impute:zero",
            Self::ImputeMean => "impute:mean",
            Self::ImputeMap => "impute:map",
        }
    }

    /// Training configuration for this variant. Imputation comparisons run
    /// the stripped-down backbone with the given fill strategy.
    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        match self {
            Self::Full => {}
            Self::NoCmam => cfg.lambda = 0.0,
            Self::NoCeim => {
                cfg.beta = 0.0;
                cfg.env_variant = EnvVariant::SingleEqual;
            }
            Self::NoBoth => {
                cfg.lambda = 0.0;
                cfg.beta = 0.0;
                cfg.env_variant = EnvVariant::SingleEqual;
            }
            Self::EnvNoE0 => cfg.env_variant = EnvVariant::NoE0,
            Self::EnvNoCs => cfg.env_variant = EnvVariant::NoCyclicShift,
            Self::EnvFrozen => cfg.env_variant = EnvVariant::Frozen,
            Self::ImputeZero | Self::ImputeMean | Self::ImputeMap => {
                cfg.lambda = 0.0;
                cfg.beta = 0.0;
                cfg.env_variant = EnvVariant::SingleEqual;
                cfg.imputation = match self {
                    Self::ImputeZero => ImputeStrategy::Zero,
                    Self::ImputeMap => ImputeStrategy::Map,
                    _ => ImputeStrategy::Mean,
                };
            }
        }
        cfg
    }
}

/// Train and evaluate each variant against the shared bundle and seed.
pub fn run_ablation(
    bundle: &DatasetBundle,
    base: &TrainConfig,
    variants: &[AblationVariant],
    ks: &[usize],
) -> Result<Vec<(String, MetricReport)>> {
    let mut rows = Vec::with_capacity(variants.len());
    for variant in variants {
        let cfg = variant.apply(base);
        let outcome = train(bundle, &cfg)?;
        let report =
            evaluate(bundle, &outcome.params, EvalSplit::Test, ks, true, cfg.imputation)?;
        rows.push((variant.label().to_string(), report));
    }
    Ok(rows)
}

/// One row per variant and metric: `variant,metric,k,value`.
pub fn write_ablation_csv(path: &Path, rows: &[(String, MetricReport)]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "variant,metric,k,value")?;
    for (label, report) in rows {
        for (k, pair) in &report.per_k {
            writeln!(out, "{label},recall,{k},{}", pair.recall)?;
            writeln!(out, "{label},ndcg,{k},{}", pair.ndcg)?;
        }
    }
    Ok(())
}

/// Companion CSV for a single report.
pub fn write_metrics_csv(path: &Path, report: &MetricReport) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "metric,k,group,value")?;
    for (k, pair) in &report.per_k {
        writeln!(out, "recall,{k},overall,{}", pair.recall)?;
        writeln!(out, "ndcg,{k},overall,{}", pair.ndcg)?;
    }
    if let Some(groups) = &report.groups {
        for (name, metrics) in groups {
            for (k, pair) in &metrics.per_k {
                writeln!(out, "recall,{k},{name},{}", pair.recall)?;
                writeln!(out, "ndcg,{k},{name},{}", pair.ndcg)?;
            }
        }
    }
    Ok(())
}
