//! Shared test oracles, written independently of the library internals.

use std::collections::BTreeSet;

/// Reference ranking: selection sort on (descending score, ascending id).
pub fn reference_rank(candidates: &[u32], scores: &[f64]) -> Vec<u32> {
    let mut remaining: Vec<(u32, f64)> =
        candidates.iter().copied().zip(scores.iter().copied()).collect();
    let mut out = Vec::with_capacity(remaining.len());
    while !remaining.is_empty() {
        let mut best = 0;
        for i in 1..remaining.len() {
            let (id_b, s_b) = remaining[best];
            let (id_i, s_i) = remaining[i];
            if s_i > s_b || (s_i == s_b && id_i < id_b) {
                best = i;
            }
        }
        out.push(remaining.remove(best).0);
    }
    out
}

/// Reference recall: hits in the first k positions over the relevant size.
pub fn reference_recall(ranking: &[u32], relevant: &BTreeSet<u32>, k: usize) -> f64 {
    let mut hits = 0usize;
    for (pos, item) in ranking.iter().enumerate() {
        if pos >= k {
            break;
        }
        if relevant.contains(item) {
            hits += 1;
        }
    }
    hits as f64 / relevant.len() as f64
}

/// Reference NDCG with binary gains and `1/log2(rank+1)` discounts.
pub fn reference_ndcg(ranking: &[u32], relevant: &BTreeSet<u32>, k: usize) -> f64 {
    let mut dcg = 0.0;
    for (pos, item) in ranking.iter().enumerate() {
        if pos >= k {
            break;
        }
        if relevant.contains(item) {
            let rank = pos + 1;
            dcg += 1.0 / ((rank + 1) as f64).log2();
        }
    }
    let mut idcg = 0.0;
    for rank in 1..=relevant.len().min(k) {
        idcg += 1.0 / ((rank + 1) as f64).log2();
    }
    if idcg == 0.0 {
        0.0
    } else {
        dcg / idcg
    }
}
