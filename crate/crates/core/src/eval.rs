//! Recommendation quality (Recall@k, NDCG@k), forgetting quality (Hit_u@k)
//! and the combined U_β score.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Corpus, ItemId, UnlearnSample};
use crate::model::{rank_of, score_logits, HyperParams, Params};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RankOptions {
    /// Push items already in the prefix to the bottom of the ranking.
    pub exclude_seen: bool,
}

/// 1-based rank of `target` given `prefix`, over all real items.
pub fn rank_target(params: &Params, prefix: &[ItemId], target: ItemId, hp: &HyperParams, opts: RankOptions) -> usize {
    let mut logits = score_logits(params, prefix, hp);
    if opts.exclude_seen {
        for item in prefix {
            if *item != target {
                logits[item.index() - 1] = f64::NEG_INFINITY;
            }
        }
    }
    rank_of(&logits, target)
}

/// Leave-one-out ranks of each test session's final item.
pub fn test_ranks(params: &Params, test: &Corpus, hp: &HyperParams, opts: RankOptions) -> Vec<usize> {
    test.sessions
        .par_iter()
        .map(|s| {
            let n = s.len();
            rank_target(params, &s.items[..n - 1], s.items[n - 1], hp, opts)
        })
        .collect()
}

/// Ranks of each forgotten target given its prefix `v_1..v_{t-1}`.
pub fn forget_ranks(params: &Params, forget: &[UnlearnSample], hp: &HyperParams, opts: RankOptions) -> Vec<usize> {
    forget
        .par_iter()
        .map(|s| rank_target(params, &s.prefix, s.target, hp, opts))
        .collect()
}

pub fn recall_from_ranks(ranks: &[usize], k: usize) -> f64 {
    if ranks.is_empty() {
        return 0.0;
    }
    ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64
}

/// Single relevant item: gain `1 / log2(rank + 1)` inside the top `k`.
pub fn ndcg_from_ranks(ranks: &[usize], k: usize) -> f64 {
    if ranks.is_empty() {
        return 0.0;
    }
    ranks
        .iter()
        .map(|&r| if r <= k { 1.0 / ((r + 1) as f64).log2() } else { 0.0 })
        .sum::<f64>()
        / ranks.len() as f64
}

pub fn recall_at_k(params: &Params, test: &Corpus, hp: &HyperParams, k: usize) -> f64 {
    recall_from_ranks(&test_ranks(params, test, hp, RankOptions::default()), k)
}

pub fn ndcg_at_k(params: &Params, test: &Corpus, hp: &HyperParams, k: usize) -> f64 {
    ndcg_from_ranks(&test_ranks(params, test, hp, RankOptions::default()), k)
}

/// Share of forgotten targets still ranked in the top `k`; lower is better.
pub fn hit_u_at_k(params: &Params, forget: &[UnlearnSample], hp: &HyperParams, k: usize) -> f64 {
    recall_from_ranks(&forget_ranks(params, forget, hp, RankOptions::default()), k)
}

/// `(1+β²)·R·(1−H) / (β²·R + (1−H))`, defined as 0 when the denominator is 0.
pub fn u_beta(recall: f64, hit_u: f64, beta: f64) -> f64 {
    let keep = 1.0 - hit_u;
    let b2 = beta * beta;
    let denom = b2 * recall + keep;
    if denom <= 0.0 {
        return 0.0;
    }
    (1.0 + b2) * recall * keep / denom
}

/// Recall@10 of always recommending the `k` most frequent training items.
pub fn popularity_recall(train: &Corpus, test: &Corpus, k: usize) -> f64 {
    let mut counts = vec![0usize; train.item_count + 1];
    for s in &train.sessions {
        for item in &s.items {
            counts[item.index()] += 1;
        }
    }
    let mut items: Vec<usize> = (1..=train.item_count).collect();
    items.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    let top: std::collections::HashSet<usize> = items.into_iter().take(k).collect();
    if test.is_empty() {
        return 0.0;
    }
    test.sessions
        .iter()
        .filter(|s| top.contains(&s.items[s.len() - 1].index()))
        .count() as f64
        / test.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub recall_10: f64,
    pub recall_20: f64,
    pub ndcg_10: f64,
    pub ndcg_20: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub hit_u_1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub hit_u_5: Option<f64>,
    /// Combines Recall@10 and Hit_u@1.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub u_beta: Option<f64>,
    pub beta: f64,
    pub test_positions: usize,
    pub unlearn_samples: usize,
}

/// All metrics for one parameter snapshot.
pub fn report(
    params: &Params,
    hp: &HyperParams,
    test: &Corpus,
    forget: &[UnlearnSample],
    beta: f64,
    opts: RankOptions,
) -> MetricsReport {
    let ranks = test_ranks(params, test, hp, opts);
    let recall_10 = recall_from_ranks(&ranks, 10);
    let (hit_u_1, hit_u_5, u) = if forget.is_empty() {
        (None, None, None)
    } else {
        let fr = forget_ranks(params, forget, hp, opts);
        let h1 = recall_from_ranks(&fr, 1);
        (Some(h1), Some(recall_from_ranks(&fr, 5)), Some(u_beta(recall_10, h1, beta)))
    };
    MetricsReport {
        recall_10,
        recall_20: recall_from_ranks(&ranks, 20),
        ndcg_10: ndcg_from_ranks(&ranks, 10),
        ndcg_20: ndcg_from_ranks(&ranks, 20),
        hit_u_1,
        hit_u_5,
        u_beta: u,
        beta,
        test_positions: ranks.len(),
        unlearn_samples: forget.len(),
    }
}

impl MetricsReport {
    /// `(metric, k, value)` rows for CSV output.
    pub fn rows(&self) -> Vec<(&'static str, Option<usize>, f64)> {
        let mut rows = vec![
            ("recall", Some(10), self.recall_10),
            ("recall", Some(20), self.recall_20),
            ("ndcg", Some(10), self.ndcg_10),
            ("ndcg", Some(20), self.ndcg_20),
        ];
        if let Some(v) = self.hit_u_1 {
            rows.push(("hit_u", Some(1), v));
        }
        if let Some(v) = self.hit_u_5 {
            rows.push(("hit_u", Some(5), v));
        }
        if let Some(v) = self.u_beta {
            rows.push(("u_beta", None, v));
        }
        rows
    }

    /// `run_id,metric,k,value` lines (no header).
    pub fn csv_lines(&self, run_id: &str) -> String {
        self.rows()
            .into_iter()
            .map(|(metric, k, v)| {
                let k = k.map(|k| k.to_string()).unwrap_or_default();
                format!("{run_id},{metric},{k},{v}\n")
            })
            .collect()
    }
}
