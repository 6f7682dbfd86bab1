//! Full-ranking leave-one-out evaluation: Recall@K and NDCG@K with a single
//! held-out item per user.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{InteractionDataset, Split};
use crate::model::FinalEmbeddings;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub k: usize,
    pub recall_at_k: f64,
    pub ndcg_at_k: f64,
    pub users_evaluated: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ranks: Option<Vec<usize>>,
}

/// 1-based rank of `target` among the candidate items.
///
/// Candidates are all items not listed in `excluded` (sorted) and not equal
/// to `also_excluded`. Items scoring strictly higher rank ahead; equal
/// scores rank ahead when their item index is smaller.
pub fn rank_among(scores: &[f64], excluded: &[u32], also_excluded: Option<u32>, target: u32) -> usize {
    let t = target as usize;
    let st = scores[t];
    let mut ahead = 0usize;
    for (c, &sc) in scores.iter().enumerate() {
        if c == t || !(sc > st || (sc == st && c < t)) {
            continue;
        }
        let c32 = c as u32;
        if also_excluded == Some(c32) || excluded.binary_search(&c32).is_ok() {
            continue;
        }
        ahead += 1;
    }
    ahead + 1
}

/// Rank of the user's held-out item. Train items are never candidates; the
/// validation item is also removed when ranking the test item.
pub fn rank_heldout(emb: &FinalEmbeddings, dataset: &InteractionDataset, user: usize, split: Split) -> usize {
    let scores = emb.all_scores(user);
    let scores = scores.as_slice().expect("contiguous scores");
    let also = match split {
        Split::Validation => None,
        Split::Test => Some(dataset.validation()[user]),
    };
    rank_among(scores, dataset.train_items(user), also, dataset.heldout(split)[user])
}

/// Ranks for every user, in user order.
pub fn heldout_ranks(emb: &FinalEmbeddings, dataset: &InteractionDataset, split: Split) -> Vec<usize> {
    (0..dataset.num_users())
        .into_par_iter()
        .map(|u| rank_heldout(emb, dataset, u, split))
        .collect()
}

pub fn ndcg_for_rank(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    }
}

pub fn report_from_ranks(ranks: &[usize], k: usize, keep_ranks: bool) -> EvalReport {
    let n = ranks.len();
    let hits = ranks.iter().filter(|&&r| r <= k).count();
    let ndcg: f64 = ranks.iter().map(|&r| ndcg_for_rank(r, k)).sum();
    EvalReport {
        k,
        recall_at_k: if n == 0 { 0.0 } else { hits as f64 / n as f64 },
        ndcg_at_k: if n == 0 { 0.0 } else { ndcg / n as f64 },
        users_evaluated: n,
        ranks: keep_ranks.then(|| ranks.to_vec()),
    }
}

pub fn evaluate(emb: &FinalEmbeddings, dataset: &InteractionDataset, k: usize, split: Split) -> EvalReport {
    report_from_ranks(&heldout_ranks(emb, dataset, split), k, false)
}

/// One report per cutoff, ranking each user once.
pub fn evaluate_at(emb: &FinalEmbeddings, dataset: &InteractionDataset, ks: &[usize], split: Split) -> Vec<EvalReport> {
    let ranks = heldout_ranks(emb, dataset, split);
    ks.iter().map(|&k| report_from_ranks(&ranks, k, false)).collect()
}

/// Aligned plain-text table: one row per method, Recall@K / NDCG@K columns
/// per cutoff, under a dataset heading.
pub fn format_table(dataset_name: &str, rows: &[(String, Option<Vec<EvalReport>>)]) -> String {
    let ks: Vec<usize> = rows
        .iter()
        .find_map(|(_, r)| r.as_ref())
        .map(|r| r.iter().map(|e| e.k).collect())
        .unwrap_or_default();
    let mut header = vec!["Method".to_string()];
    for k in &ks {
        header.push(format!("Recall@{k}"));
        header.push(format!("NDCG@{k}"));
    }
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|(name, reports)| {
            let mut line = vec![name.clone()];
            match reports {
                Some(reports) => {
                    for r in reports {
                        line.push(format!("{:.5}", r.recall_at_k));
                        line.push(format!("{:.5}", r.ndcg_at_k));
                    }
                }
                None => line.extend(std::iter::repeat_n("FAILED".to_string(), 2 * ks.len())),
            }
            line
        })
        .collect();
    let cols = header.len();
    let widths: Vec<usize> = (0..cols)
        .map(|c| {
            std::iter::once(&header)
                .chain(body.iter())
                .map(|l| l.get(c).map_or(0, |s| s.chars().count()))
                .max()
                .unwrap_or(0)
        })
        .collect();
    let render = |line: &[String]| {
        line.iter()
            .enumerate()
            .map(|(c, s)| format!("{s:<w$}", w = widths[c]))
            .collect::<Vec<_>>()
            .join(" | ")
            .trim_end()
            .to_string()
    };
    let total: usize = widths.iter().sum::<usize>() + 3 * cols.saturating_sub(1);
    let rule = "-".repeat(total);
    let mut out = String::new();
    out.push_str(&format!(
        "Dataset: {dataset_name}\n{rule}\n{}\n{rule}\n",
        render(&header)
    ));
    for line in &body {
        out.push_str(&render(line));
        out.push('\n');
    }
    out.push_str(&rule);
    out.push('\n');
    out
}
