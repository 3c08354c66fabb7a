//! Full-catalog top-K ranking evaluation.

use std::cmp::Ordering;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::Serialize;

use crate::data::{Interaction, TrainIndex};
use crate::error::{Error, Result};
use crate::substrate::Dense;

pub const EVAL_BATCH: usize = 1024;

/// `scores[b][i] = ⟨E[users[b]], E[n_users + i]⟩`.
pub fn score_users(e: &Dense<f32>, n_users: usize, users: &[usize]) -> Result<Dense<f32>> {
    if e.rows() < n_users {
        return Err(Error::dim("score_users", format!("{} rows for {n_users} users", e.rows())));
    }
    let items = e.slice_rows(n_users, e.rows());
    e.gather_rows(users)?.matmul_t(&items)
}

// Scores are finite here; `partial_cmp` keeps -0.0 and 0.0 tied.
fn rank_order(scores: &[f32], a: usize, b: usize) -> Ordering {
    scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b))
}

/// Highest-scoring `k` items not in `masked` (sorted), ties to the smaller index.
pub fn top_k(scores: &[f32], masked: &[usize], k: usize) -> Vec<usize> {
    let mut cand: Vec<usize> = (0..scores.len())
        .filter(|i| masked.binary_search(i).is_err())
        .collect();
    let k = k.min(cand.len());
    if k == 0 {
        return Vec::new();
    }
    if k < cand.len() {
        cand.select_nth_unstable_by(k - 1, |&a, &b| rank_order(scores, a, b));
        cand.truncate(k);
    }
    cand.sort_by(|&a, &b| rank_order(scores, a, b));
    cand
}

/// Hits of one user's ranking within the first `k` positions.
pub fn user_recall(ranked: &[usize], relevant: &[usize], k: usize) -> f64 {
    let hits = ranked.iter().take(k).filter(|i| relevant.contains(i)).count();
    hits as f64 / relevant.len() as f64
}

pub fn user_ndcg(ranked: &[usize], relevant: &[usize], k: usize) -> f64 {
    let dcg: f64 = ranked
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, i)| relevant.contains(i))
        .map(|(r, _)| 1.0 / ((r + 2) as f64).log2())
        .sum();
    let idcg: f64 = (0..relevant.len().min(k)).map(|r| 1.0 / ((r + 2) as f64).log2()).sum();
    dcg / idcg
}

fn mean_over_users(
    topk: &[Vec<usize>],
    relevant: &[Vec<usize>],
    k: usize,
    f: fn(&[usize], &[usize], usize) -> f64,
) -> Result<f64> {
    if topk.len() != relevant.len() {
        return Err(Error::dim(
            "ranking metric",
            format!("{} rankings for {} users", topk.len(), relevant.len()),
        ));
    }
    let vals: Vec<f64> = topk
        .iter()
        .zip(relevant)
        .filter(|(_, r)| !r.is_empty())
        .map(|(t, r)| f(t, r, k))
        .collect();
    if vals.is_empty() {
        return Err(Error::UndefinedMetric("no user has a held-out positive".into()));
    }
    Ok(vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Mean Recall@K over users with at least one relevant item.
pub fn recall_at_k(topk: &[Vec<usize>], relevant: &[Vec<usize>], k: usize) -> Result<f64> {
    mean_over_users(topk, relevant, k, user_recall)
}

/// Mean NDCG@K (binary relevance, log₂ discount, ranks from 1).
pub fn ndcg_at_k(topk: &[Vec<usize>], relevant: &[Vec<usize>], k: usize) -> Result<f64> {
    mean_over_users(topk, relevant, k, user_ndcg)
}

/// Relevant items per user from held-out pairs, sorted.
pub fn group_by_user(pairs: &[Interaction], n_users: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new(); n_users];
    for &(u, i) in pairs {
        out[u].push(i);
    }
    for v in &mut out {
        v.sort_unstable();
        v.dedup();
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct UserRanking {
    pub user: usize,
    pub top: Vec<usize>,
    pub relevant: Vec<usize>,
}

/// Rankings of every evaluated user and the metrics derived from them.
#[derive(Clone, Debug, PartialEq)]
pub struct RankingResult {
    pub ks: Vec<usize>,
    pub users: Vec<UserRanking>,
    /// `recall[k_index][user_index]`
    pub recall: Vec<Vec<f64>>,
    pub ndcg: Vec<Vec<f64>>,
}

impl RankingResult {
    fn k_index(&self, k: usize) -> Result<usize> {
        self.ks
            .iter()
            .position(|&x| x == k)
            .ok_or_else(|| Error::Config(format!("K = {k} was not evaluated")))
    }

    pub fn recall(&self, k: usize) -> Result<f64> {
        let v = &self.recall[self.k_index(k)?];
        Ok(v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn ndcg(&self, k: usize) -> Result<f64> {
        let v = &self.ndcg[self.k_index(k)?];
        Ok(v.iter().sum::<f64>() / v.len() as f64)
    }

    /// `metric,K,value,seed` rows.
    pub fn metrics_csv(&self, seed: u64) -> Result<String> {
        let mut s = String::from("metric,K,value,seed\n");
        for &k in &self.ks {
            let _ = writeln!(s, "recall,{k},{},{seed}", self.recall(k)?);
        }
        for &k in &self.ks {
            let _ = writeln!(s, "ndcg,{k},{},{seed}", self.ndcg(k)?);
        }
        Ok(s)
    }

    pub fn per_user_jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for u in &self.users {
            s.push_str(&serde_json::to_string(u)?);
            s.push('\n');
        }
        Ok(s)
    }
}

/// Rank the full catalog for every user with a held-out item, masking
/// training positives, and score Recall@K / NDCG@K for each `k` in `ks`.
pub fn evaluate(
    e: &Dense<f32>,
    train: &TrainIndex,
    held_out: &[Interaction],
    ks: &[usize],
    eval_batch: usize,
) -> Result<RankingResult> {
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::Config(format!("cut-offs must be positive, got {ks:?}")));
    }
    let (nu, ni) = (train.n_users(), train.n_items());
    if e.rows() != nu + ni {
        return Err(Error::dim(
            "evaluate",
            format!("embedding has {} rows, expected {}", e.rows(), nu + ni),
        ));
    }
    if !e.is_finite() {
        return Err(Error::NonFinite("embeddings at evaluation".into()));
    }
    let relevant = group_by_user(held_out, nu);
    let users: Vec<usize> = (0..nu).filter(|&u| !relevant[u].is_empty()).collect();
    if users.is_empty() {
        return Err(Error::UndefinedMetric("no user has a held-out positive".into()));
    }
    let kmax = *ks.iter().max().expect("nonempty");
    let batches: Vec<&[usize]> = users.chunks(eval_batch.max(1)).collect();
    let ranked = batches
        .par_iter()
        .map(|b| {
            let scores = score_users(e, nu, b)?;
            Ok(b.iter()
                .enumerate()
                .map(|(r, &u)| UserRanking {
                    user: u,
                    top: top_k(scores.row(r), train.positives(u), kmax),
                    relevant: relevant[u].clone(),
                })
                .collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;
    let users: Vec<UserRanking> = ranked.into_iter().flatten().collect();
    let per = |f: fn(&[usize], &[usize], usize) -> f64| -> Vec<Vec<f64>> {
        ks.iter()
            .map(|&k| users.iter().map(|u| f(&u.top, &u.relevant, k)).collect())
            .collect()
    };
    Ok(RankingResult {
        ks: ks.to_vec(),
        recall: per(user_recall),
        ndcg: per(user_ndcg),
        users,
    })
}
