//! Sampled-negative leave-one-out ranking metrics.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::index;
use rand::Rng;
use serde::Serialize;
use thiserror::Error;

use crate::data::{PreparedDataset, Split};
use crate::exec::{self, Execution};
use crate::model::{ModelError, ScoringContext, TeaModel, Variant};
use crate::rng;

pub const DEFAULT_KS: [usize; 3] = [5, 10, 20];
pub const DEFAULT_EVAL_NEGATIVES: usize = 100;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("need at least 2 items to sample negatives, have {0}")]
    TooFewItems(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("scorer returned {found} scores for {expected} candidates")]
    ScoreCount { expected: usize, found: usize },
    #[error("non-finite score for user {0}")]
    NonFinite(u32),
    #[error("no users to evaluate")]
    NoUsers,
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
    pub n_negatives: usize,
    pub seed: u64,
    pub exec: Execution,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            ks: DEFAULT_KS.to_vec(),
            n_negatives: DEFAULT_EVAL_NEGATIVES,
            seed: 42,
            exec: Execution::default(),
        }
    }
}

/// Truth first, then up to `n_neg` distinct negatives drawn without
/// replacement. Fewer items than requested gives every other item.
pub fn build_candidates<R: Rng>(truth: u32, n_items: usize, n_neg: usize, rng: &mut R) -> Result<Vec<u32>, EvalError> {
    if n_items < 2 {
        return Err(EvalError::TooFewItems(n_items));
    }
    let pool = n_items - 1;
    let take = n_neg.min(pool);
    let mut out = Vec::with_capacity(take + 1);
    out.push(truth);
    for i in index::sample(rng, pool, take).into_iter() {
        let item = i as u32;
        out.push(if item >= truth { item + 1 } else { item });
    }
    Ok(out)
}

/// 1-based rank of `scores[truth]`; every other candidate scoring at least
/// as high counts against it.
pub fn rank(scores: &[f64], truth: usize) -> usize {
    let t = scores[truth];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(i, &s)| i != truth && s >= t)
        .count()
}

pub fn hr_at_k(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0
    } else {
        0.0
    }
}

pub fn ndcg_at_k(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MetricAtK {
    pub k: usize,
    pub hr: f64,
    pub ndcg: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct UserRank {
    pub user: u32,
    pub rank: usize,
    pub candidates: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub split: Split,
    pub variant: Option<Variant>,
    pub seed: u64,
    pub n_users: usize,
    /// Candidates per user, truth included.
    pub candidate_set_size: usize,
    /// Set when the catalog was too small for the requested negatives.
    pub reduced_candidates: bool,
    pub metrics: Vec<MetricAtK>,
    pub rank_histogram: BTreeMap<usize, usize>,
    pub config: serde_json::Value,
    pub wall_clock_secs: f64,
    #[serde(skip)]
    pub ranks: Vec<UserRank>,
}

impl EvalReport {
    pub fn metric(&self, k: usize) -> Option<MetricAtK> {
        self.metrics.iter().copied().find(|m| m.k == k)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn write_json(&self, path: &Path) -> io::Result<()> {
        fs::write(path, self.to_json() + "\n")
    }

    /// `user_id,rank` with raw user ids.
    pub fn write_ranks_csv(&self, path: &Path, ds: &PreparedDataset) -> io::Result<()> {
        let mut out = io::BufWriter::new(fs::File::create(path)?);
        writeln!(out, "user_id,rank")?;
        for r in &self.ranks {
            writeln!(out, "{},{}", ds.user_ids.decode(r.user), r.rank)?;
        }
        out.flush()
    }
}

fn split_tag(split: Split) -> u64 {
    match split {
        Split::Validation => 0,
        Split::Test => 1,
    }
}

/// Evaluates an arbitrary scorer. `scorer` gets the pre-target context and
/// the candidates and returns one score per candidate, higher is better.
pub fn evaluate_with_scorer<F>(ds: &PreparedDataset, split: Split, cfg: &EvalConfig, scorer: F) -> Result<EvalReport, EvalError>
where
    F: Fn(&ScoringContext<'_>, &[u32]) -> Result<Vec<f64>, ModelError> + Sync,
{
    if ds.n_users == 0 {
        return Err(EvalError::NoUsers);
    }
    let start = Instant::now();
    let users: Vec<u32> = (0..ds.n_users as u32).collect();
    let results = exec::map(cfg.exec, &users, |&u| -> Result<UserRank, EvalError> {
        let (ctx, truth) = ScoringContext::evaluation(ds, u, split, ds.config.max_seq_len);
        let mut r = rng::stream(cfg.seed, &[rng::domain::EVAL, split_tag(split), u as u64]);
        let candidates = build_candidates(truth, ds.n_items, cfg.n_negatives, &mut r)?;
        let scores = scorer(&ctx, &candidates)?;
        if scores.len() != candidates.len() {
            return Err(EvalError::ScoreCount {
                expected: candidates.len(),
                found: scores.len(),
            });
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(EvalError::NonFinite(u));
        }
        Ok(UserRank {
            user: u,
            rank: rank(&scores, 0),
            candidates: candidates.len(),
        })
    });
    let ranks = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    let n = ranks.len() as f64;
    let metrics = cfg
        .ks
        .iter()
        .map(|&k| MetricAtK {
            k,
            hr: ranks.iter().map(|r| hr_at_k(r.rank, k)).sum::<f64>() / n,
            ndcg: ranks.iter().map(|r| ndcg_at_k(r.rank, k)).sum::<f64>() / n,
        })
        .collect();
    let mut rank_histogram = BTreeMap::new();
    for r in &ranks {
        *rank_histogram.entry(r.rank).or_insert(0) += 1;
    }
    let candidate_set_size = cfg.n_negatives.min(ds.n_items.saturating_sub(1)) + 1;
    Ok(EvalReport {
        split,
        variant: None,
        seed: cfg.seed,
        n_users: ranks.len(),
        candidate_set_size,
        reduced_candidates: candidate_set_size < cfg.n_negatives + 1,
        metrics,
        rank_histogram,
        config: serde_json::Value::Null,
        wall_clock_secs: start.elapsed().as_secs_f64(),
        ranks,
    })
}

/// Raw `f + g` ranking of every user's held-out item in `split`.
pub fn evaluate_all(model: &TeaModel, ds: &PreparedDataset, split: Split, cfg: &EvalConfig) -> Result<EvalReport, EvalError> {
    let mut report = evaluate_with_scorer(ds, split, cfg, |ctx, cands| model.score_candidates(ctx, cands))?;
    report.variant = Some(model.spec.variant);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::testutil::rng;

    #[test]
    fn candidates_full_catalog() {
        let mut r = rng(1);
        let c = build_candidates(17, 1000, 100, &mut r).unwrap();
        assert_eq!(c.len(), 101);
        assert_eq!(c.iter().filter(|&&i| i == 17).count(), 1);
        let mut sorted = c.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 101);
        assert!(c.iter().all(|&i| i < 1000));
        assert_eq!(c, build_candidates(17, 1000, 100, &mut rng(1)).unwrap());
    }

    #[test]
    fn candidates_small_catalog() {
        let c = build_candidates(3, 50, 100, &mut rng(2)).unwrap();
        assert_eq!(c.len(), 50);
        let mut s = c.clone();
        s.sort_unstable();
        assert_eq!(s, (0..50).collect::<Vec<u32>>());
        assert!(matches!(build_candidates(0, 1, 5, &mut rng(2)), Err(EvalError::TooFewItems(1))));
    }

    #[test]
    fn rank_examples() {
        assert_eq!(rank(&[0.9, 0.1, 0.5], 0), 1);
        assert_eq!(rank(&[1.0, 1.0, 1.0, 1.0, 0.2], 0), 4);
        assert_eq!(rank(&[0.0; 101], 0), 101);
    }

    #[test]
    fn metric_examples() {
        assert_eq!((hr_at_k(1, 5), ndcg_at_k(1, 5)), (1.0, 1.0));
        assert_eq!((hr_at_k(3, 10), ndcg_at_k(3, 10)), (1.0, 0.5));
        assert_eq!((hr_at_k(11, 10), ndcg_at_k(11, 10)), (0.0, 0.0));
        assert_eq!(hr_at_k(10, 10), 1.0);
        assert_eq!(ndcg_at_k(21, 20), 0.0);
    }

    proptest! {
        #[test]
        fn rank_matches_sort_oracle(scores in prop::collection::vec(prop::sample::select(vec![0.0, 0.25, 0.5, 1.0, 2.0]), 1..40), t in 0usize..40) {
            let t = t % scores.len();
            // sort descending with the truth placed after every equal score
            let mut idx: Vec<usize> = (0..scores.len()).collect();
            idx.sort_by(|&a, &b| {
                scores[b].partial_cmp(&scores[a]).unwrap().then((a == t).cmp(&(b == t)))
            });
            let oracle = idx.iter().position(|&i| i == t).unwrap() + 1;
            prop_assert_eq!(rank(&scores, t), oracle);
        }

        #[test]
        fn ranking_is_shift_invariant(scores in prop::collection::vec(-5i32..5, 2..30), c in -100i32..100) {
            let s: Vec<f64> = scores.iter().map(|&v| v as f64).collect();
            let shifted: Vec<f64> = s.iter().map(|v| v + c as f64).collect();
            prop_assert_eq!(rank(&s, 0), rank(&shifted, 0));
        }

        #[test]
        fn metrics_ordered(rank in 1usize..200, k in 1usize..50) {
            prop_assert!(ndcg_at_k(rank, k) <= hr_at_k(rank, k));
            prop_assert!(hr_at_k(rank, k) <= hr_at_k(rank, k + 1));
            prop_assert!(ndcg_at_k(rank, k) <= ndcg_at_k(rank, k + 1));
        }
    }
}
