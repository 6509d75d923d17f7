//! Top-K evaluation: full ranking over non-excluded items, Recall@K and
//! NDCG@K with binary relevance, per-aspect contribution and aspect-count
//! sweeps.

use std::collections::{BTreeMap, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::SplitSpec;
use crate::graphs::{build_graphs, AspectInteractionStore, GraphError, NormalizedAspectGraph};
use crate::model::{forward, EmbeddingTable, ForwardCache, ModelConfig, ModelError};
use crate::trainer::{train, TrainConfig, TrainError};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("aspect subset is empty")]
    EmptySubset,
    #[error("aspect index {0} out of range")]
    NoSuchAspect(usize),
    #[error("requested {requested} aspects but only {available} exist")]
    TooManyAspects { requested: usize, available: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

/// One user's top of the ranking and held-out targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserRanking {
    pub user: usize,
    pub items: Vec<usize>,
    pub scores: Vec<f64>,
    /// Held-out items, sorted.
    pub targets: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RankingResult {
    pub users: Vec<UserRanking>,
}

/// Which interactions are hidden from the candidate list and which are the
/// targets.
#[derive(Debug, Clone)]
pub struct EvalProtocol {
    pub exclude: Vec<Vec<usize>>,
    pub targets: Vec<Vec<usize>>,
}

impl EvalProtocol {
    /// Rank without train and validation items, score against test.
    pub fn test(split: &SplitSpec, num_users: usize) -> Self {
        let mut exclude = SplitSpec::by_user(&split.train, num_users);
        for (u, v) in SplitSpec::by_user(&split.validation, num_users).into_iter().enumerate() {
            exclude[u].extend(v);
            exclude[u].sort_unstable();
        }
        Self {
            exclude,
            targets: SplitSpec::by_user(&split.test, num_users),
        }
    }

    /// Rank without train items, score against validation.
    pub fn validation(split: &SplitSpec, num_users: usize) -> Self {
        Self {
            exclude: SplitSpec::by_user(&split.train, num_users),
            targets: SplitSpec::by_user(&split.validation, num_users),
        }
    }
}

/// Order by score descending, then item index ascending.
fn rank_order(scores: &[f64]) -> impl Fn(&usize, &usize) -> std::cmp::Ordering + '_ {
    move |&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b))
}

/// Top-`k` candidates by partial selection.
pub fn top_k(scores: &[f64], exclude: &[usize], k: usize) -> Vec<usize> {
    let excluded: HashSet<usize> = exclude.iter().copied().collect();
    let mut cand: Vec<usize> = (0..scores.len()).filter(|i| !excluded.contains(i)).collect();
    let cmp = rank_order(scores);
    if k < cand.len() {
        cand.select_nth_unstable_by(k, &cmp);
        cand.truncate(k);
    }
    cand.sort_unstable_by(&cmp);
    cand
}

/// Rank all non-excluded items for every user with targets, counting only
/// aspects where `mask[a]` is set.
pub fn rank_all_masked(cache: &ForwardCache, protocol: &EvalProtocol, k: usize, mask: &[bool]) -> RankingResult {
    let users: Vec<usize> = (0..cache.num_users())
        .filter(|&u| protocol.targets.get(u).is_some_and(|t| !t.is_empty()))
        .collect();
    let users = users
        .par_iter()
        .map(|&u| {
            let scores = cache.user_scores(u, mask);
            let items = top_k(&scores, &protocol.exclude[u], k);
            UserRanking {
                user: u,
                scores: items.iter().map(|&i| scores[i]).collect(),
                items,
                targets: protocol.targets[u].clone(),
            }
        })
        .collect();
    RankingResult { users }
}

pub fn rank_all(cache: &ForwardCache, protocol: &EvalProtocol, k: usize) -> RankingResult {
    rank_all_masked(cache, protocol, k, &vec![true; cache.num_aspects()])
}

fn hits(r: &UserRanking, k: usize) -> impl Iterator<Item = usize> + '_ {
    r.items
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, i)| r.targets.binary_search(i).is_ok())
        .map(|(rank, _)| rank + 1)
}

/// Mean over users of `|top-k ∩ targets| / |targets|`.
pub fn recall_at_k(result: &RankingResult, k: usize) -> f64 {
    mean(result.users.iter().filter(|r| !r.targets.is_empty()).map(|r| {
        hits(r, k).count() as f64 / r.targets.len() as f64
    }))
}

/// Mean over users of DCG/IDCG with binary gains, IDCG truncated at
/// `min(k, |targets|)`.
pub fn ndcg_at_k(result: &RankingResult, k: usize) -> f64 {
    mean(result.users.iter().filter(|r| !r.targets.is_empty()).map(|r| {
        let dcg: f64 = hits(r, k).map(|rank| 1.0 / ((rank + 1) as f64).log2()).sum();
        let idcg: f64 = (1..=k.min(r.targets.len()))
            .map(|rank| 1.0 / ((rank + 1) as f64).log2())
            .sum();
        if idcg > 0.0 {
            dcg / idcg
        } else {
            0.0
        }
    }))
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = it.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricReport {
    pub recall_at: BTreeMap<usize, f64>,
    pub ndcg_at: BTreeMap<usize, f64>,
    pub num_eval_users: usize,
}

impl MetricReport {
    pub fn from_ranking(result: &RankingResult, ks: &[usize]) -> Self {
        Self {
            recall_at: ks.iter().map(|&k| (k, recall_at_k(result, k))).collect(),
            ndcg_at: ks.iter().map(|&k| (k, ndcg_at_k(result, k))).collect(),
            num_eval_users: result.users.iter().filter(|r| !r.targets.is_empty()).count(),
        }
    }

    pub fn recall(&self, k: usize) -> f64 {
        self.recall_at.get(&k).copied().unwrap_or(f64::NAN)
    }

    pub fn ndcg(&self, k: usize) -> f64 {
        self.ndcg_at.get(&k).copied().unwrap_or(f64::NAN)
    }
}

pub fn evaluate(cache: &ForwardCache, protocol: &EvalProtocol, ks: &[usize]) -> MetricReport {
    evaluate_masked(cache, protocol, ks, &vec![true; cache.num_aspects()])
}

pub fn evaluate_masked(cache: &ForwardCache, protocol: &EvalProtocol, ks: &[usize], mask: &[bool]) -> MetricReport {
    let kmax = ks.iter().copied().max().unwrap_or(0);
    MetricReport::from_ranking(&rank_all_masked(cache, protocol, kmax, mask), ks)
}

/// Test metrics using only the chosen aspect blocks in the score.
pub fn aspect_contribution(
    table: &EmbeddingTable,
    graphs: &NormalizedAspectGraph,
    model: &ModelConfig,
    protocol: &EvalProtocol,
    aspect_subset: &[usize],
    ks: &[usize],
) -> Result<MetricReport, EvalError> {
    if aspect_subset.is_empty() {
        return Err(EvalError::EmptySubset);
    }
    let mut mask = vec![false; graphs.num_aspects()];
    for &a in aspect_subset {
        *mask.get_mut(a).ok_or(EvalError::NoSuchAspect(a))? = true;
    }
    let cache = forward(table, graphs, model.num_layers, model.include_layer0_block)?;
    Ok(evaluate_masked(&cache, protocol, ks, &mask))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub n: usize,
    pub aspects: Vec<String>,
    pub report: MetricReport,
}

/// Train and test with the top-`n` aspects (by interaction count) for each
/// `n` in `n_values`.
pub fn aspect_count_sweep(
    store: &AspectInteractionStore,
    split: &SplitSpec,
    model: &ModelConfig,
    train_config: &TrainConfig,
    n_values: &[usize],
    ks: &[usize],
) -> Result<Vec<SweepRow>, EvalError> {
    let ranked = store.ranked_by_edge_count();
    if let Some(&n) = n_values.iter().find(|&&n| n > ranked.len() || n == 0) {
        return Err(EvalError::TooManyAspects {
            requested: n,
            available: ranked.len(),
        });
    }
    let protocol = EvalProtocol::test(split, store.num_users());
    let mut rows = Vec::with_capacity(n_values.len());
    for &n in n_values {
        let sub = store.select(&ranked[..n])?;
        let graphs = build_graphs(&sub, &split.train);
        let cfg = ModelConfig {
            num_aspects: n,
            ..model.clone()
        };
        let outcome = train(split, &graphs, &cfg, train_config, |_| {})?;
        let cache = forward(&outcome.table, &graphs, cfg.num_layers, cfg.include_layer0_block)?;
        rows.push(SweepRow {
            n,
            aspects: sub.aspect_names().to_vec(),
            report: evaluate(&cache, &protocol, ks),
        });
    }
    Ok(rows)
}

pub fn sweep_to_csv(rows: &[SweepRow], ks: &[usize]) -> String {
    let mut out = String::from("n,aspects,num_eval_users");
    for k in ks {
        out.push_str(&format!(",recall@{k},ndcg@{k}"));
    }
    out.push('\n');
    for r in rows {
        out.push_str(&format!("{},{},{}", r.n, r.aspects.join("|"), r.report.num_eval_users));
        for &k in ks {
            out.push_str(&format!(",{:.6},{:.6}", r.report.recall(k), r.report.ndcg(k)));
        }
        out.push('\n');
    }
    out
}

/// `A × A` cosine matrix as CSV, `nan` for undefined entries.
pub fn independence_to_csv(names: &[String], m: &ndarray::Array2<f64>) -> String {
    let mut out = String::from("aspect");
    for n in names {
        out.push(',');
        out.push_str(n);
    }
    out.push('\n');
    for (p, n) in names.iter().enumerate() {
        out.push_str(n);
        for q in 0..names.len() {
            let v = m[[p, q]];
            if v.is_nan() {
                out.push_str(",nan");
            } else {
                out.push_str(&format!(",{v:.6}"));
            }
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ranking(items: Vec<usize>, targets: Vec<usize>) -> RankingResult {
        RankingResult {
            users: vec![UserRanking {
                user: 0,
                scores: vec![0.0; items.len()],
                items,
                targets,
            }],
        }
    }

    #[test]
    fn single_hit_at_top() {
        let r = ranking(vec![4, 1, 2], vec![4]);
        assert_eq!(recall_at_k(&r, 10), 1.0);
        assert_eq!(ndcg_at_k(&r, 10), 1.0);
    }

    #[test]
    fn half_recall_and_worked_ndcg() {
        let r = ranking(vec![1, 5, 6, 7], vec![1, 2]);
        assert_eq!(recall_at_k(&r, 10), 0.5);
        let expected = 1.0 / (1.0 + 1.0 / 3f64.log2());
        assert!((ndcg_at_k(&r, 10) - expected).abs() < 1e-15);
        assert!((ndcg_at_k(&r, 10) - 0.61315).abs() < 5e-6);
    }

    #[test]
    fn ideal_order_is_one() {
        let r = ranking(vec![3, 9, 8, 0], vec![3, 8, 9]);
        assert!((ndcg_at_k(&r, 10) - 1.0).abs() < 1e-15);
        assert!((ndcg_at_k(&r, 2) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn empty_targets_are_excluded_from_average() {
        let mut r = ranking(vec![1], vec![1]);
        r.users.push(UserRanking {
            user: 1,
            items: vec![2],
            scores: vec![0.0],
            targets: vec![],
        });
        assert_eq!(recall_at_k(&r, 1), 1.0);
        assert_eq!(MetricReport::from_ranking(&r, &[1]).num_eval_users, 1);
    }

    #[test]
    fn ties_break_by_index_and_exclusions_hold() {
        let scores = [0.5, 0.9, 0.9, 0.1, 0.9];
        assert_eq!(top_k(&scores, &[], 3), vec![1, 2, 4]);
        assert_eq!(top_k(&scores, &[2], 3), vec![1, 4, 0]);
        assert_eq!(top_k(&scores, &[0, 1, 2, 4], 3), vec![3]);
    }

    #[test]
    fn partial_selection_agrees_with_full_sort() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let m = rng.random_range(1..40);
            let scores: Vec<f64> = (0..m).map(|_| (rng.random_range(0..6) as f64) / 2.0).collect();
            let exclude: Vec<usize> = (0..m).filter(|_| rng.random_bool(0.3)).collect();
            let k = rng.random_range(0..m + 3);
            let mut full: Vec<usize> = (0..m).filter(|i| !exclude.contains(i)).collect();
            full.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
            full.truncate(k);
            assert_eq!(top_k(&scores, &exclude, k), full);
        }
    }
}
