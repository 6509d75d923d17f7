//! Pure-LLM ranking baseline: ask the model to rate candidates given the
//! user's history, then sort by the ratings it returns.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::backend::{request_hash, BackendError, LlmBackend};
use super::prompts::{parse_rank_prompt_candidates, parse_rating_lines, rank_prompt};
use crate::corpus::{IdMaps, InteractionRecord, SplitSpec};
use crate::eval::{MetricReport, RankingResult, UserRanking};
use crate::util::mix_seed;

/// Rank `candidates` (`(title, item_id)`) by the ratings the backend gives.
///
/// Sorted by rating descending, ties in response order. Candidates the
/// response does not mention get rating 0 and follow in candidate order.
pub fn llm_rank_baseline(
    history: &[(String, f64)],
    candidates: &[(String, String)],
    backend: &dyn LlmBackend,
) -> Result<Vec<String>, BackendError> {
    let response = backend.complete(&rank_prompt(history, candidates))?;
    Ok(rank_from_response(&response, candidates))
}

pub fn rank_from_response(response: &str, candidates: &[(String, String)]) -> Vec<String> {
    let mut rated: Vec<(String, f64)> = Vec::with_capacity(candidates.len());
    for (id, rating) in parse_rating_lines(response) {
        let known = candidates.iter().any(|(_, c)| *c == id);
        if known && !rated.iter().any(|(r, _)| *r == id) {
            rated.push((id, rating));
        }
    }
    for (_, id) in candidates {
        if !rated.iter().any(|(r, _)| r == id) {
            rated.push((id.clone(), 0.0));
        }
    }
    // stable sort keeps response order among equal ratings
    rated.sort_by(|a, b| b.1.total_cmp(&a.1));
    rated.into_iter().map(|(id, _)| id).collect()
}

fn rating_response(ids_and_ratings: &[(String, f64)]) -> String {
    ids_and_ratings
        .iter()
        .enumerate()
        .map(|(k, (id, r))| format!("{}. Item (item id: {id}) - Rating: {r:.1} stars", k + 1))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Mock responder that lists the candidates in a random order with random
/// ratings, seeded by the prompt so it is reproducible.
pub fn random_rater(prompt: &str) -> String {
    let ids = parse_rank_prompt_candidates(prompt).unwrap_or_default();
    let seed = u64::from_str_radix(&request_hash("random", prompt)[..16], 16).unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ids = ids;
    ids.shuffle(&mut rng);
    let rated: Vec<(String, f64)> = ids
        .into_iter()
        .map(|id| {
            let r = rng.random_range(1..=50) as f64 / 10.0;
            (id, r)
        })
        .collect();
    rating_response(&rated)
}

/// Mock responder that rates `positives` 5.0 and everything else 1.0.
pub fn oracle_rater(positives: Vec<String>) -> impl Fn(&str) -> String + Send + Sync + 'static {
    move |prompt| {
        let ids = parse_rank_prompt_candidates(prompt).unwrap_or_default();
        let rated: Vec<(String, f64)> = ids
            .into_iter()
            .map(|id| {
                let r = if positives.contains(&id) { 5.0 } else { 1.0 };
                (id, r)
            })
            .collect();
        rating_response(&rated)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LlmRankConfig {
    pub num_users: usize,
    pub num_negatives: usize,
    pub ks: Vec<usize>,
    pub seed: u64,
}

impl Default for LlmRankConfig {
    fn default() -> Self {
        Self {
            num_users: 200,
            num_negatives: 9,
            ks: vec![1, 3, 5, 7],
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmRankFailure {
    pub user: usize,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmRankReport {
    pub metrics: MetricReport,
    pub users: Vec<usize>,
    pub failures: Vec<LlmRankFailure>,
}

/// Sample users, build one held-out positive plus `num_negatives` unseen
/// items per user, and score the backend's ordering.
///
/// History is the user's training interactions with ratings; the positive is
/// drawn from the user's test items. `title` maps an item index to display
/// text. A failed call is recorded and the user is left out of the metrics.
pub fn run_llm_rank(
    records: &[InteractionRecord],
    split: &SplitSpec,
    ids: &IdMaps,
    config: &LlmRankConfig,
    title: &dyn Fn(usize) -> String,
    backend: &dyn LlmBackend,
) -> LlmRankReport {
    let num_users = ids.num_users();
    let num_items = ids.num_items();
    let train = SplitSpec::by_user(&split.train, num_users);
    let test = SplitSpec::by_user(&split.test, num_users);
    let mut seen: Vec<Vec<usize>> = vec![Vec::new(); num_users];
    let mut rating = std::collections::HashMap::new();
    for r in records {
        seen[r.user].push(r.item);
        rating.insert(r.pair(), r.rating);
    }
    for s in &mut seen {
        s.sort_unstable();
        s.dedup();
    }

    let mut eligible: Vec<usize> = (0..num_users)
        .filter(|&u| !test[u].is_empty() && num_items - seen[u].len() >= config.num_negatives)
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, 0, 0x11A));
    eligible.shuffle(&mut rng);
    eligible.truncate(config.num_users);
    eligible.sort_unstable();

    let mut rankings = Vec::new();
    let mut failures = Vec::new();
    for &u in &eligible {
        let mut urng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, u as u64, 0x11B));
        let pos = *test[u].choose(&mut urng).expect("eligible users have test items");
        let unseen: Vec<usize> = (0..num_items).filter(|i| seen[u].binary_search(i).is_err()).collect();
        let mut cands: Vec<usize> = unseen
            .choose_multiple(&mut urng, config.num_negatives)
            .copied()
            .collect();
        cands.push(pos);
        cands.shuffle(&mut urng);

        let history: Vec<(String, f64)> = train[u]
            .iter()
            .map(|&i| (title(i), rating.get(&(u, i)).copied().unwrap_or(0.0)))
            .collect();
        let cand_text: Vec<(String, String)> = cands
            .iter()
            .map(|&i| (title(i), ids.item_id(i).unwrap_or_default().to_owned()))
            .collect();
        match llm_rank_baseline(&history, &cand_text, backend) {
            Ok(order) => {
                let items: Vec<usize> = order.iter().filter_map(|id| ids.item_index(id)).collect();
                rankings.push(UserRanking {
                    user: u,
                    scores: (0..items.len()).map(|r| -(r as f64)).collect(),
                    items,
                    targets: vec![pos],
                });
            }
            Err(e) => failures.push(LlmRankFailure {
                user: u,
                error: e.to_string(),
            }),
        }
    }
    if !failures.is_empty() {
        log::warn!("{} of {} llm-rank calls failed", failures.len(), eligible.len());
    }
    LlmRankReport {
        metrics: MetricReport::from_ranking(&RankingResult { users: rankings }, &config.ks),
        users: eligible,
        failures,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aspects::MockBackend;

    fn cands(n: usize) -> Vec<(String, String)> {
        (0..n).map(|k| (format!("Product {k}"), format!("B{k:03}"))).collect()
    }

    #[test]
    fn oracle_puts_positive_first() {
        let backend = MockBackend::new("m").with_fallback(oracle_rater(vec!["B004".into()]));
        let order = llm_rank_baseline(&[("Pens".into(), 4.0)], &cands(10), &backend).unwrap();
        assert_eq!(order[0], "B004");
        assert_eq!(order.len(), 10);
    }

    #[test]
    fn equal_ratings_keep_response_order() {
        let response = "1. X (item id: B002) - Rating: 3.0 stars\n2. Y (item id: B000) - Rating: 3.0 stars\n3. Z (item id: B001) - Rating: 3.0 stars";
        assert_eq!(rank_from_response(response, &cands(3)), vec!["B002", "B000", "B001"]);
    }

    #[test]
    fn unparseable_and_missing_get_zero() {
        let response = "1. X (item id: B001) - Rating: great\n2. Y (item id: B002) - Rating: 2.5 stars\n3. Q (item id: ZZZ) - Rating: 5.0 stars";
        assert_eq!(rank_from_response(response, &cands(4)), vec!["B002", "B001", "B000", "B003"]);
    }

    #[test]
    fn random_rater_is_seeded_and_complete() {
        let prompt = rank_prompt(&[], &cands(10));
        assert_eq!(random_rater(&prompt), random_rater(&prompt));
        let order = rank_from_response(&random_rater(&prompt), &cands(10));
        let mut sorted = order.clone();
        sorted.sort();
        assert_eq!(sorted, cands(10).into_iter().map(|c| c.1).collect::<Vec<_>>());
    }

    #[test]
    fn random_rater_top1_is_uniform() {
        // Monte Carlo against the analytic 1/10.
        let mut first = [0usize; 10];
        let trials = 4000;
        for t in 0..trials {
            let prompt = rank_prompt(&[(format!("h{t}"), 3.0)], &cands(10));
            let order = rank_from_response(&random_rater(&prompt), &cands(10));
            let k: usize = order[0][1..].parse().unwrap();
            first[k] += 1;
        }
        for c in first {
            let p = c as f64 / trials as f64;
            assert!((p - 0.1).abs() < 0.03, "{p}");
        }
    }
}
