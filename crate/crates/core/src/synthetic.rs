//! Planted-aspect corpus generator.
//!
//! Every aspect partitions users and items into groups independently. A
//! signal interaction picks an aspect, then an item from the user's group
//! under that aspect, and its review mentions that aspect (plus any other
//! aspect whose groups happen to match). Noise interactions pick a uniform
//! item and their review mentions nothing, so they reach the base graph but
//! no aspect graph.

use std::collections::BTreeSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aspects::AspectAnnotation;
use crate::aspects::ParseStatus;
use crate::corpus::{IdMaps, InteractionRecord};
use crate::graphs::{AspectInteractionStore, GraphError};
use crate::Pair;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub num_users: usize,
    pub num_items: usize,
    /// Aspect names; each needs phrases in [`aspect_phrases`].
    pub aspects: Vec<String>,
    pub groups_per_aspect: usize,
    pub interactions_per_user: usize,
    /// Share of each user's interactions drawn uniformly with a bland review.
    pub noise_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_users: 200,
            num_items: 100,
            aspects: vec!["durability".into(), "price".into()],
            groups_per_aspect: 10,
            interactions_per_user: 16,
            noise_fraction: 0.5,
            seed: 0,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SyntheticError {
    #[error("invalid synthetic config: {0}")]
    Config(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Review sentences that mention `aspect`.
pub fn aspect_phrases(aspect: &str) -> Option<&'static [&'static str]> {
    Some(match aspect {
        "durability" => &[
            "These have lasted through months of daily use.",
            "Very durable, nothing cracked.",
            "One of them broke after a week.",
        ],
        "price" => &[
            "Good value for the price.",
            "A bit expensive for what you get.",
            "The cost was lower than in stores.",
        ],
        "design" => &["The design is clean.", "I like how it looks on my desk."],
        "comfort" => &["Comfortable to hold.", "Not very comfortable after an hour."],
        "quality" => &["The quality is excellent.", "Feels cheaply made."],
        _ => return None,
    })
}

const BLAND: &[&str] = &[
    "Arrived on Tuesday.",
    "Bought this for the office.",
    "Second order from this seller.",
    "It is what I ordered.",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub aspects: Vec<String>,
    /// `[aspect][user]`
    pub user_groups: Vec<Vec<usize>>,
    /// `[aspect][item]`
    pub item_groups: Vec<Vec<usize>>,
    /// Aspects mentioned by each record's review, aligned with the records.
    pub mentioned: Vec<Vec<String>>,
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub records: Vec<InteractionRecord>,
    pub ids: IdMaps,
    pub truth: GroundTruth,
}

fn balanced_groups(n: usize, groups: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut g: Vec<usize> = (0..n).map(|k| k % groups).collect();
    g.shuffle(rng);
    g
}

pub fn generate(config: &SyntheticConfig) -> Result<SyntheticCorpus, SyntheticError> {
    let (n, m, g) = (config.num_users, config.num_items, config.groups_per_aspect);
    if n == 0 || m == 0 || g == 0 || g > m {
        return Err(SyntheticError::Config("need users, items and 1..=items groups".into()));
    }
    if config.aspects.is_empty() {
        return Err(SyntheticError::Config("need at least one aspect".into()));
    }
    if let Some(a) = config.aspects.iter().find(|a| aspect_phrases(a).is_none()) {
        return Err(SyntheticError::Config(format!("no phrases for aspect `{a}`")));
    }
    if !(0.0..=1.0).contains(&config.noise_fraction) {
        return Err(SyntheticError::Config("noise_fraction must be in [0, 1]".into()));
    }
    let per_user = config.interactions_per_user.min(m);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let user_groups: Vec<Vec<usize>> = config.aspects.iter().map(|_| balanced_groups(n, g, &mut rng)).collect();
    let item_groups: Vec<Vec<usize>> = config.aspects.iter().map(|_| balanced_groups(m, g, &mut rng)).collect();
    // members[a][group] = items
    let members: Vec<Vec<Vec<usize>>> = item_groups
        .iter()
        .map(|ig| {
            let mut v = vec![Vec::new(); g];
            for (i, &gi) in ig.iter().enumerate() {
                v[gi].push(i);
            }
            v
        })
        .collect();

    let user_ids: Vec<String> = (0..n).map(|u| format!("u{u}")).collect();
    let item_ids: Vec<String> = (0..m).map(|i| format!("i{i}")).collect();
    let ids = IdMaps::from_lists(user_ids.clone(), item_ids.clone());
    let mut records = Vec::with_capacity(n * per_user);
    let mut mentioned = Vec::with_capacity(n * per_user);
    let mut clock = 1_500_000_000i64;
    for u in 0..n {
        let mut chosen = BTreeSet::new();
        let n_noise = ((per_user as f64) * config.noise_fraction).round() as usize;
        let mut attempts = 0;
        while chosen.len() < per_user && attempts < 100 * per_user {
            attempts += 1;
            let noise = chosen.len() < n_noise;
            let item = if noise {
                rng.random_range(0..m)
            } else {
                let a = rng.random_range(0..config.aspects.len());
                *members[a][user_groups[a][u]].choose(&mut rng).expect("groups are non-empty")
            };
            if !chosen.insert(item) {
                continue;
            }
            let aspects: Vec<String> = if noise {
                Vec::new()
            } else {
                config
                    .aspects
                    .iter()
                    .enumerate()
                    .filter(|(a, _)| item_groups[*a][item] == user_groups[*a][u])
                    .map(|(_, name)| name.clone())
                    .collect()
            };
            let mut text: Vec<&str> = vec![BLAND.choose(&mut rng).expect("non-empty")];
            for a in &aspects {
                text.push(aspect_phrases(a).and_then(|p| p.choose(&mut rng)).expect("checked above"));
            }
            clock += 60;
            records.push(InteractionRecord {
                user_id: user_ids[u].clone(),
                item_id: item_ids[item].clone(),
                user: u,
                item,
                rating: rng.random_range(3..=5) as f64,
                review_text: text.join(" "),
                timestamp: Some(clock),
            });
            mentioned.push(aspects);
        }
    }
    Ok(SyntheticCorpus {
        records,
        ids,
        truth: GroundTruth {
            aspects: config.aspects.clone(),
            user_groups,
            item_groups,
            mentioned,
        },
    })
}

impl SyntheticCorpus {
    /// Annotations equal to what a perfect extractor would return.
    pub fn true_annotations(&self) -> Vec<AspectAnnotation> {
        self.records
            .iter()
            .zip(&self.truth.mentioned)
            .map(|(r, a)| AspectAnnotation {
                user: r.user,
                item: r.item,
                present_aspects: a.clone(),
                parse_status: ParseStatus::Clean,
                raw_llm_output: String::new(),
            })
            .collect()
    }

    /// Aspect store built from the planted labels.
    pub fn true_store(&self) -> Result<AspectInteractionStore, SyntheticError> {
        let base: Vec<Pair> = self.records.iter().map(InteractionRecord::pair).collect();
        let mut edges = vec![Vec::new(); self.truth.aspects.len()];
        for (r, names) in self.records.iter().zip(&self.truth.mentioned) {
            for name in names {
                let a = self.truth.aspects.iter().position(|x| x == name).expect("known aspect");
                edges[a].push(r.pair());
            }
        }
        Ok(AspectInteractionStore::new(
            self.ids.num_users(),
            self.ids.num_items(),
            base,
            self.truth.aspects.clone(),
            edges,
        )?)
    }

    /// The corpus as Amazon-style JSON lines.
    pub fn to_amazon_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            let line = serde_json::json!({
                "reviewerID": r.user_id,
                "asin": r.item_id,
                "overall": r.rating,
                "reviewText": r.review_text,
                "unixReviewTime": r.timestamp,
            });
            out.push_str(&line.to_string());
            out.push('\n');
        }
        out
    }
}

/// Display title for synthetic items.
pub fn item_title(item_id: &str) -> String {
    format!("Synthetic desk item {item_id}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aspects::KeywordResponder;
    use crate::aspects::prompts::annotation_prompt;
    use crate::aspects::{parse_annotation, AspectEntry, AspectVocabulary};

    #[test]
    fn shape_and_determinism() {
        let cfg = SyntheticConfig::default();
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        assert_eq!(a.records, b.records);
        assert_eq!(a.records.len(), 200 * 16);
        assert_eq!(a.ids.num_users(), 200);
        assert_eq!(a.ids.num_items(), 100);
        let pairs: BTreeSet<Pair> = a.records.iter().map(|r| r.pair()).collect();
        assert_eq!(pairs.len(), a.records.len());
    }

    #[test]
    fn signal_edges_respect_blocks() {
        let c = generate(&SyntheticConfig::default()).unwrap();
        let store = c.true_store().unwrap();
        for a in 0..2 {
            assert!(!store.aspect_edges(a).is_empty());
            for &(u, i) in store.aspect_edges(a) {
                assert_eq!(c.truth.user_groups[a][u], c.truth.item_groups[a][i]);
            }
        }
        let noise = c.truth.mentioned.iter().filter(|m| m.is_empty()).count();
        assert!(noise >= 200 * 8);
    }

    #[test]
    fn keyword_responder_recovers_planted_labels() {
        let c = generate(&SyntheticConfig {
            num_users: 30,
            ..Default::default()
        })
        .unwrap();
        let vocab = AspectVocabulary {
            aspects: ["durability", "price"]
                .iter()
                .map(|a| AspectEntry {
                    name: a.to_string(),
                    frequency: 1,
                })
                .collect(),
            merge_map: Default::default(),
        };
        let responder = KeywordResponder::default();
        for (r, truth) in c.records.iter().zip(&c.truth.mentioned) {
            let response = responder.respond(&annotation_prompt(&r.review_text, &vocab.names()));
            let (present, _) = parse_annotation(&response, &vocab);
            assert_eq!(&present, truth, "{}", r.review_text);
        }
    }

    #[test]
    fn rejects_unknown_aspect() {
        let cfg = SyntheticConfig {
            aspects: vec!["smell".into()],
            ..Default::default()
        };
        assert!(generate(&cfg).is_err());
    }
}
