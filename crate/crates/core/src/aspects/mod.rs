//! Chain-based aspect extraction.
//!
//! Stage one asks the LLM which perspectives a review takes (discovery);
//! discovered names are merged into a fixed-size vocabulary; stage two asks
//! again with the vocabulary substituted (annotation) and reads one
//! present/absent decision per aspect off the answer lines.

pub mod backend;
pub mod prompts;
pub mod rank;

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use serde::{Deserialize, Serialize};

pub use backend::{
    request_hash, BackendConfig, BackendError, CachedBackend, HttpBackend, KeywordResponder,
    LlmBackend, MockBackend, RetryPolicy,
};

use crate::corpus::InteractionRecord;
use crate::graphs::AspectInteractionStore;
use crate::Pair;

#[derive(Debug, thiserror::Error)]
pub enum AspectError {
    #[error("review text is empty")]
    EmptyReview,
    #[error("vocabulary is empty")]
    EmptyVocabulary,
    #[error("target aspect count must be at least 1")]
    BadTarget,
    #[error("only {available} distinct aspects available, {requested} requested")]
    NotEnoughAspects { available: usize, requested: usize },
    #[error("annotation for ({0}, {1}) has no base interaction")]
    UnknownPair(usize, usize),
    #[error("aspect `{0}` is not in the vocabulary")]
    UnknownAspect(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("merge rules: {0}")]
    MergeRules(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParseStatus {
    Clean,
    Fallback,
    Failed,
}

/// Result of the discovery prompt on one review.
#[derive(Debug, Clone, PartialEq)]
pub struct Discovery {
    pub aspects: Vec<String>,
    pub status: ParseStatus,
    pub raw: String,
}

/// Ask the backend which perspectives `review` takes.
pub fn discover_aspects(review: &str, backend: &dyn LlmBackend) -> Result<Discovery, AspectError> {
    if review.trim().is_empty() {
        return Err(AspectError::EmptyReview);
    }
    let raw = backend.complete(&prompts::discovery_prompt(review))?;
    let aspects = prompts::parse_aspect_list(&raw);
    let status = if aspects.is_empty() {
        ParseStatus::Fallback
    } else {
        ParseStatus::Clean
    };
    Ok(Discovery {
        aspects,
        status,
        raw,
    })
}

/// Manually curated synonym merges and eliminations.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MergeRules {
    /// raw aspect name → canonical name
    #[serde(default)]
    pub merge: BTreeMap<String, String>,
    /// names dropped outright
    #[serde(default)]
    pub drop: BTreeSet<String>,
}

impl MergeRules {
    pub fn from_pairs<I, S>(pairs: I) -> Self
    where
        I: IntoIterator<Item = (S, S)>,
        S: Into<String>,
    {
        Self {
            merge: pairs
                .into_iter()
                .map(|(a, b)| (norm(&a.into()), norm(&b.into())))
                .collect(),
            drop: BTreeSet::new(),
        }
    }

    /// Canonical name, or `None` when the aspect is eliminated. Chains of
    /// merges are followed.
    pub fn canonical(&self, raw: &str) -> Option<String> {
        let mut name = norm(raw);
        let mut hops = 0;
        while let Some(next) = self.merge.get(&name) {
            let next = norm(next);
            if next == name || hops > self.merge.len() {
                break;
            }
            name = next;
            hops += 1;
        }
        if name.is_empty() || self.drop.contains(&name) {
            None
        } else {
            Some(name)
        }
    }
}

fn norm(s: &str) -> String {
    s.trim().to_lowercase()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AspectEntry {
    pub name: String,
    pub frequency: usize,
}

/// The consolidated aspect set, most frequent first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AspectVocabulary {
    pub aspects: Vec<AspectEntry>,
    /// raw name → canonical name, for every raw name folded into a kept aspect
    pub merge_map: BTreeMap<String, String>,
}

impl AspectVocabulary {
    pub fn names(&self) -> Vec<String> {
        self.aspects.iter().map(|a| a.name.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.aspects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.aspects.is_empty()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.aspects.iter().position(|a| a.name == name)
    }

    /// Restrict to the first `n` aspects.
    pub fn top(&self, n: usize) -> Self {
        let aspects: Vec<AspectEntry> = self.aspects.iter().take(n).cloned().collect();
        let keep: HashSet<&str> = aspects.iter().map(|a| a.name.as_str()).collect();
        let merge_map = self
            .merge_map
            .iter()
            .filter(|(_, c)| keep.contains(c.as_str()))
            .map(|(a, b)| (a.clone(), b.clone()))
            .collect();
        Self { aspects, merge_map }
    }

    /// Surface forms (canonical plus synonyms) per aspect, vocabulary order.
    fn surface_forms(&self) -> Vec<Vec<String>> {
        self.aspects
            .iter()
            .map(|a| {
                let mut forms = vec![a.name.clone()];
                forms.extend(
                    self.merge_map
                        .iter()
                        .filter(|(raw, c)| *c == &a.name && *raw != &a.name)
                        .map(|(raw, _)| raw.clone()),
                );
                forms
            })
            .collect()
    }

    pub fn to_json(&self) -> Result<String, AspectError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self, AspectError> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Merge synonyms, drop eliminated names and keep the `target_n` most
/// frequent canonical aspects (ties broken by name).
pub fn consolidate_aspects(
    raw_counts: &BTreeMap<String, usize>,
    target_n: usize,
    merge_rules: &MergeRules,
) -> Result<AspectVocabulary, AspectError> {
    if target_n == 0 {
        return Err(AspectError::BadTarget);
    }
    let mut merged: BTreeMap<String, usize> = BTreeMap::new();
    let mut merge_map: BTreeMap<String, String> = BTreeMap::new();
    for (raw, &count) in raw_counts {
        let Some(canonical) = merge_rules.canonical(raw) else {
            continue;
        };
        *merged.entry(canonical.clone()).or_default() += count;
        if norm(raw) != canonical {
            merge_map.insert(norm(raw), canonical);
        }
    }
    // Rule synonyms that never showed up still help line attribution later.
    for raw in merge_rules.merge.keys() {
        if let Some(c) = merge_rules.canonical(raw) {
            if norm(raw) != c {
                merge_map.entry(norm(raw)).or_insert(c);
            }
        }
    }
    if merged.len() < target_n {
        return Err(AspectError::NotEnoughAspects {
            available: merged.len(),
            requested: target_n,
        });
    }
    let mut ranked: Vec<AspectEntry> = merged
        .into_iter()
        .map(|(name, frequency)| AspectEntry { name, frequency })
        .collect();
    ranked.sort_by(|a, b| b.frequency.cmp(&a.frequency).then_with(|| a.name.cmp(&b.name)));
    ranked.truncate(target_n);
    Ok(AspectVocabulary {
        aspects: ranked,
        merge_map,
    }
    .top(target_n))
}

/// Per-review aspect presence from the annotation prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AspectAnnotation {
    #[serde(rename = "u")]
    pub user: usize,
    #[serde(rename = "i")]
    pub item: usize,
    /// Present aspects, in vocabulary order.
    #[serde(rename = "aspects")]
    pub present_aspects: Vec<String>,
    #[serde(rename = "status")]
    pub parse_status: ParseStatus,
    #[serde(skip)]
    pub raw_llm_output: String,
}

impl AspectAnnotation {
    pub fn failed(user: usize, item: usize) -> Self {
        Self {
            user,
            item,
            present_aspects: Vec::new(),
            parse_status: ParseStatus::Failed,
            raw_llm_output: String::new(),
        }
    }
}

/// Decide aspect presence from a point-by-point answer.
///
/// Each line is attributed to the aspect whose name or synonym occurs
/// earliest in it. An aspect is present when at least one of its lines is not
/// a negation; aspects with no line are absent. Returns present aspects in
/// vocabulary order and whether any line was attributed at all.
pub fn parse_annotation(response: &str, vocabulary: &AspectVocabulary) -> (Vec<String>, bool) {
    let forms = vocabulary.surface_forms();
    let mut present = vec![false; forms.len()];
    let mut any = false;
    for line in prompts::split_points(response) {
        let lower = line.to_lowercase();
        let hit = forms
            .iter()
            .enumerate()
            .filter_map(|(a, fs)| {
                fs.iter()
                    .filter_map(|f| prompts::find_word(&lower, f).map(|p| (p, std::cmp::Reverse(f.len()))))
                    .min()
                    .map(|(p, len)| (p, len, a))
            })
            .min();
        if let Some((_, _, a)) = hit {
            any = true;
            if !prompts::is_negated(line) {
                present[a] = true;
            }
        }
    }
    let names = vocabulary
        .aspects
        .iter()
        .zip(present)
        .filter(|(_, p)| *p)
        .map(|(a, _)| a.name.clone())
        .collect();
    (names, any)
}

/// Run the annotation prompt for one review.
pub fn annotate_review(
    user: usize,
    item: usize,
    review: &str,
    vocabulary: &AspectVocabulary,
    backend: &dyn LlmBackend,
) -> Result<AspectAnnotation, AspectError> {
    if vocabulary.is_empty() {
        return Err(AspectError::EmptyVocabulary);
    }
    if review.trim().is_empty() {
        return Err(AspectError::EmptyReview);
    }
    let names = vocabulary.names();
    let raw = backend.complete(&prompts::annotation_prompt(review, &names))?;
    let (present, any) = parse_annotation(&raw, vocabulary);
    Ok(AspectAnnotation {
        user,
        item,
        present_aspects: present,
        parse_status: if any {
            ParseStatus::Clean
        } else {
            ParseStatus::Fallback
        },
        raw_llm_output: raw,
    })
}

/// A review whose LLM call failed after retries.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Failure {
    pub u: usize,
    pub i: usize,
    pub stage: String,
    pub error: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractionOutcome {
    /// Number of reviews mentioning each raw aspect name.
    pub counts: BTreeMap<String, usize>,
    pub clean: usize,
    pub fallback: usize,
    pub failures: Vec<Failure>,
}

fn with_review(records: &[InteractionRecord]) -> Vec<&InteractionRecord> {
    let mut v: Vec<&InteractionRecord> = records.iter().filter(|r| r.has_review()).collect();
    v.sort_by_key(|r| r.pair());
    v
}

/// Discovery over a corpus with a bounded worker pool.
pub fn extract_corpus(
    records: &[InteractionRecord],
    backend: &dyn LlmBackend,
    concurrency: usize,
) -> ExtractionOutcome {
    let work = with_review(records);
    let results = backend::run_pool(&work, concurrency.min(backend.max_concurrency()), |r| {
        discover_aspects(&r.review_text, backend)
    });
    let mut out = ExtractionOutcome::default();
    for (r, res) in work.iter().zip(results) {
        match res {
            Ok(d) => {
                match d.status {
                    ParseStatus::Clean => out.clean += 1,
                    _ => out.fallback += 1,
                }
                for a in d.aspects {
                    *out.counts.entry(a).or_default() += 1;
                }
            }
            Err(e) => out.failures.push(Failure {
                u: r.user,
                i: r.item,
                stage: "extract".into(),
                error: e.to_string(),
            }),
        }
    }
    out
}

/// Annotation over a corpus. Failed calls yield `Failed` annotations; output
/// is sorted by `(user, item)`.
pub fn annotate_corpus(
    records: &[InteractionRecord],
    vocabulary: &AspectVocabulary,
    backend: &dyn LlmBackend,
    concurrency: usize,
) -> (Vec<AspectAnnotation>, Vec<Failure>) {
    let work = with_review(records);
    let results = backend::run_pool(&work, concurrency.min(backend.max_concurrency()), |r| {
        annotate_review(r.user, r.item, &r.review_text, vocabulary, backend)
    });
    let mut annotations = Vec::with_capacity(work.len());
    let mut failures = Vec::new();
    for (r, res) in work.iter().zip(results) {
        match res {
            Ok(a) => annotations.push(a),
            Err(e) => {
                failures.push(Failure {
                    u: r.user,
                    i: r.item,
                    stage: "annotate".into(),
                    error: e.to_string(),
                });
                annotations.push(AspectAnnotation::failed(r.user, r.item));
            }
        }
    }
    (annotations, failures)
}

/// Assemble the per-aspect incidence from annotations.
///
/// `R^a` holds `(u, i)` exactly when aspect `a` is present in that pair's
/// annotation; the base set is kept whole.
pub fn build_aspect_interactions(
    annotations: &[AspectAnnotation],
    base: &[Pair],
    num_users: usize,
    num_items: usize,
    vocabulary: &AspectVocabulary,
) -> Result<AspectInteractionStore, AspectError> {
    let base_set: HashSet<Pair> = base.iter().copied().collect();
    let index: HashMap<&str, usize> = vocabulary
        .aspects
        .iter()
        .enumerate()
        .map(|(k, a)| (a.name.as_str(), k))
        .collect();
    let mut per_aspect: Vec<Vec<Pair>> = vec![Vec::new(); vocabulary.len()];
    for ann in annotations {
        let pair = (ann.user, ann.item);
        if !base_set.contains(&pair) {
            return Err(AspectError::UnknownPair(ann.user, ann.item));
        }
        if ann.parse_status == ParseStatus::Failed {
            continue;
        }
        for name in &ann.present_aspects {
            let &a = index
                .get(name.as_str())
                .ok_or_else(|| AspectError::UnknownAspect(name.clone()))?;
            per_aspect[a].push(pair);
        }
    }
    AspectInteractionStore::new(
        num_users,
        num_items,
        base.to_vec(),
        vocabulary.names(),
        per_aspect,
    )
    .map_err(|e| AspectError::MergeRules(e.to_string()))
}

pub fn annotations_to_jsonl(annotations: &[AspectAnnotation]) -> Result<String, AspectError> {
    let mut sorted: Vec<&AspectAnnotation> = annotations.iter().collect();
    sorted.sort_by_key(|a| (a.user, a.item));
    let mut out = String::new();
    for a in sorted {
        out.push_str(&serde_json::to_string(a)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn annotations_from_jsonl(s: &str) -> Result<Vec<AspectAnnotation>, AspectError> {
    s.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}
