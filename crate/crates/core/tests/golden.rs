use std::collections::BTreeMap;
use std::path::PathBuf;

use sagcn::aspects::{
    annotate_corpus, annotate_review, build_aspect_interactions, consolidate_aspects, discover_aspects,
    extract_corpus, CachedBackend, KeywordResponder, LlmBackend, MergeRules, MockBackend, ParseStatus,
};
use sagcn::corpus::{load_corpus, CorpusFormat};

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn office_rules() -> MergeRules {
    toml::from_str(&std::fs::read_to_string(fixtures().join("office/merges.toml")).unwrap()).unwrap()
}

fn office_counts() -> BTreeMap<String, usize> {
    serde_json::from_str(&std::fs::read_to_string(fixtures().join("office/raw_aspect_counts.json")).unwrap()).unwrap()
}

const OFFICE: [&str; 8] = [
    "quality",
    "functionality",
    "ease of use",
    "convenience",
    "comfort",
    "durability",
    "design",
    "price",
];

#[test]
fn office_consolidation_order() {
    let vocab = consolidate_aspects(&office_counts(), 8, &office_rules()).unwrap();
    assert_eq!(vocab.names(), OFFICE);
    let freq: Vec<usize> = vocab.aspects.iter().map(|a| a.frequency).collect();
    assert_eq!(freq, vec![43_850, 43_269, 42_347, 41_238, 40_795, 37_564, 23_973, 23_661]);
    assert_eq!(vocab.merge_map["value for money"], "price");
}

#[test]
fn dropped_name_never_enters_vocabulary() {
    let vocab = consolidate_aspects(&office_counts(), 12, &office_rules()).unwrap();
    assert!(!vocab.names().iter().any(|n| n == "overall satisfaction"));
    assert_eq!(vocab.names()[8], "size");
}

#[test]
fn storage_bins_chain() {
    let backend = MockBackend::new("vicuna-13b-v1.5")
        .load_fixtures(&fixtures().join("llm"))
        .unwrap();
    let (records, _) = load_corpus(&fixtures().join("corpus/storage_bins.jsonl"), CorpusFormat::AmazonJsonLines).unwrap();
    let bins = &records[0];

    let d = discover_aspects(&bins.review_text, &backend).unwrap();
    assert_eq!(d.aspects, vec!["functionality", "durability"]);
    assert_eq!(d.status, ParseStatus::Clean);

    let vocab = consolidate_aspects(&office_counts(), 8, &office_rules()).unwrap();
    let ann = annotate_review(bins.user, bins.item, &bins.review_text, &vocab, &backend).unwrap();
    assert_eq!(ann.present_aspects, vec!["functionality", "durability"]);
    assert!(!ann.present_aspects.iter().any(|a| a == "ease of use"));
    assert_eq!(ann.parse_status, ParseStatus::Clean);
}

#[test]
fn strict_mock_misses_become_failures_not_lost_edges() {
    let backend = MockBackend::new("vicuna-13b-v1.5")
        .load_fixtures(&fixtures().join("llm"))
        .unwrap();
    let (records, ids) = load_corpus(&fixtures().join("corpus/storage_bins.jsonl"), CorpusFormat::AmazonJsonLines).unwrap();
    let vocab = consolidate_aspects(&office_counts(), 8, &office_rules()).unwrap();
    let (anns, failures) = annotate_corpus(&records, &vocab, &backend, 2);
    assert_eq!(anns.len(), 3);
    assert_eq!(failures.len(), 2);
    let pairs: Vec<_> = records.iter().map(|r| r.pair()).collect();
    let store = build_aspect_interactions(&anns, &pairs, ids.num_users(), ids.num_items(), &vocab).unwrap();
    assert_eq!(store.base_edges().len(), 3);
    let total: usize = (0..store.num_aspects()).map(|a| store.aspect_edges(a).len()).sum();
    assert_eq!(total, 2);
}

#[test]
fn keyword_fallback_covers_the_rest() {
    let responder = KeywordResponder::default();
    let backend = MockBackend::new("vicuna-13b-v1.5")
        .load_fixtures(&fixtures().join("llm"))
        .unwrap()
        .with_fallback(move |p| responder.respond(p));
    let (records, _) = load_corpus(&fixtures().join("corpus/storage_bins.jsonl"), CorpusFormat::AmazonJsonLines).unwrap();
    let out = extract_corpus(&records, &backend, 2);
    assert!(out.failures.is_empty());
    assert_eq!(out.counts["functionality"], 1);
    assert_eq!(out.counts["ease of use"], 1);
    assert_eq!(out.counts["price"], 1);
    assert_eq!(out.counts["comfort"], 1);
    assert_eq!(out.counts["design"], 1);
}

#[test]
fn cached_rerun_is_identical_and_offline() {
    let dir = tempfile::tempdir().unwrap();
    let (records, ids) = load_corpus(&fixtures().join("corpus/storage_bins.jsonl"), CorpusFormat::AmazonJsonLines).unwrap();
    let vocab = consolidate_aspects(&office_counts(), 8, &office_rules()).unwrap();
    let pairs: Vec<_> = records.iter().map(|r| r.pair()).collect();

    let responder = KeywordResponder::default();
    let live = CachedBackend::new(MockBackend::new("m").with_fallback(move |p| responder.respond(p)), dir.path()).unwrap();
    let (first, _) = annotate_corpus(&records, &vocab, &live, 3);
    assert_eq!(live.inner().calls(), 3);

    // No fallback: every answer has to come from the cache.
    let offline = CachedBackend::new(MockBackend::new("m"), dir.path()).unwrap();
    let (second, failures) = annotate_corpus(&records, &vocab, &offline, 3);
    assert!(failures.is_empty());
    assert_eq!(offline.inner().calls(), 0);
    assert_eq!(offline.model_name(), "m");
    let a = build_aspect_interactions(&first, &pairs, ids.num_users(), ids.num_items(), &vocab).unwrap();
    let b = build_aspect_interactions(&second, &pairs, ids.num_users(), ids.num_items(), &vocab).unwrap();
    assert_eq!(a, b);
}
