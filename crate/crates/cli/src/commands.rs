use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use sagcn::aspects::prompts::{annotation_prompt, discovery_prompt};
use sagcn::aspects::rank::{random_rater, run_llm_rank, LlmRankConfig};
use sagcn::aspects::{
    annotate_corpus, annotations_from_jsonl, annotations_to_jsonl, build_aspect_interactions,
    consolidate_aspects, extract_corpus, BackendConfig, CachedBackend, Failure, HttpBackend,
    KeywordResponder, MergeRules, MockBackend, RetryPolicy,
};
use sagcn::corpus::{load_corpus, records_from_jsonl, records_to_jsonl, split_interactions, CorpusFormat};
use sagcn::eval::{
    aspect_contribution, aspect_count_sweep, evaluate, independence_to_csv, sweep_to_csv, EvalProtocol,
};
use sagcn::graphs::build_graphs;
use sagcn::model::{checkpoint_from_bytes, checkpoint_to_bytes, forward, Entity};
use sagcn::synthetic::{generate, SyntheticConfig};
use sagcn::trainer::{train, TrainError};
use sagcn::util::sha256_hex;
use sagcn::{
    AspectInteractionStore, AspectVocabulary, IdMaps, InteractionRecord, LlmBackend, MetricReport,
    ModelConfig, NormalizedAspectGraph, SplitSpec, TrainConfig,
};

use crate::config::Config;
use crate::workspace::{backend_failure, divergence, precondition, Workspace};
use crate::{BackendArgs, BackendKind, Cli, Command, EvalSplit};

/// Environment variable holding the bearer token for the HTTP backend.
pub const API_KEY_VAR: &str = "SAGCN_LLM_API_KEY";

pub fn run(cli: Cli) -> Result<()> {
    let cfg = Config::load(cli.config.as_deref(), cli.seed)?;
    if let Command::GenSynthetic {
        out,
        users,
        items,
        groups,
        per_user,
        noise,
        aspects,
    } = &cli.command
    {
        let synth = SyntheticConfig {
            num_users: *users,
            num_items: *items,
            aspects: aspects.clone(),
            groups_per_aspect: *groups,
            interactions_per_user: *per_user,
            noise_fraction: *noise,
            seed: cli.seed,
        };
        let out = out.clone().unwrap_or_else(|| cli.workspace.join("corpus.jsonl"));
        return gen_synthetic(&synth, &out);
    }
    let ws = Workspace::open(&cli.workspace, cli.force)?;
    match cli.command {
        Command::Extract { input, format, backend } => extract(&ws, &cfg, cli.seed, &input, &format, &backend),
        Command::Consolidate { n, merge } => consolidate(&ws, n, merge.as_deref()),
        Command::Annotate { backend } => annotate(&ws, &backend),
        Command::BuildGraphs => build(&ws),
        Command::Train => train_cmd(&ws, &cfg),
        Command::Eval {
            ks,
            per_aspect,
            independence,
            independence_user,
            split,
        } => eval_cmd(&ws, &ks, per_aspect, independence.then_some(independence_user), split),
        Command::Explain { user, item } => explain(&ws, &user, &item),
        Command::Sweep { ns, ks } => sweep(&ws, &cfg, &ns, &ks),
        Command::LlmRank {
            users,
            negatives,
            ks,
            titles,
            backend,
        } => llm_rank(
            &ws,
            &LlmRankConfig {
                num_users: users,
                num_negatives: negatives,
                ks,
                seed: cli.seed,
            },
            titles.as_deref(),
            &backend,
        ),
        Command::GenSynthetic { .. } => unreachable!("handled above"),
    }
}

fn gen_synthetic(config: &SyntheticConfig, out: &Path) -> Result<()> {
    let corpus = generate(config).map_err(|e| precondition(e.to_string()))?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    sagcn::util::write_atomic(out, corpus.to_amazon_jsonl().as_bytes())?;
    let truth = out.with_file_name("synthetic_truth.json");
    sagcn::util::write_atomic(&truth, serde_json::to_string(&corpus.truth)?.as_bytes())?;
    println!(
        "wrote {} interactions ({} users, {} items) to {}",
        corpus.records.len(),
        corpus.ids.num_users(),
        corpus.ids.num_items(),
        out.display()
    );
    Ok(())
}

enum Fallback {
    Keywords,
    RandomRatings,
}

/// Hash of every fixture file, so changed fixtures invalidate the stage.
fn fixtures_hash(dir: Option<&Path>) -> Result<Option<String>> {
    let Some(dir) = dir else { return Ok(None) };
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading fixtures {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    files.sort();
    let mut all = Vec::new();
    for f in files {
        all.extend(fs::read(&f)?);
        all.push(0);
    }
    Ok(Some(sha256_hex(&all)))
}

fn backend_params(args: &BackendArgs) -> Result<Value> {
    Ok(match args.backend {
        BackendKind::Mock => json!({
            "backend": "mock",
            "model": args.model,
            "fixtures": fixtures_hash(args.fixtures.as_deref())?,
            "strict": args.strict,
        }),
        BackendKind::Http => json!({ "backend": "http", "model": args.model, "endpoint": args.endpoint }),
    })
}

fn make_backend(ws: &Workspace, args: &BackendArgs, fallback: Fallback) -> Result<CachedBackend<Box<dyn LlmBackend>>> {
    let inner: Box<dyn LlmBackend> = match args.backend {
        BackendKind::Mock => {
            let mut mock = MockBackend::new(args.model.clone()).with_concurrency(args.concurrency);
            if let Some(dir) = &args.fixtures {
                mock = mock.load_fixtures(dir).map_err(|e| precondition(e.to_string()))?;
            }
            if !args.strict {
                mock = match fallback {
                    Fallback::Keywords => {
                        let responder = KeywordResponder::default();
                        mock.with_fallback(move |p| responder.respond(p))
                    }
                    Fallback::RandomRatings => mock.with_fallback(random_rater),
                };
            }
            Box::new(mock)
        }
        BackendKind::Http => Box::new(HttpBackend::new(BackendConfig {
            endpoint: args.endpoint.clone(),
            model_name: args.model.clone(),
            max_concurrency: args.concurrency,
            timeout: Duration::from_secs(args.timeout_secs),
            retry_policy: RetryPolicy::default(),
            api_key: std::env::var(API_KEY_VAR).ok(),
        })),
    };
    let cached = CachedBackend::new(inner, ws.path("llm_cache")).map_err(|e| backend_failure(e.to_string()))?;
    Ok(if args.resume { cached } else { cached.refreshing() })
}

/// One request up front so an unreachable backend fails the stage at once
/// instead of once per review.
fn probe(backend: &dyn LlmBackend, prompt: &str) -> Result<()> {
    backend
        .complete(prompt)
        .map(|_| ())
        .map_err(|e| backend_failure(format!("LLM backend unavailable: {e}")))
}

fn failures_jsonl(failures: &[Failure]) -> Result<String> {
    let mut out = String::new();
    for f in failures {
        out.push_str(&serde_json::to_string(f)?);
        out.push('\n');
    }
    Ok(out)
}

#[derive(Debug, Serialize, Deserialize)]
struct RawAspects {
    counts: BTreeMap<String, usize>,
    clean: usize,
    fallback: usize,
    failed: usize,
}

fn extract(ws: &Workspace, cfg: &Config, seed: u64, input: &Path, format: &str, args: &BackendArgs) -> Result<()> {
    let fmt: CorpusFormat = format.parse().map_err(precondition)?;
    let params = json!({
        "format": format,
        "split": cfg.split,
        "seed": seed,
        "llm": backend_params(args)?,
    });
    let ran = ws.stage("extract", &[], &[input], &params, || {
        let (records, ids) = load_corpus(input, fmt).map_err(|e| precondition(e.to_string()))?;
        let split = split_interactions(&records, cfg.split.test, cfg.split.validation, seed)
            .map_err(|e| precondition(e.to_string()))?;
        let backend = make_backend(ws, args, Fallback::Keywords)?;
        if let Some(r) = records.iter().find(|r| r.has_review()) {
            probe(&backend, &discovery_prompt(&r.review_text))?;
        }
        let outcome = extract_corpus(&records, &backend, args.concurrency);
        let attempted = outcome.clean + outcome.fallback + outcome.failures.len();
        if attempted > 0 && outcome.failures.len() == attempted {
            ws.write("extract_failures.jsonl", failures_jsonl(&outcome.failures)?)?;
            return Err(backend_failure(format!(
                "all {attempted} discovery calls failed: {}",
                outcome.failures[0].error
            )));
        }
        if !outcome.failures.is_empty() {
            log::warn!("{} of {attempted} discovery calls failed", outcome.failures.len());
        }
        ws.write("idmaps.json", ids.to_json()?)?;
        ws.write("records.jsonl", records_to_jsonl(&records)?)?;
        ws.write("split.json", split.to_json()?)?;
        let raw = RawAspects {
            counts: outcome.counts,
            clean: outcome.clean,
            fallback: outcome.fallback,
            failed: outcome.failures.len(),
        };
        ws.write("raw_aspects.json", serde_json::to_string_pretty(&raw)? + "\n")?;
        ws.write("extract_failures.jsonl", failures_jsonl(&outcome.failures)?)?;
        println!(
            "{} interactions, {} users, {} items; {} distinct raw aspects ({} cache hits)",
            records.len(),
            ids.num_users(),
            ids.num_items(),
            raw.counts.len(),
            backend.hits()
        );
        Ok(["idmaps.json", "records.jsonl", "split.json", "raw_aspects.json"].map(String::from).to_vec())
    })?;
    report_skip("extract", ran);
    Ok(())
}

fn report_skip(stage: &str, ran: bool) {
    if !ran {
        println!("{stage}: up to date");
    }
}

fn consolidate(ws: &Workspace, n: usize, merge: Option<&Path>) -> Result<()> {
    let external: Vec<&Path> = merge.into_iter().collect();
    let params = json!({ "n": n });
    let ran = ws.stage("consolidate", &["raw_aspects.json"], &external, &params, || {
        let raw: RawAspects = serde_json::from_str(&ws.read_string("raw_aspects.json")?)?;
        let rules = match merge {
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                toml::from_str::<MergeRules>(&text).with_context(|| format!("parsing {}", p.display()))?
            }
            None => MergeRules::default(),
        };
        let vocab = consolidate_aspects(&raw.counts, n, &rules).map_err(|e| precondition(e.to_string()))?;
        ws.write("aspects.json", vocab.to_json()? + "\n")?;
        for (k, a) in vocab.aspects.iter().enumerate() {
            println!("{:>2}. {:<20} {}", k + 1, a.name, a.frequency);
        }
        Ok(vec!["aspects.json".into()])
    })?;
    report_skip("consolidate", ran);
    Ok(())
}

fn annotate(ws: &Workspace, args: &BackendArgs) -> Result<()> {
    let params = json!({ "llm": backend_params(args)? });
    let ran = ws.stage("annotate", &["records.jsonl", "aspects.json"], &[], &params, || {
        let records = records_from_jsonl(&ws.read_string("records.jsonl")?)?;
        let vocab = AspectVocabulary::from_json(&ws.read_string("aspects.json")?)?;
        let backend = make_backend(ws, args, Fallback::Keywords)?;
        if let Some(r) = records.iter().find(|r| r.has_review()) {
            probe(&backend, &annotation_prompt(&r.review_text, &vocab.names()))?;
        }
        let (annotations, failures) = annotate_corpus(&records, &vocab, &backend, args.concurrency);
        ws.write("annotate_failures.jsonl", failures_jsonl(&failures)?)?;
        if !annotations.is_empty() && failures.len() == annotations.len() {
            return Err(backend_failure(format!(
                "all {} annotation calls failed: {}",
                failures.len(),
                failures[0].error
            )));
        }
        if !failures.is_empty() {
            log::warn!("{} of {} annotation calls failed", failures.len(), annotations.len());
        }
        ws.write("annotations.jsonl", annotations_to_jsonl(&annotations)?)?;
        println!(
            "annotated {} reviews, {} failed ({} cache hits)",
            annotations.len(),
            failures.len(),
            backend.hits()
        );
        Ok(vec!["annotations.jsonl".into()])
    })?;
    report_skip("annotate", ran);
    Ok(())
}

struct Loaded {
    records: Vec<InteractionRecord>,
    ids: IdMaps,
    split: SplitSpec,
}

fn load_base(ws: &Workspace) -> Result<Loaded> {
    Ok(Loaded {
        records: records_from_jsonl(&ws.read_string("records.jsonl")?)?,
        ids: IdMaps::from_json(&ws.read_string("idmaps.json")?)?,
        split: SplitSpec::from_json(&ws.read_string("split.json")?)?,
    })
}

const STORE_INPUTS: [&str; 5] = ["annotations.jsonl", "records.jsonl", "split.json", "idmaps.json", "aspects.json"];

fn load_store(ws: &Workspace) -> Result<(AspectInteractionStore, Loaded)> {
    let base = load_base(ws)?;
    let vocab = AspectVocabulary::from_json(&ws.read_string("aspects.json")?)?;
    let annotations = annotations_from_jsonl(&ws.read_string("annotations.jsonl")?)?;
    let pairs: Vec<_> = base.records.iter().map(InteractionRecord::pair).collect();
    let store = build_aspect_interactions(&annotations, &pairs, base.ids.num_users(), base.ids.num_items(), &vocab)
        .map_err(|e| precondition(e.to_string()))?;
    Ok((store, base))
}

fn build(ws: &Workspace) -> Result<()> {
    let ran = ws.stage("build-graphs", &STORE_INPUTS, &[], &json!({}), || {
        let (store, base) = load_store(ws)?;
        let graphs = build_graphs(&store, &base.split.train);
        ws.write("graphs.bin", graphs.to_bytes())?;
        let summary = graphs.summary();
        ws.write("graphs.summary.json", serde_json::to_string_pretty(&summary)? + "\n")?;
        for a in &summary.aspects {
            println!("{:<20} {} train edges", a.name, a.edges);
        }
        Ok(vec!["graphs.bin".into(), "graphs.summary.json".into()])
    })?;
    report_skip("build-graphs", ran);
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelMeta {
    aspects: Vec<String>,
    model: ModelConfig,
    train: TrainConfig,
    graphs_sha256: String,
    best_epoch: usize,
    epochs_run: usize,
}

fn load_graphs(ws: &Workspace) -> Result<NormalizedAspectGraph> {
    NormalizedAspectGraph::from_bytes(&ws.read_bytes("graphs.bin")?).map_err(|e| precondition(format!("graphs.bin: {e}")))
}

fn train_cmd(ws: &Workspace, cfg: &Config) -> Result<()> {
    let params = json!({ "model": cfg.model, "train": cfg.train });
    let ran = ws.stage("train", &["graphs.bin", "split.json"], &[], &params, || {
        let graphs = load_graphs(ws)?;
        let split = SplitSpec::from_json(&ws.read_string("split.json")?)?;
        let model = ModelConfig {
            num_aspects: graphs.num_aspects(),
            ..cfg.model.clone()
        };
        let k = cfg.train.eval_k;
        let outcome = train(&split, &graphs, &model, &cfg.train, |e| {
            log::info!(
                "epoch {:>4} loss {:.6} val recall@{k} {}",
                e.epoch,
                e.mean_loss,
                e.val_recall.map_or("-".into(), |r| format!("{r:.4}"))
            );
        })
        .map_err(|e| match e {
            TrainError::Divergence { .. } => divergence(e.to_string()),
            other => precondition(other.to_string()),
        })?;
        let mut log_text = String::new();
        let mut timing = String::new();
        for e in &outcome.log {
            log_text.push_str(&e.log_line(k));
            log_text.push('\n');
            timing.push_str(&e.timing_line());
            timing.push('\n');
        }
        ws.write("training_log.jsonl", log_text)?;
        ws.write("training_timing.jsonl", timing)?;
        ws.write("model.ckpt", checkpoint_to_bytes(&outcome.table, &model))?;
        let meta = ModelMeta {
            aspects: graphs.aspect_names(),
            model,
            train: cfg.train.clone(),
            graphs_sha256: sha256_hex(&ws.read_bytes("graphs.bin")?),
            best_epoch: outcome.best_epoch,
            epochs_run: outcome.log.len(),
        };
        ws.write("model.meta.json", serde_json::to_string_pretty(&meta)? + "\n")?;
        println!("trained {} epochs, best epoch {}", meta.epochs_run, meta.best_epoch);
        Ok(["model.ckpt", "model.meta.json", "training_log.jsonl"].map(String::from).to_vec())
    })?;
    report_skip("train", ran);
    Ok(())
}

/// Checkpoint plus the graphs it was trained on, after consistency checks.
fn load_model(ws: &Workspace) -> Result<(sagcn::EmbeddingTable, ModelMeta, NormalizedAspectGraph)> {
    let meta: ModelMeta = serde_json::from_str(&ws.read_string("model.meta.json")?)?;
    let graphs_hash = sha256_hex(&ws.read_bytes("graphs.bin")?);
    if graphs_hash != meta.graphs_sha256 {
        return Err(precondition(
            "the checkpoint was trained on different graphs than graphs.bin; rerun `sagcn train`",
        ));
    }
    let (table, ckpt_model) =
        checkpoint_from_bytes(&ws.read_bytes("model.ckpt")?).map_err(|e| precondition(format!("model.ckpt: {e}")))?;
    if ckpt_model != meta.model {
        return Err(precondition(
            "model.ckpt and model.meta.json disagree on the model config; rerun `sagcn train`",
        ));
    }
    let graphs = load_graphs(ws)?;
    if graphs.aspect_names() != meta.aspects {
        return Err(precondition("graph aspects differ from the checkpoint's; rerun `sagcn train`"));
    }
    Ok((table, meta, graphs))
}

fn metrics_json(report: &MetricReport) -> Value {
    let mut m = serde_json::Map::new();
    m.insert("num_eval_users".into(), report.num_eval_users.into());
    for (k, v) in &report.recall_at {
        m.insert(format!("recall@{k}"), (*v).into());
    }
    for (k, v) in &report.ndcg_at {
        m.insert(format!("ndcg@{k}"), (*v).into());
    }
    Value::Object(m)
}

fn print_report(label: &str, report: &MetricReport) {
    let parts: Vec<String> = report
        .recall_at
        .iter()
        .map(|(k, r)| format!("recall@{k} {r:.4} ndcg@{k} {:.4}", report.ndcg(*k)))
        .collect();
    println!("{label:<20} {}", parts.join("  "));
}

fn resolve(ids: &IdMaps, entity: Entity, key: &str) -> Result<usize> {
    let (found, n) = match entity {
        Entity::User => (ids.user_index(key), ids.num_users()),
        Entity::Item => (ids.item_index(key), ids.num_items()),
    };
    if let Some(i) = found {
        return Ok(i);
    }
    match key.parse::<usize>() {
        Ok(i) if i < n => Ok(i),
        _ => Err(precondition(format!("unknown {entity:?} `{key}`").to_lowercase())),
    }
}

fn eval_cmd(
    ws: &Workspace,
    ks: &[usize],
    per_aspect: bool,
    independence: Option<Option<String>>,
    split_kind: EvalSplit,
) -> Result<()> {
    if ks.is_empty() || ks.contains(&0) {
        bail!(precondition("--k values must be >= 1"));
    }
    let params = json!({
        "ks": ks,
        "per_aspect": per_aspect,
        "independence": independence,
        "split": format!("{split_kind:?}").to_lowercase(),
    });
    let inputs = ["model.ckpt", "model.meta.json", "graphs.bin", "split.json", "idmaps.json"];
    let ran = ws.stage("eval", &inputs, &[], &params, || {
        let (table, meta, graphs) = load_model(ws)?;
        let split = SplitSpec::from_json(&ws.read_string("split.json")?)?;
        let ids = IdMaps::from_json(&ws.read_string("idmaps.json")?)?;
        let protocol = match split_kind {
            EvalSplit::Test => EvalProtocol::test(&split, graphs.num_users()),
            EvalSplit::Validation => EvalProtocol::validation(&split, graphs.num_users()),
        };
        let cache = forward(&table, &graphs, meta.model.num_layers, meta.model.include_layer0_block)?;
        let report = evaluate(&cache, &protocol, ks);
        print_report("all aspects", &report);
        let mut metrics = metrics_json(&report);
        metrics["split"] = json!(format!("{split_kind:?}").to_lowercase());
        ws.write("metrics.json", serde_json::to_string_pretty(&metrics)? + "\n")?;
        let mut outputs = vec!["metrics.json".to_string()];

        if per_aspect {
            let mut rows = Vec::new();
            for (a, name) in meta.aspects.iter().enumerate() {
                let r = aspect_contribution(&table, &graphs, &meta.model, &protocol, &[a], ks)?;
                print_report(name, &r);
                let mut v = metrics_json(&r);
                v["aspect"] = json!(name);
                rows.push(v);
            }
            ws.write("aspect_contribution.json", serde_json::to_string_pretty(&rows)? + "\n")?;
            outputs.push("aspect_contribution.json".into());
        }
        if let Some(user) = independence {
            let u = match &user {
                Some(key) => resolve(&ids, Entity::User, key)?,
                None => 0,
            };
            let m = cache.aspect_independence(Entity::User, u)?;
            ws.write("independence.csv", independence_to_csv(&meta.aspects, &m))?;
            outputs.push("independence.csv".into());
        }
        Ok(outputs)
    })?;
    report_skip("eval", ran);
    Ok(())
}

fn explain(ws: &Workspace, user: &str, items: &[String]) -> Result<()> {
    if items.is_empty() {
        bail!(precondition("give at least one --item"));
    }
    ws.require(&["model.ckpt", "model.meta.json", "graphs.bin", "idmaps.json"])?;
    let (table, meta, graphs) = load_model(ws)?;
    let ids = IdMaps::from_json(&ws.read_string("idmaps.json")?)?;
    let u = resolve(&ids, Entity::User, user)?;
    let cols: Vec<usize> = items
        .iter()
        .map(|i| resolve(&ids, Entity::Item, i))
        .collect::<Result<_>>()?;
    let cache = forward(&table, &graphs, meta.model.num_layers, meta.model.include_layer0_block)?;
    let scores: Vec<Vec<f64>> = cols
        .iter()
        .map(|&i| cache.score_by_aspect(u, i))
        .collect::<Result<_, _>>()?;

    println!("preferences of user {}", ids.user_id(u).unwrap_or(user));
    let mut header = format!("{:<20}", "aspect");
    for &i in &cols {
        header.push_str(&format!(" {:>12}", ids.item_id(i).unwrap_or("?")));
    }
    println!("{header}");
    for (a, name) in meta.aspects.iter().enumerate() {
        let mut line = format!("{name:<20}");
        for s in &scores {
            line.push_str(&format!(" {:>12.6}", s[a]));
        }
        println!("{line}");
    }
    let mut total = format!("{:<20}", "total");
    for s in &scores {
        total.push_str(&format!(" {:>12.6}", s.iter().sum::<f64>()));
    }
    println!("{total}");
    Ok(())
}

fn sweep(ws: &Workspace, cfg: &Config, ns: &[usize], ks: &[usize]) -> Result<()> {
    let params = json!({ "ns": ns, "ks": ks, "model": cfg.model, "train": cfg.train });
    let ran = ws.stage("sweep", &STORE_INPUTS, &[], &params, || {
        let (store, base) = load_store(ws)?;
        let ns: Vec<usize> = if ns.is_empty() {
            (1..=store.num_aspects()).collect()
        } else {
            ns.to_vec()
        };
        let rows = aspect_count_sweep(&store, &base.split, &cfg.model, &cfg.train, &ns, ks).map_err(|e| match e {
            sagcn::eval::EvalError::Train(t @ TrainError::Divergence { .. }) => divergence(t.to_string()),
            other => precondition(other.to_string()),
        })?;
        for r in &rows {
            print_report(&format!("n = {}", r.n), &r.report);
        }
        ws.write("sweep.csv", sweep_to_csv(&rows, ks))?;
        Ok(vec!["sweep.csv".into()])
    })?;
    report_skip("sweep", ran);
    Ok(())
}

fn llm_rank(ws: &Workspace, config: &LlmRankConfig, titles: Option<&Path>, args: &BackendArgs) -> Result<()> {
    let external: Vec<&Path> = titles.into_iter().collect();
    let params = json!({ "config": config, "llm": backend_params(args)? });
    let inputs = ["records.jsonl", "split.json", "idmaps.json"];
    let ran = ws.stage("llm-rank", &inputs, &external, &params, || {
        let base = load_base(ws)?;
        let title_map: BTreeMap<String, String> = match titles {
            Some(p) => serde_json::from_str(&fs::read_to_string(p)?).with_context(|| format!("parsing {}", p.display()))?,
            None => BTreeMap::new(),
        };
        let ids = &base.ids;
        let title = |i: usize| {
            let id = ids.item_id(i).unwrap_or_default();
            title_map.get(id).cloned().unwrap_or_else(|| format!("Product {id}"))
        };
        let backend = make_backend(ws, args, Fallback::RandomRatings)?;
        let report = run_llm_rank(&base.records, &base.split, ids, config, &title, &backend);
        let mut out = metrics_json(&report.metrics);
        out["sampled_users"] = json!(report.users.len());
        out["failures"] = json!(report.failures);
        ws.write("llm_rank.json", serde_json::to_string_pretty(&out)? + "\n")?;
        print_report("llm rank", &report.metrics);
        if !report.users.is_empty() && report.failures.len() == report.users.len() {
            return Err(backend_failure(format!(
                "all {} ranking calls failed; partial report in llm_rank.json",
                report.failures.len()
            )));
        }
        Ok(vec!["llm_rank.json".into()])
    })?;
    report_skip("llm-rank", ran);
    Ok(())
}
