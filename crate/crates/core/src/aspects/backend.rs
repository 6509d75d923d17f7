//! LLM backends: the trait, a deterministic mock, an HTTP chat-completion
//! adapter, an on-disk response cache, and a bounded worker pool.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::prompts::{self, ChainPrompt};
use crate::util::{sha256_hex, write_atomic};

#[derive(Debug, Clone, thiserror::Error)]
pub enum BackendError {
    #[error("request timed out")]
    Timeout,
    #[error("server returned status {0}")]
    Status(u16),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("malformed response: {0}")]
    BadResponse(String),
    #[error("no canned response for request {0}")]
    MissingFixture(String),
    #[error("cache error: {0}")]
    Cache(String),
}

impl BackendError {
    fn retryable(&self) -> bool {
        match self {
            Self::Timeout | Self::Transport(_) => true,
            Self::Status(s) => *s >= 500 || *s == 429,
            _ => false,
        }
    }
}

/// A text-in, text-out completion service.
pub trait LlmBackend: Send + Sync {
    fn model_name(&self) -> &str;
    fn complete(&self, prompt: &str) -> Result<String, BackendError>;

    /// Upper bound on requests in flight.
    fn max_concurrency(&self) -> usize {
        1
    }
}

impl<T: LlmBackend + ?Sized> LlmBackend for Box<T> {
    fn model_name(&self) -> &str {
        (**self).model_name()
    }
    fn complete(&self, prompt: &str) -> Result<String, BackendError> {
        (**self).complete(prompt)
    }
    fn max_concurrency(&self) -> usize {
        (**self).max_concurrency()
    }
}

/// Content hash identifying one `(model, prompt)` request.
pub fn request_hash(model: &str, prompt: &str) -> String {
    let mut bytes = Vec::with_capacity(model.len() + prompt.len() + 1);
    bytes.extend_from_slice(model.as_bytes());
    bytes.push(0);
    bytes.extend_from_slice(prompt.as_bytes());
    sha256_hex(&bytes)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            backoff: Duration::from_millis(500),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BackendConfig {
    pub endpoint: String,
    pub model_name: String,
    pub max_concurrency: usize,
    pub timeout: Duration,
    pub retry_policy: RetryPolicy,
    /// Bearer token, usually read from the environment by the caller.
    pub api_key: Option<String>,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            endpoint: "http://localhost:8000/v1/chat/completions".into(),
            model_name: "vicuna-13b-v1.5".into(),
            max_concurrency: 4,
            timeout: Duration::from_secs(60),
            retry_policy: RetryPolicy::default(),
            api_key: None,
        }
    }
}

type Responder = dyn Fn(&str) -> String + Send + Sync;

/// Deterministic, network-free backend.
///
/// Canned responses are looked up by [`request_hash`]. Misses go to the
/// fallback responder when one is set, and are an error otherwise.
pub struct MockBackend {
    model: String,
    canned: HashMap<String, String>,
    fallback: Option<Box<Responder>>,
    calls: AtomicUsize,
    concurrency: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct FixtureEntry {
    #[serde(default)]
    hash: Option<String>,
    #[serde(default)]
    prompt: Option<String>,
    response: String,
}

impl MockBackend {
    pub fn new(model: impl Into<String>) -> Self {
        Self {
            model: model.into(),
            canned: HashMap::new(),
            fallback: None,
            calls: AtomicUsize::new(0),
            concurrency: 4,
        }
    }

    pub fn with_response(mut self, prompt: &str, response: impl Into<String>) -> Self {
        self.canned
            .insert(request_hash(&self.model, prompt), response.into());
        self
    }

    pub fn with_fallback<F>(mut self, f: F) -> Self
    where
        F: Fn(&str) -> String + Send + Sync + 'static,
    {
        self.fallback = Some(Box::new(f));
        self
    }

    pub fn with_concurrency(mut self, n: usize) -> Self {
        self.concurrency = n.max(1);
        self
    }

    /// Load every `*.jsonl` file in `dir`. Each line is
    /// `{"prompt": ..., "response": ...}` or `{"hash": ..., "response": ...}`.
    pub fn load_fixtures(mut self, dir: &Path) -> Result<Self, BackendError> {
        let mut paths: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| BackendError::Cache(format!("{}: {e}", dir.display())))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
            .collect();
        paths.sort();
        for path in paths {
            let text = fs::read_to_string(&path)
                .map_err(|e| BackendError::Cache(format!("{}: {e}", path.display())))?;
            for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
                let entry: FixtureEntry = serde_json::from_str(line).map_err(|e| {
                    BackendError::Cache(format!("{}:{}: {e}", path.display(), n + 1))
                })?;
                let key = match (entry.hash, entry.prompt) {
                    (Some(h), _) => h,
                    (None, Some(p)) => request_hash(&self.model, &p),
                    (None, None) => {
                        return Err(BackendError::Cache(format!(
                            "{}:{}: entry needs `prompt` or `hash`",
                            path.display(),
                            n + 1
                        )))
                    }
                };
                self.canned.insert(key, entry.response);
            }
        }
        Ok(self)
    }

    /// Number of `complete` calls served so far.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl LlmBackend for MockBackend {
    fn model_name(&self) -> &str {
        &self.model
    }

    fn complete(&self, prompt: &str) -> Result<String, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let key = request_hash(&self.model, prompt);
        if let Some(r) = self.canned.get(&key) {
            return Ok(r.clone());
        }
        match &self.fallback {
            Some(f) => Ok(f(prompt)),
            None => Err(BackendError::MissingFixture(key)),
        }
    }

    fn max_concurrency(&self) -> usize {
        self.concurrency
    }
}

/// Rule-based stand-in for an LLM on the two chain prompts: reports an
/// aspect when one of its keywords occurs in the review.
#[derive(Debug, Clone)]
pub struct KeywordResponder {
    lexicon: Vec<(String, Vec<String>)>,
}

impl Default for KeywordResponder {
    fn default() -> Self {
        let table: &[(&str, &[&str])] = &[
            ("quality", &["quality", "well made", "sturdy", "cheaply made"]),
            ("functionality", &["functionality", "works", "function", "functional"]),
            ("ease of use", &["ease of use", "easy to use", "easy", "simple to use"]),
            ("convenience", &["convenience", "convenient", "handy"]),
            ("comfort", &["comfort", "comfortable"]),
            ("durability", &["durability", "durable", "broke", "lasted", "fell apart"]),
            ("design", &["design", "designed", "looks", "color"]),
            ("price", &["price", "cost", "cheap", "expensive", "value"]),
            ("size", &["size", "small", "large", "big"]),
        ];
        Self::new(
            table
                .iter()
                .map(|(a, k)| (a.to_string(), k.iter().map(|s| s.to_string()).collect()))
                .collect(),
        )
    }
}

fn title_case(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

impl KeywordResponder {
    pub fn new(lexicon: Vec<(String, Vec<String>)>) -> Self {
        Self { lexicon }
    }

    fn keywords(&self, aspect: &str) -> Vec<String> {
        self.lexicon
            .iter()
            .find(|(a, _)| a == aspect)
            .map(|(_, k)| k.clone())
            .unwrap_or_else(|| vec![aspect.to_owned()])
    }

    fn mentions(&self, review: &str, aspect: &str) -> bool {
        let lower = review.to_lowercase();
        self.keywords(aspect)
            .iter()
            .any(|k| prompts::find_word(&lower, k).is_some())
    }

    pub fn respond(&self, prompt: &str) -> String {
        match prompts::parse_chain_prompt(prompt) {
            Some(ChainPrompt::Discovery { review }) => {
                let found: Vec<&str> = self
                    .lexicon
                    .iter()
                    .map(|(a, _)| a.as_str())
                    .filter(|a| self.mentions(&review, a))
                    .collect();
                if found.is_empty() {
                    return "The review does not point to any specific perspective.".into();
                }
                found
                    .iter()
                    .enumerate()
                    .map(|(k, a)| {
                        format!("{}. {}: The customer commented on the {a}.", k + 1, title_case(a))
                    })
                    .collect::<Vec<_>>()
                    .join("\n")
            }
            Some(ChainPrompt::Annotation { review, aspects }) => aspects
                .iter()
                .enumerate()
                .map(|(k, a)| {
                    let body = if self.mentions(&review, a) {
                        format!("The customer mentioned the {a} of the product.")
                    } else {
                        format!("The customer did not mention anything about the {a}.")
                    };
                    format!("{}. {}: {body}", k + 1, title_case(a))
                })
                .collect::<Vec<_>>()
                .join("\n"),
            None => "I am not sure how to answer that.".into(),
        }
    }
}

/// Chat-completion client (`POST {endpoint}` with a single user message).
pub struct HttpBackend {
    config: BackendConfig,
    agent: ureq::Agent,
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: Vec<ChatMessage<'a>>,
    temperature: f64,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatContent,
}

#[derive(Deserialize)]
struct ChatContent {
    content: String,
}

impl HttpBackend {
    pub fn new(config: BackendConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.timeout))
            .http_status_as_error(false)
            .build()
            .new_agent();
        Self { config, agent }
    }

    fn attempt(&self, prompt: &str) -> Result<String, BackendError> {
        let body = ChatRequest {
            model: &self.config.model_name,
            messages: vec![ChatMessage {
                role: "user",
                content: prompt,
            }],
            temperature: 0.0,
        };
        let payload = serde_json::to_string(&body).map_err(|e| BackendError::BadResponse(e.to_string()))?;
        let mut req = self
            .agent
            .post(&self.config.endpoint)
            .header("Content-Type", "application/json");
        if let Some(key) = &self.config.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send(payload.as_str()).map_err(|e| match e {
            ureq::Error::Timeout(_) => BackendError::Timeout,
            other => BackendError::Transport(other.to_string()),
        })?;
        let status = resp.status().as_u16();
        if status != 200 {
            return Err(BackendError::Status(status));
        }
        let parsed: ChatResponse = resp
            .body_mut()
            .read_json()
            .map_err(|e| BackendError::BadResponse(e.to_string()))?;
        parsed
            .choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| BackendError::BadResponse("no choices".into()))
    }
}

impl LlmBackend for HttpBackend {
    fn model_name(&self) -> &str {
        &self.config.model_name
    }

    fn complete(&self, prompt: &str) -> Result<String, BackendError> {
        let policy = self.config.retry_policy;
        let mut delay = policy.backoff;
        let mut attempt = 0;
        loop {
            match self.attempt(prompt) {
                Ok(r) => return Ok(r),
                Err(e) if e.retryable() && attempt < policy.max_retries => {
                    log::warn!("llm request failed ({e}), retry {}", attempt + 1);
                    std::thread::sleep(delay);
                    delay *= 2;
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }

    fn max_concurrency(&self) -> usize {
        self.config.max_concurrency.max(1)
    }
}

#[derive(Serialize, Deserialize)]
struct CacheEntry {
    model: String,
    prompt: String,
    response: String,
}

/// Response cache in front of another backend, one JSON file per request
/// hash. Entries are written once unless the cache is refreshing.
pub struct CachedBackend<B> {
    inner: B,
    dir: PathBuf,
    reads: bool,
    hits: AtomicUsize,
    misses: AtomicUsize,
}

impl<B: LlmBackend> CachedBackend<B> {
    pub fn new(inner: B, dir: impl Into<PathBuf>) -> Result<Self, BackendError> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| BackendError::Cache(e.to_string()))?;
        Ok(Self {
            inner,
            dir,
            reads: true,
            hits: AtomicUsize::new(0),
            misses: AtomicUsize::new(0),
        })
    }

    /// Query the inner backend for every prompt and overwrite what is stored.
    pub fn refreshing(mut self) -> Self {
        self.reads = false;
        self
    }

    fn path_for(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.json"))
    }

    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::SeqCst)
    }

    pub fn misses(&self) -> usize {
        self.misses.load(Ordering::SeqCst)
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }
}

impl<B: LlmBackend> LlmBackend for CachedBackend<B> {
    fn model_name(&self) -> &str {
        self.inner.model_name()
    }

    fn complete(&self, prompt: &str) -> Result<String, BackendError> {
        let key = request_hash(self.inner.model_name(), prompt);
        let path = self.path_for(&key);
        if let Some(text) = self.reads.then(|| fs::read_to_string(&path).ok()).flatten() {
            if let Ok(entry) = serde_json::from_str::<CacheEntry>(&text) {
                if entry.prompt == prompt {
                    self.hits.fetch_add(1, Ordering::SeqCst);
                    return Ok(entry.response);
                }
            }
        }
        self.misses.fetch_add(1, Ordering::SeqCst);
        let response = self.inner.complete(prompt)?;
        if !self.reads || !path.exists() {
            let entry = CacheEntry {
                model: self.inner.model_name().to_owned(),
                prompt: prompt.to_owned(),
                response: response.clone(),
            };
            let bytes = serde_json::to_vec(&entry).map_err(|e| BackendError::Cache(e.to_string()))?;
            write_atomic(&path, &bytes).map_err(|e| BackendError::Cache(e.to_string()))?;
        }
        Ok(response)
    }

    fn max_concurrency(&self) -> usize {
        self.inner.max_concurrency()
    }
}

/// Map `f` over `items` with at most `workers` in flight. Output order
/// matches input order.
pub fn run_pool<T, R, F>(items: &[T], workers: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    let workers = workers.clamp(1, items.len().max(1));
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::SeqCst);
                if k >= items.len() {
                    break;
                }
                let r = f(&items[k]);
                slots.lock().expect("pool slot lock")[k] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("pool slot lock")
        .into_iter()
        .map(|r| r.expect("every slot filled"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;

    #[test]
    fn mock_is_keyed_by_hash() {
        let m = MockBackend::new("m").with_response("hello", "world");
        assert_eq!(m.complete("hello").unwrap(), "world");
        assert!(matches!(m.complete("other"), Err(BackendError::MissingFixture(_))));
        assert_eq!(m.calls(), 2);
    }

    #[test]
    fn fixtures_load_from_dir() {
        let dir = tempfile::tempdir().unwrap();
        let key = request_hash("m", "b");
        fs::write(
            dir.path().join("a.jsonl"),
            format!(
                "{{\"prompt\":\"a\",\"response\":\"A\"}}\n{{\"hash\":\"{key}\",\"response\":\"B\"}}\n"
            ),
        )
        .unwrap();
        let m = MockBackend::new("m").load_fixtures(dir.path()).unwrap();
        assert_eq!(m.complete("a").unwrap(), "A");
        assert_eq!(m.complete("b").unwrap(), "B");
    }

    #[test]
    fn keyword_responder_answers_both_prompts() {
        let r = KeywordResponder::default();
        let p1 = prompts::discovery_prompt("Great price, and it is very comfortable.");
        let aspects = prompts::parse_aspect_list(&r.respond(&p1));
        assert_eq!(aspects, vec!["comfort", "price"]);
        let p2 = prompts::annotation_prompt("Great price.", &["quality", "price"]);
        let out = r.respond(&p2);
        assert!(out.contains("did not mention anything about the quality"));
        assert!(out.contains("2. Price: The customer mentioned"));
    }

    #[test]
    fn cache_serves_repeat_requests() {
        let dir = tempfile::tempdir().unwrap();
        let cached = CachedBackend::new(MockBackend::new("m").with_fallback(|p| p.to_uppercase()), dir.path())
            .unwrap();
        assert_eq!(cached.complete("abc").unwrap(), "ABC");
        assert_eq!(cached.complete("abc").unwrap(), "ABC");
        assert_eq!((cached.hits(), cached.misses()), (1, 1));
        assert_eq!(cached.inner().calls(), 1);

        let again = CachedBackend::new(MockBackend::new("m"), dir.path()).unwrap();
        assert_eq!(again.complete("abc").unwrap(), "ABC");
        assert_eq!(again.inner().calls(), 0);

        let fresh = CachedBackend::new(MockBackend::new("m").with_fallback(|p| p.repeat(2)), dir.path())
            .unwrap()
            .refreshing();
        assert_eq!(fresh.complete("abc").unwrap(), "abcabc");
        let reread = CachedBackend::new(MockBackend::new("m"), dir.path()).unwrap();
        assert_eq!(reread.complete("abc").unwrap(), "abcabc");
    }

    #[test]
    fn pool_preserves_order_and_bounds_concurrency() {
        let in_flight = AtomicUsize::new(0);
        let peak = AtomicUsize::new(0);
        let items: Vec<usize> = (0..40).collect();
        let out = run_pool(&items, 3, |&x| {
            let now = in_flight.fetch_add(1, Ordering::SeqCst) + 1;
            peak.fetch_max(now, Ordering::SeqCst);
            std::thread::sleep(Duration::from_millis(2));
            in_flight.fetch_sub(1, Ordering::SeqCst);
            x * 2
        });
        assert_eq!(out, items.iter().map(|x| x * 2).collect::<Vec<_>>());
        assert!(peak.load(Ordering::SeqCst) <= 3);
    }

    fn serve_once(status: &'static str, body: &'static str) -> (String, std::thread::JoinHandle<String>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let handle = std::thread::spawn(move || {
            let (mut stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut headers = String::new();
            let mut len = 0usize;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if line.to_lowercase().starts_with("content-length:") {
                    len = line[15..].trim().parse().unwrap();
                }
                if line == "\r\n" {
                    break;
                }
                headers.push_str(&line);
            }
            let mut buf = vec![0u8; len];
            reader.read_exact(&mut buf).unwrap();
            let reply = format!(
                "HTTP/1.1 {status}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            );
            stream.write_all(reply.as_bytes()).unwrap();
            format!("{headers}\n{}", String::from_utf8(buf).unwrap())
        });
        (format!("http://{addr}/v1/chat/completions"), handle)
    }

    #[test]
    fn http_backend_speaks_chat_completion() {
        let (url, server) = serve_once(
            "200 OK",
            r#"{"choices":[{"message":{"role":"assistant","content":"1. Quality: fine"}}]}"#,
        );
        let backend = HttpBackend::new(BackendConfig {
            endpoint: url,
            model_name: "test-model".into(),
            api_key: Some("secret".into()),
            ..BackendConfig::default()
        });
        assert_eq!(backend.complete("hi there").unwrap(), "1. Quality: fine");
        let request = server.join().unwrap();
        assert!(request.contains("Bearer secret"));
        let body: serde_json::Value =
            serde_json::from_str(request.rsplit('\n').next().unwrap()).unwrap();
        assert_eq!(body["model"], "test-model");
        assert_eq!(body["temperature"], 0.0);
        assert_eq!(body["messages"][0]["role"], "user");
        assert_eq!(body["messages"][0]["content"], "hi there");
    }

    #[test]
    fn http_backend_does_not_retry_client_errors() {
        let (url, server) = serve_once("400 Bad Request", "{}");
        let backend = HttpBackend::new(BackendConfig {
            endpoint: url,
            ..BackendConfig::default()
        });
        assert!(matches!(backend.complete("x"), Err(BackendError::Status(400))));
        server.join().unwrap();
    }
}
