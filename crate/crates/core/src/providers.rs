//! Chat-completion and embedding providers.
//!
//! Providers are thin: one request in, one response out. [`ChatClient`] adds
//! retry with exponential backoff, a token-bucket rate limiter and a response
//! cache keyed by a digest of the provider id and the request. Scripted
//! providers answer from in-process scripts so the pipeline can run offline.

use std::collections::{HashMap, VecDeque};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::rng::derive_rng;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProviderError {
    /// Worth retrying: timeouts, rate limiting, 5xx.
    #[error("transient provider failure: {0}")]
    Transient(String),
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("provider refused the request: {0}")]
    Refused(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("gave up after {attempts} attempts: {last}")]
    RetriesExhausted { attempts: u32, last: String },
    #[error("scripted provider has no reply left")]
    ScriptExhausted,
    #[error("malformed provider response: {0}")]
    Malformed(String),
    #[error("response cache: {0}")]
    Cache(String),
    #[error("embedding dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("zero embedding vector")]
    ZeroVector,
    #[error("provider configuration: {0}")]
    Config(String),
}

impl ProviderError {
    pub fn is_transient(&self) -> bool {
        matches!(self, ProviderError::Transient(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn user(content: impl Into<String>) -> Self {
        Message {
            role: Role::User,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub system_prompt: String,
    pub messages: Vec<Message>,
    pub temperature: f64,
    pub max_tokens: u32,
    /// Distinguishes repeated draws of an identical prompt. Part of the cache
    /// digest, never sent upstream.
    #[serde(default)]
    pub sample_index: u32,
}

impl ChatRequest {
    pub fn new(system_prompt: impl Into<String>, user: impl Into<String>, temperature: f64, max_tokens: u32) -> Self {
        ChatRequest {
            system_prompt: system_prompt.into(),
            messages: vec![Message::user(user)],
            temperature,
            max_tokens,
            sample_index: 0,
        }
    }

    pub fn validate(&self) -> Result<(), ProviderError> {
        if !(self.temperature > 0.0) {
            return Err(ProviderError::InvalidRequest(format!(
                "temperature {} must be positive",
                self.temperature
            )));
        }
        if self.messages.is_empty() {
            return Err(ProviderError::InvalidRequest("no messages".into()));
        }
        Ok(())
    }

    /// Text of the last user message, or "".
    pub fn last_user(&self) -> &str {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .map(|m| m.content.as_str())
            .unwrap_or("")
    }

    /// Hex SHA-256 over the provider id and the canonical JSON of the request.
    pub fn digest(&self, provider_id: &str) -> String {
        let mut h = Sha256::new();
        h.update((provider_id.len() as u64).to_le_bytes());
        h.update(provider_id.as_bytes());
        h.update(serde_json::to_vec(self).expect("request serializes"));
        hex::encode(h.finalize())
    }
}

pub trait ChatProvider: Send + Sync {
    /// Stable identifier (kind and model) used in cache digests.
    fn id(&self) -> String;
    fn complete(&self, request: &ChatRequest) -> Result<String, ProviderError>;
}

pub trait EmbeddingProvider: Send + Sync {
    fn model_id(&self) -> String;
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, ProviderError>;
}

impl<T: ChatProvider + ?Sized> ChatProvider for Arc<T> {
    fn id(&self) -> String {
        (**self).id()
    }
    fn complete(&self, request: &ChatRequest) -> Result<String, ProviderError> {
        (**self).complete(request)
    }
}

impl<T: EmbeddingProvider + ?Sized> EmbeddingProvider for Arc<T> {
    fn model_id(&self) -> String {
        (**self).model_id()
    }
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, ProviderError> {
        (**self).embed(texts)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub values: Vec<f64>,
    pub model_id: String,
}

impl EmbeddingVector {
    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// Cosine similarity. Errors on mismatched dimensions or a zero vector.
pub fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, ProviderError> {
    cosine_values(&a.values, &b.values)
}

pub fn cosine_values(a: &[f64], b: &[f64]) -> Result<f64, ProviderError> {
    if a.len() != b.len() {
        return Err(ProviderError::DimensionMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(ProviderError::ZeroVector);
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Embeds `texts` in order. All vectors must share one dimension and be
/// nonzero.
pub fn embed_texts(provider: &dyn EmbeddingProvider, texts: &[String]) -> Result<Vec<EmbeddingVector>, ProviderError> {
    if texts.is_empty() {
        return Err(ProviderError::InvalidRequest("no texts to embed".into()));
    }
    let raw = provider.embed(texts)?;
    if raw.len() != texts.len() {
        return Err(ProviderError::Malformed(format!(
            "{} vectors for {} texts",
            raw.len(),
            texts.len()
        )));
    }
    let model_id = provider.model_id();
    let dim = raw[0].len();
    raw.into_iter()
        .map(|values| {
            if values.len() != dim {
                return Err(ProviderError::DimensionMismatch {
                    left: dim,
                    right: values.len(),
                });
            }
            if values.iter().all(|v| *v == 0.0) {
                return Err(ProviderError::ZeroVector);
            }
            Ok(EmbeddingVector {
                values,
                model_id: model_id.clone(),
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Retry, rate limiting, cache

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    /// Retries after the first attempt.
    pub max_retries: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_retries: 5,
            base_delay_ms: 500,
            max_delay_ms: 30_000,
        }
    }
}

impl RetryPolicy {
    pub fn no_delay(max_retries: u32) -> Self {
        RetryPolicy {
            max_retries,
            base_delay_ms: 0,
            max_delay_ms: 0,
        }
    }

    pub fn delay(&self, retry: u32) -> Duration {
        let factor = 1u64.checked_shl(retry.min(32)).unwrap_or(u64::MAX);
        Duration::from_millis(self.base_delay_ms.saturating_mul(factor).min(self.max_delay_ms))
    }

    /// Runs `op`, retrying transient errors.
    pub fn run<T>(&self, mut op: impl FnMut() -> Result<T, ProviderError>) -> Result<T, ProviderError> {
        let mut retry = 0;
        loop {
            match op() {
                Ok(v) => return Ok(v),
                Err(e) if e.is_transient() => {
                    if retry >= self.max_retries {
                        return Err(ProviderError::RetriesExhausted {
                            attempts: retry + 1,
                            last: e.to_string(),
                        });
                    }
                    let wait = self.delay(retry);
                    log::warn!("{e}; retry {} in {wait:?}", retry + 1);
                    std::thread::sleep(wait);
                    retry += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }
}

/// Token bucket holding up to `burst` tokens, refilled at
/// `requests_per_minute`.
#[derive(Debug)]
pub struct RateLimiter {
    per_second: f64,
    burst: f64,
    state: Mutex<(f64, Instant)>,
}

impl RateLimiter {
    pub fn new(requests_per_minute: f64, burst: u32) -> Self {
        let burst = burst.max(1) as f64;
        RateLimiter {
            per_second: requests_per_minute / 60.0,
            burst,
            state: Mutex::new((burst, Instant::now())),
        }
    }

    /// Blocks until a token is available and takes it.
    pub fn acquire(&self) {
        loop {
            let wait = {
                let mut state = self.state.lock().expect("rate limiter poisoned");
                let now = Instant::now();
                let refill = now.duration_since(state.1).as_secs_f64() * self.per_second;
                state.0 = (state.0 + refill).min(self.burst);
                state.1 = now;
                if state.0 >= 1.0 {
                    state.0 -= 1.0;
                    return;
                }
                Duration::from_secs_f64((1.0 - state.0) / self.per_second)
            };
            std::thread::sleep(wait);
        }
    }
}

#[derive(Serialize, Deserialize)]
struct CacheFile {
    digest: String,
    response: String,
}

/// Response cache in memory and, optionally, on disk (one JSON file per
/// digest, written atomically via rename). Concurrent lookups of one digest
/// are serialized so the upstream is called at most once.
#[derive(Debug, Default)]
pub struct ResponseCache {
    dir: Option<PathBuf>,
    memory: Mutex<HashMap<String, String>>,
    locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
}

impl ResponseCache {
    pub fn in_memory() -> Self {
        ResponseCache::default()
    }

    pub fn on_disk(dir: impl Into<PathBuf>) -> Result<Self, ProviderError> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| ProviderError::Cache(format!("{}: {e}", dir.display())))?;
        Ok(ResponseCache {
            dir: Some(dir),
            ..Default::default()
        })
    }

    fn path(&self, digest: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(format!("{digest}.json")))
    }

    pub fn get(&self, digest: &str) -> Result<Option<String>, ProviderError> {
        if let Some(hit) = self.memory.lock().expect("cache poisoned").get(digest) {
            return Ok(Some(hit.clone()));
        }
        let Some(path) = self.path(digest) else { return Ok(None) };
        match fs::read_to_string(&path) {
            Ok(text) => {
                let file: CacheFile = serde_json::from_str(&text)
                    .map_err(|e| ProviderError::Cache(format!("{}: {e}", path.display())))?;
                self.memory
                    .lock()
                    .expect("cache poisoned")
                    .insert(digest.to_string(), file.response.clone());
                Ok(Some(file.response))
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(ProviderError::Cache(format!("{}: {e}", path.display()))),
        }
    }

    pub fn put(&self, digest: &str, response: &str) -> Result<(), ProviderError> {
        if let Some(path) = self.path(digest) {
            write_atomic(
                &path,
                &serde_json::to_vec_pretty(&CacheFile {
                    digest: digest.to_string(),
                    response: response.to_string(),
                })
                .expect("cache entry serializes"),
            )
            .map_err(|e| ProviderError::Cache(format!("{}: {e}", path.display())))?;
        }
        self.memory
            .lock()
            .expect("cache poisoned")
            .insert(digest.to_string(), response.to_string());
        Ok(())
    }

    /// Returns the cached response for `digest`, or computes, stores and
    /// returns it. The flag is true on a cache hit.
    pub fn get_or_fetch(
        &self,
        digest: &str,
        fetch: impl FnOnce() -> Result<String, ProviderError>,
    ) -> Result<(String, bool), ProviderError> {
        let lock = self
            .locks
            .lock()
            .expect("cache poisoned")
            .entry(digest.to_string())
            .or_default()
            .clone();
        let _guard = lock.lock().expect("cache entry poisoned");
        if let Some(hit) = self.get(digest)? {
            return Ok((hit, true));
        }
        let response = fetch()?;
        self.put(digest, &response)?;
        Ok((response, false))
    }
}

/// Writes via a sibling temp file and rename so readers never see a partial
/// file.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    static COUNTER: AtomicUsize = AtomicUsize::new(0);
    let tmp = dir.join(format!(
        ".{}.{}.{}.tmp",
        path.file_name().and_then(|n| n.to_str()).unwrap_or("out"),
        std::process::id(),
        COUNTER.fetch_add(1, Ordering::Relaxed)
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

/// A chat provider wrapped with retry, optional rate limiting and optional
/// caching. Shareable across threads.
pub struct ChatClient {
    provider: Arc<dyn ChatProvider>,
    retry: RetryPolicy,
    limiter: Option<RateLimiter>,
    cache: Option<ResponseCache>,
    upstream_calls: AtomicUsize,
}

impl ChatClient {
    pub fn new(provider: Arc<dyn ChatProvider>) -> Self {
        ChatClient {
            provider,
            retry: RetryPolicy::default(),
            limiter: None,
            cache: None,
            upstream_calls: AtomicUsize::new(0),
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_rate_limit(mut self, requests_per_minute: f64) -> Self {
        self.limiter = (requests_per_minute > 0.0).then(|| RateLimiter::new(requests_per_minute, 1));
        self
    }

    pub fn with_cache(mut self, cache: ResponseCache) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn provider_id(&self) -> String {
        self.provider.id()
    }

    /// Upstream attempts made through this client, retries included.
    pub fn upstream_calls(&self) -> usize {
        self.upstream_calls.load(Ordering::SeqCst)
    }

    pub fn complete_chat(&self, request: &ChatRequest) -> Result<String, ProviderError> {
        request.validate()?;
        let fetch = || {
            self.retry.run(|| {
                if let Some(l) = &self.limiter {
                    l.acquire();
                }
                self.upstream_calls.fetch_add(1, Ordering::SeqCst);
                self.provider.complete(request)
            })
        };
        match &self.cache {
            Some(cache) => cache
                .get_or_fetch(&request.digest(&self.provider.id()), fetch)
                .map(|(text, _)| text),
            None => fetch(),
        }
    }
}

/// Free-function form of [`ChatClient::complete_chat`].
pub fn complete_chat(client: &ChatClient, request: &ChatRequest) -> Result<String, ProviderError> {
    client.complete_chat(request)
}

/// An embedding provider wrapped with retry and optional rate limiting.
pub struct EmbeddingClient {
    provider: Arc<dyn EmbeddingProvider>,
    retry: RetryPolicy,
    limiter: Option<RateLimiter>,
}

impl EmbeddingClient {
    pub fn new(provider: Arc<dyn EmbeddingProvider>) -> Self {
        EmbeddingClient {
            provider,
            retry: RetryPolicy::default(),
            limiter: None,
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_rate_limit(mut self, requests_per_minute: f64) -> Self {
        self.limiter = (requests_per_minute > 0.0).then(|| RateLimiter::new(requests_per_minute, 1));
        self
    }
}

impl EmbeddingProvider for EmbeddingClient {
    fn model_id(&self) -> String {
        self.provider.model_id()
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, ProviderError> {
        self.retry.run(|| {
            if let Some(l) = &self.limiter {
                l.acquire();
            }
            self.provider.embed(texts)
        })
    }
}

// ---------------------------------------------------------------------------
// Scripted providers

type Responder = dyn Fn(&ChatRequest, usize) -> Result<String, ProviderError> + Send + Sync;

/// Chat provider answering from a queue of canned replies or a closure.
pub struct ScriptedChat {
    id: String,
    queue: Mutex<VecDeque<Result<String, ProviderError>>>,
    responder: Option<Box<Responder>>,
    calls: AtomicUsize,
}

impl ScriptedChat {
    pub fn queue(replies: impl IntoIterator<Item = Result<String, ProviderError>>) -> Self {
        ScriptedChat {
            id: "scripted".into(),
            queue: Mutex::new(replies.into_iter().collect()),
            responder: None,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn replies<S: Into<String>>(replies: impl IntoIterator<Item = S>) -> Self {
        Self::queue(replies.into_iter().map(|r| Ok(r.into())))
    }

    /// Calls `f(request, call_index)` for every request.
    pub fn from_fn(f: impl Fn(&ChatRequest, usize) -> Result<String, ProviderError> + Send + Sync + 'static) -> Self {
        ScriptedChat {
            id: "scripted".into(),
            queue: Mutex::new(VecDeque::new()),
            responder: Some(Box::new(f)),
            calls: AtomicUsize::new(0),
        }
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl ChatProvider for ScriptedChat {
    fn id(&self) -> String {
        self.id.clone()
    }

    fn complete(&self, request: &ChatRequest) -> Result<String, ProviderError> {
        let n = self.calls.fetch_add(1, Ordering::SeqCst);
        if let Some(f) = &self.responder {
            return f(request, n);
        }
        self.queue
            .lock()
            .expect("script poisoned")
            .pop_front()
            .unwrap_or(Err(ProviderError::ScriptExhausted))
    }
}

/// Maps each text to a unit vector drawn from an RNG seeded by the text, so
/// equal texts embed identically and distinct texts are nearly orthogonal.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    pub dim: usize,
}

impl HashEmbedder {
    pub fn new(dim: usize) -> Self {
        HashEmbedder { dim: dim.max(1) }
    }

    pub fn vector(&self, text: &str) -> Vec<f64> {
        let mut rng = derive_rng(0, &["hash-embedder", text]);
        let mut v: Vec<f64> = (0..self.dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            v[0] = 1.0;
        } else {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        v
    }
}

impl EmbeddingProvider for HashEmbedder {
    fn model_id(&self) -> String {
        format!("hash-{}", self.dim)
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, ProviderError> {
        Ok(texts.iter().map(|t| self.vector(t)).collect())
    }
}

/// Fixed text → vector table, with an optional fallback for unlisted texts.
pub struct TableEmbedder {
    model_id: String,
    table: HashMap<String, Vec<f64>>,
    fallback: Option<Box<dyn EmbeddingProvider>>,
}

impl TableEmbedder {
    pub fn new(model_id: impl Into<String>, table: HashMap<String, Vec<f64>>) -> Self {
        TableEmbedder {
            model_id: model_id.into(),
            table,
            fallback: None,
        }
    }

    pub fn with_fallback(mut self, fallback: impl EmbeddingProvider + 'static) -> Self {
        self.fallback = Some(Box::new(fallback));
        self
    }
}

impl EmbeddingProvider for TableEmbedder {
    fn model_id(&self) -> String {
        self.model_id.clone()
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, ProviderError> {
        texts
            .iter()
            .map(|t| match (self.table.get(t), &self.fallback) {
                (Some(v), _) => Ok(v.clone()),
                (None, Some(f)) => f.embed(std::slice::from_ref(t)).map(|mut v| v.remove(0)),
                (None, None) => Err(ProviderError::InvalidRequest(format!("no scripted embedding for {t:?}"))),
            })
            .collect()
    }
}

/// Multiplies every vector of the inner provider by a constant.
pub struct ScaledEmbedder<E> {
    pub inner: E,
    pub factor: f64,
}

impl<E: EmbeddingProvider> EmbeddingProvider for ScaledEmbedder<E> {
    fn model_id(&self) -> String {
        self.inner.model_id()
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, ProviderError> {
        let mut out = self.inner.embed(texts)?;
        out.iter_mut().flatten().for_each(|x| *x *= self.factor);
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// OpenAI-compatible HTTP providers

fn http_client(timeout: Duration) -> Result<reqwest::blocking::Client, ProviderError> {
    reqwest::blocking::Client::builder()
        .timeout(timeout)
        .build()
        .map_err(|e| ProviderError::Config(e.to_string()))
}

fn classify_status(status: reqwest::StatusCode, body: &str) -> ProviderError {
    let snippet: String = body.chars().take(300).collect();
    match status.as_u16() {
        401 | 403 => ProviderError::Auth(format!("{status}: {snippet}")),
        408 | 409 | 425 | 429 => ProviderError::Transient(format!("{status}: {snippet}")),
        s if s >= 500 => ProviderError::Transient(format!("{status}: {snippet}")),
        _ if body.contains("content_filter") || body.contains("content_policy") => {
            ProviderError::Refused(format!("{status}: {snippet}"))
        }
        _ => ProviderError::InvalidRequest(format!("{status}: {snippet}")),
    }
}

fn post_json(
    client: &reqwest::blocking::Client,
    url: &str,
    api_key: Option<&str>,
    body: &serde_json::Value,
) -> Result<serde_json::Value, ProviderError> {
    let mut req = client.post(url).json(body);
    if let Some(key) = api_key {
        req = req.bearer_auth(key);
    }
    let resp = req.send().map_err(|e| ProviderError::Transient(e.to_string()))?;
    let status = resp.status();
    let text = resp.text().map_err(|e| ProviderError::Transient(e.to_string()))?;
    if !status.is_success() {
        return Err(classify_status(status, &text));
    }
    serde_json::from_str(&text).map_err(|e| ProviderError::Malformed(e.to_string()))
}

/// Chat provider for any endpoint speaking the OpenAI `/chat/completions`
/// protocol.
pub struct OpenAiChat {
    base_url: String,
    model: String,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
}

impl OpenAiChat {
    pub fn new(base_url: &str, model: &str, api_key: Option<String>, timeout: Duration) -> Result<Self, ProviderError> {
        Ok(OpenAiChat {
            base_url: base_url.trim_end_matches('/').to_string(),
            model: model.to_string(),
            api_key,
            client: http_client(timeout)?,
        })
    }
}

impl ChatProvider for OpenAiChat {
    fn id(&self) -> String {
        format!("openai:{}@{}", self.model, self.base_url)
    }

    fn complete(&self, request: &ChatRequest) -> Result<String, ProviderError> {
        let mut messages = vec![serde_json::json!({"role": "system", "content": request.system_prompt})];
        messages.extend(
            request
                .messages
                .iter()
                .map(|m| serde_json::json!({"role": m.role, "content": m.content})),
        );
        let body = serde_json::json!({
            "model": self.model,
            "messages": messages,
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        });
        let url = format!("{}/chat/completions", self.base_url);
        let v = post_json(&self.client, &url, self.api_key.as_deref(), &body)?;
        let choice = &v["choices"][0];
        if choice["finish_reason"] == "content_filter" {
            return Err(ProviderError::Refused("finish_reason content_filter".into()));
        }
        choice["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| ProviderError::Malformed("no choices[0].message.content".into()))
    }
}

/// Embedding provider for OpenAI-compatible `/embeddings` endpoints.
pub struct OpenAiEmbedder {
    base_url: String,
    model: String,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
}

impl OpenAiEmbedder {
    pub fn new(base_url: &str, model: &str, api_key: Option<String>, timeout: Duration) -> Result<Self, ProviderError> {
        Ok(OpenAiEmbedder {
            base_url: base_url.trim_end_matches('/').to_string(),
            model: model.to_string(),
            api_key,
            client: http_client(timeout)?,
        })
    }
}

impl EmbeddingProvider for OpenAiEmbedder {
    fn model_id(&self) -> String {
        self.model.clone()
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, ProviderError> {
        let body = serde_json::json!({"model": self.model, "input": texts});
        let url = format!("{}/embeddings", self.base_url);
        let v = post_json(&self.client, &url, self.api_key.as_deref(), &body)?;
        let data = v["data"]
            .as_array()
            .ok_or_else(|| ProviderError::Malformed("no data array".into()))?;
        let mut out: Vec<(usize, Vec<f64>)> = data
            .iter()
            .enumerate()
            .map(|(i, item)| {
                let idx = item["index"].as_u64().map(|x| x as usize).unwrap_or(i);
                let values = item["embedding"]
                    .as_array()
                    .ok_or_else(|| ProviderError::Malformed("embedding is not an array".into()))?
                    .iter()
                    .map(|x| x.as_f64().ok_or_else(|| ProviderError::Malformed("non-numeric embedding".into())))
                    .collect::<Result<Vec<_>, _>>()?;
                Ok((idx, values))
            })
            .collect::<Result<_, ProviderError>>()?;
        out.sort_by_key(|(i, _)| *i);
        Ok(out.into_iter().map(|(_, v)| v).collect())
    }
}

// ---------------------------------------------------------------------------
// Configuration

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    /// OpenAI-compatible HTTP endpoint.
    Openai,
    /// Replies from a JSON script file (chat only).
    Scripted,
    /// Hash-seeded unit vectors (embeddings only).
    Hash,
}

impl std::str::FromStr for ProviderKind {
    type Err = ProviderError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "openai" => Ok(ProviderKind::Openai),
            "scripted" => Ok(ProviderKind::Scripted),
            "hash" => Ok(ProviderKind::Hash),
            other => Err(ProviderError::Config(format!("unknown provider kind {other:?}"))),
        }
    }
}

fn default_rpm() -> f64 {
    60.0
}

fn default_retries() -> u32 {
    5
}

fn default_timeout() -> u64 {
    120
}

fn default_dim() -> usize {
    256
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderConfig {
    pub kind: ProviderKind,
    #[serde(default)]
    pub base_url: Option<String>,
    #[serde(default)]
    pub model: Option<String>,
    /// Name of the environment variable holding the API key. Keys themselves
    /// are never read from files or flags.
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_rpm")]
    pub requests_per_minute: f64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
    /// Script file for the scripted kind: a JSON array of replies (served in
    /// order) or an object mapping the last user message to a reply.
    #[serde(default)]
    pub script_path: Option<PathBuf>,
    #[serde(default = "default_dim")]
    pub dim: usize,
}

impl ProviderConfig {
    pub fn new(kind: ProviderKind) -> Self {
        ProviderConfig {
            kind,
            base_url: None,
            model: None,
            api_key_env: None,
            requests_per_minute: default_rpm(),
            max_retries: default_retries(),
            timeout_secs: default_timeout(),
            cache_dir: None,
            script_path: None,
            dim: default_dim(),
        }
    }

    /// Overrides fields from `{prefix}_KIND`, `_BASE_URL`, `_MODEL`,
    /// `_API_KEY_ENV`, `_RPM`, `_MAX_RETRIES`, `_CACHE_DIR`, `_SCRIPT`.
    pub fn apply_env(&mut self, prefix: &str) -> Result<(), ProviderError> {
        self.apply_env_with(prefix, |k| std::env::var(k).ok())
    }

    pub fn apply_env_with(&mut self, prefix: &str, lookup: impl Fn(&str) -> Option<String>) -> Result<(), ProviderError> {
        let get = |suffix: &str| lookup(&format!("{prefix}_{suffix}"));
        if let Some(v) = get("KIND") {
            self.kind = v.parse()?;
        }
        if let Some(v) = get("BASE_URL") {
            self.base_url = Some(v);
        }
        if let Some(v) = get("MODEL") {
            self.model = Some(v);
        }
        if let Some(v) = get("API_KEY_ENV") {
            self.api_key_env = Some(v);
        }
        if let Some(v) = get("RPM") {
            self.requests_per_minute = v
                .parse()
                .map_err(|_| ProviderError::Config(format!("{prefix}_RPM: not a number: {v}")))?;
        }
        if let Some(v) = get("MAX_RETRIES") {
            self.max_retries = v
                .parse()
                .map_err(|_| ProviderError::Config(format!("{prefix}_MAX_RETRIES: not an integer: {v}")))?;
        }
        if let Some(v) = get("CACHE_DIR") {
            self.cache_dir = Some(v.into());
        }
        if let Some(v) = get("SCRIPT") {
            self.script_path = Some(v.into());
        }
        Ok(())
    }

    fn api_key(&self) -> Result<Option<String>, ProviderError> {
        match &self.api_key_env {
            None => Ok(None),
            Some(var) => std::env::var(var)
                .map(Some)
                .map_err(|_| ProviderError::Auth(format!("environment variable {var} is not set"))),
        }
    }

    fn require<'a>(&self, field: &'a Option<String>, name: &str) -> Result<&'a str, ProviderError> {
        field
            .as_deref()
            .ok_or_else(|| ProviderError::Config(format!("{:?} provider needs {name}", self.kind)))
    }

    pub fn build_chat(&self) -> Result<ChatClient, ProviderError> {
        let provider: Arc<dyn ChatProvider> = match self.kind {
            ProviderKind::Openai => Arc::new(OpenAiChat::new(
                self.require(&self.base_url, "base_url")?,
                self.require(&self.model, "model")?,
                self.api_key()?,
                Duration::from_secs(self.timeout_secs),
            )?),
            ProviderKind::Scripted => Arc::new(scripted_from_file(
                self.script_path
                    .as_deref()
                    .ok_or_else(|| ProviderError::Config("scripted provider needs script_path".into()))?,
            )?),
            ProviderKind::Hash => {
                return Err(ProviderError::Config("hash provider only embeds".into()));
            }
        };
        let mut client = ChatClient::new(provider).with_retry(RetryPolicy {
            max_retries: self.max_retries,
            ..RetryPolicy::default()
        });
        if self.kind == ProviderKind::Openai {
            client = client.with_rate_limit(self.requests_per_minute);
        }
        if let Some(dir) = &self.cache_dir {
            client = client.with_cache(ResponseCache::on_disk(dir)?);
        }
        Ok(client)
    }

    pub fn build_embedder(&self) -> Result<EmbeddingClient, ProviderError> {
        let provider: Arc<dyn EmbeddingProvider> = match self.kind {
            ProviderKind::Openai => Arc::new(OpenAiEmbedder::new(
                self.require(&self.base_url, "base_url")?,
                self.require(&self.model, "model")?,
                self.api_key()?,
                Duration::from_secs(self.timeout_secs),
            )?),
            ProviderKind::Hash => Arc::new(HashEmbedder::new(self.dim)),
            ProviderKind::Scripted => {
                return Err(ProviderError::Config("scripted provider only chats".into()));
            }
        };
        let mut client = EmbeddingClient::new(provider).with_retry(RetryPolicy {
            max_retries: self.max_retries,
            ..RetryPolicy::default()
        });
        if self.kind == ProviderKind::Openai {
            client = client.with_rate_limit(self.requests_per_minute);
        }
        Ok(client)
    }
}

/// Loads a scripted chat provider from a JSON file: an array of replies
/// served in order, or an object keyed by the last user message (key `"*"`
/// is the fallback).
pub fn scripted_from_file(path: &Path) -> Result<ScriptedChat, ProviderError> {
    let text = fs::read_to_string(path).map_err(|e| ProviderError::Config(format!("{}: {e}", path.display())))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| ProviderError::Config(format!("{}: {e}", path.display())))?;
    let id = format!("scripted:{}", path.display());
    match value {
        serde_json::Value::Array(items) => {
            let replies = items
                .into_iter()
                .map(|v| match v {
                    serde_json::Value::String(s) => Ok(s),
                    other => Ok(other.to_string()),
                })
                .collect::<Vec<Result<String, ProviderError>>>();
            Ok(ScriptedChat::queue(replies).with_id(id))
        }
        serde_json::Value::Object(map) => {
            let table: HashMap<String, String> = map
                .into_iter()
                .map(|(k, v)| (k, v.as_str().map(str::to_string).unwrap_or_else(|| v.to_string())))
                .collect();
            Ok(ScriptedChat::from_fn(move |req, _| {
                table
                    .get(req.last_user())
                    .or_else(|| table.get("*"))
                    .cloned()
                    .ok_or(ProviderError::ScriptExhausted)
            })
            .with_id(id))
        }
        _ => Err(ProviderError::Config(format!(
            "{}: script must be a JSON array or object",
            path.display()
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{BufRead, BufReader, Read};
    use std::net::TcpListener;

    fn req(text: &str) -> ChatRequest {
        ChatRequest::new("sys", text, 1.0, 64)
    }

    #[test]
    fn scripted_queue_replies_in_order() {
        let client = ChatClient::new(Arc::new(ScriptedChat::replies(["R1", "R2"])));
        assert_eq!(client.complete_chat(&req("a")).unwrap(), "R1");
        assert_eq!(client.complete_chat(&req("b")).unwrap(), "R2");
        assert_eq!(client.complete_chat(&req("c")), Err(ProviderError::ScriptExhausted));
    }

    #[test]
    fn cache_hit_skips_upstream() {
        let provider = Arc::new(ScriptedChat::from_fn(|_, n| Ok(format!("reply {n}"))));
        let client = ChatClient::new(provider.clone()).with_cache(ResponseCache::in_memory());
        let a = client.complete_chat(&req("same")).unwrap();
        let b = client.complete_chat(&req("same")).unwrap();
        assert_eq!(a, b);
        assert_eq!(provider.calls(), 1);
        let mut other = req("same");
        other.sample_index = 1;
        assert_eq!(client.complete_chat(&other).unwrap(), "reply 1");
        assert_eq!(provider.calls(), 2);
    }

    #[test]
    fn disk_cache_survives_a_new_client() {
        let dir = tempfile::tempdir().unwrap();
        let first = Arc::new(ScriptedChat::replies(["stored"]));
        let client = ChatClient::new(first).with_cache(ResponseCache::on_disk(dir.path()).unwrap());
        assert_eq!(client.complete_chat(&req("q")).unwrap(), "stored");
        let second = Arc::new(ScriptedChat::replies(Vec::<String>::new()));
        let client = ChatClient::new(second.clone()).with_cache(ResponseCache::on_disk(dir.path()).unwrap());
        assert_eq!(client.complete_chat(&req("q")).unwrap(), "stored");
        assert_eq!(second.calls(), 0);
    }

    #[test]
    fn concurrent_identical_requests_call_upstream_once() {
        let provider = Arc::new(ScriptedChat::from_fn(|_, n| {
            std::thread::sleep(Duration::from_millis(5));
            Ok(format!("r{n}"))
        }));
        let client = Arc::new(ChatClient::new(provider.clone()).with_cache(ResponseCache::in_memory()));
        let handles: Vec<_> = (0..8)
            .map(|_| {
                let c = client.clone();
                std::thread::spawn(move || c.complete_chat(&req("shared")).unwrap())
            })
            .collect();
        let outs: Vec<String> = handles.into_iter().map(|h| h.join().unwrap()).collect();
        assert!(outs.iter().all(|o| o == "r0"));
        assert_eq!(provider.calls(), 1);
    }

    #[test]
    fn retries_transient_failures_up_to_cap() {
        let fail = || Err(ProviderError::Transient("503".into()));
        let provider = Arc::new(ScriptedChat::queue([fail(), fail(), Ok("ok".to_string())]));
        let client = ChatClient::new(provider.clone()).with_retry(RetryPolicy::no_delay(3));
        assert_eq!(client.complete_chat(&req("x")).unwrap(), "ok");
        assert_eq!(provider.calls(), 3);

        let provider = Arc::new(ScriptedChat::queue((0..5).map(|_| fail())));
        let client = ChatClient::new(provider.clone()).with_retry(RetryPolicy::no_delay(3));
        match client.complete_chat(&req("x")) {
            Err(ProviderError::RetriesExhausted { attempts, .. }) => assert_eq!(attempts, 4),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn permanent_errors_are_not_retried() {
        let provider = Arc::new(ScriptedChat::queue([
            Err(ProviderError::Auth("bad key".into())),
            Ok("never".to_string()),
        ]));
        let client = ChatClient::new(provider.clone()).with_retry(RetryPolicy::no_delay(3));
        assert!(matches!(client.complete_chat(&req("x")), Err(ProviderError::Auth(_))));
        assert_eq!(provider.calls(), 1);
    }

    #[test]
    fn backoff_doubles_and_caps() {
        let p = RetryPolicy {
            max_retries: 10,
            base_delay_ms: 100,
            max_delay_ms: 1000,
        };
        let ms: Vec<u128> = (0..6).map(|i| p.delay(i).as_millis()).collect();
        assert_eq!(ms, vec![100, 200, 400, 800, 1000, 1000]);
    }

    #[test]
    fn invalid_requests_rejected_before_upstream() {
        let provider = Arc::new(ScriptedChat::replies(["x"]));
        let client = ChatClient::new(provider.clone());
        let mut r = req("a");
        r.temperature = 0.0;
        assert!(matches!(client.complete_chat(&r), Err(ProviderError::InvalidRequest(_))));
        r.temperature = 1.0;
        r.messages.clear();
        assert!(client.complete_chat(&r).is_err());
        assert_eq!(provider.calls(), 0);
    }

    #[test]
    fn rate_limiter_spaces_requests() {
        let limiter = RateLimiter::new(600.0, 1); // one token per 100 ms
        let start = Instant::now();
        for _ in 0..3 {
            limiter.acquire();
        }
        assert!(start.elapsed() >= Duration::from_millis(190), "{:?}", start.elapsed());
    }

    #[test]
    fn digest_depends_on_provider_and_request() {
        let r = req("a");
        assert_eq!(r.digest("p"), r.digest("p"));
        assert_ne!(r.digest("p"), r.digest("q"));
        assert_ne!(r.digest("p"), req("b").digest("p"));
    }

    #[test]
    fn hash_embedder_is_stable_and_shaped() {
        let e = HashEmbedder::new(32);
        let texts: Vec<String> = ["alpha", "beta", "alpha"].iter().map(|s| s.to_string()).collect();
        let v = embed_texts(&e, &texts).unwrap();
        assert_eq!(v.len(), 3);
        assert!(v.iter().all(|x| x.dim() == 32));
        assert_eq!(v[0], v[2]);
        assert_eq!(v[0], embed_texts(&e, &texts[..1]).unwrap()[0]);
        assert!((cosine(&v[0], &v[0]).unwrap() - 1.0).abs() < 1e-12);
        assert!(embed_texts(&e, &[]).is_err());
    }

    #[test]
    fn cosine_examples() {
        let v = |xs: &[f64]| EmbeddingVector {
            values: xs.to_vec(),
            model_id: "m".into(),
        };
        assert!((cosine(&v(&[1.0, 2.0]), &v(&[1.0, 2.0])).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cosine(&v(&[1.0, 0.0]), &v(&[0.0, 1.0])).unwrap(), 0.0);
        assert!((cosine(&v(&[1.0, 2.0]), &v(&[2.0, 4.0])).unwrap() - 1.0).abs() < 1e-12);
        assert!(matches!(
            cosine(&v(&[1.0]), &v(&[1.0, 0.0])),
            Err(ProviderError::DimensionMismatch { .. })
        ));
        assert_eq!(cosine(&v(&[0.0, 0.0]), &v(&[1.0, 0.0])), Err(ProviderError::ZeroVector));
    }

    #[test]
    fn table_embedder_with_scaling() {
        let table = HashMap::from([("a".to_string(), vec![1.0, 0.0]), ("b".to_string(), vec![0.0, 1.0])]);
        let scaled = ScaledEmbedder {
            inner: TableEmbedder::new("t", table),
            factor: 7.0,
        };
        let v = scaled.embed(&["a".into(), "b".into()]).unwrap();
        assert_eq!(v, vec![vec![7.0, 0.0], vec![0.0, 7.0]]);
        assert!(scaled.embed(&["c".into()]).is_err());
    }

    #[test]
    fn env_overrides_config() {
        let mut c = ProviderConfig::new(ProviderKind::Hash);
        let env = HashMap::from([
            ("GEN_KIND".to_string(), "openai".to_string()),
            ("GEN_BASE_URL".to_string(), "http://localhost:9".to_string()),
            ("GEN_MODEL".to_string(), "m".to_string()),
            ("GEN_RPM".to_string(), "30".to_string()),
            ("GEN_MAX_RETRIES".to_string(), "2".to_string()),
        ]);
        c.apply_env_with("GEN", |k| env.get(k).cloned()).unwrap();
        assert_eq!(c.kind, ProviderKind::Openai);
        assert_eq!(c.base_url.as_deref(), Some("http://localhost:9"));
        assert_eq!(c.requests_per_minute, 30.0);
        assert_eq!(c.max_retries, 2);
        let bad = HashMap::from([("GEN_RPM".to_string(), "fast".to_string())]);
        assert!(c.apply_env_with("GEN", |k| bad.get(k).cloned()).is_err());
    }

    #[test]
    fn scripted_file_array_and_table() {
        let dir = tempfile::tempdir().unwrap();
        let list = dir.path().join("list.json");
        fs::write(&list, r#"["one", "two"]"#).unwrap();
        let p = scripted_from_file(&list).unwrap();
        assert_eq!(p.complete(&req("x")).unwrap(), "one");
        let table = dir.path().join("table.json");
        fs::write(&table, r#"{"hi": "hello", "*": "default"}"#).unwrap();
        let p = scripted_from_file(&table).unwrap();
        assert_eq!(p.complete(&req("hi")).unwrap(), "hello");
        assert_eq!(p.complete(&req("other")).unwrap(), "default");
    }

    /// Serves `responses` (status, body) to successive connections and
    /// returns the captured request bodies.
    fn mock_server(responses: Vec<(u16, String)>) -> (String, std::thread::JoinHandle<Vec<String>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}", listener.local_addr().unwrap());
        let handle = std::thread::spawn(move || {
            let mut bodies = Vec::new();
            for (status, body) in responses {
                let (mut stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut len = 0;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if line == "\r\n" || line.is_empty() {
                        break;
                    }
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                }
                let mut buf = vec![0; len];
                reader.read_exact(&mut buf).unwrap();
                bodies.push(String::from_utf8(buf).unwrap());
                let resp = format!(
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                );
                stream.write_all(resp.as_bytes()).unwrap();
            }
            bodies
        });
        (url, handle)
    }

    #[test]
    fn openai_chat_retries_and_parses() {
        let ok = r#"{"choices":[{"message":{"role":"assistant","content":"hi there"},"finish_reason":"stop"}]}"#;
        let (url, server) = mock_server(vec![(503, "busy".into()), (200, ok.into())]);
        let provider = Arc::new(OpenAiChat::new(&url, "m1", Some("k".into()), Duration::from_secs(5)).unwrap());
        let client = ChatClient::new(provider).with_retry(RetryPolicy::no_delay(2));
        let mut r = req("hello");
        r.sample_index = 9;
        assert_eq!(client.complete_chat(&r).unwrap(), "hi there");
        let bodies = server.join().unwrap();
        let sent: serde_json::Value = serde_json::from_str(&bodies[1]).unwrap();
        assert_eq!(sent["model"], "m1");
        assert_eq!(sent["messages"][0]["role"], "system");
        assert_eq!(sent["messages"][1]["content"], "hello");
        assert!(sent.get("sample_index").is_none());
    }

    #[test]
    fn openai_chat_classifies_failures() {
        let (url, server) = mock_server(vec![
            (401, "nope".into()),
            (200, r#"{"choices":[{"message":{"content":""},"finish_reason":"content_filter"}]}"#.into()),
        ]);
        let p = OpenAiChat::new(&url, "m", None, Duration::from_secs(5)).unwrap();
        assert!(matches!(p.complete(&req("a")), Err(ProviderError::Auth(_))));
        assert!(matches!(p.complete(&req("a")), Err(ProviderError::Refused(_))));
        server.join().unwrap();
    }

    #[test]
    fn openai_embedder_orders_by_index() {
        let body = r#"{"data":[{"index":1,"embedding":[0.0,1.0]},{"index":0,"embedding":[1.0,0.0]}]}"#;
        let (url, server) = mock_server(vec![(200, body.into())]);
        let p = OpenAiEmbedder::new(&url, "emb", None, Duration::from_secs(5)).unwrap();
        let v = embed_texts(&p, &["a".into(), "b".into()]).unwrap();
        assert_eq!(v[0].values, vec![1.0, 0.0]);
        assert_eq!(v[1].values, vec![0.0, 1.0]);
        assert_eq!(v[0].model_id, "emb");
        server.join().unwrap();
    }
}
