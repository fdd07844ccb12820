//! Chat-with-images client used for advanced-task generation and scoring.
//!
//! Three backends: an OpenAI-compatible HTTP endpoint, a deterministic mock
//! keyed by request hash, and an offline replay cache. HTTP responses are
//! appended to the cache directory when one is configured, one file per
//! request hash: `<dir>/<hash>.json` holding `{"request": .., "response": ..}`.
//!
//! This is the only module that performs network I/O.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

pub const API_KEY_ENV: &str = "UIFORGE_API_KEY";
pub const DEFAULT_MODEL: &str = "gpt-4o";

#[derive(Clone, Debug, PartialEq)]
pub struct ImageRef {
    pub name: String,
    pub png: Vec<u8>,
}

impl ImageRef {
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(&self.png))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChatRequest {
    pub model: String,
    pub system: String,
    pub user: String,
    pub images: Vec<ImageRef>,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl ChatRequest {
    pub fn new(system: impl Into<String>, user: impl Into<String>) -> Self {
        ChatRequest {
            model: DEFAULT_MODEL.into(),
            system: system.into(),
            user: user.into(),
            images: Vec::new(),
            temperature: 0.0,
            max_tokens: 2048,
        }
    }

    /// Request identity: everything that affects the answer, with images
    /// replaced by their SHA-256 digests. Keys are sorted.
    pub fn canonical(&self) -> Value {
        json!({
            "images": self.images.iter().map(ImageRef::digest).collect::<Vec<_>>(),
            "max_tokens": self.max_tokens,
            "model": self.model,
            "system": self.system,
            "temperature": self.temperature,
            "user": self.user,
        })
    }

    pub fn hash(&self) -> String {
        let text = serde_json::to_string(&self.canonical()).expect("canonical request serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum LlmError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("no canned response for request {hash}")]
    NoCannedResponse { hash: String },
    #[error("replay cache has no entry for request {hash}")]
    ReplayMiss { hash: String },
    #[error("transport failed after {attempts} attempts: {last}")]
    Transport { attempts: u32, last: String },
    #[error("request rejected: {0}")]
    Rejected(String),
    #[error("cache i/o on {path}: {source}")]
    Cache {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Canned responses keyed by request hash. `fallback` answers any miss
/// when set; otherwise a miss is an error.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MockTable {
    #[serde(default)]
    pub responses: BTreeMap<String, String>,
    #[serde(default)]
    pub fallback: Option<String>,
}

impl MockTable {
    pub fn with_fallback(text: impl Into<String>) -> Self {
        MockTable { responses: BTreeMap::new(), fallback: Some(text.into()) }
    }

    pub fn insert(&mut self, req: &ChatRequest, response: impl Into<String>) {
        self.responses.insert(req.hash(), response.into());
    }

    pub fn load(path: &Path) -> Result<Self, LlmError> {
        let text = fs::read_to_string(path)
            .map_err(|source| LlmError::Cache { path: path.display().to_string(), source })?;
        serde_json::from_str(&text).map_err(|e| LlmError::Config(format!("bad mock table {}: {e}", path.display())))
    }
}

#[derive(Clone, Debug)]
pub struct HttpConfig {
    pub endpoint: String,
    pub api_key: Option<String>,
    pub cache_dir: Option<PathBuf>,
    /// Retries after the first attempt on transient failures.
    pub max_retries: u32,
    pub initial_backoff: Duration,
    pub timeout: Duration,
}

impl HttpConfig {
    /// Reads the API key from [`API_KEY_ENV`].
    pub fn from_env(endpoint: impl Into<String>) -> Self {
        HttpConfig {
            endpoint: endpoint.into(),
            api_key: std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty()),
            cache_dir: None,
            max_retries: 4,
            initial_backoff: Duration::from_millis(500),
            timeout: Duration::from_secs(120),
        }
    }
}

#[derive(Clone, Debug)]
pub enum ClientBackend {
    HttpApi(HttpConfig),
    Mock(MockTable),
    ReplayCache(PathBuf),
}

/// Outcome of one HTTP attempt.
#[derive(Debug)]
pub enum TransportFailure {
    /// Worth retrying: rate limits, server errors, connection problems.
    Transient(String),
    Fatal(String),
}

pub trait Transport: Send + Sync {
    fn post(&self, endpoint: &str, api_key: &str, body: &Value, timeout: Duration) -> Result<String, TransportFailure>;
}

/// Blocking HTTP transport for OpenAI-compatible chat-completions endpoints.
pub struct UreqTransport;

impl Transport for UreqTransport {
    fn post(&self, endpoint: &str, api_key: &str, body: &Value, timeout: Duration) -> Result<String, TransportFailure> {
        let resp = ureq::post(endpoint)
            .timeout(timeout)
            .set("Authorization", &format!("Bearer {api_key}"))
            .send_json(body.clone());
        let value: Value = match resp {
            Ok(r) => r.into_json().map_err(|e| TransportFailure::Transient(format!("reading body: {e}")))?,
            Err(ureq::Error::Status(code, r)) => {
                let msg = format!("HTTP {code}: {}", r.into_string().unwrap_or_default());
                return Err(if code == 429 || code >= 500 {
                    TransportFailure::Transient(msg)
                } else {
                    TransportFailure::Fatal(msg)
                });
            }
            Err(e) => return Err(TransportFailure::Transient(e.to_string())),
        };
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| TransportFailure::Fatal(format!("unexpected response shape: {value}")))
    }
}

/// Body for an OpenAI-compatible chat-completions request.
pub fn http_body(req: &ChatRequest) -> Value {
    let mut content = vec![json!({"type": "text", "text": req.user})];
    for img in &req.images {
        let b64 = base64::engine::general_purpose::STANDARD.encode(&img.png);
        content.push(json!({"type": "image_url", "image_url": {"url": format!("data:image/png;base64,{b64}")}}));
    }
    json!({
        "model": req.model,
        "temperature": req.temperature,
        "max_tokens": req.max_tokens,
        "messages": [
            {"role": "system", "content": req.system},
            {"role": "user", "content": content},
        ],
    })
}

#[derive(Serialize, Deserialize)]
struct CacheEntry {
    request: Value,
    response: String,
}

struct Semaphore {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Semaphore {
    fn new(n: usize) -> Self {
        Semaphore { free: Mutex::new(n.max(1)), cv: Condvar::new() }
    }

    fn acquire(&self) -> SemaphoreGuard<'_> {
        let mut free = self.free.lock().unwrap_or_else(|e| e.into_inner());
        while *free == 0 {
            free = self.cv.wait(free).unwrap_or_else(|e| e.into_inner());
        }
        *free -= 1;
        SemaphoreGuard(self)
    }
}

struct SemaphoreGuard<'a>(&'a Semaphore);

impl Drop for SemaphoreGuard<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap_or_else(|e| e.into_inner()) += 1;
        self.0.cv.notify_one();
    }
}

pub struct LlmClient {
    backend: ClientBackend,
    transport: Box<dyn Transport>,
    inflight: Semaphore,
    cache_lock: Mutex<()>,
    network_calls: AtomicUsize,
}

impl LlmClient {
    pub fn new(backend: ClientBackend) -> Result<Self, LlmError> {
        Self::with_transport(backend, Box::new(UreqTransport), 4)
    }

    pub fn mock(table: MockTable) -> Self {
        Self::with_transport(ClientBackend::Mock(table), Box::new(UreqTransport), 4).expect("mock needs no config")
    }

    pub fn with_transport(
        backend: ClientBackend,
        transport: Box<dyn Transport>,
        max_in_flight: usize,
    ) -> Result<Self, LlmError> {
        if let ClientBackend::HttpApi(cfg) = &backend {
            if cfg.api_key.is_none() {
                return Err(LlmError::Config(format!("http backend needs an API key in ${API_KEY_ENV}")));
            }
        }
        Ok(LlmClient {
            backend,
            transport,
            inflight: Semaphore::new(max_in_flight),
            cache_lock: Mutex::new(()),
            network_calls: AtomicUsize::new(0),
        })
    }

    /// Network attempts made so far, including retries.
    pub fn network_calls(&self) -> usize {
        self.network_calls.load(Ordering::SeqCst)
    }

    pub fn backend(&self) -> &ClientBackend {
        &self.backend
    }

    pub fn chat(&self, req: &ChatRequest) -> Result<String, LlmError> {
        if req.user.trim().is_empty() {
            return Err(LlmError::Rejected("empty user text".into()));
        }
        let hash = req.hash();
        match &self.backend {
            ClientBackend::Mock(table) => table
                .responses
                .get(&hash)
                .or(table.fallback.as_ref())
                .cloned()
                .ok_or(LlmError::NoCannedResponse { hash }),
            ClientBackend::ReplayCache(dir) => self.cache_get(dir, &hash)?.ok_or(LlmError::ReplayMiss { hash }),
            ClientBackend::HttpApi(cfg) => {
                if let Some(dir) = &cfg.cache_dir {
                    if let Some(hit) = self.cache_get(dir, &hash)? {
                        return Ok(hit);
                    }
                }
                let text = self.call_http(cfg, req)?;
                if let Some(dir) = &cfg.cache_dir {
                    self.cache_put(dir, &hash, req, &text)?;
                }
                Ok(text)
            }
        }
    }

    fn call_http(&self, cfg: &HttpConfig, req: &ChatRequest) -> Result<String, LlmError> {
        let key = cfg.api_key.as_deref().ok_or_else(|| LlmError::Config("missing API key".into()))?;
        let body = http_body(req);
        let _permit = self.inflight.acquire();
        let mut backoff = cfg.initial_backoff;
        let mut attempts = 0;
        loop {
            attempts += 1;
            self.network_calls.fetch_add(1, Ordering::SeqCst);
            match self.transport.post(&cfg.endpoint, key, &body, cfg.timeout) {
                Ok(text) => return Ok(text),
                Err(TransportFailure::Fatal(m)) => return Err(LlmError::Rejected(m)),
                Err(TransportFailure::Transient(m)) => {
                    if attempts > cfg.max_retries {
                        return Err(LlmError::Transport { attempts, last: m });
                    }
                    tracing::warn!(attempt = attempts, error = %m, "transient LLM failure, backing off");
                    std::thread::sleep(backoff);
                    backoff = backoff.saturating_mul(2);
                }
            }
        }
    }

    fn cache_get(&self, dir: &Path, hash: &str) -> Result<Option<String>, LlmError> {
        let path = dir.join(format!("{hash}.json"));
        match fs::read_to_string(&path) {
            Ok(text) => {
                let entry: CacheEntry = serde_json::from_str(&text)
                    .map_err(|e| LlmError::Config(format!("corrupt cache entry {}: {e}", path.display())))?;
                Ok(Some(entry.response))
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(source) => Err(LlmError::Cache { path: path.display().to_string(), source }),
        }
    }

    fn cache_put(&self, dir: &Path, hash: &str, req: &ChatRequest, response: &str) -> Result<(), LlmError> {
        let _guard = self.cache_lock.lock().unwrap_or_else(|e| e.into_inner());
        let path = dir.join(format!("{hash}.json"));
        let io = |source| LlmError::Cache { path: path.display().to_string(), source };
        fs::create_dir_all(dir).map_err(io)?;
        let entry = CacheEntry { request: req.canonical(), response: response.to_string() };
        let tmp = dir.join(format!("{hash}.json.tmp"));
        fs::write(&tmp, serde_json::to_string_pretty(&entry).expect("cache entry serializes") + "\n").map_err(io)?;
        fs::rename(&tmp, &path).map_err(io)
    }
}

/// Stores a response in a replay cache directory as if it had been fetched.
pub fn record_exchange(dir: &Path, req: &ChatRequest, response: &str) -> Result<(), LlmError> {
    let client = LlmClient::mock(MockTable::default());
    client.cache_put(dir, &req.hash(), req, response)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    struct Scripted {
        replies: Mutex<Vec<Result<String, TransportFailure>>>,
        calls: Arc<AtomicUsize>,
    }

    impl Transport for Scripted {
        fn post(&self, _: &str, _: &str, _: &Value, _: Duration) -> Result<String, TransportFailure> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            self.replies.lock().unwrap().remove(0)
        }
    }

    fn http(cache: Option<PathBuf>) -> HttpConfig {
        HttpConfig {
            endpoint: "http://127.0.0.1:9/v1/chat/completions".into(),
            api_key: Some("test".into()),
            cache_dir: cache,
            max_retries: 2,
            initial_backoff: Duration::ZERO,
            timeout: Duration::from_secs(1),
        }
    }

    fn scripted(replies: Vec<Result<String, TransportFailure>>) -> (Box<Scripted>, Arc<AtomicUsize>) {
        let calls = Arc::new(AtomicUsize::new(0));
        (Box::new(Scripted { replies: Mutex::new(replies), calls: calls.clone() }), calls)
    }

    #[test]
    fn hash_covers_every_field() {
        let base = ChatRequest::new("sys", "hello");
        let mut variants = vec![base.clone()];
        let mut r = base.clone();
        r.temperature = 0.7;
        variants.push(r);
        let mut r = base.clone();
        r.model = "other".into();
        variants.push(r);
        let mut r = base.clone();
        r.images.push(ImageRef { name: "a".into(), png: vec![1, 2, 3] });
        variants.push(r.clone());
        r.images[0].png = vec![1, 2, 4];
        variants.push(r);
        let hashes: std::collections::HashSet<_> = variants.iter().map(ChatRequest::hash).collect();
        assert_eq!(hashes.len(), variants.len());
        assert_eq!(base.hash(), ChatRequest::new("sys", "hello").hash());
        // Image names are labels only.
        let mut a = base.clone();
        a.images.push(ImageRef { name: "x".into(), png: vec![9] });
        let mut b = base;
        b.images.push(ImageRef { name: "y".into(), png: vec![9] });
        assert_eq!(a.hash(), b.hash());
    }

    #[test]
    fn mock_lookup_and_miss() {
        let req = ChatRequest::new("s", "u");
        let mut table = MockTable::default();
        table.insert(&req, "ok");
        let client = LlmClient::mock(table);
        assert_eq!(client.chat(&req).unwrap(), "ok");
        let other = ChatRequest::new("s", "different");
        assert!(matches!(client.chat(&other), Err(LlmError::NoCannedResponse { .. })));
    }

    #[test]
    fn missing_key_is_config_error() {
        let mut cfg = http(None);
        cfg.api_key = None;
        assert!(matches!(LlmClient::new(ClientBackend::HttpApi(cfg)), Err(LlmError::Config(_))));
    }

    #[test]
    fn retries_then_succeeds_and_caches() {
        let dir = tempfile::tempdir().unwrap();
        let (t, calls) = scripted(vec![
            Err(TransportFailure::Transient("503".into())),
            Err(TransportFailure::Transient("429".into())),
            Ok("fine".into()),
        ]);
        let client =
            LlmClient::with_transport(ClientBackend::HttpApi(http(Some(dir.path().into()))), t, 2).unwrap();
        let req = ChatRequest::new("s", "u");
        assert_eq!(client.chat(&req).unwrap(), "fine");
        assert_eq!(calls.load(Ordering::SeqCst), 3);
        // Second call is served from the cache.
        assert_eq!(client.chat(&req).unwrap(), "fine");
        assert_eq!(client.network_calls(), 3);
        assert!(dir.path().join(format!("{}.json", req.hash())).exists());
    }

    #[test]
    fn retries_exhausted() {
        let (t, calls) = scripted((0..3).map(|_| Err(TransportFailure::Transient("boom".into()))).collect());
        let client = LlmClient::with_transport(ClientBackend::HttpApi(http(None)), t, 1).unwrap();
        let err = client.chat(&ChatRequest::new("s", "u")).unwrap_err();
        assert!(matches!(err, LlmError::Transport { attempts: 3, .. }), "{err}");
        assert_eq!(calls.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn fatal_is_not_retried() {
        let (t, calls) = scripted(vec![Err(TransportFailure::Fatal("401".into()))]);
        let client = LlmClient::with_transport(ClientBackend::HttpApi(http(None)), t, 1).unwrap();
        assert!(matches!(client.chat(&ChatRequest::new("s", "u")), Err(LlmError::Rejected(_))));
        assert_eq!(calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn replay_cache_hit_makes_no_network_call() {
        let dir = tempfile::tempdir().unwrap();
        let req = ChatRequest::new("s", "u");
        record_exchange(dir.path(), &req, "cached").unwrap();
        let (t, calls) = scripted(vec![]);
        let client =
            LlmClient::with_transport(ClientBackend::HttpApi(http(Some(dir.path().into()))), t, 1).unwrap();
        assert_eq!(client.chat(&req).unwrap(), "cached");
        assert_eq!(calls.load(Ordering::SeqCst), 0);
        assert_eq!(client.network_calls(), 0);

        let replay = LlmClient::new(ClientBackend::ReplayCache(dir.path().into())).unwrap();
        let a = replay.chat(&req).unwrap();
        let b = replay.chat(&req).unwrap();
        assert_eq!(a.as_bytes(), b.as_bytes());
        assert!(matches!(replay.chat(&ChatRequest::new("s", "v")), Err(LlmError::ReplayMiss { .. })));
    }

    #[test]
    fn body_carries_images_as_data_urls() {
        let mut req = ChatRequest::new("s", "u");
        req.images.push(ImageRef { name: "a".into(), png: vec![0xff] });
        let body = http_body(&req);
        let url = body["messages"][1]["content"][1]["image_url"]["url"].as_str().unwrap();
        assert_eq!(url, "data:image/png;base64,/w==");
    }
}
