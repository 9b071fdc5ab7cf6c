//! Uniform access to chat-completion and embedding endpoints, with bounded
//! concurrency, retries, an audit log, and deterministic scripted mocks.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// One chat-completion request. At most one image: the scaffold excludes
/// past screenshots.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChatRequest {
    pub system_text: String,
    pub user_text: String,
    /// Screenshot references (file paths); resolved to bytes by the transport.
    pub images: Vec<String>,
    pub temperature: f64,
    pub max_tokens: u32,
    /// Logical sample slot when issued via `sample_n`; lets scripted mocks
    /// answer deterministically regardless of scheduling.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slot: Option<u32>,
}

impl ChatRequest {
    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.user_text.is_empty() {
            return Err(GatewayError::InvalidRequest("empty user_text".into()));
        }
        if self.images.len() > 1 {
            return Err(GatewayError::InvalidRequest(format!(
                "{} images attached, at most 1 allowed",
                self.images.len()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    /// Sleep before retry i comes from `backoff_ms[i - 1]`, or the last entry
    /// when attempts outnumber the schedule.
    pub backoff_ms: Vec<u64>,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            backoff_ms: vec![500, 2000],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GatewayConfig {
    pub endpoint: String,
    pub model: String,
    /// Name of the environment variable holding the API key. Keys never live
    /// in config files.
    pub api_key_env: Option<String>,
    pub concurrency_limit: usize,
    pub retry: RetryPolicy,
    pub timeout_secs: u64,
    pub audit_log: Option<PathBuf>,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            endpoint: "http://localhost:8000/v1".to_string(),
            model: "default".to_string(),
            api_key_env: None,
            concurrency_limit: 4,
            retry: RetryPolicy::default(),
            timeout_secs: 120,
            audit_log: None,
        }
    }
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("request timed out")]
    Timeout,
    #[error("rate limited: {0}")]
    RateLimited(String),
    #[error("protocol error: {0}")]
    ProtocolError(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("embedder unavailable: {0}")]
    EmbedderUnavailable(String),
    #[error("every slot of the sampled batch failed")]
    BatchAborted,
}

impl GatewayError {
    fn is_transient(&self) -> bool {
        matches!(self, GatewayError::Timeout | GatewayError::RateLimited(_))
    }
}

/// Low-level chat transport: one request in, one completion out.
pub trait Transport: Send + Sync {
    fn send(&self, req: &ChatRequest) -> Result<String, GatewayError>;
}

/// Low-level embedding transport.
pub trait EmbeddingTransport: Send + Sync {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, GatewayError>;
}

/// Counting semaphore; `std` has no stable one.
struct Semaphore {
    permits: Mutex<usize>,
    cv: Condvar,
}

impl Semaphore {
    fn new(permits: usize) -> Self {
        Self {
            permits: Mutex::new(permits),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> SemaphoreGuard<'_> {
        let mut p = self.permits.lock().unwrap();
        while *p == 0 {
            p = self.cv.wait(p).unwrap();
        }
        *p -= 1;
        SemaphoreGuard { sem: self }
    }
}

struct SemaphoreGuard<'a> {
    sem: &'a Semaphore,
}

impl Drop for SemaphoreGuard<'_> {
    fn drop(&mut self) {
        *self.sem.permits.lock().unwrap() += 1;
        self.sem.cv.notify_one();
    }
}

#[derive(Serialize)]
struct AuditRecord<'a> {
    prompt_sha256: String,
    slot: Option<u32>,
    attempts: u32,
    system_text: &'a str,
    user_text: &'a str,
    images: &'a [String],
    response: Result<&'a str, String>,
}

/// Shared gateway: retry + concurrency limiting over a [`Transport`].
pub struct Gateway {
    transport: Arc<dyn Transport>,
    embedder: Option<Arc<dyn EmbeddingTransport>>,
    config: GatewayConfig,
    limiter: Semaphore,
    audit: Option<Mutex<File>>,
}

impl Gateway {
    pub fn new(transport: Arc<dyn Transport>, config: GatewayConfig) -> Self {
        let limiter = Semaphore::new(config.concurrency_limit.max(1));
        let audit = config.audit_log.as_ref().map(|p| {
            Mutex::new(
                OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(p)
                    .expect("open audit log"),
            )
        });
        Self {
            transport,
            embedder: None,
            config,
            limiter,
            audit,
        }
    }

    pub fn with_embedder(mut self, embedder: Arc<dyn EmbeddingTransport>) -> Self {
        self.embedder = Some(embedder);
        self
    }

    pub fn config(&self) -> &GatewayConfig {
        &self.config
    }

    /// Issues one completion, retrying transient failures per the policy.
    pub fn complete(&self, req: &ChatRequest) -> Result<String, GatewayError> {
        req.validate()?;
        let _permit = self.limiter.acquire();
        let max = self.config.retry.max_attempts.max(1);
        let mut attempts = 0;
        let result = loop {
            attempts += 1;
            match self.transport.send(req) {
                Ok(text) => break Ok(text),
                Err(e) if e.is_transient() && attempts < max => {
                    let schedule = &self.config.retry.backoff_ms;
                    if !schedule.is_empty() {
                        let idx = (attempts as usize - 1).min(schedule.len() - 1);
                        thread::sleep(Duration::from_millis(schedule[idx]));
                    }
                }
                Err(e) => break Err(e),
            }
        };
        self.audit(req, attempts, &result);
        result
    }

    /// Issues `n` independent completions concurrently, bounded by the
    /// configured concurrency limit. Results come back in slot order; a
    /// failed slot carries its own error instead of failing the batch.
    pub fn sample_n(
        &self,
        req: &ChatRequest,
        n: usize,
    ) -> Result<Vec<Result<String, GatewayError>>, GatewayError> {
        if n == 0 {
            return Err(GatewayError::InvalidRequest("sample_n with n = 0".into()));
        }
        let results: Vec<Result<String, GatewayError>> = thread::scope(|scope| {
            let handles: Vec<_> = (0..n)
                .map(|slot| {
                    let mut slotted = req.clone();
                    slotted.slot = Some(slot as u32);
                    scope.spawn(move || self.complete(&slotted))
                })
                .collect();
            handles.into_iter().map(|h| h.join().unwrap()).collect()
        });
        if results.iter().all(Result::is_err) {
            return Err(GatewayError::BatchAborted);
        }
        Ok(results)
    }

    /// One fixed-dimension vector per input text, order-preserving.
    pub fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, GatewayError> {
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        let embedder = self
            .embedder
            .as_ref()
            .ok_or_else(|| GatewayError::EmbedderUnavailable("no embedder configured".into()))?;
        let _permit = self.limiter.acquire();
        embedder.embed(texts)
    }

    fn audit(&self, req: &ChatRequest, attempts: u32, result: &Result<String, GatewayError>) {
        let Some(audit) = &self.audit else { return };
        let mut hasher = Sha256::new();
        hasher.update(req.system_text.as_bytes());
        hasher.update([0]);
        hasher.update(req.user_text.as_bytes());
        let record = AuditRecord {
            prompt_sha256: hex_digest(hasher),
            slot: req.slot,
            attempts,
            system_text: &req.system_text,
            user_text: &req.user_text,
            images: &req.images,
            response: match result {
                Ok(s) => Ok(s.as_str()),
                Err(e) => Err(e.to_string()),
            },
        };
        let mut file = audit.lock().unwrap();
        if let Ok(line) = serde_json::to_string(&record) {
            let _ = writeln!(file, "{line}");
        }
    }
}

pub(crate) fn hex_digest(hasher: Sha256) -> String {
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

// ---------------------------------------------------------------------------
// Scripted mock transport
// ---------------------------------------------------------------------------

/// One scripted rule: requests whose prompt contains `pattern` are answered
/// from `responses`. Slotted requests index by slot; plain requests cycle a
/// per-rule counter. The first `fail_times` calls to the rule fail as
/// rate-limited, for retry testing.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MockRule {
    /// Substring matched against system + user text. Empty matches all.
    #[serde(default)]
    pub pattern: String,
    pub responses: Vec<String>,
    #[serde(default)]
    pub fail_times: u32,
}

/// Mock script, loadable from a JSON file.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MockScript {
    pub rules: Vec<MockRule>,
    /// Artificial per-call latency; lets tests observe concurrency.
    #[serde(default)]
    pub delay_ms: u64,
}

impl MockScript {
    pub fn load(path: &Path) -> Result<Self, GatewayError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| GatewayError::ProtocolError(format!("read mock script: {e}")))?;
        serde_json::from_str(&text)
            .map_err(|e| GatewayError::ProtocolError(format!("parse mock script: {e}")))
    }

    /// A one-rule script answering every request with the same responses.
    pub fn uniform(responses: Vec<String>) -> Self {
        Self {
            rules: vec![MockRule {
                pattern: String::new(),
                responses,
                fail_times: 0,
            }],
            delay_ms: 0,
        }
    }
}

/// A recorded mock call, for transcript assertions.
#[derive(Debug, Clone)]
pub struct MockCall {
    pub system_text: String,
    pub user_text: String,
    pub images: Vec<String>,
    pub slot: Option<u32>,
}

struct MockState {
    counters: Vec<u64>,
    fail_remaining: Vec<u32>,
}

/// Deterministic scripted transport.
pub struct MockTransport {
    script: MockScript,
    state: Mutex<MockState>,
    transcript: Mutex<Vec<MockCall>>,
    in_flight: AtomicUsize,
    max_in_flight: AtomicUsize,
}

impl MockTransport {
    pub fn new(script: MockScript) -> Self {
        let n = script.rules.len();
        let fail_remaining = script.rules.iter().map(|r| r.fail_times).collect();
        Self {
            script,
            state: Mutex::new(MockState {
                counters: vec![0; n],
                fail_remaining,
            }),
            transcript: Mutex::new(Vec::new()),
            in_flight: AtomicUsize::new(0),
            max_in_flight: AtomicUsize::new(0),
        }
    }

    pub fn transcript(&self) -> Vec<MockCall> {
        self.transcript.lock().unwrap().clone()
    }

    pub fn call_count(&self) -> usize {
        self.transcript.lock().unwrap().len()
    }

    /// Highest number of simultaneously in-flight requests observed.
    pub fn max_in_flight(&self) -> usize {
        self.max_in_flight.load(Ordering::SeqCst)
    }
}

impl Transport for MockTransport {
    fn send(&self, req: &ChatRequest) -> Result<String, GatewayError> {
        self.transcript.lock().unwrap().push(MockCall {
            system_text: req.system_text.clone(),
            user_text: req.user_text.clone(),
            images: req.images.clone(),
            slot: req.slot,
        });

        let current = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.max_in_flight.fetch_max(current, Ordering::SeqCst);
        if self.script.delay_ms > 0 {
            thread::sleep(Duration::from_millis(self.script.delay_ms));
        }

        let haystack = format!("{}\n{}", req.system_text, req.user_text);
        let result = {
            let mut state = self.state.lock().unwrap();
            let rule_idx = self
                .script
                .rules
                .iter()
                .position(|r| r.pattern.is_empty() || haystack.contains(&r.pattern));
            match rule_idx {
                None => Err(GatewayError::ProtocolError(
                    "no mock rule matches the request".into(),
                )),
                Some(i) => {
                    if state.fail_remaining[i] > 0 {
                        state.fail_remaining[i] -= 1;
                        Err(GatewayError::RateLimited("scripted failure".into()))
                    } else {
                        let rule = &self.script.rules[i];
                        let idx = match req.slot {
                            Some(slot) => slot as usize % rule.responses.len(),
                            None => {
                                let c = state.counters[i];
                                state.counters[i] += 1;
                                c as usize % rule.responses.len()
                            }
                        };
                        Ok(rule.responses[idx].clone())
                    }
                }
            }
        };

        self.in_flight.fetch_sub(1, Ordering::SeqCst);
        result
    }
}

/// A transport that always fails; for exhausted-retry tests.
pub struct FailingTransport;

impl Transport for FailingTransport {
    fn send(&self, _req: &ChatRequest) -> Result<String, GatewayError> {
        Err(GatewayError::RateLimited("always failing".into()))
    }
}

// ---------------------------------------------------------------------------
// Mock embedder
// ---------------------------------------------------------------------------

/// Deterministic embedder: exact-match table first, then a hash-derived
/// pseudo-embedding so unrelated texts land far apart.
#[derive(Debug, Clone, Default)]
pub struct MockEmbedder {
    pub table: BTreeMap<String, Vec<f64>>,
    pub dimension: usize,
}

impl MockEmbedder {
    pub fn hash_based(dimension: usize) -> Self {
        Self {
            table: BTreeMap::new(),
            dimension,
        }
    }

    pub fn with_entry(mut self, text: impl Into<String>, vector: Vec<f64>) -> Self {
        self.table.insert(text.into(), vector);
        self
    }
}

impl EmbeddingTransport for MockEmbedder {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, GatewayError> {
        texts
            .iter()
            .map(|t| {
                if let Some(v) = self.table.get(t) {
                    return Ok(v.clone());
                }
                if self.dimension == 0 {
                    return Err(GatewayError::EmbedderUnavailable(format!(
                        "no embedding scripted for {t:?}"
                    )));
                }
                let mut hasher = Sha256::new();
                hasher.update(t.as_bytes());
                let digest = hasher.finalize();
                Ok((0..self.dimension)
                    .map(|i| {
                        let b = digest[i % digest.len()].wrapping_add(i as u8);
                        f64::from(b) / 127.5 - 1.0
                    })
                    .collect())
            })
            .collect()
    }
}

// ---------------------------------------------------------------------------
// HTTP transport (chat-completions JSON schema)
// ---------------------------------------------------------------------------

/// Chat transport speaking the widely adopted `/chat/completions` JSON schema,
/// with images inlined as base64 data URIs.
pub struct HttpTransport {
    client: reqwest::blocking::Client,
    endpoint: String,
    model: String,
    api_key: Option<String>,
}

impl HttpTransport {
    pub fn new(config: &GatewayConfig) -> Result<Self, GatewayError> {
        let api_key = match &config.api_key_env {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                GatewayError::InvalidRequest(format!("environment variable {var} not set"))
            })?),
            None => None,
        };
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| GatewayError::ProtocolError(e.to_string()))?;
        Ok(Self {
            client,
            endpoint: config.endpoint.trim_end_matches('/').to_string(),
            model: config.model.clone(),
            api_key,
        })
    }

    fn image_data_uri(path: &str) -> Result<String, GatewayError> {
        use base64::Engine as _;
        let bytes = std::fs::read(path)
            .map_err(|e| GatewayError::InvalidRequest(format!("read image {path:?}: {e}")))?;
        Ok(format!(
            "data:image/png;base64,{}",
            base64::engine::general_purpose::STANDARD.encode(bytes)
        ))
    }

    /// Request body in the chat-completions schema; separated for testing.
    pub fn build_body(model: &str, req: &ChatRequest) -> Result<serde_json::Value, GatewayError> {
        let mut user_content = vec![serde_json::json!({"type": "text", "text": req.user_text})];
        for image in &req.images {
            user_content.push(serde_json::json!({
                "type": "image_url",
                "image_url": {"url": Self::image_data_uri(image)?}
            }));
        }
        Ok(serde_json::json!({
            "model": model,
            "temperature": req.temperature,
            "max_tokens": req.max_tokens,
            "messages": [
                {"role": "system", "content": req.system_text},
                {"role": "user", "content": user_content},
            ],
        }))
    }
}

impl Transport for HttpTransport {
    fn send(&self, req: &ChatRequest) -> Result<String, GatewayError> {
        let body = Self::build_body(&self.model, req)?;
        let mut builder = self
            .client
            .post(format!("{}/chat/completions", self.endpoint))
            .json(&body);
        if let Some(key) = &self.api_key {
            builder = builder.bearer_auth(key);
        }
        let response = builder.send().map_err(|e| {
            if e.is_timeout() {
                GatewayError::Timeout
            } else {
                GatewayError::ProtocolError(e.to_string())
            }
        })?;
        let status = response.status();
        if status.as_u16() == 429 {
            return Err(GatewayError::RateLimited(status.to_string()));
        }
        if !status.is_success() {
            return Err(GatewayError::ProtocolError(format!(
                "HTTP {status}: {}",
                response.text().unwrap_or_default()
            )));
        }
        let value: serde_json::Value = response
            .json()
            .map_err(|e| GatewayError::ProtocolError(e.to_string()))?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| GatewayError::ProtocolError("missing choices[0].message.content".into()))
    }
}

/// Embedding transport speaking the `/embeddings` JSON schema.
pub struct HttpEmbedder {
    client: reqwest::blocking::Client,
    endpoint: String,
    model: String,
    api_key: Option<String>,
}

impl HttpEmbedder {
    pub fn new(config: &GatewayConfig) -> Result<Self, GatewayError> {
        let transport = HttpTransport::new(config)?;
        Ok(Self {
            client: transport.client,
            endpoint: transport.endpoint,
            model: transport.model,
            api_key: transport.api_key,
        })
    }
}

impl EmbeddingTransport for HttpEmbedder {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, GatewayError> {
        let body = serde_json::json!({"model": self.model, "input": texts});
        let mut builder = self
            .client
            .post(format!("{}/embeddings", self.endpoint))
            .json(&body);
        if let Some(key) = &self.api_key {
            builder = builder.bearer_auth(key);
        }
        let response = builder
            .send()
            .map_err(|e| GatewayError::EmbedderUnavailable(e.to_string()))?;
        if !response.status().is_success() {
            return Err(GatewayError::EmbedderUnavailable(
                response.status().to_string(),
            ));
        }
        let value: serde_json::Value = response
            .json()
            .map_err(|e| GatewayError::EmbedderUnavailable(e.to_string()))?;
        let data = value["data"]
            .as_array()
            .ok_or_else(|| GatewayError::EmbedderUnavailable("missing data array".into()))?;
        data.iter()
            .map(|item| {
                item["embedding"]
                    .as_array()
                    .map(|v| v.iter().filter_map(serde_json::Value::as_f64).collect())
                    .ok_or_else(|| GatewayError::EmbedderUnavailable("missing embedding".into()))
            })
            .collect()
    }
}
