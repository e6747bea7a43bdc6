//! Answer generation behind one interface: a remote chat-completion
//! provider, a rule-driven mock, and a content-addressed response cache.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::Channel;
use crate::prompt::PromptBundle;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provider {
    RemoteChat,
    Mock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GatewayConfig {
    pub provider: Provider,
    pub model_name: String,
    pub endpoint_url: String,
    pub api_key_env_var: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub request_timeout_s: u64,
    pub max_retries: u32,
    pub parallelism: usize,
    pub cache_dir: Option<PathBuf>,
    /// First retry delay; doubles per attempt, plus jitter.
    pub backoff_base_ms: u64,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            provider: Provider::Mock,
            model_name: "mock".into(),
            endpoint_url: "https://api.openai.com/v1/chat/completions".into(),
            api_key_env_var: "OPENAI_API_KEY".into(),
            temperature: 0.0,
            max_output_tokens: 512,
            request_timeout_s: 60,
            max_retries: 5,
            parallelism: 4,
            cache_dir: None,
            backoff_base_ms: 2000,
        }
    }
}

impl GatewayConfig {
    pub fn validate(&self) -> Result<(), GatewayError> {
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(GatewayError::Config(format!("temperature must be >= 0, got {}", self.temperature)));
        }
        if self.parallelism == 0 {
            return Err(GatewayError::Config("parallelism must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("rate limited on all {attempts} attempts")]
    RateLimitExhausted { attempts: u32 },
    #[error("transport failed after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("provider refused: {0}")]
    ProviderRefusal(String),
    #[error("cache i/o on {path}: {source}")]
    Cache {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("gateway configuration: {0}")]
    Config(String),
}

impl GatewayError {
    /// Errors that abort a run rather than scoring one question as wrong.
    pub fn is_fatal(&self) -> bool {
        matches!(self, GatewayError::Auth(_) | GatewayError::Cache { .. } | GatewayError::Config(_))
    }
}

/// One failed attempt, as reported by a transport.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TransportError {
    #[error("request timed out")]
    Timeout,
    #[error("rate limited")]
    RateLimited,
    #[error("server error {status}: {body}")]
    Server { status: u16, body: String },
    #[error("connection error: {0}")]
    Connection(String),
    #[error("unauthorized: {0}")]
    Auth(String),
    #[error("refused: {0}")]
    Refusal(String),
    #[error("{0}")]
    Other(String),
}

impl TransportError {
    pub fn is_retryable(&self) -> bool {
        matches!(
            self,
            TransportError::Timeout
                | TransportError::RateLimited
                | TransportError::Server { .. }
                | TransportError::Connection(_)
        )
    }
}

pub struct ChatRequest<'a> {
    pub config: &'a GatewayConfig,
    pub bundle: &'a PromptBundle,
}

impl ChatRequest<'_> {
    /// OpenAI-style chat-completion body. Image refs become `image_url`
    /// content parts after the text.
    pub fn to_json(&self) -> serde_json::Value {
        let text = self.bundle.user_content();
        let user_content = if self.bundle.image_refs_attached.is_empty() {
            json!(text)
        } else {
            let mut parts = vec![json!({"type": "text", "text": text})];
            parts.extend(
                self.bundle
                    .image_refs_attached
                    .iter()
                    .map(|r| json!({"type": "image_url", "image_url": {"url": r}})),
            );
            json!(parts)
        };
        let mut messages = Vec::new();
        if !self.bundle.system_preamble.is_empty() {
            messages.push(json!({"role": "system", "content": self.bundle.system_preamble}));
        }
        messages.push(json!({"role": "user", "content": user_content}));
        json!({
            "model": self.config.model_name,
            "messages": messages,
            "temperature": self.config.temperature,
            "max_tokens": self.config.max_output_tokens,
        })
    }
}

pub trait Transport: Send + Sync {
    fn send(&self, request: &ChatRequest<'_>) -> Result<String, TransportError>;
}

// ---------------------------------------------------------------------------
// Mock provider

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RulePredicate {
    PromptContains { text: String },
    ChannelUsed { channel: Channel },
    DemoIdsAny { ids: Vec<String> },
    DemoIdsExactly { ids: Vec<String> },
    QuestionIdIn { ids: Vec<String> },
    MinDemos { count: usize },
    /// The rank-1 demonstration from `channel` carries the same value for
    /// `tag` as the test question.
    RankOneSharesCategory { channel: Channel, tag: String },
    All { of: Vec<RulePredicate> },
}

impl RulePredicate {
    pub fn matches(&self, bundle: &PromptBundle) -> bool {
        let demos = &bundle.demonstrations_used;
        match self {
            RulePredicate::PromptContains { text } => bundle.rendered_prompt.contains(text.as_str()),
            RulePredicate::ChannelUsed { channel } => demos.iter().any(|d| d.source_channel == *channel),
            RulePredicate::DemoIdsAny { ids } => demos.iter().any(|d| ids.contains(&d.question.id)),
            RulePredicate::DemoIdsExactly { ids } => {
                let want: BTreeSet<&str> = ids.iter().map(String::as_str).collect();
                let got: BTreeSet<&str> = demos.iter().map(|d| d.question.id.as_str()).collect();
                want == got
            }
            RulePredicate::QuestionIdIn { ids } => ids.contains(&bundle.question_id),
            RulePredicate::MinDemos { count } => demos.len() >= *count,
            RulePredicate::RankOneSharesCategory { channel, tag } => demos
                .iter()
                .find(|d| d.source_channel == *channel && d.rank_in_channel == 1)
                .is_some_and(|d| {
                    let theirs = d.question.categories.get(tag);
                    theirs.is_some() && theirs == bundle.question_categories.get(tag)
                }),
            RulePredicate::All { of } => of.iter().all(|p| p.matches(bundle)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rule {
    pub when: RulePredicate,
    pub respond: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rulebook {
    #[serde(default)]
    pub rules: Vec<Rule>,
    pub default_response: String,
}

impl Rulebook {
    pub fn with_default(default_response: impl Into<String>) -> Self {
        Self {
            rules: Vec::new(),
            default_response: default_response.into(),
        }
    }

    pub fn rule(mut self, when: RulePredicate, respond: impl Into<String>) -> Self {
        self.rules.push(Rule {
            when,
            respond: respond.into(),
        });
        self
    }

    pub fn load(path: &Path) -> crate::error::Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| crate::error::Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| crate::error::Error::json(path, e))
    }
}

/// First matching rule's response, else the default.
pub fn mock_answerer(bundle: &PromptBundle, rulebook: &Rulebook) -> String {
    rulebook
        .rules
        .iter()
        .find(|r| r.when.matches(bundle))
        .map_or_else(|| rulebook.default_response.clone(), |r| r.respond.clone())
}

pub struct MockTransport {
    rulebook: Rulebook,
}

impl MockTransport {
    pub fn new(rulebook: Rulebook) -> Self {
        Self { rulebook }
    }
}

impl Transport for MockTransport {
    fn send(&self, request: &ChatRequest<'_>) -> Result<String, TransportError> {
        Ok(mock_answerer(request.bundle, &self.rulebook))
    }
}

// ---------------------------------------------------------------------------
// Remote provider

#[cfg(feature = "remote")]
pub struct HttpTransport {
    client: reqwest::blocking::Client,
    api_key: String,
    endpoint: String,
}

#[cfg(feature = "remote")]
impl HttpTransport {
    pub fn from_config(config: &GatewayConfig) -> Result<Self, GatewayError> {
        let api_key = std::env::var(&config.api_key_env_var)
            .ok()
            .filter(|k| !k.is_empty())
            .ok_or_else(|| GatewayError::Auth(format!("environment variable {} is not set", config.api_key_env_var)))?;
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.request_timeout_s))
            .build()
            .map_err(|e| GatewayError::Config(e.to_string()))?;
        Ok(Self {
            client,
            api_key,
            endpoint: config.endpoint_url.clone(),
        })
    }
}

#[cfg(feature = "remote")]
impl Transport for HttpTransport {
    fn send(&self, request: &ChatRequest<'_>) -> Result<String, TransportError> {
        let resp = self
            .client
            .post(&self.endpoint)
            .bearer_auth(&self.api_key)
            .json(&request.to_json())
            .send()
            .map_err(|e| {
                if e.is_timeout() {
                    TransportError::Timeout
                } else {
                    TransportError::Connection(e.to_string())
                }
            })?;
        let status = resp.status().as_u16();
        let body = resp.text().map_err(|e| TransportError::Connection(e.to_string()))?;
        match status {
            200..=299 => parse_chat_response(&body),
            401 | 403 => Err(TransportError::Auth(body)),
            408 => Err(TransportError::Timeout),
            429 => Err(TransportError::RateLimited),
            500..=599 => Err(TransportError::Server { status, body }),
            _ => Err(TransportError::Other(format!("HTTP {status}: {body}"))),
        }
    }
}

/// Pulls the assistant text out of a chat-completion response body.
pub fn parse_chat_response(body: &str) -> Result<String, TransportError> {
    let v: serde_json::Value =
        serde_json::from_str(body).map_err(|e| TransportError::Other(format!("bad response JSON: {e}")))?;
    let choice = &v["choices"][0];
    if let Some(refusal) = choice["message"]["refusal"].as_str() {
        return Err(TransportError::Refusal(refusal.to_string()));
    }
    if choice["finish_reason"].as_str() == Some("content_filter") {
        return Err(TransportError::Refusal("content_filter".into()));
    }
    choice["message"]["content"]
        .as_str()
        .map(str::to_string)
        .ok_or_else(|| TransportError::Other("response has no message content".into()))
}

// ---------------------------------------------------------------------------
// Cache

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CacheKey(pub String);

impl CacheKey {
    pub fn new(config: &GatewayConfig, bundle: &PromptBundle) -> Self {
        let material = json!({
            "model_name": config.model_name,
            "temperature": config.temperature,
            "rendered_prompt": bundle.rendered_prompt,
            "image_refs_attached": bundle.image_refs_attached,
        });
        let digest = Sha256::digest(material.to_string().as_bytes());
        CacheKey(hex::encode(digest))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub key: CacheKey,
    pub model_name: String,
    pub temperature: f64,
    pub request: serde_json::Value,
    pub rendered_prompt: String,
    pub image_refs_attached: Vec<String>,
    pub response: String,
    pub timestamp: u64,
}

/// One JSON file per entry, written via temp file and rename.
#[derive(Debug, Clone)]
pub struct ResponseCache {
    dir: PathBuf,
}

impl ResponseCache {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, GatewayError> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(|source| GatewayError::Cache {
            path: dir.clone(),
            source,
        })?;
        Ok(Self { dir })
    }

    pub fn path_for(&self, key: &CacheKey) -> PathBuf {
        self.dir.join(format!("{}.json", key.0))
    }

    pub fn get(&self, key: &CacheKey) -> Option<CacheEntry> {
        let text = std::fs::read_to_string(self.path_for(key)).ok()?;
        serde_json::from_str(&text).ok()
    }

    pub fn put(&self, entry: &CacheEntry) -> Result<(), GatewayError> {
        let path = self.path_for(&entry.key);
        let tmp = self.dir.join(format!(
            ".{}.{}.{:?}.tmp",
            entry.key.0,
            std::process::id(),
            std::thread::current().id()
        ));
        let io = |source| GatewayError::Cache {
            path: path.clone(),
            source,
        };
        let text = serde_json::to_string_pretty(entry).expect("entry serializes");
        std::fs::write(&tmp, text).map_err(io)?;
        std::fs::rename(&tmp, &path).map_err(io)
    }
}

// ---------------------------------------------------------------------------
// Gateway

struct Semaphore {
    permits: Mutex<usize>,
    freed: Condvar,
}

impl Semaphore {
    fn new(n: usize) -> Self {
        Self {
            permits: Mutex::new(n),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut p = self.permits.lock().unwrap();
        while *p == 0 {
            p = self.freed.wait(p).unwrap();
        }
        *p -= 1;
        Permit(self)
    }
}

struct Permit<'a>(&'a Semaphore);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.permits.lock().unwrap() += 1;
        self.0.freed.notify_one();
    }
}

pub struct Gateway {
    config: GatewayConfig,
    transport: Box<dyn Transport>,
    cache: Option<ResponseCache>,
    slots: Semaphore,
    transport_calls: AtomicUsize,
    in_flight: AtomicUsize,
    peak_in_flight: AtomicUsize,
}

impl Gateway {
    pub fn new(config: GatewayConfig, transport: Box<dyn Transport>) -> Result<Self, GatewayError> {
        config.validate()?;
        let cache = config.cache_dir.as_ref().map(ResponseCache::open).transpose()?;
        Ok(Self {
            slots: Semaphore::new(config.parallelism),
            config,
            transport,
            cache,
            transport_calls: AtomicUsize::new(0),
            in_flight: AtomicUsize::new(0),
            peak_in_flight: AtomicUsize::new(0),
        })
    }

    pub fn mock(config: GatewayConfig, rulebook: Rulebook) -> Result<Self, GatewayError> {
        Self::new(config, Box::new(MockTransport::new(rulebook)))
    }

    /// Builds the transport named by `config.provider`. The mock provider
    /// needs a rulebook.
    pub fn from_config(config: GatewayConfig, rulebook: Option<Rulebook>) -> Result<Self, GatewayError> {
        match config.provider {
            Provider::Mock => {
                let rb = rulebook.ok_or_else(|| GatewayError::Config("mock provider requires a rulebook".into()))?;
                Self::mock(config, rb)
            }
            #[cfg(feature = "remote")]
            Provider::RemoteChat => {
                let t = HttpTransport::from_config(&config)?;
                Self::new(config, Box::new(t))
            }
            #[cfg(not(feature = "remote"))]
            Provider::RemoteChat => Err(GatewayError::Config("built without the `remote` feature".into())),
        }
    }

    pub fn config(&self) -> &GatewayConfig {
        &self.config
    }

    pub fn cache(&self) -> Option<&ResponseCache> {
        self.cache.as_ref()
    }

    /// Transport invocations so far, retries included.
    pub fn transport_calls(&self) -> usize {
        self.transport_calls.load(Ordering::SeqCst)
    }

    pub fn peak_in_flight(&self) -> usize {
        self.peak_in_flight.load(Ordering::SeqCst)
    }

    /// Exponential delay with jitter. The jitter is seeded from the request
    /// key, so concurrent requests spread out while any one request retries
    /// on a reproducible schedule.
    fn backoff(&self, key: &CacheKey, attempt: u32) -> Duration {
        let base = self.config.backoff_base_ms;
        if base == 0 {
            return Duration::ZERO;
        }
        let seed = u64::from_str_radix(&key.0[..16], 16).unwrap_or(0) ^ u64::from(attempt);
        let exp = base.saturating_mul(1u64 << attempt.min(16));
        let jitter = ChaCha8Rng::seed_from_u64(seed).gen_range(0..=base / 2);
        Duration::from_millis(exp.saturating_add(jitter).min(120_000))
    }

    fn send_once(&self, request: &ChatRequest<'_>) -> Result<String, TransportError> {
        let _permit = self.slots.acquire();
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak_in_flight.fetch_max(now, Ordering::SeqCst);
        self.transport_calls.fetch_add(1, Ordering::SeqCst);
        let out = self.transport.send(request);
        self.in_flight.fetch_sub(1, Ordering::SeqCst);
        out
    }

    pub fn complete(&self, bundle: &PromptBundle) -> Result<String, GatewayError> {
        let key = CacheKey::new(&self.config, bundle);
        if let Some(hit) = self.cache.as_ref().and_then(|c| c.get(&key)) {
            return Ok(hit.response);
        }

        let request = ChatRequest {
            config: &self.config,
            bundle,
        };
        let mut attempt: u32 = 0;
        let response = loop {
            attempt += 1;
            match self.send_once(&request) {
                Ok(text) => break text,
                Err(TransportError::Auth(m)) => return Err(GatewayError::Auth(m)),
                Err(TransportError::Refusal(m)) => return Err(GatewayError::ProviderRefusal(m)),
                Err(e) if e.is_retryable() && attempt <= self.config.max_retries => {
                    log::debug!("attempt {attempt} for `{}` failed: {e}; retrying", bundle.question_id);
                    std::thread::sleep(self.backoff(&key, attempt - 1));
                }
                Err(TransportError::RateLimited) => return Err(GatewayError::RateLimitExhausted { attempts: attempt }),
                Err(e) => {
                    return Err(GatewayError::Transport {
                        attempts: attempt,
                        message: e.to_string(),
                    })
                }
            }
        };

        if let Some(cache) = &self.cache {
            cache.put(&CacheEntry {
                key,
                model_name: self.config.model_name.clone(),
                temperature: self.config.temperature,
                request: request.to_json(),
                rendered_prompt: bundle.rendered_prompt.clone(),
                image_refs_attached: bundle.image_refs_attached.clone(),
                response: response.clone(),
                timestamp: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
            })?;
        }
        Ok(response)
    }
}
