use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::LlmError;
use super::prompt::{PromptTemplate, render};
use crate::digest::{atomic_write, sha256_hex};

pub const CACHE_ENV: &str = "CCMINE_LLM_CACHE";

/// Request body shape expected by the endpoint.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ApiStyle {
    /// `{"prompt", "max_tokens", "temperature"}` -> `{"text"}`
    #[default]
    Raw,
    /// OpenAI-style chat completions.
    Chat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClientConfig {
    pub endpoint: String,
    pub model: String,
    pub api_style: ApiStyle,
    pub max_attempts: u32,
    pub backoff_ms: u64,
    pub max_backoff_ms: u64,
    pub timeout_ms: u64,
    pub max_tokens: u32,
    pub temperature: f64,
    pub max_in_flight: usize,
    pub cache_dir: Option<PathBuf>,
}

impl Default for ClientConfig {
    fn default() -> Self {
        Self {
            endpoint: String::new(),
            model: "mixtral-8x7b-instruct-v0.1".into(),
            api_style: ApiStyle::Raw,
            max_attempts: 4,
            backoff_ms: 500,
            max_backoff_ms: 8_000,
            timeout_ms: 60_000,
            max_tokens: 256,
            temperature: 0.0,
            max_in_flight: 4,
            cache_dir: None,
        }
    }
}

/// Cache identity of a templated request.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RequestKey {
    pub template_version: String,
    pub query: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompletionRequest {
    pub prompt: String,
    pub max_tokens: u32,
    pub temperature: f64,
    pub timeout: Duration,
    pub key: Option<RequestKey>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompletionResponse {
    pub text: String,
    pub latency: Duration,
    pub model: String,
    pub cached: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpReply {
    pub status: u16,
    pub body: String,
}

/// One HTTP POST of a JSON body. Implementations report connection-level
/// failures as `Err`; any HTTP status is an `Ok` reply.
pub trait Transport: Send + Sync {
    fn post_json(&self, url: &str, body: &str, timeout: Duration) -> Result<HttpReply, String>;
}

#[derive(Debug, Default)]
pub struct HttpTransport;

impl Transport for HttpTransport {
    fn post_json(&self, url: &str, body: &str, timeout: Duration) -> Result<HttpReply, String> {
        let agent = ureq::AgentBuilder::new().timeout(timeout).build();
        let result = agent
            .post(url)
            .set("Content-Type", "application/json")
            .send_string(body);
        match result {
            Ok(resp) => {
                let status = resp.status();
                let body = resp.into_string().map_err(|e| e.to_string())?;
                Ok(HttpReply { status, body })
            }
            Err(ureq::Error::Status(status, resp)) => Ok(HttpReply {
                status,
                body: resp.into_string().unwrap_or_default(),
            }),
            Err(ureq::Error::Transport(t)) => Err(t.to_string()),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheRecord {
    template_version: Option<String>,
    query: Option<String>,
    model: String,
    prompt: String,
    text: String,
}

/// One JSON file per request hash.
#[derive(Debug)]
pub struct ResponseCache {
    dir: PathBuf,
    locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
}

impl ResponseCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self {
            dir: dir.into(),
            locks: Mutex::new(HashMap::new()),
        }
    }

    /// `CCMINE_LLM_CACHE` when set, else `fallback`.
    pub fn from_env_or(fallback: Option<PathBuf>) -> Option<Self> {
        std::env::var_os(CACHE_ENV)
            .map(PathBuf::from)
            .or(fallback)
            .map(Self::new)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn lock_for(&self, hash: &str) -> Arc<Mutex<()>> {
        self.locks
            .lock()
            .unwrap()
            .entry(hash.to_string())
            .or_default()
            .clone()
    }

    fn path(&self, hash: &str) -> PathBuf {
        self.dir.join(format!("{hash}.json"))
    }

    fn read(&self, hash: &str) -> Option<CacheRecord> {
        let bytes = fs::read(self.path(hash)).ok()?;
        serde_json::from_slice(&bytes).ok()
    }

    fn write(&self, hash: &str, record: &CacheRecord) -> Result<(), LlmError> {
        fs::create_dir_all(&self.dir).map_err(LlmError::Cache)?;
        let bytes = serde_json::to_vec_pretty(record).expect("record serializes");
        atomic_write(&self.path(hash), &bytes).map_err(LlmError::Cache)
    }
}

struct Gate {
    free: Mutex<usize>,
    cv: Condvar,
}

struct Permit<'a>(&'a Gate);

impl Gate {
    fn new(n: usize) -> Self {
        Self {
            free: Mutex::new(n.max(1)),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().unwrap();
        while *free == 0 {
            free = self.cv.wait(free).unwrap();
        }
        *free -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap() += 1;
        self.0.cv.notify_one();
    }
}

pub struct LlmClient {
    config: ClientConfig,
    transport: Box<dyn Transport>,
    cache: Option<ResponseCache>,
    gate: Gate,
}

impl std::fmt::Debug for LlmClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LlmClient")
            .field("config", &self.config)
            .field("cache", &self.cache)
            .finish_non_exhaustive()
    }
}

fn excerpt(body: &str) -> String {
    const MAX: usize = 200;
    match body.char_indices().nth(MAX) {
        Some((cut, _)) => format!("{}...", &body[..cut]),
        None => body.to_string(),
    }
}

impl LlmClient {
    /// HTTP client; the response cache comes from `CCMINE_LLM_CACHE` or the
    /// configured directory.
    pub fn new(config: ClientConfig) -> Self {
        let cache = ResponseCache::from_env_or(config.cache_dir.clone());
        Self::with_transport(config, Box::new(HttpTransport), cache)
    }

    pub fn with_transport(config: ClientConfig, transport: Box<dyn Transport>, cache: Option<ResponseCache>) -> Self {
        let gate = Gate::new(config.max_in_flight);
        Self {
            config,
            transport,
            cache,
            gate,
        }
    }

    pub fn config(&self) -> &ClientConfig {
        &self.config
    }

    pub fn request(&self, prompt: String, key: Option<RequestKey>) -> CompletionRequest {
        CompletionRequest {
            prompt,
            max_tokens: self.config.max_tokens,
            temperature: self.config.temperature,
            timeout: Duration::from_millis(self.config.timeout_ms),
            key,
        }
    }

    /// Renders `template` for `q` and completes it.
    pub fn ask(&self, template: &PromptTemplate, q: &str) -> Result<CompletionResponse, LlmError> {
        let prompt = render(template, q)?;
        let key = RequestKey {
            template_version: template.version.clone(),
            query: q.to_string(),
        };
        self.complete(&self.request(prompt, Some(key)))
    }

    fn cache_hash(&self, request: &CompletionRequest) -> String {
        let id = match &request.key {
            Some(k) => json!(["v1", k.template_version, k.query, self.config.model]),
            None => json!(["v1-prompt", request.prompt, self.config.model]),
        };
        sha256_hex(id.to_string().as_bytes())
    }

    pub fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, LlmError> {
        let Some(cache) = &self.cache else {
            return self.fetch(request);
        };
        let hash = self.cache_hash(request);
        let lock = cache.lock_for(&hash);
        let _held = lock.lock().unwrap();
        if let Some(record) = cache.read(&hash) {
            return Ok(CompletionResponse {
                text: record.text,
                latency: Duration::ZERO,
                model: record.model,
                cached: true,
            });
        }
        let response = self.fetch(request)?;
        cache.write(
            &hash,
            &CacheRecord {
                template_version: request.key.as_ref().map(|k| k.template_version.clone()),
                query: request.key.as_ref().map(|k| k.query.clone()),
                model: response.model.clone(),
                prompt: request.prompt.clone(),
                text: response.text.clone(),
            },
        )?;
        Ok(response)
    }

    fn body(&self, request: &CompletionRequest) -> String {
        let value = match self.config.api_style {
            ApiStyle::Raw => json!({
                "prompt": request.prompt,
                "max_tokens": request.max_tokens,
                "temperature": request.temperature,
            }),
            ApiStyle::Chat => json!({
                "model": self.config.model,
                "messages": [{"role": "user", "content": request.prompt}],
                "max_tokens": request.max_tokens,
                "temperature": request.temperature,
            }),
        };
        value.to_string()
    }

    fn decode(&self, body: &str) -> Result<String, LlmError> {
        let value: serde_json::Value =
            serde_json::from_str(body).map_err(|e| LlmError::Decode(format!("{e}: {}", excerpt(body))))?;
        let text = match self.config.api_style {
            ApiStyle::Raw => value.get("text"),
            ApiStyle::Chat => value
                .pointer("/choices/0/message/content")
                .or_else(|| value.pointer("/choices/0/text")),
        };
        text.and_then(|t| t.as_str())
            .map(str::to_string)
            .ok_or_else(|| LlmError::Decode(format!("no completion text in {}", excerpt(body))))
    }

    fn fetch(&self, request: &CompletionRequest) -> Result<CompletionResponse, LlmError> {
        if self.config.endpoint.is_empty() {
            return Err(LlmError::NoEndpoint);
        }
        let body = self.body(request);
        let attempts = self.config.max_attempts.max(1);
        let mut last = None;
        for attempt in 0..attempts {
            if attempt > 0 {
                let backoff = self
                    .config
                    .backoff_ms
                    .saturating_mul(1 << (attempt - 1).min(16))
                    .min(self.config.max_backoff_ms);
                thread::sleep(Duration::from_millis(backoff));
            }
            let started = Instant::now();
            let reply = {
                let _permit = self.gate.acquire();
                self.transport.post_json(&self.config.endpoint, &body, request.timeout)
            };
            match reply {
                Ok(HttpReply { status, body }) if (200..300).contains(&status) => {
                    return Ok(CompletionResponse {
                        text: self.decode(&body)?,
                        latency: started.elapsed(),
                        model: self.config.model.clone(),
                        cached: false,
                    });
                }
                Ok(HttpReply { status, body }) => {
                    let err = LlmError::Service {
                        status,
                        body: excerpt(&body),
                    };
                    if status != 429 && status < 500 {
                        return Err(err);
                    }
                    log::warn!("attempt {} of {attempts}: {err}", attempt + 1);
                    last = Some(err);
                }
                Err(message) => {
                    log::warn!("attempt {} of {attempts}: {message}", attempt + 1);
                    last = Some(LlmError::Transport {
                        endpoint: self.config.endpoint.clone(),
                        attempts,
                        message,
                    });
                }
            }
        }
        Err(match last.expect("at least one attempt") {
            LlmError::Transport { endpoint, message, .. } => LlmError::Transport {
                endpoint,
                attempts,
                message,
            },
            other => other,
        })
    }
}
