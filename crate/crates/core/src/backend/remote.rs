//! HTTP client for chat-style inference servers.
//!
//! Wire format (POST, JSON):
//!
//! ```text
//! {"model": "...",
//!  "messages": [{"role": "system"|"user",
//!                "content": [{"type": "text", "text": "..."},
//!                            {"type": "image", "data": "<base64 or URL>"}]}],
//!  "max_tokens": 128, "temperature": 0.0, "logprobs": false}
//! ```
//!
//! The response is `{"text": "...", "logprobs": [{"token": "...", "logprob": -0.1}]}`
//! with `logprobs` optional.

use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use base64::Engine as _;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{Backend, BackendError, GenerationRequest, GenerationResult, TokenLogprob};
use crate::frames::FrameSource;
use crate::promptseq::{ContentPart, Role};

pub const ENV_BACKEND_URL: &str = "GROUND_BACKEND_URL";
pub const ENV_BACKEND_KEY: &str = "GROUND_BACKEND_KEY";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RemoteConfig {
    pub url: String,
    #[serde(skip_serializing)]
    pub api_key: Option<String>,
    pub model: String,
    pub timeout_ms: u64,
    pub max_retries: u32,
    pub backoff_ms: u64,
    pub max_concurrency: usize,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        Self {
            url: String::new(),
            api_key: None,
            model: "default".into(),
            timeout_ms: 120_000,
            max_retries: 2,
            backoff_ms: 250,
            max_concurrency: 4,
        }
    }
}

impl RemoteConfig {
    /// Fills `url` and `api_key` from the environment when unset.
    pub fn with_env(mut self) -> Self {
        if self.url.is_empty() {
            if let Ok(url) = std::env::var(ENV_BACKEND_URL) {
                self.url = url;
            }
        }
        if self.api_key.is_none() {
            self.api_key = std::env::var(ENV_BACKEND_KEY).ok().filter(|k| !k.is_empty());
        }
        self
    }
}

/// Counting semaphore bounding in-flight requests.
struct Permits {
    free: Mutex<usize>,
    cv: Condvar,
}

struct Permit<'a>(&'a Permits);

impl Permits {
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

pub struct RemoteBackend {
    config: RemoteConfig,
    client: reqwest::blocking::Client,
    permits: Permits,
}

impl RemoteBackend {
    pub fn new(config: RemoteConfig) -> Result<Self, BackendError> {
        if config.url.is_empty() {
            return Err(BackendError::Unsupported {
                backend: "remote".into(),
                reason: format!("no endpoint configured (set {ENV_BACKEND_URL})"),
            });
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(config.timeout_ms))
            .build()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let permits = Permits::new(config.max_concurrency);
        Ok(Self {
            config,
            client,
            permits,
        })
    }

    pub fn config(&self) -> &RemoteConfig {
        &self.config
    }

    /// The JSON body sent for `request`.
    pub fn request_body(&self, request: &GenerationRequest) -> Result<Value, BackendError> {
        let mut messages = Vec::new();
        for msg in request.prompt.messages() {
            let mut content = Vec::with_capacity(msg.content.len());
            for part in msg.content {
                content.push(match part {
                    ContentPart::Text { text } => json!({"type": "text", "text": text}),
                    ContentPart::Frame(f) => {
                        let source = request
                            .frame_sources
                            .get(&f.frame)
                            .ok_or(BackendError::MissingFrame(f.frame))?;
                        json!({"type": "image", "data": encode_frame(f.frame, source)?})
                    }
                });
            }
            let role = match msg.role {
                Role::System => "system",
                Role::User => "user",
                Role::Assistant => "assistant",
            };
            messages.push(json!({"role": role, "content": content}));
        }
        Ok(json!({
            "model": self.config.model,
            "messages": messages,
            "max_tokens": request.decoding.max_new_tokens,
            "temperature": request.decoding.temperature,
            "logprobs": request.decoding.logprobs,
        }))
    }

    fn send_once(&self, body: &Value) -> Result<GenerationResult, BackendError> {
        let _permit = self.permits.acquire();
        let started = Instant::now();
        let mut req = self.client.post(&self.config.url).json(body);
        if let Some(key) = &self.config.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(classify)?;
        let status = resp.status();
        let text = resp.text().map_err(classify)?;
        if !status.is_success() {
            return Err(BackendError::Status {
                code: status.as_u16(),
                body: text,
            });
        }
        let mut result = parse_response(&text)?;
        result.latency_ms = started.elapsed().as_secs_f64() * 1e3;
        Ok(result)
    }
}

fn classify(e: reqwest::Error) -> BackendError {
    if e.is_timeout() {
        BackendError::Timeout(e.to_string())
    } else {
        BackendError::Transport(e.to_string())
    }
}

fn encode_frame(frame: usize, source: &FrameSource) -> Result<String, BackendError> {
    let engine = base64::engine::general_purpose::STANDARD;
    match source {
        FrameSource::Path(p) => std::fs::read(p)
            .map(|bytes| engine.encode(bytes))
            .map_err(|e| BackendError::Transport(format!("reading {}: {e}", p.display()))),
        FrameSource::Inline(bytes) => Ok(engine.encode(bytes)),
        FrameSource::Url(u) => Ok(u.clone()),
        FrameSource::Placeholder => Err(BackendError::MissingFrame(frame)),
    }
}

#[derive(Deserialize)]
struct WireResponse {
    text: String,
    #[serde(default)]
    logprobs: Option<Vec<TokenLogprob>>,
}

pub(crate) fn parse_response(body: &str) -> Result<GenerationResult, BackendError> {
    let wire: WireResponse = serde_json::from_str(body)
        .map_err(|e| BackendError::MalformedResponse(format!("{e}: {body:.200}")))?;
    Ok(GenerationResult {
        text: wire.text,
        logprobs: wire.logprobs,
        latency_ms: 0.0,
    })
}

impl Backend for RemoteBackend {
    fn name(&self) -> &str {
        "remote"
    }

    fn complete(&self, request: &GenerationRequest) -> Result<GenerationResult, BackendError> {
        request.validate()?;
        let body = self.request_body(request)?;
        let mut attempt = 0;
        loop {
            match self.send_once(&body) {
                Err(e) if e.is_retryable() && attempt < self.config.max_retries => {
                    let wait = self.config.backoff_ms.saturating_mul(1 << attempt);
                    tracing::warn!(attempt, wait_ms = wait, error = %e, "retrying backend call");
                    std::thread::sleep(Duration::from_millis(wait));
                    attempt += 1;
                }
                other => return other,
            }
        }
    }
}
