//! The generative-model boundary.
//!
//! Everything the engine knows about a model goes through [`Backend::complete`].
//! Three implementations ship: a deterministic [`OracleBackend`] that answers
//! from hidden ground truth, a [`FixtureBackend`] that replays recorded
//! responses, and a [`RemoteBackend`] that speaks chat-style JSON over HTTP.

mod fixture;
mod oracle;
mod remote;
pub mod stub;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::frames::{FrameLibrary, FrameSource};
use crate::promptseq::{ContentPart, Granularity, Message, PromptSequence};

pub use fixture::{FixtureBackend, FixtureEntry, RecordingBackend};
pub use oracle::{oracle_complete, OracleBackend, OracleNoise};
pub use remote::{RemoteBackend, RemoteConfig, ENV_BACKEND_KEY, ENV_BACKEND_URL};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum BackendError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("request timed out: {0}")]
    Timeout(String),
    #[error("server returned status {code}: {body}")]
    Status { code: u16, body: String },
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("no fixture recorded for request {digest} (query {query:?})")]
    MissingFixture { digest: String, query: Option<String> },
    #[error("frame {0} has no pixel source")]
    MissingFrame(usize),
    #[error("{backend} backend cannot serve this request: {reason}")]
    Unsupported { backend: String, reason: String },
}

impl BackendError {
    /// Transport-level failures that are worth retrying verbatim.
    pub fn is_retryable(&self) -> bool {
        match self {
            BackendError::Transport(_) | BackendError::Timeout(_) => true,
            BackendError::Status { code, .. } => *code >= 500,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Prompt {
    Grounding(PromptSequence),
    Chat { messages: Vec<Message> },
}

impl Prompt {
    pub fn messages(&self) -> Vec<Message> {
        match self {
            Prompt::Grounding(seq) => seq.messages(),
            Prompt::Chat { messages } => messages.clone(),
        }
    }

    pub fn query(&self) -> Option<&str> {
        match self {
            Prompt::Grounding(seq) => Some(&seq.query),
            Prompt::Chat { .. } => None,
        }
    }

    /// `fine`, `coarse` or `chat`; used for fixture matching and traces.
    pub fn kind(&self) -> &'static str {
        match self {
            Prompt::Grounding(seq) => match seq.granularity {
                Granularity::Fine => "fine",
                Granularity::Coarse { .. } => "coarse",
            },
            Prompt::Chat { .. } => "chat",
        }
    }

    pub fn frame_indices(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for msg in self.messages() {
            for part in msg.content {
                if let ContentPart::Frame(f) = part {
                    out.push(f.frame);
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Decoding {
    pub max_new_tokens: usize,
    pub temperature: f64,
    pub logprobs: bool,
}

impl Default for Decoding {
    fn default() -> Self {
        Self {
            max_new_tokens: 128,
            temperature: 0.0,
            logprobs: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    /// Caller-side identifier; oracle lookups use it, remote servers never see it.
    pub query_id: Option<String>,
    pub prompt: Prompt,
    pub frame_sources: BTreeMap<usize, FrameSource>,
    pub decoding: Decoding,
}

impl GenerationRequest {
    /// Builds a request whose frame sources cover every frame in `prompt`.
    pub fn new(prompt: Prompt, frames: &dyn FrameLibrary) -> Self {
        let frame_sources = prompt
            .frame_indices()
            .into_iter()
            .map(|i| (i, frames.source(i)))
            .collect();
        Self {
            query_id: None,
            prompt,
            frame_sources,
            decoding: Decoding::default(),
        }
    }

    pub fn with_query_id(mut self, id: Option<String>) -> Self {
        self.query_id = id;
        self
    }

    pub fn with_decoding(mut self, decoding: Decoding) -> Self {
        self.decoding = decoding;
        self
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        for frame in self.prompt.frame_indices() {
            if !self.frame_sources.contains_key(&frame) {
                return Err(BackendError::MissingFrame(frame));
            }
        }
        Ok(())
    }

    /// Stable content hash of the prompt. Frame pixels and ids are excluded,
    /// so the same prompt over a relocated cache hashes identically.
    pub fn digest(&self) -> String {
        let canonical = serde_json::to_vec(&self.prompt).expect("prompt serializes");
        hex::encode(Sha256::digest(&canonical))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLogprob {
    pub token: String,
    pub logprob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    pub text: String,
    pub logprobs: Option<Vec<TokenLogprob>>,
    pub latency_ms: f64,
}

impl GenerationResult {
    pub fn text(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            logprobs: None,
            latency_ms: 0.0,
        }
    }
}

pub trait Backend: Send + Sync {
    fn name(&self) -> &str;

    fn complete(&self, request: &GenerationRequest) -> Result<GenerationResult, BackendError>;
}

impl<B: Backend + ?Sized> Backend for &B {
    fn name(&self) -> &str {
        (**self).name()
    }

    fn complete(&self, request: &GenerationRequest) -> Result<GenerationResult, BackendError> {
        (**self).complete(request)
    }
}

impl<B: Backend + ?Sized> Backend for Box<B> {
    fn name(&self) -> &str {
        (**self).name()
    }

    fn complete(&self, request: &GenerationRequest) -> Result<GenerationResult, BackendError> {
        (**self).complete(request)
    }
}
