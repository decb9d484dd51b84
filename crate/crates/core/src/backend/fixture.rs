use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{Backend, BackendError, GenerationRequest, GenerationResult, TokenLogprob};
use crate::error::{Error, Result};

/// One recorded response.
///
/// Entries with a `digest` match that exact prompt. Entries without one act
/// as patterns over `query_id`, `query` and `kind`; every field present must
/// match, and the first matching pattern in file order wins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub digest: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<String>,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logprobs: Option<Vec<TokenLogprob>>,
}

impl FixtureEntry {
    pub fn pattern(text: impl Into<String>) -> Self {
        Self {
            digest: None,
            query_id: None,
            query: None,
            kind: None,
            text: text.into(),
            logprobs: None,
        }
    }

    pub fn for_query(mut self, query: impl Into<String>) -> Self {
        self.query = Some(query.into());
        self
    }

    pub fn for_query_id(mut self, id: impl Into<String>) -> Self {
        self.query_id = Some(id.into());
        self
    }

    pub fn for_kind(mut self, kind: impl Into<String>) -> Self {
        self.kind = Some(kind.into());
        self
    }

    fn matches_pattern(&self, request: &GenerationRequest) -> bool {
        if self.digest.is_some() {
            return false;
        }
        if self.query_id.is_none() && self.query.is_none() && self.kind.is_none() {
            return false;
        }
        let field_ok = |want: &Option<String>, have: Option<&str>| match want {
            None => true,
            Some(w) => have == Some(w.as_str()),
        };
        field_ok(&self.query_id, request.query_id.as_deref())
            && field_ok(&self.query, request.prompt.query())
            && field_ok(&self.kind, Some(request.prompt.kind()))
    }
}

/// Replays recorded responses; never fabricates output.
#[derive(Debug, Clone, Default)]
pub struct FixtureBackend {
    exact: BTreeMap<String, FixtureEntry>,
    patterns: Vec<FixtureEntry>,
}

impl FixtureBackend {
    pub fn new(entries: impl IntoIterator<Item = FixtureEntry>) -> Self {
        let mut out = Self::default();
        for e in entries {
            match &e.digest {
                Some(d) => {
                    out.exact.insert(d.clone(), e);
                }
                None => out.patterns.push(e),
            }
        }
        out
    }

    /// Loads a JSON-lines fixture file.
    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let mut entries = Vec::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: FixtureEntry = serde_json::from_str(&line).map_err(|e| {
                Error::invalid(format!("{}:{}: bad fixture: {e}", path.display(), n + 1))
            })?;
            entries.push(entry);
        }
        Ok(Self::new(entries))
    }

    pub fn len(&self) -> usize {
        self.exact.len() + self.patterns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Backend for FixtureBackend {
    fn name(&self) -> &str {
        "fixture"
    }

    fn complete(&self, request: &GenerationRequest) -> Result<GenerationResult, BackendError> {
        let digest = request.digest();
        let entry = self
            .exact
            .get(&digest)
            .or_else(|| self.patterns.iter().find(|e| e.matches_pattern(request)))
            .ok_or_else(|| BackendError::MissingFixture {
                digest,
                query: request.prompt.query().map(str::to_string),
            })?;
        Ok(GenerationResult {
            text: entry.text.clone(),
            logprobs: entry.logprobs.clone(),
            latency_ms: 0.0,
        })
    }
}

/// Wraps a backend and records every successful exchange as a fixture.
pub struct RecordingBackend<B> {
    inner: B,
    recorded: Mutex<BTreeMap<String, FixtureEntry>>,
}

impl<B: Backend> RecordingBackend<B> {
    pub fn new(inner: B) -> Self {
        Self {
            inner,
            recorded: Mutex::new(BTreeMap::new()),
        }
    }

    pub fn entries(&self) -> Vec<FixtureEntry> {
        self.recorded.lock().unwrap().values().cloned().collect()
    }

    /// Writes the recordings as JSON lines, sorted by digest.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        for entry in self.entries() {
            serde_json::to_writer(&mut out, &entry)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }
}

impl<B: Backend> Backend for RecordingBackend<B> {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn complete(&self, request: &GenerationRequest) -> Result<GenerationResult, BackendError> {
        let result = self.inner.complete(request)?;
        let digest = request.digest();
        let entry = FixtureEntry {
            digest: Some(digest.clone()),
            query_id: None,
            query: request.prompt.query().map(str::to_string),
            kind: Some(request.prompt.kind().to_string()),
            text: result.text.clone(),
            logprobs: result.logprobs.clone(),
        };
        self.recorded.lock().unwrap().insert(digest, entry);
        Ok(result)
    }
}
