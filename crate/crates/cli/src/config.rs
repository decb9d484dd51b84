use std::path::Path;

use anyhow::{bail, Context, Result};
use grounding::backend::RemoteConfig;
use grounding::orchestrator::GroundingConfig;
use grounding::vqa::QaConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IngestConfig {
    /// Shell command with `{input}`, `{output}` and `{fps}` placeholders.
    /// It must write numbered image files into `{output}`.
    pub decoder: String,
}

impl Default for IngestConfig {
    fn default() -> Self {
        Self {
            decoder: "ffmpeg -loglevel error -i {input} -vf fps={fps} {output}/%06d.jpg".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PackConfig {
    /// Replication factor for long-video samples.
    pub n_rep: usize,
}

impl Default for PackConfig {
    fn default() -> Self {
        Self { n_rep: 4 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AppConfig {
    pub grounding: GroundingConfig,
    pub remote: RemoteConfig,
    pub qa: QaConfig,
    pub ingest: IngestConfig,
    pub pack: PackConfig,
}

impl AppConfig {
    /// Reads TOML or JSON, chosen by extension (`.json` is JSON, anything
    /// else TOML).
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg: AppConfig = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        } else {
            toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.grounding.validate()?;
        if self.pack.n_rep == 0 {
            bail!("pack.n_rep must be at least 1");
        }
        if self.qa.frames == 0 {
            bail!("qa.frames must be at least 1");
        }
        Ok(())
    }
}
