//! The `ground` command-line tool.

pub mod commands;
pub mod config;
pub mod ingest;
pub mod pack;
pub mod svg;
pub mod synth;

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use grounding::backend::{Backend, FixtureBackend, OracleBackend, OracleNoise, RecordingBackend, RemoteBackend};
use grounding::frames::{FrameDirectory, FrameLibrary, NoFrames};
use grounding::manifest::Manifest;

use crate::config::AppConfig;

#[derive(Debug, Parser)]
#[command(name = "ground", version, about = "Video temporal grounding engine")]
pub struct Cli {
    /// TOML or JSON configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every randomized step.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Frame cache directory.
    #[arg(long, global = true, env = "GROUND_CACHE", default_value = ".ground-cache")]
    pub cache_dir: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BackendKind {
    Oracle,
    Fixture,
    Remote,
}

#[derive(Debug, Clone, Args)]
pub struct BackendArgs {
    #[arg(long, value_enum, default_value_t = BackendKind::Oracle)]
    pub backend: BackendKind,
    /// Fixture file replayed by the fixture backend.
    #[arg(long)]
    pub fixtures: Option<PathBuf>,
    /// Record every exchange into this fixture file.
    #[arg(long)]
    pub record: Option<PathBuf>,
    /// Seconds added to the oracle's answers.
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    pub oracle_offset: f64,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic benchmark manifest with on-grid truth.
    Synth(commands::SynthArgs),
    /// Decode media into the frame cache and write a resolved manifest.
    Ingest(commands::IngestArgs),
    /// Ground every query of a manifest.
    Ground(commands::GroundArgs),
    /// Score predictions against a manifest.
    Eval(commands::EvalArgs),
    /// Build perturbed probes.
    #[command(subcommand)]
    Perturb(commands::PerturbCommand),
    /// Build coarse and fine training samples.
    Datagen(commands::DatagenArgs),
    /// Pack training samples into video-centric sequences.
    Pack(commands::PackArgs),
    /// Grounded multiple-choice question answering.
    Vqa(commands::VqaArgs),
    /// Draw one SVG timeline per prediction.
    ExportTimeline(commands::ExportArgs),
}

pub struct RunContext {
    pub config: AppConfig,
    pub seed: u64,
    pub cache_dir: PathBuf,
}

pub fn run(cli: Cli) -> Result<()> {
    let config = match &cli.config {
        Some(p) => AppConfig::load(p)?,
        None => AppConfig::default(),
    };
    let ctx = RunContext {
        config,
        seed: cli.seed,
        cache_dir: cli.cache_dir,
    };
    match cli.command {
        Command::Synth(a) => commands::synth(&ctx, a),
        Command::Ingest(a) => commands::ingest(&ctx, a),
        Command::Ground(a) => commands::ground(&ctx, a),
        Command::Eval(a) => commands::eval(&ctx, a),
        Command::Perturb(c) => commands::perturb(&ctx, c),
        Command::Datagen(a) => commands::datagen(&ctx, a),
        Command::Pack(a) => commands::pack(&ctx, a),
        Command::Vqa(a) => commands::vqa(&ctx, a),
        Command::ExportTimeline(a) => commands::export_timeline(&ctx, a),
    }
}

/// The selected backend, optionally recording into a fixture file.
pub enum Engine {
    Plain(Box<dyn Backend>),
    Recording(RecordingBackend<Box<dyn Backend>>, PathBuf),
}

impl Engine {
    /// `fill` loads hidden truth and labels when the oracle is selected.
    pub fn new(args: &BackendArgs, config: &AppConfig, fill: impl FnOnce(&mut OracleBackend)) -> Result<Self> {
        let inner: Box<dyn Backend> = match args.backend {
            BackendKind::Oracle => {
                let mut oracle = OracleBackend::new().with_noise(OracleNoise {
                    offset: args.oracle_offset,
                });
                fill(&mut oracle);
                Box::new(oracle)
            }
            BackendKind::Fixture => {
                let path = args
                    .fixtures
                    .as_ref()
                    .context("--backend fixture needs --fixtures")?;
                let fx = FixtureBackend::load(path)
                    .with_context(|| format!("loading fixtures {}", path.display()))?;
                if fx.is_empty() {
                    bail!("fixture file {} holds no entries", path.display());
                }
                Box::new(fx)
            }
            BackendKind::Remote => {
                let cfg = config.remote.clone().with_env();
                if cfg.url.is_empty() {
                    bail!("remote backend needs remote.url in the config or GROUND_BACKEND_URL");
                }
                Box::new(RemoteBackend::new(cfg)?)
            }
        };
        Ok(match &args.record {
            Some(path) => Engine::Recording(RecordingBackend::new(inner), path.clone()),
            None => Engine::Plain(inner),
        })
    }

    pub fn backend(&self) -> &dyn Backend {
        match self {
            Engine::Plain(b) => b.as_ref(),
            Engine::Recording(r, _) => r,
        }
    }

    pub fn is_oracle(&self) -> bool {
        self.backend().name() == "oracle"
    }

    /// Writes recorded fixtures, if any.
    pub fn finish(&self) -> Result<()> {
        if let Engine::Recording(r, path) = self {
            r.write(path)
                .with_context(|| format!("writing fixtures {}", path.display()))?;
        }
        Ok(())
    }
}

/// Frame libraries per source video, opened once.
pub struct FrameLibraries {
    by_source: HashMap<String, Arc<dyn FrameLibrary>>,
}

impl FrameLibraries {
    pub fn open(manifest: &Manifest) -> Result<Self> {
        let mut by_source: HashMap<String, Arc<dyn FrameLibrary>> = HashMap::new();
        for v in manifest.videos.iter().filter(|v| v.crop.is_none()) {
            let lib: Arc<dyn FrameLibrary> = match &v.frames {
                Some(dir) => Arc::new(
                    FrameDirectory::open(dir)
                        .with_context(|| format!("video {:?}: opening frames", v.id))?,
                ),
                None => Arc::new(NoFrames),
            };
            by_source.insert(v.id.clone(), lib);
        }
        Ok(Self { by_source })
    }

    /// Library for `video_id`, shifted for virtual crops.
    pub fn for_video(&self, manifest: &Manifest, video_id: &str) -> Result<Arc<dyn FrameLibrary>> {
        let resolved = manifest.grid(video_id)?;
        let Some(v) = manifest.video(&resolved.source) else {
            bail!("unknown video {video_id:?}");
        };
        match &v.frames {
            Some(dir) if resolved.offset > 0 => Ok(Arc::new(
                FrameDirectory::open(dir)?.with_offset(resolved.offset),
            )),
            _ => Ok(Arc::clone(&self.by_source[&resolved.source])),
        }
    }
}

/// Writes `bytes` to `path` through a sibling temporary file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("partial");
    std::fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    std::fs::rename(&tmp, path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// The machine-readable record printed when a command fails.
pub fn error_record(err: &anyhow::Error) -> serde_json::Value {
    let chain: Vec<String> = err.chain().map(|c| c.to_string()).collect();
    serde_json::json!({
        "error": {
            "message": format!("{err:#}"),
            "chain": chain,
        }
    })
}
