//! Benchmark manifests and prediction files.
//!
//! Both are JSON lines. The first line is a header naming the schema and
//! version; every following line is one tagged record. Readers reject
//! headers they do not know.

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::EvalRecord;
use crate::orchestrator::StageTrace;
use crate::timeline::{make_grid, FrameGrid, Moment};

pub const MANIFEST_SCHEMA: &str = "ground.manifest";
pub const PREDICTIONS_SCHEMA: &str = "ground.predictions";
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Header {
    pub schema: String,
    pub version: u32,
}

impl Header {
    pub fn new(schema: &str) -> Self {
        Self {
            schema: schema.to_string(),
            version: SCHEMA_VERSION,
        }
    }

    fn check(&self, schema: &str) -> Result<()> {
        if self.schema != schema {
            return Err(Error::invalid(format!(
                "expected a {schema} file, found schema {:?}",
                self.schema
            )));
        }
        if self.version != SCHEMA_VERSION {
            return Err(Error::invalid(format!(
                "unsupported {schema} version {} (this build reads version {SCHEMA_VERSION})",
                self.version
            )));
        }
        Ok(())
    }
}

fn default_fps() -> f64 {
    2.0
}

/// A window `[start, start + duration]` of another manifest video.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VirtualCrop {
    pub video_id: String,
    pub start: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoEntry {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub media: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frames: Option<PathBuf>,
    pub duration: f64,
    #[serde(default = "default_fps")]
    pub fps: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crop: Option<VirtualCrop>,
}

impl VideoEntry {
    pub fn new(id: impl Into<String>, duration: f64, fps: f64) -> Self {
        Self {
            id: id.into(),
            media: None,
            frames: None,
            duration,
            fps,
            crop: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryEntry {
    pub id: String,
    pub video_id: String,
    pub text: String,
    #[serde(default)]
    pub gt: Vec<Moment>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segments: Option<Vec<usize>>,
    /// Id of the query this one was derived from (shifted or rephrased).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub origin: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaEntry {
    pub id: String,
    pub video_id: String,
    pub question: String,
    pub options: Vec<String>,
    pub answer: char,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt: Option<Moment>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum ManifestRecord {
    Video(VideoEntry),
    Query(QueryEntry),
    Qa(QaEntry),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    pub videos: Vec<VideoEntry>,
    pub queries: Vec<QueryEntry>,
    pub qa: Vec<QaEntry>,
}

/// Reads a JSON-lines file whose header must name `schema` at the current
/// version.
pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path, schema: &str) -> Result<Vec<T>> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::invalid(format!("cannot read {}: {e}", path.display())))?;
    let mut lines = BufReader::new(file).lines().enumerate();
    let header: Header = loop {
        match lines.next() {
            None => return Err(Error::invalid(format!("{} is empty", path.display()))),
            Some((_, line)) => {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                break serde_json::from_str(&line).map_err(|e| {
                    Error::invalid(format!("{}: missing or bad header: {e}", path.display()))
                })?;
            }
        }
    };
    header.check(schema)?;
    let mut out = Vec::new();
    for (n, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::invalid(format!("{}:{}: {e}", path.display(), n + 1)))?,
        );
    }
    Ok(out)
}

pub fn write_header<W: Write>(out: &mut W, schema: &str) -> Result<()> {
    serde_json::to_writer(&mut *out, &Header::new(schema))?;
    out.write_all(b"\n")?;
    Ok(())
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let records: Vec<ManifestRecord> = read_jsonl(path, MANIFEST_SCHEMA)?;
        let mut m = Manifest::default();
        for r in records {
            match r {
                ManifestRecord::Video(v) => m.videos.push(v),
                ManifestRecord::Query(q) => m.queries.push(q),
                ManifestRecord::Qa(q) => m.qa.push(q),
            }
        }
        m.validate()?;
        Ok(m)
    }

    pub fn write<W: Write>(&self, mut out: W) -> Result<()> {
        write_header(&mut out, MANIFEST_SCHEMA)?;
        let records = self
            .videos
            .iter()
            .cloned()
            .map(ManifestRecord::Video)
            .chain(self.queries.iter().cloned().map(ManifestRecord::Query))
            .chain(self.qa.iter().cloned().map(ManifestRecord::Qa));
        for r in records {
            serde_json::to_writer(&mut out, &r)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write(std::io::BufWriter::new(file))
    }

    pub fn video(&self, id: &str) -> Option<&VideoEntry> {
        self.videos.iter().find(|v| v.id == id)
    }

    pub fn validate(&self) -> Result<()> {
        let mut ids = HashSet::new();
        for v in &self.videos {
            if !ids.insert(v.id.as_str()) {
                return Err(Error::invalid(format!("duplicate video id {:?}", v.id)));
            }
            if !(v.duration > 0.0 && v.duration.is_finite()) {
                return Err(Error::invalid(format!("video {:?}: duration must be positive", v.id)));
            }
            if !(v.fps > 0.0 && v.fps.is_finite()) {
                return Err(Error::invalid(format!("video {:?}: fps must be positive", v.id)));
            }
        }
        for v in &self.videos {
            if let Some(c) = &v.crop {
                let src = self.video(&c.video_id).ok_or_else(|| {
                    Error::invalid(format!("video {:?} crops unknown video {:?}", v.id, c.video_id))
                })?;
                if src.crop.is_some() {
                    return Err(Error::invalid(format!("video {:?}: crops cannot be nested", v.id)));
                }
                if c.start < 0.0 || c.start + v.duration > src.duration + 1e-6 {
                    return Err(Error::invalid(format!("video {:?}: crop exceeds its source", v.id)));
                }
            }
        }
        let mut qids = HashSet::new();
        for q in &self.queries {
            if !qids.insert(q.id.as_str()) {
                return Err(Error::invalid(format!("duplicate query id {:?}", q.id)));
            }
            let v = self.video(&q.video_id).ok_or_else(|| {
                Error::invalid(format!("query {:?} references unknown video {:?}", q.id, q.video_id))
            })?;
            for m in &q.gt {
                if m.end() > v.duration + 1e-6 {
                    return Err(Error::invalid(format!(
                        "query {:?}: moment ({}, {}) exceeds the {} s video",
                        q.id,
                        m.start(),
                        m.end(),
                        v.duration
                    )));
                }
            }
        }
        let mut qa_ids = HashSet::new();
        for q in &self.qa {
            if !qa_ids.insert(q.id.as_str()) {
                return Err(Error::invalid(format!("duplicate qa id {:?}", q.id)));
            }
            if self.video(&q.video_id).is_none() {
                return Err(Error::invalid(format!(
                    "qa item {:?} references unknown video {:?}",
                    q.id, q.video_id
                )));
            }
        }
        Ok(())
    }

    /// The sampling grid of `video_id`, plus the source video and frame
    /// offset that its frame indices map to.
    pub fn grid(&self, video_id: &str) -> Result<ResolvedGrid> {
        let v = self
            .video(video_id)
            .ok_or_else(|| Error::invalid(format!("unknown video {video_id:?}")))?;
        match &v.crop {
            None => Ok(ResolvedGrid {
                grid: make_grid(v.duration, v.fps)?,
                source: v.id.clone(),
                offset: 0,
            }),
            Some(c) => {
                let src = self
                    .video(&c.video_id)
                    .ok_or_else(|| Error::invalid(format!("unknown video {:?}", c.video_id)))?;
                let full = make_grid(src.duration, src.fps)?;
                let (grid, offset) = crop_grid(&full, c.start, v.duration)?;
                Ok(ResolvedGrid {
                    grid,
                    source: src.id.clone(),
                    offset,
                })
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedGrid {
    pub grid: FrameGrid,
    pub source: String,
    pub offset: usize,
}

/// The frames of `full` inside `[start, start + len]`, re-timed so the crop
/// begins at zero. Returns the grid and the index of its first source frame.
pub fn crop_grid(full: &FrameGrid, start: f64, len: f64) -> Result<(FrameGrid, usize)> {
    let ts = full.timestamps();
    let first = ts.partition_point(|&t| t < start - 1e-9);
    let last = ts.partition_point(|&t| t <= start + len + 1e-9);
    if first >= last {
        return Err(Error::invalid(format!("crop at {start} s holds no frames")));
    }
    let shifted = ts[first..last].iter().map(|t| t - start).collect();
    Ok((FrameGrid::from_timestamps(shifted, full.fps(), len)?, first))
}

/// One line of a predictions file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub query_id: String,
    pub moments: Vec<Moment>,
    #[serde(default)]
    pub stage_trace: Vec<StageTrace>,
    #[serde(default)]
    pub fallback_used: bool,
}

pub fn load_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    read_jsonl(path, PREDICTIONS_SCHEMA)
}

/// Appends prediction records, writing the header first for a new file.
pub struct PredictionWriter {
    out: std::io::BufWriter<std::fs::File>,
}

impl PredictionWriter {
    /// Opens `path` for appending. Ids already present are returned so the
    /// caller can skip them.
    pub fn open(path: &Path) -> Result<(Self, HashSet<String>)> {
        let existing = if path.exists() && std::fs::metadata(path)?.len() > 0 {
            load_predictions(path)?
                .into_iter()
                .map(|p| p.query_id)
                .collect()
        } else {
            HashSet::new()
        };
        let file = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
        let mut out = std::io::BufWriter::new(file);
        if existing.is_empty() && std::fs::metadata(path)?.len() == 0 {
            write_header(&mut out, PREDICTIONS_SCHEMA)?;
        }
        Ok((Self { out }, existing))
    }

    pub fn push(&mut self, record: &PredictionRecord) -> Result<()> {
        serde_json::to_writer(&mut self.out, record)?;
        self.out.write_all(b"\n")?;
        self.out.flush()?;
        Ok(())
    }
}

/// Pairs predictions with manifest truth. Queries without predictions score
/// as empty predictions; predictions for unknown ids are an error. Segment
/// annotations are attached only when the prediction ran a coarse stage.
pub fn eval_records(manifest: &Manifest, predictions: &[PredictionRecord]) -> Result<Vec<EvalRecord>> {
    let by_id: HashMap<&str, &PredictionRecord> =
        predictions.iter().map(|p| (p.query_id.as_str(), p)).collect();
    for p in predictions {
        if !manifest.queries.iter().any(|q| q.id == p.query_id) {
            return Err(Error::invalid(format!("prediction for unknown query {:?}", p.query_id)));
        }
    }
    let mut out = Vec::new();
    for q in manifest.queries.iter().filter(|q| !q.gt.is_empty()) {
        let pred = by_id.get(q.id.as_str());
        let mut rec = EvalRecord::new(
            q.id.clone(),
            pred.map(|p| p.moments.clone()).unwrap_or_default(),
            q.gt.clone(),
        );
        let coarse = pred.and_then(|p| {
            p.stage_trace
                .iter()
                .find(|s| s.kind == crate::orchestrator::StageKind::Coarse)
        });
        if let (Some(stage), Some(gt_segs)) = (coarse, &q.segments) {
            let retrieved = stage.retrieved.iter().map(|r| r.segment).collect();
            rec = rec.with_segments(retrieved, gt_segs.clone());
        }
        out.push(rec);
    }
    Ok(out)
}
