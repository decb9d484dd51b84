//! Timestamp-interleaved prompt sequences and the answer grammar.
//!
//! A fine sequence puts `timestamp: t seconds` before every frame; a coarse
//! sequence puts one timestamp before each run of `segment_length` frames.
//! The model answers fine prompts with `From s seconds to e seconds` and
//! coarse prompts by naming segment timestamps.

use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, ParseFailure, Result};
use crate::templates::PromptTemplates;
use crate::timeline::{nearest_index, FrameGrid, Moment};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Granularity {
    Fine,
    Coarse { segment_length: usize },
}

/// One frame's visual tokens inside a prompt.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameRef {
    pub frame: usize,
    /// Grid timestamp of the frame. Not rendered; only `Timestamp` elements are.
    pub timestamp: f64,
    pub tokens: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Element {
    Timestamp { seconds: f64 },
    Frame(FrameRef),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum ContentPart {
    Text { text: String },
    Frame(FrameRef),
}

impl ContentPart {
    pub fn text(s: impl Into<String>) -> Self {
        ContentPart::Text { text: s.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: Vec<ContentPart>,
}

impl Message {
    pub fn system(text: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            content: vec![ContentPart::text(text)],
        }
    }

    pub fn user(content: Vec<ContentPart>) -> Self {
        Self {
            role: Role::User,
            content,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSequence {
    pub elements: Vec<Element>,
    pub system_text: String,
    pub task_text: String,
    pub query: String,
    pub granularity: Granularity,
    /// Decimal places used when rendering timestamps.
    pub decimals: usize,
}

impl PromptSequence {
    pub fn timestamps(&self) -> impl Iterator<Item = f64> + '_ {
        self.elements.iter().filter_map(|e| match e {
            Element::Timestamp { seconds } => Some(*seconds),
            Element::Frame(_) => None,
        })
    }

    pub fn frames(&self) -> impl Iterator<Item = &FrameRef> + '_ {
        self.elements.iter().filter_map(|e| match e {
            Element::Frame(f) => Some(f),
            Element::Timestamp { .. } => None,
        })
    }

    /// Frame groups, one per timestamp element, in order.
    pub fn groups(&self) -> Vec<(f64, Vec<FrameRef>)> {
        let mut out: Vec<(f64, Vec<FrameRef>)> = Vec::new();
        for e in &self.elements {
            match e {
                Element::Timestamp { seconds } => out.push((*seconds, Vec::new())),
                Element::Frame(f) => {
                    if let Some(last) = out.last_mut() {
                        last.1.push(*f);
                    }
                }
            }
        }
        out
    }

    /// User-turn content: timestamp texts and frames interleaved, then the
    /// task instructions and query.
    pub fn content_parts(&self) -> Vec<ContentPart> {
        let mut parts: Vec<ContentPart> = self
            .elements
            .iter()
            .map(|e| match e {
                Element::Timestamp { seconds } => {
                    ContentPart::text(render_timestamp_with(*seconds, self.decimals))
                }
                Element::Frame(f) => ContentPart::Frame(*f),
            })
            .collect();
        parts.push(ContentPart::text(format!(
            "\n{}\nQuery: {}\nAnswer:",
            self.task_text, self.query
        )));
        parts
    }

    pub fn messages(&self) -> Vec<Message> {
        vec![
            Message::system(self.system_text.clone()),
            Message::user(self.content_parts()),
        ]
    }

    /// Verifies the alternation and ordering invariants.
    pub fn validate(&self) -> Result<()> {
        let groups = self.groups();
        if !matches!(self.elements.first(), Some(Element::Timestamp { .. }) | None) {
            return Err(Error::invalid("sequence must open with a timestamp"));
        }
        let per_group = match self.granularity {
            Granularity::Fine => 1,
            Granularity::Coarse { segment_length } => segment_length,
        };
        for (i, (_, frames)) in groups.iter().enumerate() {
            let last = i + 1 == groups.len();
            if frames.is_empty()
                || frames.len() > per_group
                || (!last && frames.len() != per_group)
            {
                return Err(Error::invalid(format!(
                    "group {i} holds {} frames, expected {per_group}",
                    frames.len()
                )));
            }
        }
        let frames: Vec<usize> = self.frames().map(|f| f.frame).collect();
        if frames.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("frame indices must be strictly increasing"));
        }
        Ok(())
    }
}

/// One coarse segment: a run of consecutive frames from the selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub index: usize,
    pub start_frame: usize,
    pub start_timestamp: f64,
    /// Timestamp of the segment's last frame.
    pub end_timestamp: f64,
    pub frames: Vec<usize>,
}

impl Segment {
    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }

    pub fn span(&self) -> Moment {
        Moment::new(self.start_timestamp, self.end_timestamp).expect("segment timestamps ordered")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentCatalog {
    pub segments: Vec<Segment>,
}

impl SegmentCatalog {
    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn get(&self, index: usize) -> Option<&Segment> {
        self.segments.get(index)
    }

    fn start_timestamps(&self) -> Vec<f64> {
        self.segments.iter().map(|s| s.start_timestamp).collect()
    }
}

/// Decimal places that render every step of a `fps` grid exactly, or at
/// least distinctly when the step has no finite decimal form. Never below one.
pub fn timestamp_decimals(fps: f64) -> usize {
    let step = 1.0 / fps;
    for d in 1..=6 {
        let scaled = step * 10f64.powi(d as i32);
        if (scaled - scaled.round()).abs() < 1e-9 {
            return d;
        }
    }
    ((-step.log10()).ceil().max(0.0) as usize + 1).max(1)
}

pub fn render_timestamp(t: f64) -> String {
    render_timestamp_with(t, 1)
}

pub fn render_timestamp_with(t: f64, decimals: usize) -> String {
    format!("timestamp: {t:.decimals$} seconds")
}

pub fn render_answer(moments: &[Moment]) -> Result<String> {
    render_answer_with(moments, 1)
}

pub fn render_answer_with(moments: &[Moment], decimals: usize) -> Result<String> {
    if moments.is_empty() {
        return Err(Error::invalid("cannot render an empty answer"));
    }
    Ok(moments
        .iter()
        .map(|m| {
            format!(
                "From {:.d$} seconds to {:.d$} seconds",
                m.start(),
                m.end(),
                d = decimals
            )
        })
        .collect::<Vec<_>>()
        .join("; "))
}

/// Coarse-stage answer naming segment start times, e.g. `16.0 seconds, 32.0 seconds`.
pub fn render_segment_answer(starts: &[f64], decimals: usize) -> String {
    starts
        .iter()
        .map(|t| format!("{t:.decimals$} seconds"))
        .collect::<Vec<_>>()
        .join(", ")
}

/// Builds fine and coarse sequences from a set of prompt templates.
#[derive(Debug, Clone, Default)]
pub struct PromptBuilder {
    pub templates: PromptTemplates,
}

impl PromptBuilder {
    pub fn new(templates: PromptTemplates) -> Self {
        Self { templates }
    }

    pub fn fine(
        &self,
        grid: &FrameGrid,
        frames: &[usize],
        query: &str,
        tokens: usize,
    ) -> Result<PromptSequence> {
        check_selection(grid, frames)?;
        let elements = frames
            .iter()
            .flat_map(|&frame| {
                let t = grid.timestamp(frame);
                [
                    Element::Timestamp { seconds: t },
                    Element::Frame(FrameRef {
                        frame,
                        timestamp: t,
                        tokens,
                    }),
                ]
            })
            .collect();
        Ok(PromptSequence {
            elements,
            system_text: self.templates.system.clone(),
            task_text: self.templates.fine_task.clone(),
            query: query.to_string(),
            granularity: Granularity::Fine,
            decimals: timestamp_decimals(grid.fps()),
        })
    }

    pub fn coarse(
        &self,
        grid: &FrameGrid,
        frames: &[usize],
        segment_length: usize,
        query: &str,
        tokens: usize,
    ) -> Result<(PromptSequence, SegmentCatalog)> {
        check_selection(grid, frames)?;
        if segment_length == 0 {
            return Err(Error::invalid("segment length must be at least 1"));
        }
        let mut elements = Vec::with_capacity(frames.len() + frames.len() / segment_length + 1);
        let mut segments = Vec::new();
        for (index, chunk) in frames.chunks(segment_length).enumerate() {
            let start_timestamp = grid.timestamp(chunk[0]);
            elements.push(Element::Timestamp {
                seconds: start_timestamp,
            });
            elements.extend(chunk.iter().map(|&frame| {
                Element::Frame(FrameRef {
                    frame,
                    timestamp: grid.timestamp(frame),
                    tokens,
                })
            }));
            segments.push(Segment {
                index,
                start_frame: chunk[0],
                start_timestamp,
                end_timestamp: grid.timestamp(*chunk.last().unwrap()),
                frames: chunk.to_vec(),
            });
        }
        let seq = PromptSequence {
            elements,
            system_text: self.templates.system.clone(),
            task_text: self.templates.coarse_task.clone(),
            query: query.to_string(),
            granularity: Granularity::Coarse { segment_length },
            decimals: timestamp_decimals(grid.fps()),
        };
        Ok((seq, SegmentCatalog { segments }))
    }
}

fn check_selection(grid: &FrameGrid, frames: &[usize]) -> Result<()> {
    if frames.is_empty() {
        return Err(Error::invalid("frame selection is empty"));
    }
    if frames.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid("frame selection must be strictly increasing"));
    }
    if *frames.last().unwrap() >= grid.len() {
        return Err(Error::invalid(format!(
            "frame {} outside grid of {} frames",
            frames.last().unwrap(),
            grid.len()
        )));
    }
    Ok(())
}

pub fn build_fine_sequence(
    grid: &FrameGrid,
    frames: &[usize],
    query: &str,
    tokens: usize,
) -> Result<PromptSequence> {
    PromptBuilder::default().fine(grid, frames, query, tokens)
}

pub fn build_coarse_sequence(
    grid: &FrameGrid,
    frames: &[usize],
    segment_length: usize,
    query: &str,
    tokens: usize,
) -> Result<(PromptSequence, SegmentCatalog)> {
    PromptBuilder::default().coarse(grid, frames, segment_length, query, tokens)
}

const NUMBER: &str = r"(\d+(?:\.\d+)?)";

fn from_to_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(&format!(
            r"(?i)\bfrom\s+{NUMBER}\s*(?:seconds?|secs?|s\b)?\s*(?:to|until|-)\s*{NUMBER}\s*(?:seconds?|secs?|s\b)?"
        ))
        .unwrap()
    })
}

fn seconds_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(&format!(r"(?i){NUMBER}\s*(?:seconds?|secs?\b|s\b)")).unwrap())
}

/// Extracts every `From X seconds to Y seconds` clause, snapping endpoints to
/// `grid`.
pub fn parse_fine_answer(text: &str, grid: &FrameGrid) -> Result<Vec<Moment>, ParseFailure> {
    parse_fine_answer_on(text, grid.timestamps())
}

/// Like [`parse_fine_answer`], snapping to an arbitrary sorted timestamp set.
pub fn parse_fine_answer_on(text: &str, timestamps: &[f64]) -> Result<Vec<Moment>, ParseFailure> {
    if timestamps.is_empty() {
        return Err(ParseFailure::new("no timestamps to snap onto", text));
    }
    let snap = |t: f64| timestamps[nearest_index(timestamps, t)];
    let mut out: Vec<Moment> = Vec::new();
    for cap in from_to_pattern().captures_iter(text) {
        let (Ok(a), Ok(b)) = (cap[1].parse::<f64>(), cap[2].parse::<f64>()) else {
            continue;
        };
        let Ok(m) = Moment::ordered(snap(a), snap(b)) else {
            continue;
        };
        if !out.contains(&m) {
            out.push(m);
        }
    }
    if out.is_empty() {
        return Err(ParseFailure::new("no `From .. to ..` clause", text));
    }
    Ok(out)
}

/// Segment indices named by a coarse answer, ascending and de-duplicated.
pub fn parse_coarse_answer(text: &str, catalog: &SegmentCatalog) -> Result<Vec<usize>, ParseFailure> {
    let mut idx = parse_coarse_answer_ordered(text, catalog)?;
    idx.sort_unstable();
    Ok(idx)
}

/// Segment indices in order of first mention.
pub fn parse_coarse_answer_ordered(
    text: &str,
    catalog: &SegmentCatalog,
) -> Result<Vec<usize>, ParseFailure> {
    if catalog.is_empty() {
        return Err(ParseFailure::new("empty segment catalog", text));
    }
    let mut found: Vec<(usize, f64)> = Vec::new();
    for cap in seconds_pattern().captures_iter(text) {
        let m = cap.get(1).unwrap();
        if let Ok(v) = m.as_str().parse::<f64>() {
            found.push((m.start(), v));
        }
    }
    for cap in from_to_pattern().captures_iter(text) {
        for g in [1, 2] {
            let m = cap.get(g).unwrap();
            if let Ok(v) = m.as_str().parse::<f64>() {
                if !found.iter().any(|(pos, _)| *pos == m.start()) {
                    found.push((m.start(), v));
                }
            }
        }
    }
    if found.is_empty() {
        return Err(ParseFailure::new("no timestamp numerals", text));
    }
    found.sort_by_key(|(pos, _)| *pos);
    let starts = catalog.start_timestamps();
    let mut out = Vec::new();
    for (_, t) in found {
        let i = nearest_index(&starts, t);
        if !out.contains(&i) {
            out.push(i);
        }
    }
    Ok(out)
}
