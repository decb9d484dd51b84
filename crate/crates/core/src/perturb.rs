//! Robustness probes: moving an event to a new position inside a virtual
//! crop, and splitting a query into per-object questions.

use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::backend::{Backend, GenerationRequest, Prompt};
use crate::error::{Error, Result};
use crate::frames::NoFrames;
use crate::manifest::{Manifest, QueryEntry, VideoEntry, VirtualCrop};
use crate::metrics::iog;
use crate::promptseq::{ContentPart, Message};
use crate::templates::{PromptTemplates, DECOMPOSE_USER_PREFIX};
use crate::timeline::Moment;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftedSample {
    pub video_id: String,
    /// Crop window in source time.
    pub crop: Moment,
    /// The event in crop time.
    pub event: Moment,
    pub seed: u64,
}

/// Crop starts are drawn on a 1/1024 s lattice.
const START_QUANTUM: f64 = 1024.0;

/// Crop length used when none is given: twice the event, at least 30 s,
/// never longer than the video.
pub fn default_crop_len(event: &Moment, duration: f64) -> f64 {
    (2.0 * event.len()).max(30.0).min(duration)
}

/// Range of crop starts that keep `event` inside a `crop_len` window.
pub fn crop_start_range(duration: f64, event: &Moment, crop_len: f64) -> (f64, f64) {
    let lo = (event.end() - crop_len).max(0.0);
    let hi = event.start().min(duration - crop_len).max(lo);
    (lo, hi)
}

pub fn time_shift_sample(
    video_id: &str,
    duration: f64,
    event: &Moment,
    crop_len: f64,
    seed: u64,
) -> Result<ShiftedSample> {
    if event.end() > duration + 1e-9 {
        return Err(Error::invalid(format!(
            "event ({}, {}) lies outside the {duration} s video",
            event.start(),
            event.end()
        )));
    }
    if crop_len < event.len() {
        return Err(Error::invalid(format!(
            "crop of {crop_len} s cannot hold a {} s event",
            event.len()
        )));
    }
    let crop_len = crop_len.min(duration);
    let (lo, hi) = crop_start_range(duration, event, crop_len);
    let start = if hi > lo {
        let u = ChaCha8Rng::seed_from_u64(seed).gen_range(lo..=hi);
        // dyadic starts keep differences with on-grid times exact
        ((u * START_QUANTUM).round() / START_QUANTUM).clamp(lo, hi)
    } else {
        lo
    };
    let crop = Moment::new(start, start + crop_len)?;
    let event_in_crop = Moment::new(event.start() - start, event.end() - start)?;
    Ok(ShiftedSample {
        video_id: video_id.to_string(),
        crop,
        event: event_in_crop,
        seed,
    })
}

/// Derives a manifest of shifted probes from every query with truth.
///
/// Each probe is a virtual crop video plus a query whose truth is the first
/// moment moved into crop time. With `repeats == 1` probe queries keep the
/// original ids; otherwise they are suffixed `#k`. `origin` always names
/// the source query.
pub fn shift_manifest(
    manifest: &Manifest,
    seed: u64,
    crop_len: Option<f64>,
    repeats: usize,
) -> Result<Manifest> {
    if repeats == 0 {
        return Err(Error::invalid("repeat count must be at least 1"));
    }
    let mut out = Manifest {
        videos: manifest.videos.iter().filter(|v| v.crop.is_none()).cloned().collect(),
        ..Default::default()
    };
    for (qi, q) in manifest.queries.iter().enumerate() {
        let Some(event) = q.gt.first() else { continue };
        let video = manifest
            .video(&q.video_id)
            .ok_or_else(|| Error::invalid(format!("unknown video {:?}", q.video_id)))?;
        if video.crop.is_some() {
            return Err(Error::invalid(format!("query {:?} is already on a crop", q.id)));
        }
        let len = crop_len.unwrap_or_else(|| default_crop_len(event, video.duration));
        for k in 0..repeats {
            let draw_seed = seed
                .wrapping_add((qi as u64).wrapping_mul(0x9e3779b97f4a7c15))
                .wrapping_add(k as u64);
            let s = time_shift_sample(&video.id, video.duration, event, len, draw_seed)?;
            let suffix = if repeats == 1 { String::new() } else { format!("#{k}") };
            let crop_id = format!("{}@{}{}", video.id, q.id, suffix);
            out.videos.push(VideoEntry {
                id: crop_id.clone(),
                media: None,
                frames: None,
                duration: s.crop.len(),
                fps: video.fps,
                crop: Some(VirtualCrop {
                    video_id: video.id.clone(),
                    start: s.crop.start(),
                }),
            });
            out.queries.push(QueryEntry {
                id: format!("{}{}", q.id, suffix),
                video_id: crop_id,
                text: q.text.clone(),
                gt: vec![s.event],
                segments: None,
                origin: Some(q.id.clone()),
            });
        }
    }
    out.validate()?;
    Ok(out)
}

/// Outcome of query decomposition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decomposition {
    pub questions: Vec<String>,
    pub raw_text: String,
    /// Set when the reply held no question.
    pub empty: bool,
}

pub fn decomposition_prompt(query: &str, templates: &PromptTemplates) -> Prompt {
    Prompt::Chat {
        messages: vec![
            Message::system(templates.decompose_system.clone()),
            Message::system(templates.decompose_instructions.clone()),
            Message::user(vec![ContentPart::text(format!("{DECOMPOSE_USER_PREFIX}{query}"))]),
        ],
    }
}

fn question_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)\bwhen\s+does\s+(.+?)\s+appear\s*\?").unwrap())
}

/// Every "When does ... appear?" question in `text`, first occurrence kept.
pub fn parse_questions(text: &str) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for cap in question_pattern().captures_iter(text) {
        let object = cap[1].trim().trim_matches(|c| c == '"' || c == '\'').trim();
        if object.is_empty() || object.eq_ignore_ascii_case("[object]") {
            continue;
        }
        let q = format!("When does {object} appear?");
        if !out.iter().any(|x| x.eq_ignore_ascii_case(&q)) {
            out.push(q);
        }
    }
    out
}

pub fn decompose_query(
    query: &str,
    query_id: Option<String>,
    backend: &dyn Backend,
    templates: &PromptTemplates,
) -> Result<Decomposition> {
    if query.trim().is_empty() {
        return Err(Error::invalid("cannot decompose an empty query"));
    }
    let request = GenerationRequest::new(decomposition_prompt(query, templates), &NoFrames)
        .with_query_id(query_id);
    let result = backend.complete(&request)?;
    let questions = parse_questions(&result.text);
    if questions.is_empty() {
        tracing::warn!(query, "decomposition produced no object questions");
    }
    Ok(Decomposition {
        empty: questions.is_empty(),
        questions,
        raw_text: result.text,
    })
}

/// Mean IoG of each object question's top prediction against `gt`. Questions
/// without a prediction count as zero.
pub fn iog_of_decomposition(predictions: &[Vec<Moment>], gt: &Moment) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::invalid("no object-question results"));
    }
    let mut sum = 0.0;
    for p in predictions {
        sum += match p.first() {
            Some(m) => iog(m, gt)?,
            None => 0.0,
        };
    }
    Ok(sum / predictions.len() as f64)
}
