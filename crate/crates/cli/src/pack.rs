//! Video-centric packing of training samples.
//!
//! Token counts are estimates: visual tokens come from the scaling plan,
//! text is counted in whitespace-separated words.

use anyhow::{Context, Result};
use grounding::datagen::{pack_video_centric, PackedBatch, TrainingSample};
use grounding::promptseq::{ContentPart, Granularity, PromptBuilder, PromptSequence};
use grounding::scaling::plan;
use grounding::templates::PromptTemplates;
use grounding::timeline::FrameGrid;
use serde::Serialize;

pub fn text_tokens(s: &str) -> usize {
    s.split_whitespace().count().max(1)
}

/// Prompt sequence the sample trains on.
pub fn sample_sequence(
    sample: &TrainingSample,
    grid: &FrameGrid,
    scaling: &grounding::scaling::ScalingConfig,
    templates: &PromptTemplates,
) -> Result<PromptSequence> {
    let frames = sample.frames();
    let tokens = plan(frames.len(), scaling)?.per_frame_tokens;
    let builder = PromptBuilder::new(templates.clone());
    Ok(match sample.granularity {
        Granularity::Fine => builder.fine(grid, &frames, &sample.query, tokens)?,
        Granularity::Coarse { segment_length } => {
            builder.coarse(grid, &frames, segment_length, &sample.query, tokens)?.0
        }
    })
}

/// Video span tokens (system text, timestamps and frames) and query tokens.
pub fn sequence_tokens(seq: &PromptSequence) -> (usize, usize) {
    let parts = seq.content_parts();
    let (last, video) = parts.split_last().expect("sequences end with the query text");
    let mut n = text_tokens(&seq.system_text);
    for p in video {
        n += match p {
            ContentPart::Text { text } => text_tokens(text),
            ContentPart::Frame(f) => f.tokens,
        };
    }
    let q = match last {
        ContentPart::Text { text } => text_tokens(text),
        ContentPart::Frame(f) => f.tokens,
    };
    (n, q)
}

#[derive(Debug, Clone, Serialize)]
pub struct PackedRecord {
    pub video_id: String,
    pub frame_range: [usize; 2],
    pub granularity: Granularity,
    pub queries: Vec<String>,
    pub answers: Vec<String>,
    pub batch: serde_json::Value,
}

/// Groups samples sharing a video and frame window, in first-appearance
/// order, and packs each group.
pub fn pack_samples(
    samples: &[TrainingSample],
    grid_of: impl Fn(&str) -> Result<FrameGrid>,
    scaling: &grounding::scaling::ScalingConfig,
    templates: &PromptTemplates,
) -> Result<Vec<(PackedRecord, PackedBatch)>> {
    let mut groups: Vec<Vec<&TrainingSample>> = Vec::new();
    for s in samples {
        match groups.iter_mut().find(|g| {
            g[0].video_id == s.video_id && g[0].frame_range == s.frame_range && g[0].granularity == s.granularity
        }) {
            Some(g) => g.push(s),
            None => groups.push(vec![s]),
        }
    }
    let mut out = Vec::with_capacity(groups.len());
    for g in groups {
        let head = g[0];
        let grid = grid_of(&head.video_id)?;
        let mut video_tokens = 0;
        let mut pairs = Vec::with_capacity(g.len());
        for s in &g {
            let seq = sample_sequence(s, &grid, scaling, templates)
                .with_context(|| format!("video {:?}: building prompt", s.video_id))?;
            let (v, q) = sequence_tokens(&seq);
            video_tokens = v;
            pairs.push((q, text_tokens(&s.answer)));
        }
        let batch = pack_video_centric(video_tokens, &pairs)?;
        out.push((
            PackedRecord {
                video_id: head.video_id.clone(),
                frame_range: [head.frame_range.start, head.frame_range.end],
                granularity: head.granularity,
                queries: g.iter().map(|s| s.query.clone()).collect(),
                answers: g.iter().map(|s| s.answer.clone()).collect(),
                batch: batch.to_json(),
            },
            batch,
        ));
    }
    Ok(out)
}
