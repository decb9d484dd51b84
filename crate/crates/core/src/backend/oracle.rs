use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{Backend, BackendError, GenerationRequest, GenerationResult, Prompt};
use crate::promptseq::{render_answer_with, render_segment_answer, Granularity, PromptSequence};
use crate::timeline::{nearest_index, Moment};

/// Systematic error injected into oracle answers.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct OracleNoise {
    /// Seconds added to both endpoints of the hidden truth.
    pub offset: f64,
}

/// Answers grounding prompts from hidden ground truth.
///
/// Truth is looked up by request `query_id` first, then by query text.
/// Multiple-choice prompts are answered from a label table keyed by id.
#[derive(Debug, Clone, Default)]
pub struct OracleBackend {
    by_id: HashMap<String, Moment>,
    by_query: HashMap<String, Moment>,
    labels: HashMap<String, char>,
    noise: OracleNoise,
}

impl OracleBackend {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_noise(mut self, noise: OracleNoise) -> Self {
        self.noise = noise;
        self
    }

    pub fn insert_id(&mut self, query_id: impl Into<String>, truth: Moment) {
        self.by_id.insert(query_id.into(), truth);
    }

    pub fn insert_query(&mut self, query: impl Into<String>, truth: Moment) {
        self.by_query.insert(query.into(), truth);
    }

    pub fn insert_label(&mut self, query_id: impl Into<String>, label: char) {
        self.labels.insert(query_id.into(), label);
    }

    fn truth_for(&self, request: &GenerationRequest) -> Option<Moment> {
        request
            .query_id
            .as_ref()
            .and_then(|id| self.by_id.get(id))
            .or_else(|| request.prompt.query().and_then(|q| self.by_query.get(q)))
            .copied()
    }
}

impl Backend for OracleBackend {
    fn name(&self) -> &str {
        "oracle"
    }

    fn complete(&self, request: &GenerationRequest) -> Result<GenerationResult, BackendError> {
        request.validate()?;
        match &request.prompt {
            Prompt::Grounding(_) => {
                let truth = self.truth_for(request).ok_or_else(|| BackendError::Unsupported {
                    backend: "oracle".into(),
                    reason: format!("no hidden truth for query {:?}", request.query_id),
                })?;
                oracle_complete(request, truth, self.noise)
            }
            Prompt::Chat { .. } => {
                let label = request
                    .query_id
                    .as_ref()
                    .and_then(|id| self.labels.get(id))
                    .ok_or_else(|| BackendError::Unsupported {
                        backend: "oracle".into(),
                        reason: "chat prompt without a known answer label".into(),
                    })?;
                Ok(GenerationResult::text(format!("({label})")))
            }
        }
    }
}

/// The oracle's answer to a grounding request given the hidden truth.
///
/// Fine prompts get the truth (shifted by the noise offset, clipped to the
/// prompt's time range) with endpoints snapped to the prompt's timestamps.
/// Coarse prompts get the start timestamps of every segment holding a frame
/// inside the truth.
pub fn oracle_complete(
    request: &GenerationRequest,
    truth: Moment,
    noise: OracleNoise,
) -> Result<GenerationResult, BackendError> {
    let Prompt::Grounding(seq) = &request.prompt else {
        return Err(BackendError::Unsupported {
            backend: "oracle".into(),
            reason: "not a grounding prompt".into(),
        });
    };
    let text = match seq.granularity {
        Granularity::Fine => fine_answer(seq, truth.shifted(noise.offset)),
        Granularity::Coarse { .. } => coarse_answer(seq, truth.shifted(noise.offset)),
    };
    Ok(GenerationResult::text(text))
}

fn frame_times(seq: &PromptSequence) -> Vec<f64> {
    seq.frames().map(|f| f.timestamp).collect()
}

fn no_overlap_answer(first: f64, decimals: usize) -> String {
    let p = Moment::point(first).expect("grid timestamps are valid");
    render_answer_with(&[p], decimals).expect("non-empty")
}

fn fine_answer(seq: &PromptSequence, truth: Moment) -> String {
    let stamps: Vec<f64> = seq.timestamps().collect();
    let Some((&first, &last)) = stamps.first().zip(stamps.last()) else {
        return String::new();
    };
    let window = Moment::new(first, last).expect("sorted timestamps");
    let Some(visible) = truth.clip(&window) else {
        return no_overlap_answer(first, seq.decimals);
    };
    let s = stamps[nearest_index(&stamps, visible.start())];
    let e = stamps[nearest_index(&stamps, visible.end())];
    let m = Moment::ordered(s, e).expect("grid timestamps are valid");
    render_answer_with(&[m], seq.decimals).expect("non-empty")
}

fn coarse_answer(seq: &PromptSequence, truth: Moment) -> String {
    let times = frame_times(seq);
    let groups = seq.groups();
    let Some((&first, &last)) = times.first().zip(times.last()) else {
        return String::new();
    };
    let window = Moment::new(first, last).expect("sorted timestamps");
    let Some(visible) = truth.clip(&window) else {
        return no_overlap_answer(groups[0].0, seq.decimals);
    };
    let mut starts: Vec<f64> = groups
        .iter()
        .filter(|(_, frames)| frames.iter().any(|f| visible.contains(f.timestamp)))
        .map(|(t, _)| *t)
        .collect();
    if starts.is_empty() {
        // The truth falls between sampled frames: name the nearest frame's segment.
        let nearest = times[nearest_index(&times, visible.center())];
        let (t, _) = groups
            .iter()
            .find(|(_, frames)| frames.iter().any(|f| f.timestamp == nearest))
            .expect("every frame belongs to a group");
        starts.push(*t);
    }
    render_segment_answer(&starts, seq.decimals)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frames::NoFrames;
    use crate::promptseq::{build_coarse_sequence, build_fine_sequence};
    use crate::timeline::make_grid;

    fn m(s: f64, e: f64) -> Moment {
        Moment::new(s, e).unwrap()
    }

    fn fine_request(dur: f64, frames: Option<Vec<usize>>) -> GenerationRequest {
        let g = make_grid(dur, 2.0).unwrap();
        let frames = frames.unwrap_or_else(|| (0..g.len()).collect());
        let seq = build_fine_sequence(&g, &frames, "q", 4).unwrap();
        GenerationRequest::new(Prompt::Grounding(seq), &NoFrames)
    }

    #[test]
    fn fine_exact_truth() {
        let req = fine_request(20.0, None);
        let r = oracle_complete(&req, m(2.0, 8.5), OracleNoise::default()).unwrap();
        assert_eq!(r.text, "From 2.0 seconds to 8.5 seconds");
    }

    #[test]
    fn fine_offset_truth() {
        let req = fine_request(20.0, None);
        let r = oracle_complete(&req, m(2.0, 8.0), OracleNoise { offset: 1.0 }).unwrap();
        assert_eq!(r.text, "From 3.0 seconds to 9.0 seconds");
    }

    #[test]
    fn fine_clips_and_handles_missing_overlap() {
        let req = fine_request(20.0, Some((10..=20).collect()));
        let r = oracle_complete(&req, m(2.0, 8.0), OracleNoise::default()).unwrap();
        assert_eq!(r.text, "From 5.0 seconds to 8.0 seconds");
        let r = oracle_complete(&req, m(15.0, 18.0), OracleNoise::default()).unwrap();
        assert_eq!(r.text, "From 5.0 seconds to 5.0 seconds");
    }

    #[test]
    fn coarse_names_overlapping_segments() {
        let g = make_grid(100.0, 2.0).unwrap();
        let frames: Vec<usize> = (0..g.len()).collect();
        let (seq, _) = build_coarse_sequence(&g, &frames, 32, "q", 16).unwrap();
        let req = GenerationRequest::new(Prompt::Grounding(seq), &NoFrames);
        // overlap oracle: segment j covers [16 j, 16 j + 15.5]
        let expected: Vec<usize> = (0..7)
            .filter(|j| {
                let (lo, hi) = (16.0 * *j as f64, 16.0 * *j as f64 + 15.5);
                lo <= 40.0 && hi >= 20.0
            })
            .collect();
        assert_eq!(expected, vec![1, 2]);
        let r = oracle_complete(&req, m(20.0, 40.0), OracleNoise::default()).unwrap();
        assert_eq!(r.text, "16.0 seconds, 32.0 seconds");

        let r = oracle_complete(&req, m(31.6, 31.9), OracleNoise::default()).unwrap();
        assert_eq!(r.text, "16.0 seconds");
    }

    #[test]
    fn backend_lookup_by_id_then_query() {
        let mut o = OracleBackend::new();
        o.insert_query("q", m(1.0, 2.0));
        o.insert_id("id-1", m(3.0, 4.0));
        let req = fine_request(10.0, None);
        assert_eq!(o.complete(&req).unwrap().text, "From 1.0 seconds to 2.0 seconds");
        let req = req.with_query_id(Some("id-1".into()));
        assert_eq!(o.complete(&req).unwrap().text, "From 3.0 seconds to 4.0 seconds");

        let unknown = OracleBackend::new();
        assert!(matches!(
            unknown.complete(&fine_request(10.0, None)),
            Err(BackendError::Unsupported { .. })
        ));
    }

    #[test]
    fn deterministic() {
        let req = fine_request(50.0, None);
        let a = oracle_complete(&req, m(3.3, 17.8), OracleNoise { offset: 0.4 }).unwrap();
        let b = oracle_complete(&req, m(3.3, 17.8), OracleNoise { offset: 0.4 }).unwrap();
        assert_eq!(a, b);
    }
}
