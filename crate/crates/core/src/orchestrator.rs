//! Multi-stage grounding.
//!
//! Short videos get one fine pass. Longer videos first go through segment
//! retrieval: the candidate frames are cut into clips of at most
//! `long_threshold` frames, the model names the segments that matter in each
//! clip, and the union of those segments becomes the next candidate set.
//! Retrieval repeats until the candidates fit in `short_threshold` frames or
//! the stage budget runs out; a fine pass over the survivors produces the
//! final moments.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backend::{Backend, Decoding, GenerationRequest, Prompt};
use crate::error::{Error, Result};
use crate::frames::FrameLibrary;
use crate::promptseq::{parse_coarse_answer_ordered, parse_fine_answer_on, PromptBuilder, SegmentCatalog};
use crate::scaling::{plan, ScalingConfig};
use crate::templates::PromptTemplates;
use crate::timeline::{FrameGrid, Moment};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GroundingConfig {
    pub scaling: ScalingConfig,
    pub segment_length: usize,
    pub max_stages: usize,
    pub max_kept_segments: usize,
    pub templates: PromptTemplates,
    pub decoding: Decoding,
}

impl Default for GroundingConfig {
    fn default() -> Self {
        Self {
            scaling: ScalingConfig::default(),
            segment_length: 32,
            max_stages: 4,
            max_kept_segments: 4,
            templates: PromptTemplates::default(),
            decoding: Decoding::default(),
        }
    }
}

impl GroundingConfig {
    pub fn validate(&self) -> Result<()> {
        self.scaling.validate()?;
        if self.segment_length == 0 {
            return Err(Error::invalid("segment length must be at least 1"));
        }
        if self.max_stages == 0 {
            return Err(Error::invalid("max_stages must be at least 1"));
        }
        if self.max_kept_segments == 0 {
            return Err(Error::invalid("max_kept_segments must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Query {
    pub id: Option<String>,
    pub text: String,
}

impl Query {
    pub fn new(text: impl Into<String>) -> Self {
        Self {
            id: None,
            text: text.into(),
        }
    }

    pub fn with_id(id: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            id: Some(id.into()),
            text: text.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageKind {
    Coarse,
    Fine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedSegment {
    pub clip: usize,
    /// Index within the clip's segment catalog.
    pub index: usize,
    /// Whole-video segment holding the segment's first frame, i.e. its
    /// first frame divided by the segment length.
    pub segment: usize,
    pub start: f64,
    pub end: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTrace {
    pub kind: StageKind,
    pub input_frames: usize,
    pub clips: usize,
    pub retrieved: Vec<RetrievedSegment>,
    pub raw_text: Vec<String>,
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundingResult {
    pub moments: Vec<Moment>,
    pub stage_trace: Vec<StageTrace>,
    pub fallback_used: bool,
}

/// Outcome of one segment-retrieval call.
#[derive(Debug, Clone, PartialEq)]
pub struct Retrieval {
    /// Kept segment indices, ascending.
    pub segments: Vec<usize>,
    pub catalog: SegmentCatalog,
    pub raw_text: String,
}

impl Retrieval {
    /// Frames of the kept segments, in temporal order.
    pub fn frames(&self) -> Vec<usize> {
        self.segments
            .iter()
            .flat_map(|&i| self.catalog.segments[i].frames.iter().copied())
            .collect()
    }
}

/// Outcome of a fine pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Refinement {
    pub moments: Vec<Moment>,
    pub raw_text: Vec<String>,
    pub fallback: bool,
}

pub struct Grounder<'a> {
    backend: &'a dyn Backend,
    frames: &'a dyn FrameLibrary,
    config: GroundingConfig,
    prompts: PromptBuilder,
}

impl<'a> Grounder<'a> {
    pub fn new(
        backend: &'a dyn Backend,
        frames: &'a dyn FrameLibrary,
        config: GroundingConfig,
    ) -> Result<Self> {
        config.validate()?;
        let prompts = PromptBuilder::new(config.templates.clone());
        Ok(Self {
            backend,
            frames,
            config,
            prompts,
        })
    }

    pub fn config(&self) -> &GroundingConfig {
        &self.config
    }

    fn request(&self, prompt: Prompt, query: &Query) -> GenerationRequest {
        GenerationRequest::new(prompt, self.frames)
            .with_query_id(query.id.clone())
            .with_decoding(self.config.decoding)
    }

    fn tokens_for(&self, frames: usize) -> Result<usize> {
        Ok(plan(frames, &self.config.scaling)?.per_frame_tokens)
    }

    pub fn ground(&self, grid: &FrameGrid, query: &Query) -> Result<GroundingResult> {
        if grid.is_empty() {
            return Err(Error::invalid("cannot ground on an empty grid"));
        }
        let short = self.config.scaling.short_threshold;
        let long = self.config.scaling.long_threshold;
        let mut candidates: Vec<usize> = (0..grid.len()).collect();
        let mut trace = Vec::new();
        let mut fallback_used = false;

        while candidates.len() > short && trace.len() + 1 < self.config.max_stages {
            let clips: Vec<&[usize]> = candidates.chunks(long).collect();
            let outcomes: Vec<Result<(Retrieval, bool)>> = clips
                .par_iter()
                .map(|clip| self.retrieve_or_keep_all(grid, clip, query))
                .collect();

            let mut next = Vec::new();
            let mut stage = StageTrace {
                kind: StageKind::Coarse,
                input_frames: candidates.len(),
                clips: clips.len(),
                retrieved: Vec::new(),
                raw_text: Vec::new(),
                fallback: false,
            };
            for (clip, outcome) in outcomes.into_iter().enumerate() {
                let (retrieval, fell_back) = outcome?;
                stage.fallback |= fell_back;
                next.extend(retrieval.frames());
                stage.retrieved.extend(retrieval.segments.iter().map(|&i| {
                    let seg = &retrieval.catalog.segments[i];
                    RetrievedSegment {
                        clip,
                        index: i,
                        segment: seg.start_frame / self.config.segment_length,
                        start: seg.start_timestamp,
                        end: seg.end_timestamp,
                    }
                }));
                stage.raw_text.push(retrieval.raw_text);
            }
            fallback_used |= stage.fallback;
            trace.push(stage);
            next.sort_unstable();
            next.dedup();
            let stalled = next.len() == candidates.len();
            candidates = next;
            if stalled {
                break;
            }
        }

        let refinement = self.refine(grid, &candidates, query)?;
        fallback_used |= refinement.fallback;
        trace.push(StageTrace {
            kind: StageKind::Fine,
            input_frames: candidates.len(),
            clips: candidates.len().div_ceil(long),
            retrieved: Vec::new(),
            raw_text: refinement.raw_text,
            fallback: refinement.fallback,
        });
        Ok(GroundingResult {
            moments: refinement.moments,
            stage_trace: trace,
            fallback_used,
        })
    }

    /// Segment retrieval over one clip, keeping every segment when the
    /// answer cannot be parsed.
    fn retrieve_or_keep_all(
        &self,
        grid: &FrameGrid,
        frames: &[usize],
        query: &Query,
    ) -> Result<(Retrieval, bool)> {
        match self.retrieve_segments(grid, frames, query) {
            Ok(r) => Ok((r, false)),
            Err(RetrievalError::Parse { catalog, raw_text }) => {
                tracing::warn!(query = %query.text, "unparsable coarse answer, keeping all segments");
                Ok((
                    Retrieval {
                        segments: (0..catalog.len()).collect(),
                        catalog,
                        raw_text,
                    },
                    true,
                ))
            }
            Err(RetrievalError::Other(e)) => Err(e),
        }
    }

    /// One coarse call over `frames`; at most `max_kept_segments` segments are
    /// kept, in the order the model named them.
    pub fn retrieve_segments(
        &self,
        grid: &FrameGrid,
        frames: &[usize],
        query: &Query,
    ) -> Result<Retrieval, RetrievalError> {
        let tokens = self.tokens_for(frames.len())?;
        let (seq, catalog) =
            self.prompts
                .coarse(grid, frames, self.config.segment_length, &query.text, tokens)?;
        let request = self.request(Prompt::Grounding(seq), query);
        let result = self.backend.complete(&request).map_err(Error::from)?;
        match parse_coarse_answer_ordered(&result.text, &catalog) {
            Ok(mut segments) => {
                segments.truncate(self.config.max_kept_segments);
                segments.sort_unstable();
                Ok(Retrieval {
                    segments,
                    catalog,
                    raw_text: result.text,
                })
            }
            Err(_) => Err(RetrievalError::Parse {
                catalog,
                raw_text: result.text,
            }),
        }
    }

    /// Fine grounding over `candidates`, which may be non-contiguous; the
    /// prompt carries the true timestamps so gaps stay visible to the model.
    /// More than `long_threshold` candidates are refined clip by clip.
    pub fn refine(&self, grid: &FrameGrid, candidates: &[usize], query: &Query) -> Result<Refinement> {
        if candidates.is_empty() {
            return Err(Error::invalid("no candidate frames to refine"));
        }
        let long = self.config.scaling.long_threshold;
        let mut out = Refinement {
            moments: Vec::new(),
            raw_text: Vec::new(),
            fallback: false,
        };
        for chunk in candidates.chunks(long) {
            let tokens = self.tokens_for(chunk.len())?;
            let seq = self.prompts.fine(grid, chunk, &query.text, tokens)?;
            let request = self.request(Prompt::Grounding(seq), query);
            let result = self.backend.complete(&request)?;
            let stamps: Vec<f64> = chunk.iter().map(|&f| grid.timestamp(f)).collect();
            match parse_fine_answer_on(&result.text, &stamps) {
                Ok(moments) => {
                    for m in moments {
                        for piece in clip_to_runs(&m, grid, chunk) {
                            if !out.moments.contains(&piece) {
                                out.moments.push(piece);
                            }
                        }
                    }
                }
                Err(_) => {
                    tracing::warn!(query = %query.text, "unparsable fine answer, returning candidate span");
                    out.fallback = true;
                    let span = Moment::new(stamps[0], *stamps.last().unwrap())?;
                    out.moments.push(span);
                }
            }
            out.raw_text.push(result.text);
        }
        Ok(out)
    }

    /// Fine pass restricted to the segments overlapping `truth`.
    pub fn refine_within_truth(&self, grid: &FrameGrid, truth: &Moment, query: &Query) -> Result<Refinement> {
        let frames = truth_segment_frames(grid, truth, self.config.segment_length);
        self.refine(grid, &frames, query)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RetrievalError {
    #[error("unparsable segment answer: {raw_text:?}")]
    Parse { catalog: SegmentCatalog, raw_text: String },
    #[error(transparent)]
    Other(#[from] Error),
}

impl From<RetrievalError> for Error {
    fn from(e: RetrievalError) -> Self {
        match e {
            RetrievalError::Parse { raw_text, .. } => {
                Error::Parse(crate::error::ParseFailure::new("no segment timestamps", &raw_text))
            }
            RetrievalError::Other(e) => e,
        }
    }
}

/// Splits `m` at gaps in the candidate frames, keeping only the parts that
/// lie over contiguous candidate runs.
fn clip_to_runs(m: &Moment, grid: &FrameGrid, candidates: &[usize]) -> Vec<Moment> {
    let mut runs: Vec<Moment> = Vec::new();
    let mut start = 0;
    for i in 1..=candidates.len() {
        if i == candidates.len() || candidates[i] != candidates[i - 1] + 1 {
            let span = Moment::new(
                grid.timestamp(candidates[start]),
                grid.timestamp(candidates[i - 1]),
            )
            .expect("grid is increasing");
            runs.push(span);
            start = i;
        }
    }
    if runs.len() == 1 {
        return vec![*m];
    }
    let pieces: Vec<Moment> = runs.iter().filter_map(|r| m.clip(r)).collect();
    let long: Vec<Moment> = pieces.iter().copied().filter(|p| p.len() > 0.0).collect();
    if !long.is_empty() {
        long
    } else {
        pieces.into_iter().take(1).collect()
    }
}

/// Indices of the `segment_length` segments of the whole grid that contain a
/// frame inside `truth` (or, failing that, the frame nearest its centre).
pub fn truth_segments(grid: &FrameGrid, truth: &Moment, segment_length: usize) -> Vec<usize> {
    let inside: Vec<usize> = (0..grid.len())
        .filter(|&f| truth.contains(grid.timestamp(f)))
        .collect();
    let frames = if inside.is_empty() {
        vec![grid.nearest_frame(truth.center())]
    } else {
        inside
    };
    let mut segs: Vec<usize> = frames.iter().map(|f| f / segment_length.max(1)).collect();
    segs.dedup();
    segs
}

pub fn truth_segment_frames(grid: &FrameGrid, truth: &Moment, segment_length: usize) -> Vec<usize> {
    let ls = segment_length.max(1);
    truth_segments(grid, truth, ls)
        .into_iter()
        .flat_map(|s| (s * ls)..((s + 1) * ls).min(grid.len()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{BackendError, FixtureBackend, FixtureEntry, GenerationResult, OracleBackend};
    use crate::frames::NoFrames;
    use crate::timeline::make_grid;

    fn m(s: f64, e: f64) -> Moment {
        Moment::new(s, e).unwrap()
    }

    fn oracle(truth: Moment) -> OracleBackend {
        let mut o = OracleBackend::new();
        o.insert_query("q", truth);
        o
    }

    fn ground(dur: f64, truth: Moment) -> GroundingResult {
        let backend = oracle(truth);
        let g = Grounder::new(&backend, &NoFrames, GroundingConfig::default()).unwrap();
        g.ground(&make_grid(dur, 2.0).unwrap(), &Query::new("q")).unwrap()
    }

    #[test]
    fn short_video_single_fine_stage() {
        let r = ground(30.0, m(5.0, 9.5));
        assert_eq!(r.moments, vec![m(5.0, 9.5)]);
        assert_eq!(r.stage_trace.len(), 1);
        assert_eq!(r.stage_trace[0].kind, StageKind::Fine);
        assert!(!r.fallback_used);
    }

    #[test]
    fn mid_length_video_two_stages() {
        let r = ground(500.0, m(320.0, 330.0));
        assert_eq!(r.stage_trace.len(), 2);
        let coarse = &r.stage_trace[0];
        assert_eq!(coarse.kind, StageKind::Coarse);
        assert_eq!(coarse.input_frames, 1001);
        assert_eq!(coarse.retrieved.len(), 1);
        assert_eq!(coarse.retrieved[0].index, 20);
        assert_eq!(coarse.retrieved[0].start, 320.0);
        assert_eq!(r.moments, vec![m(320.0, 330.0)]);
    }

    #[test]
    fn long_video_partitions_into_clips() {
        let g = make_grid(1023.5, 2.0).unwrap();
        assert_eq!(g.len(), 2048);
        let r = ground(1023.5, m(700.0, 710.0));
        let first = &r.stage_trace[0];
        assert_eq!((first.kind, first.clips), (StageKind::Coarse, 2));
        assert_eq!(r.stage_trace.len(), 2, "{:?}", r.stage_trace);
        assert!(r.stage_trace[1].input_frames <= 128);
        let got = r.moments[0];
        assert!((got.start() - 700.0).abs() <= 0.5 && (got.end() - 710.0).abs() <= 0.5);
    }

    #[test]
    fn retrieval_caps_segments() {
        let g = make_grid(500.0, 2.0).unwrap();
        let frames: Vec<usize> = (0..g.len()).collect();
        let cases = [
            (m(50.0, 60.0), vec![3]),
            (m(50.0, 90.0), vec![3, 4, 5]),
            (m(0.0, 110.0), vec![0, 1, 2, 3]),
        ];
        for (truth, want) in cases {
            let backend = oracle(truth);
            let gr = Grounder::new(&backend, &NoFrames, GroundingConfig::default()).unwrap();
            let r = gr.retrieve_segments(&g, &frames, &Query::new("q")).unwrap();
            assert_eq!(r.segments, want);
        }
    }

    #[test]
    fn refine_over_non_contiguous_candidates() {
        let g = make_grid(200.0, 2.0).unwrap();
        let mut cand: Vec<usize> = (64..96).collect();
        cand.extend(224..256);
        let backend = oracle(m(115.0, 120.0));
        let gr = Grounder::new(&backend, &NoFrames, GroundingConfig::default()).unwrap();
        let r = gr.refine(&g, &cand, &Query::new("q")).unwrap();
        assert_eq!(r.moments, vec![m(115.0, 120.0)]);

        let seq = PromptBuilder::default().fine(&g, &cand, "q", 1).unwrap();
        let ts: Vec<f64> = seq.timestamps().collect();
        let jump = ts.iter().position(|&t| t == 112.0).unwrap();
        assert_eq!(ts[jump - 1], 47.5);
    }

    #[test]
    fn refine_falls_back_to_candidate_span() {
        let g = make_grid(40.0, 2.0).unwrap();
        let fx = FixtureBackend::new([FixtureEntry::pattern("I am not sure.").for_kind("fine")]);
        let gr = Grounder::new(&fx, &NoFrames, GroundingConfig::default()).unwrap();
        let r = gr.ground(&g, &Query::new("q")).unwrap();
        assert!(r.fallback_used);
        assert_eq!(r.moments, vec![m(0.0, 40.0)]);
    }

    #[test]
    fn coarse_parse_failure_keeps_all_segments() {
        let g = make_grid(200.0, 2.0).unwrap();
        let fx = FixtureBackend::new([
            FixtureEntry::pattern("nothing here").for_kind("coarse"),
            FixtureEntry::pattern("From 10 seconds to 20 seconds").for_kind("fine"),
        ]);
        let gr = Grounder::new(&fx, &NoFrames, GroundingConfig::default()).unwrap();
        let r = gr.ground(&g, &Query::new("q")).unwrap();
        assert!(r.fallback_used);
        assert!(r.stage_trace[0].fallback);
        assert_eq!(r.stage_trace[0].retrieved.len(), 13);
        assert_eq!(r.stage_trace.len(), 2);
        assert_eq!(r.moments, vec![m(10.0, 20.0)]);
    }

    struct Failing;
    impl Backend for Failing {
        fn name(&self) -> &str {
            "failing"
        }
        fn complete(&self, _: &GenerationRequest) -> std::result::Result<GenerationResult, BackendError> {
            Err(BackendError::Transport("connection refused".into()))
        }
    }

    #[test]
    fn backend_failure_is_an_error() {
        let gr = Grounder::new(&Failing, &NoFrames, GroundingConfig::default()).unwrap();
        let err = gr.ground(&make_grid(10.0, 2.0).unwrap(), &Query::new("q")).unwrap_err();
        assert!(matches!(err, Error::Backend(BackendError::Transport(_))));
    }

    #[test]
    fn gap_spanning_moments_are_split() {
        let g = make_grid(100.0, 2.0).unwrap();
        let cand: Vec<usize> = (0..10).chain(100..110).collect();
        let pieces = clip_to_runs(&m(2.0, 52.0), &g, &cand);
        assert_eq!(pieces, vec![m(2.0, 4.5), m(50.0, 52.0)]);
    }

    #[test]
    fn truth_segments_on_grid() {
        let g = make_grid(100.0, 2.0).unwrap();
        assert_eq!(truth_segments(&g, &m(20.0, 40.0), 32), vec![1, 2]);
        assert_eq!(truth_segment_frames(&g, &m(1.0, 2.0), 32), (0..32).collect::<Vec<_>>());
    }

    #[test]
    fn exact_oracle_is_recovered_across_lengths() {
        for dur in [10.0, 100.0, 500.0, 2000.0] {
            let truth = m(dur * 0.4, dur * 0.4 + 5.0);
            let r = ground(dur, truth);
            assert_eq!(r.moments, vec![truth], "duration {dur}");
            assert!(r.stage_trace.len() <= 4);
            for st in &r.stage_trace {
                if st.kind == StageKind::Coarse {
                    assert!(st.input_frames.div_ceil(1024) == st.clips);
                }
            }
        }
    }

    #[test]
    fn offset_oracle_adds_no_distortion() {
        for dur in [30.0, 300.0, 1800.0] {
            let truth = m(dur / 3.0, dur / 3.0 + 10.0);
            let mut o = OracleBackend::new().with_noise(crate::backend::OracleNoise { offset: 1.0 });
            o.insert_query("q", truth);
            let gr = Grounder::new(&o, &NoFrames, GroundingConfig::default()).unwrap();
            let r = gr.ground(&make_grid(dur, 2.0).unwrap(), &Query::new("q")).unwrap();
            assert_eq!(r.moments, vec![truth.shifted(1.0)], "duration {dur}");
        }
    }
}
