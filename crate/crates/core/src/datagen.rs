//! Training samples and video-centric sequence packing.
//!
//! Long videos yield coarse samples (answer: start timestamps of the segments
//! covering the moment) over each `long_threshold`-frame clip that holds the
//! moment, plus one fine sample over a random short crop containing it.
//! Packing lays one video's tokens out once and appends every query-answer
//! pair after it; pairs cannot see each other and all restart their position
//! indices right after the video.

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::promptseq::{render_answer_with, render_segment_answer, timestamp_decimals, Granularity};
use crate::scaling::ScalingConfig;
use crate::timeline::{nearest_index, FrameGrid, Moment};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataGenConfig {
    pub scaling: ScalingConfig,
    pub segment_length: usize,
    pub seed: u64,
}

impl Default for DataGenConfig {
    fn default() -> Self {
        Self {
            scaling: ScalingConfig::default(),
            segment_length: 32,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSample {
    pub video_id: String,
    pub frame_range: Range<usize>,
    pub granularity: Granularity,
    pub query: String,
    pub answer: String,
    pub ground_truth: Moment,
    pub is_long: bool,
}

impl TrainingSample {
    pub fn frames(&self) -> Vec<usize> {
        self.frame_range.clone().collect()
    }
}

/// Stable 64-bit FNV-1a, used to give every video its own RNG stream.
fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf29ce484222325, |h, b| (h ^ b as u64).wrapping_mul(0x100000001b3))
}

pub fn sample_rng(seed: u64, video_id: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ fnv1a(video_id))
}

pub fn build_training_samples(
    video_id: &str,
    grid: &FrameGrid,
    annotations: &[(String, Moment)],
    config: &DataGenConfig,
) -> Result<Vec<TrainingSample>> {
    config.scaling.validate()?;
    if annotations.is_empty() {
        return Err(Error::invalid(format!("video {video_id} has no annotations")));
    }
    if grid.is_empty() {
        return Err(Error::invalid(format!("video {video_id} has no frames")));
    }
    let short = config.scaling.short_threshold;
    let long = config.scaling.long_threshold;
    let is_long = grid.len() > short;
    let mut rng = sample_rng(config.seed, video_id);
    let mut out = Vec::new();
    for (query, gt) in annotations {
        if gt.end() > grid.duration() + 1e-9 {
            return Err(Error::invalid(format!(
                "moment ({}, {}) of {video_id:?} exceeds the {} s video",
                gt.start(),
                gt.end(),
                grid.duration()
            )));
        }
        if is_long {
            for clip_start in (0..grid.len()).step_by(long) {
                let clip = clip_start..(clip_start + long).min(grid.len());
                if let Some(answer) = coarse_answer(grid, clip.clone(), gt, config.segment_length) {
                    out.push(TrainingSample {
                        video_id: video_id.to_string(),
                        frame_range: clip,
                        granularity: Granularity::Coarse {
                            segment_length: config.segment_length,
                        },
                        query: query.clone(),
                        answer,
                        ground_truth: *gt,
                        is_long,
                    });
                }
            }
        }
        let (frame_range, answer) = fine_crop(grid, gt, config.scaling.short_seconds(), &mut rng);
        out.push(TrainingSample {
            video_id: video_id.to_string(),
            frame_range,
            granularity: Granularity::Fine,
            query: query.clone(),
            answer,
            ground_truth: *gt,
            is_long,
        });
    }
    Ok(out)
}

/// Segment-start answer for `clip`, or `None` when the moment misses it.
fn coarse_answer(grid: &FrameGrid, clip: Range<usize>, gt: &Moment, ls: usize) -> Option<String> {
    let first = grid.timestamp(clip.start);
    let last = grid.timestamp(clip.end - 1);
    let visible = gt.clip(&Moment::new(first, last).ok()?)?;
    let inside: Vec<usize> = clip.clone().filter(|&f| visible.contains(grid.timestamp(f))).collect();
    let frames = if inside.is_empty() {
        let stamps = &grid.timestamps()[clip.clone()];
        vec![clip.start + nearest_index(stamps, visible.center())]
    } else {
        inside
    };
    let mut starts: Vec<f64> = frames
        .iter()
        .map(|f| grid.timestamp(clip.start + (f - clip.start) / ls * ls))
        .collect();
    starts.dedup();
    Some(render_segment_answer(&starts, timestamp_decimals(grid.fps())))
}

/// A random crop of length uniform in `[|gt|, max_len]` seconds placed
/// uniformly among positions containing `gt`.
fn fine_crop(grid: &FrameGrid, gt: &Moment, max_len: f64, rng: &mut ChaCha8Rng) -> (Range<usize>, String) {
    let dur = grid.duration();
    let hi_len = max_len.min(dur);
    let lo_len = gt.len().min(hi_len);
    let len = if hi_len > lo_len { rng.gen_range(lo_len..=hi_len) } else { hi_len };
    let lo = (gt.end() - len).max(0.0);
    let hi = gt.start().min(dur - len).max(lo);
    let start = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
    let end = start + len;

    let stamps = grid.timestamps();
    // widen to grid frames enclosing [start, end] and the moment itself
    let first = stamps.partition_point(|&t| t <= start.min(gt.start()) + 1e-9).saturating_sub(1);
    let last = stamps
        .partition_point(|&t| t < end.max(gt.end()) - 1e-9)
        .min(stamps.len() - 1);
    let window = &stamps[first..=last];
    let s = window[nearest_index(window, gt.start())];
    let e = window[nearest_index(window, gt.end())];
    let snapped = Moment::ordered(s, e).expect("grid timestamps are valid");
    let answer = render_answer_with(&[snapped], timestamp_decimals(grid.fps())).expect("non-empty");
    (first..last + 1, answer)
}

/// Repeats long-video samples `n_rep` times. Samples are grouped by video in
/// order of first appearance; copies sit next to their original.
pub fn replicate_long(samples: &[TrainingSample], n_rep: usize) -> Result<Vec<TrainingSample>> {
    if n_rep == 0 {
        return Err(Error::invalid("replication factor must be at least 1"));
    }
    let mut order: Vec<&str> = Vec::new();
    for s in samples {
        if !order.contains(&s.video_id.as_str()) {
            order.push(&s.video_id);
        }
    }
    let mut out = Vec::with_capacity(samples.len());
    for vid in order {
        for s in samples.iter().filter(|s| s.video_id == vid) {
            let copies = if s.is_long { n_rep } else { 1 };
            out.extend(std::iter::repeat_n(s, copies).cloned());
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaSpan {
    pub query: Range<usize>,
    pub answer: Range<usize>,
}

impl QaSpan {
    pub fn span(&self) -> Range<usize> {
        self.query.start..self.answer.end
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackedBatch {
    pub video: Range<usize>,
    pub pairs: Vec<QaSpan>,
    pub position_index: Vec<usize>,
    pub target_mask: Vec<bool>,
}

/// Lays out `[video][Q1 A1][Q2 A2]...` for one video's query-answer pairs.
pub fn pack_video_centric(video_tokens: usize, pairs: &[(usize, usize)]) -> Result<PackedBatch> {
    if video_tokens == 0 {
        return Err(Error::invalid("video span must hold at least one token"));
    }
    if pairs.is_empty() {
        return Err(Error::invalid("at least one query-answer pair is required"));
    }
    let mut spans = Vec::with_capacity(pairs.len());
    let mut position_index: Vec<usize> = (0..video_tokens).collect();
    let mut target_mask = vec![false; video_tokens];
    let mut at = video_tokens;
    for (k, &(q, a)) in pairs.iter().enumerate() {
        if q == 0 || a == 0 {
            return Err(Error::invalid(format!("pair {k} has an empty query or answer")));
        }
        spans.push(QaSpan {
            query: at..at + q,
            answer: at + q..at + q + a,
        });
        position_index.extend(video_tokens..video_tokens + q + a);
        target_mask.extend(std::iter::repeat_n(false, q).chain(std::iter::repeat_n(true, a)));
        at += q + a;
    }
    Ok(PackedBatch {
        video: 0..video_tokens,
        pairs: spans,
        position_index,
        target_mask,
    })
}

impl PackedBatch {
    pub fn len(&self) -> usize {
        self.position_index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.position_index.is_empty()
    }

    /// Pair index of token `i`, `None` for video tokens.
    pub fn pair_of(&self, i: usize) -> Option<usize> {
        if i < self.video.end {
            return None;
        }
        let k = self.pairs.partition_point(|p| p.answer.end <= i);
        (k < self.pairs.len()).then_some(k)
    }

    /// Whether token `i` may attend to token `j`.
    pub fn attention_allowed(&self, i: usize, j: usize) -> bool {
        if j > i || i >= self.len() {
            return false;
        }
        j < self.video.end || self.pair_of(i) == self.pair_of(j)
    }

    pub fn dense_mask(&self) -> Vec<Vec<bool>> {
        let n = self.len();
        (0..n)
            .map(|i| (0..n).map(|j| self.attention_allowed(i, j)).collect())
            .collect()
    }

    /// Allowed key ranges per query token.
    #[allow(clippy::single_range_in_vec_init)]
    pub fn mask_intervals(&self) -> Vec<Vec<Range<usize>>> {
        (0..self.len())
            .map(|i| match self.pair_of(i) {
                None => vec![0..i + 1],
                Some(k) => vec![self.video.clone(), self.pairs[k].query.start..i + 1],
            })
            .collect()
    }

    /// Number of supervised tokens.
    pub fn target_count(&self) -> usize {
        self.target_mask.iter().filter(|&&t| t).count()
    }

    pub fn target_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.target_mask[i]).collect()
    }

    /// JSON form for external trainers: spans, mask intervals, positions and
    /// target indices.
    pub fn to_json(&self) -> serde_json::Value {
        let range = |r: &Range<usize>| serde_json::json!([r.start, r.end]);
        serde_json::json!({
            "tokens": self.len(),
            "video": range(&self.video),
            "pairs": self.pairs.iter().map(|p| serde_json::json!({
                "query": range(&p.query),
                "answer": range(&p.answer),
            })).collect::<Vec<_>>(),
            "mask_intervals": self.mask_intervals().iter()
                .map(|row| row.iter().map(range).collect::<Vec<_>>())
                .collect::<Vec<_>>(),
            "position_index": self.position_index,
            "target_indices": self.target_indices(),
        })
    }
}

/// Negative log-likelihood summed over target positions.
pub fn nll_loss(logprobs: &[f64], target_mask: &[bool]) -> Result<f64> {
    if logprobs.len() != target_mask.len() {
        return Err(Error::invalid(format!(
            "{} logprobs for {} mask entries",
            logprobs.len(),
            target_mask.len()
        )));
    }
    Ok(-logprobs
        .iter()
        .zip(target_mask)
        .filter(|(_, &t)| t)
        .map(|(lp, _)| lp)
        .sum::<f64>())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::promptseq::{parse_coarse_answer, parse_fine_answer_on, PromptBuilder};
    use crate::timeline::make_grid;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn m(s: f64, e: f64) -> Moment {
        Moment::new(s, e).unwrap()
    }

    fn ann(s: f64, e: f64) -> Vec<(String, Moment)> {
        vec![("q".to_string(), m(s, e))]
    }

    fn crop_times(grid: &FrameGrid, s: &TrainingSample) -> Vec<f64> {
        s.frame_range.clone().map(|f| grid.timestamp(f)).collect()
    }

    #[test]
    fn short_video_gets_fine_sample_only() {
        let g = make_grid(30.0, 2.0).unwrap();
        let s = build_training_samples("v", &g, &ann(3.0, 7.0), &DataGenConfig::default()).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].granularity, Granularity::Fine);
        assert!(!s[0].is_long);
        assert_eq!(s[0].answer, "From 3.0 seconds to 7.0 seconds");
    }

    #[test]
    fn mid_length_video_coarse_and_fine() {
        let g = make_grid(500.0, 2.0).unwrap();
        let s = build_training_samples("v", &g, &ann(320.0, 330.0), &DataGenConfig::default()).unwrap();
        assert_eq!(s.len(), 2);
        let coarse = &s[0];
        assert_eq!(coarse.frame_range, 0..1001);
        assert_eq!(coarse.answer, "320.0 seconds");
        let (_, catalog) = PromptBuilder::default()
            .coarse(&g, &coarse.frames(), 32, "q", 16)
            .unwrap();
        assert_eq!(parse_coarse_answer(&coarse.answer, &catalog).unwrap(), vec![20]);

        let fine = &s[1];
        let ts = crop_times(&g, fine);
        let span = ts.last().unwrap() - ts[0];
        assert!((10.0..=64.5).contains(&span), "{span}");
        assert!(ts[0] <= 320.0 && *ts.last().unwrap() >= 330.0);
        assert_eq!(fine.answer, "From 320.0 seconds to 330.0 seconds");
        assert!(fine.is_long && coarse.is_long);
    }

    #[test]
    fn long_video_coarse_samples_per_clip() {
        let g = make_grid(1023.5, 2.0).unwrap();
        let s = build_training_samples("v", &g, &ann(500.0, 530.0), &DataGenConfig::default()).unwrap();
        let coarse: Vec<_> = s.iter().filter(|x| x.granularity != Granularity::Fine).collect();
        assert_eq!(coarse.len(), 2);
        assert_eq!(coarse[0].frame_range, 0..1024);
        assert_eq!(coarse[0].answer, "496.0 seconds");
        assert_eq!(coarse[1].frame_range, 1024..2048);
        assert_eq!(coarse[1].answer, "512.0 seconds, 528.0 seconds");
    }

    #[test]
    fn crop_length_forced_when_truth_fills_budget() {
        let g = make_grid(300.0, 2.0).unwrap();
        let s = build_training_samples("v", &g, &ann(100.0, 164.0), &DataGenConfig::default()).unwrap();
        let fine = s.last().unwrap();
        assert_eq!(fine.frame_range, 200..329);
        assert_eq!(fine.answer, "From 100.0 seconds to 164.0 seconds");
    }

    #[test]
    fn truth_outside_video_rejected() {
        let g = make_grid(30.0, 2.0).unwrap();
        assert!(build_training_samples("v", &g, &ann(20.0, 40.0), &DataGenConfig::default()).is_err());
        assert!(build_training_samples("v", &g, &[], &DataGenConfig::default()).is_err());
    }

    #[test]
    fn crops_contain_truth_and_reproduce() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for i in 0..1000 {
            let dur = rng.gen_range(20..=2400) as f64 / 2.0;
            let g = make_grid(dur, 2.0).unwrap();
            let s = rng.gen_range(0..(dur * 2.0) as usize) as f64 / 2.0;
            let len = rng.gen_range(1..=((dur - s) * 2.0).min(120.0) as usize) as f64 / 2.0;
            let gt = m(s, s + len);
            let cfg = DataGenConfig {
                seed: i,
                ..Default::default()
            };
            let a = build_training_samples("vid", &g, &[("q".into(), gt)], &cfg).unwrap();
            let b = build_training_samples("vid", &g, &[("q".into(), gt)], &cfg).unwrap();
            assert_eq!(a, b);
            let fine = a.last().unwrap();
            let ts = crop_times(&g, fine);
            assert!(ts[0] <= gt.start() && *ts.last().unwrap() >= gt.end(), "{gt:?} {:?}", fine.frame_range);
            assert_eq!(parse_fine_answer_on(&fine.answer, &ts).unwrap(), vec![gt]);
            assert!(fine.frame_range.len() <= 130);
        }
    }

    fn sample(video: &str, is_long: bool) -> TrainingSample {
        TrainingSample {
            video_id: video.into(),
            frame_range: 0..1,
            granularity: Granularity::Fine,
            query: "q".into(),
            answer: String::new(),
            ground_truth: m(0.0, 0.5),
            is_long,
        }
    }

    #[test]
    fn replication_examples() {
        let mut set: Vec<_> = (0..3).map(|i| sample(&format!("l{i}"), true)).collect();
        set.extend((0..10).map(|i| sample(&format!("s{i}"), false)));
        assert_eq!(replicate_long(&set, 4).unwrap().len(), 22);
        let short: Vec<_> = set.iter().filter(|s| !s.is_long).cloned().collect();
        assert_eq!(replicate_long(&short, 4).unwrap(), short);
        let grouped = replicate_long(&set, 1).unwrap();
        assert_eq!(grouped.len(), set.len());
        assert!(replicate_long(&set, 0).is_err());

        let mixed = vec![sample("a", true), sample("b", false), sample("a", true)];
        let ids: Vec<_> = replicate_long(&mixed, 2).unwrap().into_iter().map(|s| s.video_id).collect();
        assert_eq!(ids, ["a", "a", "a", "a", "b"]);
    }

    #[test]
    fn single_pair_is_plain_causal() {
        let b = pack_video_centric(4, &[(2, 3)]).unwrap();
        assert_eq!(b.len(), 9);
        for i in 0..9 {
            for j in 0..9 {
                assert_eq!(b.attention_allowed(i, j), j <= i);
            }
        }
        assert_eq!(b.position_index, (0..9).collect::<Vec<_>>());
        assert_eq!(b.target_indices(), vec![6, 7, 8]);
    }

    #[test]
    fn two_pairs_are_isolated() {
        let b = pack_video_centric(4, &[(2, 2), (1, 1)]).unwrap();
        assert_eq!(b.position_index, vec![0, 1, 2, 3, 4, 5, 6, 7, 4, 5]);
        for i in 8..10 {
            for j in 4..8 {
                assert!(!b.attention_allowed(i, j));
            }
        }
        assert_eq!(b.target_count(), 3);
        let j = b.to_json();
        assert_eq!(j["pairs"][1]["query"], serde_json::json!([8, 9]));
        assert_eq!(j["mask_intervals"][9], serde_json::json!([[0, 4], [8, 10]]));
        assert!(pack_video_centric(4, &[(0, 1)]).is_err());
        assert!(pack_video_centric(0, &[(1, 1)]).is_err());
    }

    #[test]
    fn nll_examples() {
        assert_relative_eq!(nll_loss(&[-0.1, -0.2, -0.3], &[false, true, true]).unwrap(), 0.5);
        assert_eq!(nll_loss(&[-0.1, -0.2], &[false, false]).unwrap(), 0.0);
        assert_eq!(nll_loss(&[0.0, 0.0], &[true, true]).unwrap(), 0.0);
        assert!(nll_loss(&[0.0], &[true, false]).is_err());
    }

    /// Checks the four mask laws and position rules by enumeration.
    #[allow(clippy::needless_range_loop)]
    pub(crate) fn check_pack_laws(b: &PackedBatch) -> std::result::Result<(), String> {
        let n = b.len();
        let nv = b.video.end;
        let in_pair = |i: usize| b.pairs.iter().position(|p| p.span().contains(&i));
        let dense = b.dense_mask();
        let intervals = b.mask_intervals();
        for i in 0..n {
            for j in 0..n {
                let allowed = b.attention_allowed(i, j);
                if allowed != dense[i][j] || allowed != intervals[i].iter().any(|r| r.contains(&j)) {
                    return Err(format!("mask forms disagree at ({i},{j})"));
                }
                if j > i && allowed {
                    return Err(format!("({i},{j}) attends forward"));
                }
                match (in_pair(i), in_pair(j)) {
                    (Some(p), Some(q)) if p != q && allowed => return Err(format!("pair {p} sees pair {q}")),
                    (Some(_), None) if !allowed => return Err(format!("{i} cannot see video token {j}")),
                    (None, None) if allowed != (j <= i) => return Err(format!("video ({i},{j}) not causal")),
                    (None, Some(_)) if allowed => return Err(format!("video token {i} sees {j}")),
                    _ => {}
                }
            }
        }
        for p in &b.pairs {
            let pos: Vec<usize> = p.span().map(|i| b.position_index[i]).collect();
            let want: Vec<usize> = (nv..nv + pos.len()).collect();
            if pos != want {
                return Err(format!("pair positions {pos:?}"));
            }
            if p.answer.clone().any(|i| !b.target_mask[i]) || p.query.clone().any(|i| b.target_mask[i]) {
                return Err("target mask off the answer spans".into());
            }
        }
        Ok(())
    }

    proptest! {
        #[test]
        fn pack_laws(nv in 1usize..16, pairs in prop::collection::vec((1usize..8, 1usize..8), 1..6)) {
            let b = pack_video_centric(nv, &pairs).unwrap();
            prop_assert_eq!(b.len(), nv + pairs.iter().map(|(q, a)| q + a).sum::<usize>());
            prop_assert_eq!(check_pack_laws(&b), Ok(()));
        }

        #[test]
        fn replication_count(flags in prop::collection::vec((0u8..5, any::<bool>()), 0..40), n in 1usize..6) {
            let set: Vec<_> = flags.iter().map(|&(v, l)| sample(&v.to_string(), l)).collect();
            let long = set.iter().filter(|s| s.is_long).count();
            prop_assert_eq!(replicate_long(&set, n).unwrap().len(), long * n + set.len() - long);
        }
    }
}
