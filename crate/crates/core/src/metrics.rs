//! Overlap scores and benchmark metrics.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::timeline::{intersect_len, union_len, Moment};

/// Thresholds swept by [`r_at_iou`].
pub const SWEEP_THRESHOLDS: [f64; 5] = [0.1, 0.2, 0.3, 0.4, 0.5];
pub const LONG_VIDEO_THRESHOLDS: [f64; 2] = [0.3, 0.5];
pub const SHORT_VIDEO_THRESHOLDS: [f64; 2] = [0.5, 0.7];

fn check_truth(gt: &Moment) -> Result<()> {
    if gt.len() <= 0.0 {
        return Err(Error::invalid(format!(
            "ground truth ({}, {}) has zero length",
            gt.start(),
            gt.end()
        )));
    }
    Ok(())
}

pub fn iou(pred: &Moment, gt: &Moment) -> Result<f64> {
    check_truth(gt)?;
    Ok(intersect_len(pred, gt) / union_len(pred, gt))
}

/// Intersection over the prediction. A point prediction scores 1 inside the
/// truth and 0 outside.
pub fn iop(pred: &Moment, gt: &Moment) -> Result<f64> {
    check_truth(gt)?;
    if pred.is_point() {
        return Ok(if gt.contains(pred.start()) { 1.0 } else { 0.0 });
    }
    Ok(intersect_len(pred, gt) / pred.len())
}

pub fn iog(pred: &Moment, gt: &Moment) -> Result<f64> {
    check_truth(gt)?;
    Ok(intersect_len(pred, gt) / gt.len())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub query_id: String,
    pub predicted: Vec<Moment>,
    pub ground_truth: Vec<Moment>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retrieved_segments: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_segments: Option<Vec<usize>>,
}

impl EvalRecord {
    pub fn new(query_id: impl Into<String>, predicted: Vec<Moment>, ground_truth: Vec<Moment>) -> Self {
        Self {
            query_id: query_id.into(),
            predicted,
            ground_truth,
            retrieved_segments: None,
            gt_segments: None,
        }
    }

    pub fn with_segments(mut self, retrieved: Vec<usize>, gt: Vec<usize>) -> Self {
        self.retrieved_segments = Some(retrieved);
        self.gt_segments = Some(gt);
        self
    }

    /// Scores of the top-1 prediction against the best-matching truth.
    pub fn score(&self) -> Result<RecordScore> {
        if self.ground_truth.is_empty() {
            return Err(Error::invalid(format!("record {} has no ground truth", self.query_id)));
        }
        for gt in &self.ground_truth {
            check_truth(gt)?;
        }
        let Some(top) = self.predicted.first() else {
            return Ok(RecordScore::default());
        };
        let mut best = RecordScore::default();
        let mut best_iou = -1.0;
        for gt in &self.ground_truth {
            let v = iou(top, gt)?;
            if v > best_iou {
                best_iou = v;
                best = RecordScore {
                    iou: v,
                    iop: iop(top, gt)?,
                    iog: iog(top, gt)?,
                };
            }
        }
        Ok(best)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RecordScore {
    pub iou: f64,
    pub iop: f64,
    pub iog: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// `(threshold, R1)` pairs in the order requested.
    pub r1_at: Vec<(f64, f64)>,
    pub miou: f64,
    pub iop_mean: f64,
    pub iog_mean: f64,
    pub r_at_iou: f64,
    pub seg_retrieval_r1: Option<f64>,
    pub n: usize,
}

impl MetricReport {
    pub fn r1(&self, threshold: f64) -> Option<f64> {
        self.r1_at
            .iter()
            .find(|(t, _)| (t - threshold).abs() < 1e-9)
            .map(|&(_, v)| v)
    }

    /// Flat map of metric name to value, e.g. `r1@0.30`.
    pub fn to_flat(&self) -> BTreeMap<String, f64> {
        let mut out = BTreeMap::new();
        for &(t, v) in &self.r1_at {
            out.insert(format!("r1@{t:.2}"), v);
        }
        out.insert("miou".into(), self.miou);
        out.insert("iop".into(), self.iop_mean);
        out.insert("iog".into(), self.iog_mean);
        out.insert("r@iou".into(), self.r_at_iou);
        if let Some(s) = self.seg_retrieval_r1 {
            out.insert("seg_r1".into(), s);
        }
        out.insert("n".into(), self.n as f64);
        out
    }

    pub fn to_json(&self) -> serde_json::Value {
        let mut map = serde_json::Map::new();
        for (k, v) in self.to_flat() {
            let value = if k == "n" {
                serde_json::Value::from(self.n)
            } else {
                serde_json::Value::from(v)
            };
            map.insert(k, value);
        }
        serde_json::Value::Object(map)
    }
}

fn score_all(records: &[EvalRecord]) -> Result<Vec<RecordScore>> {
    if records.is_empty() {
        return Err(Error::invalid("no records to evaluate"));
    }
    records.iter().map(EvalRecord::score).collect()
}

fn recall(scores: &[RecordScore], threshold: f64) -> f64 {
    scores.iter().filter(|s| s.iou >= threshold).count() as f64 / scores.len() as f64
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

pub fn evaluate(records: &[EvalRecord], thresholds: &[f64]) -> Result<MetricReport> {
    let scores = score_all(records)?;
    // only records that went through segment retrieval
    let with_segs: Vec<EvalRecord> = records
        .iter()
        .filter(|r| r.retrieved_segments.is_some() && r.gt_segments.is_some())
        .cloned()
        .collect();
    let seg = if with_segs.is_empty() {
        None
    } else {
        Some(segment_retrieval_r1(&with_segs)?)
    };
    Ok(MetricReport {
        r1_at: thresholds.iter().map(|&t| (t, recall(&scores, t))).collect(),
        miou: mean(scores.iter().map(|s| s.iou)),
        iop_mean: mean(scores.iter().map(|s| s.iop)),
        iog_mean: mean(scores.iter().map(|s| s.iog)),
        r_at_iou: mean(SWEEP_THRESHOLDS.iter().map(|&t| recall(&scores, t))),
        seg_retrieval_r1: seg,
        n: records.len(),
    })
}

/// Mean R1 over IoU thresholds 0.1 to 0.5.
pub fn r_at_iou(records: &[EvalRecord]) -> Result<f64> {
    let scores = score_all(records)?;
    Ok(mean(SWEEP_THRESHOLDS.iter().map(|&t| recall(&scores, t))))
}

/// Fraction of records where some retrieved segment is a truth segment.
pub fn segment_retrieval_r1(records: &[EvalRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::invalid("no records to evaluate"));
    }
    let mut hits = 0;
    for r in records {
        let (Some(got), Some(want)) = (&r.retrieved_segments, &r.gt_segments) else {
            return Err(Error::invalid(format!(
                "record {} lacks segment annotations",
                r.query_id
            )));
        };
        if got.iter().any(|s| want.contains(s)) {
            hits += 1;
        }
    }
    Ok(hits as f64 / records.len() as f64)
}

/// Per-record CSV: id, top-1 prediction, best truth, iou/iop/iog.
pub fn write_records_csv<W: Write>(records: &[EvalRecord], mut out: W) -> Result<()> {
    writeln!(out, "query_id,pred_start,pred_end,gt_start,gt_end,iou,iop,iog")?;
    for r in records {
        let s = r.score()?;
        let (ps, pe) = r
            .predicted
            .first()
            .map(|m| (m.start().to_string(), m.end().to_string()))
            .unwrap_or_default();
        let gt = r.ground_truth[0];
        let id = if r.query_id.contains([',', '"', '\n']) {
            format!("\"{}\"", r.query_id.replace('"', "\"\""))
        } else {
            r.query_id.clone()
        };
        writeln!(
            out,
            "{id},{ps},{pe},{},{},{:.6},{:.6},{:.6}",
            gt.start(),
            gt.end(),
            s.iou,
            s.iop,
            s.iog
        )?;
    }
    Ok(())
}

/// A consistency score with its value relative to plain grounding.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Relative {
    pub score: f64,
    /// `score / ground * 100`; absent when `ground` is zero.
    pub relative: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub threshold: f64,
    pub ground: f64,
    pub r_ground: Option<Relative>,
    /// Mean IoU between original and rephrased predictions.
    pub rephrase_iou: Option<f64>,
    pub s_ground: Option<Relative>,
}

fn relative(score: f64, ground: f64) -> Relative {
    Relative {
        score,
        relative: (ground > 0.0).then(|| score / ground * 100.0),
    }
}

/// Grounding consistency under rephrasing and temporal shifting.
///
/// `ground` is R1 at `threshold` of the original records. A rephrased
/// variant counts as consistent when the original prediction is correct and
/// the variant's prediction overlaps it with IoU at least `threshold`;
/// R-Ground averages that over variants, then over queries. S-Ground is R1
/// of `shifted`, whose ground truth is the shifted moment.
pub fn consistency_scores(
    original: &[EvalRecord],
    rephrased: &HashMap<String, Vec<Vec<Moment>>>,
    shifted: Option<&[EvalRecord]>,
    threshold: f64,
) -> Result<ConsistencyReport> {
    let scores = score_all(original)?;
    let ground = recall(&scores, threshold);
    let by_id: HashMap<&str, (&EvalRecord, &RecordScore)> = original
        .iter()
        .zip(&scores)
        .map(|(r, s)| (r.query_id.as_str(), (r, s)))
        .collect();
    if by_id.len() != original.len() {
        return Err(Error::invalid("duplicate query ids among original records"));
    }

    let (r_ground, rephrase_iou) = if rephrased.is_empty() {
        (None, None)
    } else {
        let mut consistent = Vec::with_capacity(rephrased.len());
        let mut overlaps = Vec::with_capacity(rephrased.len());
        // sorted for a deterministic summation order
        let ids: std::collections::BTreeSet<&String> = rephrased.keys().collect();
        for id in ids {
            let variants = &rephrased[id];
            let (rec, score) = by_id
                .get(id.as_str())
                .ok_or_else(|| Error::invalid(format!("rephrased id {id} has no original record")))?;
            if variants.is_empty() {
                return Err(Error::invalid(format!("rephrased id {id} has no variants")));
            }
            let mut ious = Vec::with_capacity(variants.len());
            for v in variants {
                let x = match (rec.predicted.first(), v.first()) {
                    (Some(m), Some(mh)) => pair_iou(m, mh),
                    _ => 0.0,
                };
                ious.push(x);
            }
            let correct = score.iou >= threshold;
            consistent.push(if correct {
                mean(ious.iter().map(|&x| if x >= threshold { 1.0 } else { 0.0 }))
            } else {
                0.0
            });
            overlaps.push(mean(ious.into_iter()));
        }
        (
            Some(relative(mean(consistent.into_iter()), ground)),
            Some(mean(overlaps.into_iter())),
        )
    };

    let s_ground = match shifted {
        None => None,
        Some(records) => {
            for r in records {
                if !by_id.contains_key(r.query_id.as_str()) {
                    return Err(Error::invalid(format!(
                        "shifted id {} has no original record",
                        r.query_id
                    )));
                }
            }
            let s = recall(&score_all(records)?, threshold);
            Some(relative(s, ground))
        }
    };

    Ok(ConsistencyReport {
        threshold,
        ground,
        r_ground,
        rephrase_iou,
        s_ground,
    })
}

/// IoU between two predictions; two identical points overlap fully.
fn pair_iou(a: &Moment, b: &Moment) -> f64 {
    let u = union_len(a, b);
    if u > 0.0 {
        intersect_len(a, b) / u
    } else if a == b {
        1.0
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn m(s: f64, e: f64) -> Moment {
        Moment::new(s, e).unwrap()
    }

    /// Overlap measured by counting 0.001 s cells, independent of the
    /// interval formulas.
    fn discrete(pred: &Moment, gt: &Moment) -> (f64, f64, f64) {
        let cells = |x: &Moment| ((x.start() * 1000.0).round() as i64, (x.end() * 1000.0).round() as i64);
        let (ps, pe) = cells(pred);
        let (gs, ge) = cells(gt);
        let (mut inter, mut uni) = (0i64, 0i64);
        for c in ps.min(gs)..pe.max(ge) {
            let a = c >= ps && c < pe;
            let b = c >= gs && c < ge;
            inter += (a && b) as i64;
            uni += (a || b) as i64;
        }
        (
            inter as f64 / uni as f64,
            inter as f64 / (pe - ps) as f64,
            inter as f64 / (ge - gs) as f64,
        )
    }

    #[test]
    fn overlap_examples() {
        let (p, g) = (m(4.0, 10.0), m(2.0, 8.0));
        let (di, dp, dg) = discrete(&p, &g);
        assert_relative_eq!(di, 0.5);
        assert_relative_eq!(dp, 2.0 / 3.0);
        assert_relative_eq!(dg, 2.0 / 3.0);
        assert_relative_eq!(iou(&p, &g).unwrap(), 0.5);
        assert_relative_eq!(iop(&p, &g).unwrap(), 2.0 / 3.0);
        assert_relative_eq!(iog(&p, &g).unwrap(), 2.0 / 3.0);

        assert_eq!(iou(&g, &g).unwrap(), 1.0);
        assert_eq!(iop(&g, &g).unwrap(), 1.0);
        assert_eq!(iog(&g, &g).unwrap(), 1.0);

        let far = m(20.0, 30.0);
        assert_eq!(iou(&far, &g).unwrap(), 0.0);
        assert_eq!(iop(&far, &g).unwrap(), 0.0);
        assert_eq!(iog(&far, &g).unwrap(), 0.0);
    }

    #[test]
    fn point_predictions_and_bad_truth() {
        let g = m(2.0, 8.0);
        assert_eq!(iop(&m(3.0, 3.0), &g).unwrap(), 1.0);
        assert_eq!(iop(&m(9.0, 9.0), &g).unwrap(), 0.0);
        assert_eq!(iou(&m(3.0, 3.0), &g).unwrap(), 0.0);
        assert!(matches!(iou(&g, &m(1.0, 1.0)), Err(Error::InvalidArgument(_))));
    }

    fn rec(id: &str, pred: Option<Moment>, gt: Moment) -> EvalRecord {
        EvalRecord::new(id, pred.into_iter().collect(), vec![gt])
    }

    #[test]
    fn evaluate_examples() {
        // IoU 0.6: pred (0,6) vs gt (0,10); IoU 0.4: pred (0,4) vs gt (0,10)
        let records = vec![
            rec("a", Some(m(0.0, 6.0)), m(0.0, 10.0)),
            rec("b", Some(m(0.0, 4.0)), m(0.0, 10.0)),
        ];
        let r = evaluate(&records, &[0.5]).unwrap();
        assert_eq!(r.r1(0.5), Some(0.5));
        assert_relative_eq!(r.miou, 0.5);
        assert_eq!(r.n, 2);

        let exact = vec![rec("a", Some(m(1.0, 2.0)), m(1.0, 2.0))];
        let r = evaluate(&exact, &[0.3, 0.5, 0.7]).unwrap();
        assert!(r.r1_at.iter().all(|&(_, v)| v == 1.0));
        assert_eq!((r.miou, r.iop_mean, r.iog_mean, r.r_at_iou), (1.0, 1.0, 1.0, 1.0));

        let empty = vec![rec("a", None, m(1.0, 2.0)), rec("b", None, m(3.0, 5.0))];
        let r = evaluate(&empty, &[0.3, 0.5]).unwrap();
        assert!(r.r1_at.iter().all(|&(_, v)| v == 0.0));
        assert_eq!((r.miou, r.iop_mean, r.iog_mean, r.r_at_iou), (0.0, 0.0, 0.0, 0.0));

        assert!(evaluate(&[], &[0.5]).is_err());
    }

    #[test]
    fn best_matching_truth_is_used() {
        let r = EvalRecord::new("a", vec![m(10.0, 12.0)], vec![m(0.0, 2.0), m(10.0, 12.0)]);
        assert_eq!(r.score().unwrap().iou, 1.0);
    }

    #[test]
    fn r_at_iou_examples() {
        // IoU 0.45: pred (0, 4.5) vs gt (0, 10)
        let one = |p: Moment| r_at_iou(&[rec("a", Some(p), m(0.0, 10.0))]).unwrap();
        assert_relative_eq!(one(m(0.0, 4.5)), 0.8);
        assert_eq!(one(m(0.0, 10.0)), 1.0);
        assert_eq!(one(m(0.0, 0.5)), 0.0);
    }

    #[test]
    fn segment_retrieval_examples() {
        let hit = rec("a", None, m(0.0, 1.0)).with_segments(vec![3], vec![3, 4]);
        let miss = rec("b", None, m(0.0, 1.0)).with_segments(vec![1, 2], vec![5]);
        assert_eq!(segment_retrieval_r1(std::slice::from_ref(&hit)).unwrap(), 1.0);
        assert_eq!(segment_retrieval_r1(std::slice::from_ref(&miss)).unwrap(), 0.0);
        let four = vec![hit.clone(), miss.clone(), hit, miss];
        assert_eq!(segment_retrieval_r1(&four).unwrap(), 0.5);
        assert_eq!(evaluate(&four, &[0.5]).unwrap().seg_retrieval_r1, Some(0.5));
        assert!(segment_retrieval_r1(&[rec("c", None, m(0.0, 1.0))]).is_err());
    }

    #[test]
    fn consistency_examples() {
        let originals: Vec<EvalRecord> = (0..5)
            .map(|i| {
                let gt = m(i as f64 * 10.0, i as f64 * 10.0 + 5.0);
                let pred = if i < 4 { gt } else { m(100.0, 101.0) };
                rec(&format!("q{i}"), Some(pred), gt)
            })
            .collect();
        let same: HashMap<String, Vec<Vec<Moment>>> = originals
            .iter()
            .map(|r| (r.query_id.clone(), vec![r.predicted.clone(); 3]))
            .collect();
        let rep = consistency_scores(&originals, &same, None, 0.5).unwrap();
        assert_relative_eq!(rep.ground, 0.8);
        let rg = rep.r_ground.unwrap();
        assert_eq!(rg.score, rep.ground);
        assert_relative_eq!(rg.relative.unwrap(), 100.0);
        assert_eq!(rep.rephrase_iou, Some(1.0));

        // shifted truth tracked exactly
        let shifted: Vec<EvalRecord> = originals
            .iter()
            .map(|r| {
                let gt = r.ground_truth[0].shifted(200.0);
                let pred = if r.predicted[0] == r.ground_truth[0] { gt } else { m(0.0, 1.0) };
                rec(&r.query_id, Some(pred), gt)
            })
            .collect();
        let rep = consistency_scores(&originals, &HashMap::new(), Some(&shifted), 0.5).unwrap();
        assert_relative_eq!(rep.s_ground.unwrap().relative.unwrap(), 100.0);

        // 4/5 original hits, 3/5 shifted hits
        let mut worse = shifted.clone();
        worse[0].predicted = vec![m(0.0, 1.0)];
        let rep = consistency_scores(&originals, &HashMap::new(), Some(&worse), 0.5).unwrap();
        let s = rep.s_ground.unwrap();
        assert_relative_eq!(s.score, 0.6);
        assert_relative_eq!(s.relative.unwrap(), 75.0, epsilon = 1e-9);

        let mut bad = HashMap::new();
        bad.insert("nope".to_string(), vec![vec![m(0.0, 1.0)]]);
        assert!(consistency_scores(&originals, &bad, None, 0.5).is_err());
        let stray = vec![rec("nope", None, m(0.0, 1.0))];
        assert!(consistency_scores(&originals, &HashMap::new(), Some(&stray), 0.5).is_err());
    }

    #[test]
    fn report_serialization() {
        let r = evaluate(&[rec("a", Some(m(0.0, 6.0)), m(0.0, 10.0))], &[0.3, 0.5]).unwrap();
        let j = r.to_json();
        assert_eq!(j["r1@0.30"], 1.0);
        assert_eq!(j["r1@0.50"], 1.0);
        assert_eq!(j["n"], 1);
        let mut csv = Vec::new();
        write_records_csv(&[rec("a,b", Some(m(0.0, 6.0)), m(0.0, 10.0))], &mut csv).unwrap();
        let csv = String::from_utf8(csv).unwrap();
        assert!(csv.lines().nth(1).unwrap().starts_with("\"a,b\",0,6,0,10,0.600000"));
    }

    /// Brute-force scorer on a 0.5 s lattice: counts half-second cells, picks
    /// the best truth by integer cross-multiplication.
    fn brute_force(records: &[EvalRecord], thresholds: &[f64]) -> (Vec<f64>, f64) {
        let mut hits = vec![0usize; thresholds.len()];
        let mut ious = Vec::new();
        for r in records {
            let Some(p) = r.predicted.first() else {
                ious.push(0.0);
                continue;
            };
            let half = |t: f64| (t * 2.0).round() as i64;
            let mut best: Option<(i64, i64)> = None;
            for g in &r.ground_truth {
                let (ps, pe, gs, ge) = (half(p.start()), half(p.end()), half(g.start()), half(g.end()));
                let inter = (pe.min(ge) - ps.max(gs)).max(0);
                let uni = (pe - ps) + (ge - gs) - inter;
                best = match best {
                    Some((bi, bu)) if bi * uni >= inter * bu => Some((bi, bu)),
                    _ => Some((inter, uni)),
                };
            }
            let (i, u) = best.unwrap();
            let v = i as f64 / u as f64;
            for (k, &t) in thresholds.iter().enumerate() {
                if v >= t {
                    hits[k] += 1;
                }
            }
            ious.push(v);
        }
        let n = records.len() as f64;
        (
            hits.iter().map(|&h| h as f64 / n).collect(),
            ious.iter().sum::<f64>() / n,
        )
    }

    #[test]
    fn matches_brute_force_scorer() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut lattice = |lo: i64, hi: i64| rng.gen_range(lo..=hi) as f64 / 2.0;
        let mut records = Vec::new();
        for i in 0..10_000 {
            let mut gts = Vec::new();
            for _ in 0..1 + (i % 3) {
                let s = lattice(0, 100);
                gts.push(m(s, s + lattice(1, 40)));
            }
            let pred = if i % 17 == 0 {
                vec![]
            } else {
                let s = lattice(0, 100);
                vec![m(s, s + lattice(0, 40))]
            };
            records.push(EvalRecord::new(format!("r{i}"), pred, gts));
        }
        let th = [0.1, 0.3, 0.5, 0.7];
        let report = evaluate(&records, &th).unwrap();
        let (r1, miou) = brute_force(&records, &th);
        let got: Vec<f64> = report.r1_at.iter().map(|&(_, v)| v).collect();
        assert_eq!(got, r1);
        assert_relative_eq!(report.miou, miou, epsilon = 1e-12);
    }

    fn moment() -> impl Strategy<Value = Moment> {
        (0.0..100.0f64, 0.0..50.0f64).prop_map(|(s, l)| m(s, s + l))
    }

    proptest! {
        #[test]
        fn overlap_bounds(p in moment(), g in moment()) {
            prop_assume!(g.len() > 1e-6);
            let (u, a, b) = (iou(&p, &g).unwrap(), iop(&p, &g).unwrap(), iog(&p, &g).unwrap());
            for v in [u, a, b] {
                prop_assert!((0.0..=1.0 + 1e-12).contains(&v));
            }
            prop_assert!(u <= a.min(b) + 1e-12);
        }

        #[test]
        fn recall_monotone_and_sweep_mean(
            pairs in prop::collection::vec((moment(), moment()), 1..40),
            ts in prop::collection::vec(0.0..1.0f64, 2..8),
        ) {
            let records: Vec<EvalRecord> = pairs
                .iter()
                .enumerate()
                .filter(|(_, (_, g))| g.len() > 1e-6)
                .map(|(i, (p, g))| rec(&i.to_string(), Some(*p), *g))
                .collect();
            prop_assume!(!records.is_empty());
            let mut ts = ts;
            ts.sort_by(f64::total_cmp);
            let r = evaluate(&records, &ts).unwrap();
            for w in r.r1_at.windows(2) {
                prop_assert!(w[1].1 <= w[0].1);
            }
            let sweep = evaluate(&records, &SWEEP_THRESHOLDS).unwrap();
            let mean5 = sweep.r1_at.iter().map(|&(_, v)| v).sum::<f64>() / 5.0;
            prop_assert!((sweep.r_at_iou - mean5).abs() < 1e-15);
            prop_assert_eq!(r_at_iou(&records).unwrap(), sweep.r_at_iou);

            let mut rev = records.clone();
            rev.reverse();
            let back = evaluate(&rev, &ts).unwrap();
            prop_assert_eq!(&back.r1_at, &r.r1_at);
            prop_assert!((back.miou - r.miou).abs() < 1e-12);
        }
    }
}
