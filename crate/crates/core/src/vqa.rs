//! Multiple-choice question answering over grounded windows.
//!
//! The grounded moment is widened to at least `min_window` seconds, 32
//! frames are sampled uniformly inside it, and the question goes to a QA
//! backend as a plain multiple-choice prompt.

use std::collections::HashMap;
use std::io::Write;
use std::sync::{Arc, OnceLock};

use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::backend::{Backend, GenerationRequest, Prompt};
use crate::error::{Error, Result};
use crate::frames::FrameLibrary;
use crate::manifest::QaEntry;
use crate::metrics::{evaluate, EvalRecord, MetricReport, LONG_VIDEO_THRESHOLDS};
use crate::promptseq::{ContentPart, FrameRef, Message};
use crate::templates::{PromptTemplates, QA_ANSWER_CUE, QA_INSTRUCTION};
use crate::timeline::{FrameGrid, Moment};

pub type QaItem = QaEntry;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QaConfig {
    pub min_window: f64,
    pub frames: usize,
    /// Tokens per frame for QA prompts.
    pub frame_tokens: usize,
}

impl Default for QaConfig {
    fn default() -> Self {
        Self {
            min_window: 32.0,
            frames: 32,
            frame_tokens: 256,
        }
    }
}

pub fn option_label(i: usize) -> char {
    (b'A' + i as u8) as char
}

pub fn validate_item(item: &QaItem) -> Result<()> {
    let n = item.options.len();
    if !(2..=26).contains(&n) {
        return Err(Error::invalid(format!("qa item {:?} has {n} options", item.id)));
    }
    let last = option_label(n - 1);
    if !('A'..=last).contains(&item.answer) {
        return Err(Error::invalid(format!(
            "qa item {:?}: answer {:?} is not among options A-{last}",
            item.id, item.answer
        )));
    }
    Ok(())
}

/// Widens `pred` about its centre to `min_len` seconds, shifting the window
/// back inside `[0, duration]` when it spills over an edge.
pub fn extend_window(pred: &Moment, min_len: f64, duration: f64) -> Moment {
    // tolerance keeps the function idempotent on its own rounded output
    if pred.len() >= min_len - 1e-9 {
        return *pred;
    }
    if duration <= min_len {
        return Moment::new(0.0, duration).expect("positive duration");
    }
    let half = min_len / 2.0;
    let (mut s, mut e) = (pred.center() - half, pred.center() + half);
    if s < 0.0 {
        (s, e) = (0.0, min_len);
    } else if e > duration {
        (s, e) = (duration - min_len, duration);
    }
    Moment::new(s, e).expect("window inside the video")
}

/// `n` times spread evenly over `window`, each at the centre of its slice.
pub fn sample_times(window: &Moment, n: usize) -> Vec<f64> {
    let step = window.len() / n as f64;
    (0..n).map(|k| window.start() + (k as f64 + 0.5) * step).collect()
}

pub fn qa_prompt(
    item: &QaItem,
    grid: &FrameGrid,
    window: &Moment,
    config: &QaConfig,
    templates: &PromptTemplates,
) -> Prompt {
    let mut content: Vec<ContentPart> = sample_times(window, config.frames)
        .into_iter()
        .map(|t| {
            ContentPart::Frame(FrameRef {
                frame: grid.nearest_frame(t),
                timestamp: t,
                tokens: config.frame_tokens,
            })
        })
        .collect();
    let mut text = format!("\nQuestion: {}\nOptions:\n", item.question);
    for (i, opt) in item.options.iter().enumerate() {
        text.push_str(&format!("({}) {}\n", option_label(i), opt));
    }
    text.push_str(&format!("{QA_INSTRUCTION}\n{QA_ANSWER_CUE}"));
    content.push(ContentPart::text(text));
    Prompt::Chat {
        messages: vec![Message::system(templates.qa_system.clone()), Message::user(content)],
    }
}

fn paren_label() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\(([A-Z])\)").unwrap())
}

fn bare_label() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\b([A-Z])\b").unwrap())
}

fn echo_cue() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)best\s+option\s*:").unwrap())
}

/// The option letter in a reply, or `None` when no in-range letter appears.
pub fn parse_option_label(text: &str, n_options: usize) -> Option<char> {
    let text = echo_cue().replace_all(text, " ");
    let last = option_label(n_options.clamp(1, 26) - 1);
    let in_range = |c: char| ('A'..=last).contains(&c);
    let first = |re: &Regex| {
        re.captures_iter(&text)
            .filter_map(|c| c[1].chars().next())
            .find(|&c| in_range(c))
    };
    first(paren_label()).or_else(|| first(bare_label()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaOutcome {
    pub id: String,
    pub window: Moment,
    pub predicted: Option<char>,
    pub correct: bool,
    pub unanswered: bool,
    pub raw_text: String,
}

pub fn answer(
    item: &QaItem,
    grid: &FrameGrid,
    window: &Moment,
    backend: &dyn Backend,
    frames: &dyn FrameLibrary,
    config: &QaConfig,
    templates: &PromptTemplates,
) -> Result<QaOutcome> {
    validate_item(item)?;
    let prompt = qa_prompt(item, grid, window, config, templates);
    let request = GenerationRequest::new(prompt, frames).with_query_id(Some(item.id.clone()));
    let result = backend.complete(&request)?;
    let predicted = parse_option_label(&result.text, item.options.len());
    if predicted.is_none() {
        tracing::warn!(id = %item.id, reply = %result.text, "no option letter in reply");
    }
    Ok(QaOutcome {
        id: item.id.clone(),
        window: *window,
        predicted,
        correct: predicted == Some(item.answer),
        unanswered: predicted.is_none(),
        raw_text: result.text,
    })
}

/// One item with the video context needed to answer it.
pub struct QaInput {
    pub item: QaItem,
    pub grid: FrameGrid,
    pub frames: Arc<dyn FrameLibrary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaReport {
    pub accuracy: f64,
    pub n: usize,
    pub unanswered: usize,
    pub grounding: Option<MetricReport>,
    pub outcomes: Vec<QaOutcome>,
}

/// Answers every item inside its grounded window (the whole video when no
/// grounding is given) and scores accuracy. Items with truth moments and a
/// grounding also feed a grounding report.
pub fn evaluate_qa(
    inputs: &[QaInput],
    groundings: &HashMap<String, Vec<Moment>>,
    backend: &dyn Backend,
    config: &QaConfig,
    templates: &PromptTemplates,
) -> Result<QaReport> {
    if inputs.is_empty() {
        return Err(Error::invalid("no qa items"));
    }
    for id in groundings.keys() {
        if !inputs.iter().any(|i| &i.item.id == id) {
            return Err(Error::invalid(format!("grounding for unknown qa item {id:?}")));
        }
    }
    let outcomes: Vec<QaOutcome> = inputs
        .par_iter()
        .map(|input| {
            let duration = input.grid.duration();
            let full = Moment::new(0.0, duration)?;
            let window = match groundings.get(&input.item.id).and_then(|m| m.first()) {
                Some(m) => extend_window(&m.clip(&full).unwrap_or(full), config.min_window, duration),
                None => full,
            };
            answer(
                &input.item,
                &input.grid,
                &window,
                backend,
                input.frames.as_ref(),
                config,
                templates,
            )
        })
        .collect::<Result<_>>()?;

    let records: Vec<EvalRecord> = inputs
        .iter()
        .filter_map(|i| {
            let gt = i.item.gt?;
            let pred = groundings.get(&i.item.id)?;
            Some(EvalRecord::new(i.item.id.clone(), pred.clone(), vec![gt]))
        })
        .collect();
    let grounding = if records.is_empty() {
        None
    } else {
        Some(evaluate(&records, &LONG_VIDEO_THRESHOLDS)?)
    };
    let n = outcomes.len();
    Ok(QaReport {
        accuracy: outcomes.iter().filter(|o| o.correct).count() as f64 / n as f64,
        n,
        unanswered: outcomes.iter().filter(|o| o.unanswered).count(),
        grounding,
        outcomes,
    })
}

pub fn write_outcomes<W: Write>(outcomes: &[QaOutcome], mut out: W) -> Result<()> {
    for o in outcomes {
        serde_json::to_writer(&mut out, o)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{FixtureBackend, FixtureEntry, OracleBackend};
    use crate::frames::NoFrames;
    use crate::timeline::make_grid;
    use proptest::prelude::*;

    fn m(s: f64, e: f64) -> Moment {
        Moment::new(s, e).unwrap()
    }

    fn item(id: &str, answer: char) -> QaItem {
        QaItem {
            id: id.into(),
            video_id: "v".into(),
            question: "What is held?".into(),
            options: vec!["a cup".into(), "a pen".into(), "a phone".into(), "nothing".into()],
            answer,
            gt: None,
        }
    }

    #[test]
    fn extend_examples() {
        assert_eq!(extend_window(&m(100.0, 110.0), 32.0, 500.0), m(89.0, 121.0));
        assert_eq!(extend_window(&m(2.0, 10.0), 32.0, 500.0), m(0.0, 32.0));
        assert_eq!(extend_window(&m(0.0, 40.0), 32.0, 500.0), m(0.0, 40.0));
        assert_eq!(extend_window(&m(490.0, 495.0), 32.0, 500.0), m(468.0, 500.0));
        assert_eq!(extend_window(&m(3.0, 5.0), 32.0, 20.0), m(0.0, 20.0));
    }

    #[test]
    fn label_parsing() {
        assert_eq!(parse_option_label("(B)", 4), Some('B'));
        assert_eq!(parse_option_label("Best Option: C", 4), Some('C'));
        assert_eq!(parse_option_label("Best Option: (D) nothing", 4), Some('D'));
        assert_eq!(parse_option_label("I am unsure", 4), None);
        assert_eq!(parse_option_label("E", 4), None);
        assert_eq!(parse_option_label("The answer is (A).", 4), Some('A'));
    }

    #[test]
    fn prompt_layout() {
        let g = make_grid(100.0, 2.0).unwrap();
        let p = qa_prompt(&item("x", 'A'), &g, &m(10.0, 42.0), &QaConfig::default(), &PromptTemplates::default());
        let msgs = p.messages();
        assert_eq!(msgs[0].content, vec![ContentPart::text("You are a helpful assistant.")]);
        let user = &msgs[1].content;
        assert_eq!(user.len(), 33);
        let ContentPart::Text { text } = &user[32] else { panic!() };
        assert_eq!(
            text,
            "\nQuestion: What is held?\nOptions:\n(A) a cup\n(B) a pen\n(C) a phone\n(D) nothing\n\
             Please only give the best option.\nBest Option:"
        );
        assert_eq!(p.frame_indices()[0], g.nearest_frame(10.5));
    }

    #[test]
    fn answer_via_fixture() {
        let g = make_grid(100.0, 2.0).unwrap();
        let t = PromptTemplates::default();
        let c = QaConfig::default();
        let fx = FixtureBackend::new([
            FixtureEntry::pattern("(B)").for_query_id("b"),
            FixtureEntry::pattern("I am unsure").for_query_id("u"),
        ]);
        let o = answer(&item("b", 'B'), &g, &m(0.0, 32.0), &fx, &NoFrames, &c, &t).unwrap();
        assert_eq!((o.predicted, o.correct), (Some('B'), true));
        let o = answer(&item("u", 'B'), &g, &m(0.0, 32.0), &fx, &NoFrames, &c, &t).unwrap();
        assert!(o.unanswered && !o.correct);
    }

    fn inputs(items: Vec<QaItem>) -> Vec<QaInput> {
        items
            .into_iter()
            .map(|item| QaInput {
                item,
                grid: make_grid(300.0, 2.0).unwrap(),
                frames: Arc::new(NoFrames),
            })
            .collect()
    }

    #[test]
    fn accuracy_and_grounding() {
        let mut oracle = OracleBackend::new();
        let mut items = Vec::new();
        for (i, (truth, reply)) in [('A', 'A'), ('B', 'B'), ('C', 'A'), ('D', 'C')].into_iter().enumerate() {
            let id = format!("q{i}");
            oracle.insert_label(&id, reply);
            let mut it = item(&id, truth);
            it.gt = Some(m(10.0 * i as f64, 10.0 * i as f64 + 8.0));
            items.push(it);
        }
        let groundings: HashMap<String, Vec<Moment>> =
            items.iter().map(|i| (i.id.clone(), vec![i.gt.unwrap()])).collect();
        let t = PromptTemplates::default();
        let r = evaluate_qa(&inputs(items.clone()), &groundings, &oracle, &QaConfig::default(), &t).unwrap();
        assert_eq!(r.accuracy, 0.5);
        let g = r.grounding.unwrap();
        assert_eq!((g.miou, g.iop_mean), (1.0, 1.0));
        assert_eq!(r.outcomes[1].window, m(0.0, 32.0));

        let mut all = OracleBackend::new();
        for i in &items {
            all.insert_label(&i.id, i.answer);
        }
        let r = evaluate_qa(&inputs(items.clone()), &HashMap::new(), &all, &QaConfig::default(), &t).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert!(r.grounding.is_none());

        let mut stray = HashMap::new();
        stray.insert("zz".to_string(), vec![m(0.0, 1.0)]);
        assert!(evaluate_qa(&inputs(items), &stray, &all, &QaConfig::default(), &t).is_err());
    }

    #[test]
    fn item_validation() {
        let mut it = item("x", 'E');
        assert!(validate_item(&it).is_err());
        it.answer = 'A';
        it.options.truncate(1);
        assert!(validate_item(&it).is_err());
    }

    proptest! {
        #[test]
        fn extend_laws(dur in 1.0..1000.0f64, a in 0.0..1.0f64, b in 0.0..1.0f64) {
            let s = a * dur;
            let p = m(s, s + b * (dur - s));
            let w = extend_window(&p, 32.0, dur);
            prop_assert!(w.start() >= 0.0 && w.end() <= dur + 1e-9);
            let want = if p.len() >= 32.0 { p.len() } else { dur.min(32.0) };
            prop_assert!((w.len() - want).abs() < 1e-9);
            prop_assert_eq!(extend_window(&w, 32.0, dur), w);
            if p.len() < 32.0 && dur > 32.0 {
                prop_assert!(w.contains_moment(&p));
            }
            let ts = sample_times(&w, 32);
            prop_assert!(ts.windows(2).all(|x| x[0] < x[1]));
            prop_assert!(ts.iter().all(|&t| w.contains(t)));
        }
    }
}
