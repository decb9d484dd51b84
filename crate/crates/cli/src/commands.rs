use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::Write;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Subcommand};
use grounding::datagen::{build_training_samples, replicate_long, DataGenConfig, TrainingSample};
use grounding::manifest::{
    eval_records, load_predictions, read_jsonl, write_header, Manifest, PredictionRecord, PredictionWriter,
    QueryEntry,
};
use grounding::metrics::{consistency_scores, evaluate, write_records_csv, EvalRecord, LONG_VIDEO_THRESHOLDS};
use grounding::orchestrator::{Grounder, Query};
use grounding::perturb::{decompose_query, iog_of_decomposition, shift_manifest, Decomposition};
use grounding::timeline::Moment;
use grounding::vqa::{answer, extend_window, validate_item, QaOutcome};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::pack::pack_samples;
use crate::synth::{synth_manifest, SynthOptions};
use crate::{write_atomic, BackendArgs, Engine, FrameLibraries, RunContext};

pub const SAMPLES_SCHEMA: &str = "ground.samples";
pub const PACKED_SCHEMA: &str = "ground.packed";
pub const DECOMPOSITION_SCHEMA: &str = "ground.decompositions";
pub const QA_OUTCOMES_SCHEMA: &str = "ground.qa_outcomes";

/// Queries grounded per parallel batch; each batch is persisted before the
/// next starts.
const BATCH: usize = 32;

fn jsonl<T: Serialize>(schema: &str, rows: &[T]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_header(&mut buf, schema)?;
    for r in rows {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    Ok(buf)
}

fn pretty(value: &impl Serialize) -> Result<Vec<u8>> {
    let mut buf = serde_json::to_vec_pretty(value)?;
    buf.push(b'\n');
    Ok(buf)
}

fn save_manifest(m: &Manifest, path: &std::path::Path) -> Result<()> {
    let mut buf = Vec::new();
    m.write(&mut buf)?;
    write_atomic(path, &buf)
}

fn load_manifest(path: &std::path::Path) -> Result<Manifest> {
    Manifest::load(path).with_context(|| format!("loading manifest {}", path.display()))
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 200)]
    pub videos: usize,
    #[arg(long, default_value_t = 10.0)]
    pub min_duration: f64,
    #[arg(long, default_value_t = 3600.0)]
    pub max_duration: f64,
    /// Also emit one multiple-choice item per query.
    #[arg(long)]
    pub qa: bool,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn synth(ctx: &RunContext, a: SynthArgs) -> Result<()> {
    let opts = SynthOptions {
        videos: a.videos,
        min_duration: a.min_duration,
        max_duration: a.max_duration,
        fps: ctx.config.grounding.scaling.fps,
        segment_length: ctx.config.grounding.segment_length,
        qa: a.qa,
        ..Default::default()
    };
    if !(opts.min_duration > 0.0 && opts.max_duration >= opts.min_duration) {
        bail!("durations must satisfy 0 < min <= max");
    }
    save_manifest(&synth_manifest(&opts, ctx.seed)?, &a.out)
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn ingest(ctx: &RunContext, a: IngestArgs) -> Result<()> {
    let manifest = load_manifest(&a.manifest)?;
    let (resolved, stats) = crate::ingest::ingest(&manifest, &ctx.cache_dir, &ctx.config.ingest.decoder)?;
    tracing::info!(decoded = stats.decoded, cached = stats.cached, directories = stats.directories, "ingest done");
    save_manifest(&resolved, &a.out)
}

#[derive(Debug, Args)]
pub struct GroundArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Predictions file; existing records are kept and skipped.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub backend: BackendArgs,
}

fn oracle_truth(manifest: &Manifest) -> impl FnOnce(&mut grounding::backend::OracleBackend) + '_ {
    move |o| {
        for q in &manifest.queries {
            if let Some(gt) = q.gt.first() {
                o.insert_id(q.id.clone(), *gt);
            }
        }
        for item in &manifest.qa {
            if let Some(gt) = item.gt {
                o.insert_id(item.id.clone(), gt);
            }
            o.insert_label(item.id.clone(), item.answer);
        }
    }
}

pub fn ground(ctx: &RunContext, a: GroundArgs) -> Result<()> {
    let manifest = load_manifest(&a.manifest)?;
    let engine = Engine::new(&a.backend, &ctx.config, oracle_truth(&manifest))?;
    let libs = FrameLibraries::open(&manifest)?;
    let grounder_cfg = ctx.config.grounding.clone();
    let (mut writer, done) = PredictionWriter::open(&a.out)
        .with_context(|| format!("opening predictions {}", a.out.display()))?;
    let pending: Vec<&QueryEntry> = manifest.queries.iter().filter(|q| !done.contains(&q.id)).collect();
    tracing::info!(pending = pending.len(), skipped = done.len(), "grounding");
    for batch in pending.chunks(BATCH) {
        let results: Vec<Result<PredictionRecord>> = batch
            .par_iter()
            .map(|q| {
                let grid = manifest.grid(&q.video_id)?.grid;
                let frames = libs.for_video(&manifest, &q.video_id)?;
                let grounder = Grounder::new(engine.backend(), frames.as_ref(), grounder_cfg.clone())?;
                let r = grounder
                    .ground(&grid, &Query::with_id(q.id.clone(), q.text.clone()))
                    .with_context(|| format!("query {:?}", q.id))?;
                Ok(PredictionRecord {
                    query_id: q.id.clone(),
                    moments: r.moments,
                    stage_trace: r.stage_trace,
                    fallback_used: r.fallback_used,
                })
            })
            .collect();
        for r in results {
            writer.push(&r?)?;
        }
    }
    engine.finish()
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub predictions: PathBuf,
    /// Report file; printed to stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.3, 0.5, 0.7])]
    pub thresholds: Vec<f64>,
    /// Per-record scores as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Threshold of the consistency scores.
    #[arg(long, default_value_t = 0.5)]
    pub consistency_threshold: f64,
    #[arg(long, requires = "shifted_predictions")]
    pub shifted_manifest: Option<PathBuf>,
    #[arg(long, requires = "shifted_manifest")]
    pub shifted_predictions: Option<PathBuf>,
    #[arg(long, requires = "rephrased_predictions")]
    pub rephrased_manifest: Option<PathBuf>,
    #[arg(long, requires = "rephrased_manifest")]
    pub rephrased_predictions: Option<PathBuf>,
    /// Object-question manifest written by `perturb decompose`.
    #[arg(long, requires = "decomposed_predictions")]
    pub decomposed_manifest: Option<PathBuf>,
    #[arg(long, requires = "decomposed_manifest")]
    pub decomposed_predictions: Option<PathBuf>,
}

fn origin_of(q: &QueryEntry) -> Result<&str> {
    q.origin
        .as_deref()
        .with_context(|| format!("derived query {:?} lacks an origin", q.id))
}

pub fn eval(_ctx: &RunContext, a: EvalArgs) -> Result<()> {
    let manifest = load_manifest(&a.manifest)?;
    let predictions = load_predictions(&a.predictions)?;
    let records = eval_records(&manifest, &predictions)?;
    let report = evaluate(&records, &a.thresholds)?;
    let mut flat: BTreeMap<String, f64> = report.to_flat();

    let shifted = match (&a.shifted_manifest, &a.shifted_predictions) {
        (Some(m), Some(p)) => {
            let sm = load_manifest(m)?;
            let by_query: HashMap<&str, &QueryEntry> = sm.queries.iter().map(|q| (q.id.as_str(), q)).collect();
            let mut recs = eval_records(&sm, &load_predictions(p)?)?;
            for r in &mut recs {
                r.query_id = origin_of(by_query[r.query_id.as_str()])?.to_string();
            }
            Some(recs)
        }
        _ => None,
    };
    let mut rephrased: HashMap<String, Vec<Vec<Moment>>> = HashMap::new();
    if let (Some(m), Some(p)) = (&a.rephrased_manifest, &a.rephrased_predictions) {
        let rm = load_manifest(m)?;
        let preds: HashMap<String, Vec<Moment>> = load_predictions(p)?
            .into_iter()
            .map(|r| (r.query_id, r.moments))
            .collect();
        for q in &rm.queries {
            rephrased
                .entry(origin_of(q)?.to_string())
                .or_default()
                .push(preds.get(&q.id).cloned().unwrap_or_default());
        }
    }
    if shifted.is_some() || !rephrased.is_empty() {
        let c = consistency_scores(&records, &rephrased, shifted.as_deref(), a.consistency_threshold)?;
        flat.insert("ground".into(), c.ground);
        let mut put = |name: &str, r: Option<grounding::metrics::Relative>| {
            if let Some(r) = r {
                flat.insert(name.into(), r.score);
                if let Some(rel) = r.relative {
                    flat.insert(format!("{name}_rel"), rel);
                }
            }
        };
        put("r_ground", c.r_ground);
        put("s_ground", c.s_ground);
        if let Some(x) = c.rephrase_iou {
            flat.insert("rephrase_iou".into(), x);
        }
    }

    if let (Some(m), Some(p)) = (&a.decomposed_manifest, &a.decomposed_predictions) {
        let dm = load_manifest(m)?;
        let preds: HashMap<String, Vec<Moment>> = load_predictions(p)?
            .into_iter()
            .map(|r| (r.query_id, r.moments))
            .collect();
        let mut per_origin: Vec<(String, Vec<Vec<Moment>>)> = Vec::new();
        for q in &dm.queries {
            let o = origin_of(q)?;
            let moments = preds.get(&q.id).cloned().unwrap_or_default();
            match per_origin.iter_mut().find(|(id, _)| id == o) {
                Some((_, v)) => v.push(moments),
                None => per_origin.push((o.to_string(), vec![moments])),
            }
        }
        let mut sum = 0.0;
        for (id, preds) in &per_origin {
            let gt = manifest
                .queries
                .iter()
                .find(|q| &q.id == id)
                .and_then(|q| q.gt.first())
                .with_context(|| format!("decomposed origin {id:?} has no truth"))?;
            sum += iog_of_decomposition(preds, gt)?;
        }
        if !per_origin.is_empty() {
            flat.insert("decomposed_iog".into(), sum / per_origin.len() as f64);
        }
    }

    if let Some(csv) = &a.csv {
        let mut buf = Vec::new();
        write_records_csv(&records, &mut buf)?;
        write_atomic(csv, &buf)?;
    }
    let out = pretty(&flat)?;
    match &a.out {
        Some(path) => write_atomic(path, &out),
        None => Ok(std::io::stdout().write_all(&out)?),
    }
}

#[derive(Debug, Subcommand)]
pub enum PerturbCommand {
    /// Crop each video around its event at a random offset.
    Shift(ShiftArgs),
    /// Break each query into object questions.
    Decompose(DecomposeArgs),
}

#[derive(Debug, Args)]
pub struct ShiftArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Crop length in seconds; by default twice the event, at least 30 s.
    #[arg(long)]
    pub crop_len: Option<f64>,
    /// Probes per query.
    #[arg(long, default_value_t = 1)]
    pub repeats: usize,
}

#[derive(Debug, Args)]
pub struct DecomposeArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Decomposition report.
    #[arg(long)]
    pub out: PathBuf,
    /// Manifest of object questions, one query per question.
    #[arg(long)]
    pub queries_out: Option<PathBuf>,
    #[command(flatten)]
    pub backend: BackendArgs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DecompositionRecord {
    query_id: String,
    #[serde(flatten)]
    decomposition: Decomposition,
}

pub fn perturb(ctx: &RunContext, c: PerturbCommand) -> Result<()> {
    match c {
        PerturbCommand::Shift(a) => {
            let manifest = load_manifest(&a.manifest)?;
            let shifted = shift_manifest(&manifest, ctx.seed, a.crop_len, a.repeats)?;
            save_manifest(&shifted, &a.out)
        }
        PerturbCommand::Decompose(a) => {
            let manifest = load_manifest(&a.manifest)?;
            let engine = Engine::new(&a.backend, &ctx.config, |_| {})?;
            let templates = &ctx.config.grounding.templates;
            let rows: Vec<DecompositionRecord> = manifest
                .queries
                .par_iter()
                .map(|q| {
                    let d = decompose_query(&q.text, Some(q.id.clone()), engine.backend(), templates)
                        .with_context(|| format!("query {:?}", q.id))?;
                    Ok(DecompositionRecord {
                        query_id: q.id.clone(),
                        decomposition: d,
                    })
                })
                .collect::<Result<_>>()?;
            write_atomic(&a.out, &jsonl(DECOMPOSITION_SCHEMA, &rows)?)?;
            if let Some(path) = &a.queries_out {
                let mut out = Manifest {
                    videos: manifest.videos.clone(),
                    ..Default::default()
                };
                for (q, r) in manifest.queries.iter().zip(&rows) {
                    for (k, text) in r.decomposition.questions.iter().enumerate() {
                        out.queries.push(QueryEntry {
                            id: format!("{}/obj{k}", q.id),
                            video_id: q.video_id.clone(),
                            text: text.clone(),
                            gt: q.gt.clone(),
                            segments: None,
                            origin: Some(q.id.clone()),
                        });
                    }
                }
                save_manifest(&out, path)?;
            }
            engine.finish()
        }
    }
}

#[derive(Debug, Args)]
pub struct DatagenArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Long-video replication factor (config `pack.n_rep` by default).
    #[arg(long)]
    pub n_rep: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PackArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Samples from `datagen`; built from the manifest when absent.
    #[arg(long)]
    pub samples: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub n_rep: Option<usize>,
}

fn build_samples(ctx: &RunContext, manifest: &Manifest, n_rep: Option<usize>) -> Result<Vec<TrainingSample>> {
    let cfg = DataGenConfig {
        scaling: ctx.config.grounding.scaling.clone(),
        segment_length: ctx.config.grounding.segment_length,
        seed: ctx.seed,
    };
    let mut samples = Vec::new();
    for v in &manifest.videos {
        let annotations: Vec<(String, Moment)> = manifest
            .queries
            .iter()
            .filter(|q| q.video_id == v.id)
            .filter_map(|q| q.gt.first().map(|m| (q.text.clone(), *m)))
            .collect();
        if annotations.is_empty() {
            continue;
        }
        let grid = manifest.grid(&v.id)?.grid;
        samples.extend(
            build_training_samples(&v.id, &grid, &annotations, &cfg)
                .with_context(|| format!("video {:?}", v.id))?,
        );
    }
    Ok(replicate_long(&samples, n_rep.unwrap_or(ctx.config.pack.n_rep))?)
}

pub fn datagen(ctx: &RunContext, a: DatagenArgs) -> Result<()> {
    let manifest = load_manifest(&a.manifest)?;
    let samples = build_samples(ctx, &manifest, a.n_rep)?;
    write_atomic(&a.out, &jsonl(SAMPLES_SCHEMA, &samples)?)
}

pub fn pack(ctx: &RunContext, a: PackArgs) -> Result<()> {
    let manifest = load_manifest(&a.manifest)?;
    let samples = match &a.samples {
        Some(p) => read_jsonl(p, SAMPLES_SCHEMA)?,
        None => build_samples(ctx, &manifest, a.n_rep)?,
    };
    let packed = pack_samples(
        &samples,
        |id| Ok(manifest.grid(id)?.grid),
        &ctx.config.grounding.scaling,
        &ctx.config.grounding.templates,
    )?;
    let rows: Vec<_> = packed.into_iter().map(|(r, _)| r).collect();
    write_atomic(&a.out, &jsonl(PACKED_SCHEMA, &rows)?)
}

#[derive(Debug, Args)]
pub struct VqaArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Accuracy report.
    #[arg(long)]
    pub out: PathBuf,
    /// Per-item outcomes; existing items are kept and skipped.
    #[arg(long)]
    pub items_out: Option<PathBuf>,
    /// Predictions keyed by item id, used instead of grounding.
    #[arg(long, conflicts_with = "no_ground")]
    pub groundings: Option<PathBuf>,
    /// Answer over the whole video.
    #[arg(long)]
    pub no_ground: bool,
    #[command(flatten)]
    pub backend: BackendArgs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaItemRecord {
    #[serde(flatten)]
    pub outcome: QaOutcome,
    pub grounding: Vec<Moment>,
}

pub fn vqa(ctx: &RunContext, a: VqaArgs) -> Result<()> {
    let manifest = load_manifest(&a.manifest)?;
    if manifest.qa.is_empty() {
        bail!("manifest {} holds no qa items", a.manifest.display());
    }
    for item in &manifest.qa {
        validate_item(item).with_context(|| format!("qa item {:?}", item.id))?;
    }
    let engine = Engine::new(&a.backend, &ctx.config, oracle_truth(&manifest))?;
    let libs = FrameLibraries::open(&manifest)?;
    let given: Option<HashMap<String, Vec<Moment>>> = match &a.groundings {
        Some(p) => Some(load_predictions(p)?.into_iter().map(|r| (r.query_id, r.moments)).collect()),
        None => None,
    };

    let mut done: Vec<QaItemRecord> = match &a.items_out {
        Some(p) if p.exists() => read_jsonl(p, QA_OUTCOMES_SCHEMA)?,
        _ => Vec::new(),
    };
    let done_ids: HashSet<String> = done.iter().map(|r| r.outcome.id.clone()).collect();
    let pending: Vec<_> = manifest.qa.iter().filter(|i| !done_ids.contains(&i.id)).collect();
    let qa_cfg = &ctx.config.qa;
    let templates = &ctx.config.grounding.templates;

    for batch in pending.chunks(BATCH) {
        let fresh: Vec<QaItemRecord> = batch
            .par_iter()
            .map(|item| {
                let grid = manifest.grid(&item.video_id)?.grid;
                let frames = libs.for_video(&manifest, &item.video_id)?;
                let grounding = if a.no_ground || (engine.is_oracle() && item.gt.is_none()) {
                    Vec::new()
                } else if let Some(g) = &given {
                    g.get(&item.id).cloned().unwrap_or_default()
                } else {
                    let grounder = Grounder::new(engine.backend(), frames.as_ref(), ctx.config.grounding.clone())?;
                    grounder
                        .ground(&grid, &Query::with_id(item.id.clone(), item.question.clone()))
                        .with_context(|| format!("grounding qa item {:?}", item.id))?
                        .moments
                };
                let duration = grid.duration();
                let full = Moment::new(0.0, duration)?;
                let window = match grounding.first() {
                    Some(m) => extend_window(&m.clip(&full).unwrap_or(full), qa_cfg.min_window, duration),
                    None => full,
                };
                let outcome = answer(item, &grid, &window, engine.backend(), frames.as_ref(), qa_cfg, templates)
                    .with_context(|| format!("qa item {:?}", item.id))?;
                Ok(QaItemRecord { outcome, grounding })
            })
            .collect::<Result<_>>()?;
        done.extend(fresh);
        if let Some(p) = &a.items_out {
            let order: HashMap<&str, usize> =
                manifest.qa.iter().enumerate().map(|(i, q)| (q.id.as_str(), i)).collect();
            done.sort_by_key(|r| order.get(r.outcome.id.as_str()).copied().unwrap_or(usize::MAX));
            write_atomic(p, &jsonl(QA_OUTCOMES_SCHEMA, &done)?)?;
        }
    }
    engine.finish()?;

    let n = done.len();
    let correct = done.iter().filter(|r| r.outcome.correct).count();
    let unanswered = done.iter().filter(|r| r.outcome.unanswered).count();
    let records: Vec<EvalRecord> = manifest
        .qa
        .iter()
        .filter_map(|item| {
            let gt = item.gt?;
            let r = done.iter().find(|r| r.outcome.id == item.id)?;
            (!r.grounding.is_empty()).then(|| EvalRecord::new(item.id.clone(), r.grounding.clone(), vec![gt]))
        })
        .collect();
    let grounding = if records.is_empty() {
        serde_json::Value::Null
    } else {
        serde_json::to_value(evaluate(&records, &LONG_VIDEO_THRESHOLDS)?.to_flat())?
    };
    let report = serde_json::json!({
        "accuracy": correct as f64 / n as f64,
        "n": n,
        "unanswered": unanswered,
        "grounding": grounding,
    });
    write_atomic(&a.out, &pretty(&report)?)
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub predictions: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
}

pub fn export_timeline(_ctx: &RunContext, a: ExportArgs) -> Result<()> {
    let manifest = load_manifest(&a.manifest)?;
    let predictions = load_predictions(&a.predictions)?;
    std::fs::create_dir_all(&a.out_dir)?;
    for p in &predictions {
        let q = manifest
            .queries
            .iter()
            .find(|q| q.id == p.query_id)
            .with_context(|| format!("prediction for unknown query {:?}", p.query_id))?;
        let duration = manifest.grid(&q.video_id)?.grid.duration();
        let svg = crate::svg::render_timeline(&q.text, duration, &q.gt, p);
        write_atomic(&a.out_dir.join(crate::svg::file_name(&p.query_id)), svg.as_bytes())?;
    }
    Ok(())
}
