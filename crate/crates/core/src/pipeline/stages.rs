//! Stage execution and the run manifest.
//!
//! Each stage declares the artifacts it reads and writes under the output
//! directory. Before running, a stage computes a fingerprint over its input
//! digests and the settings that affect it; when the manifest already holds
//! that fingerprint and every recorded output is intact on disk, the stage
//! is skipped.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use super::comparators::{self, GBDT, HISTORICAL_AVERAGE, LINEAR};
use super::config::BackendKind;
use super::predict::{format_catalog, predict_dates, Prediction};
use super::{DayIndex, PipelineConfig, PipelineError, Stage};
use crate::decomposition::{decompose_series, read_decompositions, write_decompositions};
use crate::evaluation::{
    read_predictions, run_ablation, segment_report, write_plot_data, write_predictions, write_report_csv, ExchangeRow, MetricsReport,
    PredictionRecord,
};
use crate::events::{parse_event_records, EventCalendar, EventRecord, FormattedEvent};
use crate::llm::{cache_key, with_cache, CachedBackend, ChatBackend, ChatRequest, ChatResponse, LlmError, MockScript, ScriptedBackend};
use crate::parse::ParseFailure;
use crate::prompt::{AblationConfig, PromptBuilder, PromptTemplates};
use crate::synthetic::HeuristicBackend;
use crate::trips::{aggregate_daily_demand_chunked, parse_trip_records, read_daily_demand, write_daily_demand, DailyDemand};

pub const MANIFEST: &str = "manifest.json";
pub const DAILY_DEMAND: &str = "daily_demand.csv";
pub const INGEST_REJECTIONS: &str = "ingest_rejections.csv";
pub const FORMATTED_EVENTS: &str = "formatted_events.jsonl";
pub const FORMAT_FAILURES: &str = "format_failures.jsonl";
pub const DECOMPOSITION: &str = "decomposition.csv";
pub const PREDICTIONS: &str = "predictions.csv";
pub const REASONING: &str = "reasoning.jsonl";
pub const PARSE_FAILURES: &str = "parse_failures.jsonl";
pub const REPORT_CSV: &str = "report.csv";
pub const PLOT_DATA: &str = "plot_data.csv";
pub const ABLATION_CSV: &str = "ablation.csv";
pub const REPORT_MD: &str = "report.md";

/// Model name under which the LLM pipeline's predictions are reported.
pub const LLM_MODEL_NAME: &str = "llm-mpe";

const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub fingerprint: String,
    /// Input name to SHA-256 of its content.
    pub inputs: BTreeMap<String, String>,
    /// Output path relative to the output directory, to SHA-256.
    pub outputs: BTreeMap<String, String>,
    pub summary: BTreeMap<String, Value>,
    pub finished_unix_s: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format_version: u32,
    pub config_digest: String,
    pub template_digest: String,
    pub backend: String,
    pub stages: BTreeMap<String, StageRecord>,
}

impl RunManifest {
    pub fn load(output_dir: &Path) -> Result<Self, PipelineError> {
        let path = output_dir.join(MANIFEST);
        match fs::read_to_string(&path) {
            Ok(text) => serde_json::from_str(&text).map_err(|e| PipelineError::Data(format!("{}: {e}", path.display()))),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(RunManifest::default()),
            Err(e) => Err(PipelineError::io(&path, e)),
        }
    }

    pub fn stage(&self, stage: Stage) -> Option<&StageRecord> {
        self.stages.get(stage.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum StageOutcome {
    Ran { summary: BTreeMap<String, Value> },
    /// Inputs and outputs matched the manifest; nothing was done.
    Skipped,
}

static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

/// Writes `bytes` to a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), PipelineError> {
    let dir = path.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| PipelineError::io(dir, e))?;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("artifact");
    let tmp = dir.join(format!(".{name}.{}.{}.tmp", std::process::id(), TMP_COUNTER.fetch_add(1, Ordering::SeqCst)));
    fs::write(&tmp, bytes).map_err(|e| PipelineError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| PipelineError::io(path, e))
}

pub fn file_digest(path: &Path) -> Result<String, PipelineError> {
    let bytes = fs::read(path).map_err(|e| PipelineError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn jsonl<T: Serialize>(items: impl IntoIterator<Item = T>) -> Vec<u8> {
    let mut out = Vec::new();
    for item in items {
        out.extend(serde_json::to_vec(&item).expect("record serializes"));
        out.push(b'\n');
    }
    out
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, PipelineError> {
    let text = fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| PipelineError::Data(format!("{}: {e}", path.display()))))
        .collect()
}

/// Refuses every request; the inner backend of a cache-only replay.
struct CacheOnly;

impl ChatBackend for CacheOnly {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        Err(LlmError::Config(format!(
            "response cache has no entry for request {}; run once with a live or mock backend",
            cache_key(request)
        )))
    }

    fn identity(&self) -> String {
        "cache-only".into()
    }
}

type Backend = Arc<CachedBackend<Box<dyn ChatBackend>>>;

fn build_backend(run: &Run<'_>) -> Result<Backend, PipelineError> {
    let config = run.config;
    let inner: Box<dyn ChatBackend> = match (&run.injected, config.backend.kind) {
        (Some(b), _) => Box::new(Arc::clone(b)),
        (None, kind) => match kind {
        BackendKind::Mock => {
            let path = config.backend.mock_script.as_ref().ok_or_else(|| PipelineError::Config("no mock script configured".into()))?;
            let script = MockScript::load(path).map_err(|e| PipelineError::Config(e.to_string()))?;
            Box::new(ScriptedBackend::new(script))
        }
        BackendKind::Cache => Box::new(CacheOnly),
        BackendKind::Heuristic => Box::new(HeuristicBackend),
        BackendKind::Live => live_backend(config)?,
        },
    };
    Ok(Arc::new(with_cache(inner, &config.cache_dir).map_err(|e| PipelineError::Config(e.to_string()))?))
}

#[cfg(feature = "http")]
fn live_backend(config: &PipelineConfig) -> Result<Box<dyn ChatBackend>, PipelineError> {
    use crate::llm::http::{BackendConfig, HttpBackend};
    let b = &config.backend;
    let http = BackendConfig {
        base_url: b.base_url.clone(),
        timeout_s: b.timeout_s,
        max_retries: b.max_retries,
        retry_backoff_s: b.retry_backoff_s,
        ..Default::default()
    }
    .with_env_key()
    .map_err(|e| PipelineError::Config(e.to_string()))?;
    Ok(Box::new(HttpBackend::new(http).map_err(|e| PipelineError::Config(e.to_string()))?))
}

#[cfg(not(feature = "http"))]
fn live_backend(_: &PipelineConfig) -> Result<Box<dyn ChatBackend>, PipelineError> {
    Err(PipelineError::Config("this build has no HTTP support; use a mock, cache or heuristic backend".into()))
}

/// Identity of the reply source, without constructing it.
fn backend_fingerprint(config: &PipelineConfig) -> Result<Value, PipelineError> {
    let b = &config.backend;
    let source = match b.kind {
        BackendKind::Mock => {
            let path = b.mock_script.as_ref().ok_or_else(|| PipelineError::Config("no mock script configured".into()))?;
            if !path.exists() {
                return Err(PipelineError::Config(format!("mock script {} does not exist", path.display())));
            }
            json!({ "mock_script": file_digest(path)? })
        }
        BackendKind::Live => json!({ "base_url": b.base_url }),
        BackendKind::Cache => json!("cache"),
        BackendKind::Heuristic => json!("heuristic"),
    };
    Ok(json!({ "kind": b.kind, "model": b.model, "source": source }))
}

struct Run<'a> {
    config: &'a PipelineConfig,
    out: PathBuf,
    templates: PromptTemplates,
    injected: Option<Arc<dyn ChatBackend>>,
}

struct Produced {
    outputs: Vec<String>,
    summary: BTreeMap<String, Value>,
    /// Raised after outputs are written and recorded.
    deferred: Option<PipelineError>,
}

impl Run<'_> {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn builder(&self) -> PromptBuilder {
        let mut b = PromptBuilder::new(self.config.backend.model.clone(), self.config.venue.name.clone());
        b.templates = self.templates.clone();
        b
    }

    fn write(&self, name: &str, bytes: &[u8]) -> Result<String, PipelineError> {
        write_atomic(&self.path(name), bytes)?;
        Ok(name.to_string())
    }

    fn catalog(&self) -> Result<Vec<EventRecord>, PipelineError> {
        let path = &self.config.event_source;
        let text = fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
        let span = self.config.span();
        Ok(parse_event_records(&text).map_err(PipelineError::data)?.into_iter().filter(|e| span.contains(e.date)).collect())
    }

    fn daily_demand(&self) -> Result<Vec<DailyDemand>, PipelineError> {
        let path = self.path(DAILY_DEMAND);
        read_daily_demand(fs::File::open(&path).map_err(|e| PipelineError::io(&path, e))?).map_err(PipelineError::data)
    }

    fn formatted(&self) -> Result<Vec<FormattedEvent>, PipelineError> {
        let path = self.path(FORMATTED_EVENTS);
        match path.exists() {
            true => read_jsonl(&path),
            false => Ok(Vec::new()),
        }
    }

    fn index(&self) -> Result<DayIndex, PipelineError> {
        let path = self.path(DECOMPOSITION);
        let decs = read_decompositions(fs::File::open(&path).map_err(|e| PipelineError::io(&path, e))?).map_err(PipelineError::data)?;
        Ok(DayIndex::new(&self.daily_demand()?, &decs, &self.catalog()?, &self.formatted()?, self.config.span(), self.config.baseline))
    }

    fn test_dates(&self, index: &DayIndex) -> Result<Vec<NaiveDate>, PipelineError> {
        let range = self.config.test_range;
        let dates = index.predictable(range, self.config.history_days);
        if dates.len() != range.len() {
            let missing = range.days().find(|d| !dates.contains(d)).expect("some date is missing");
            return Err(PipelineError::Argument(format!(
                "test day {missing} lacks observed demand or a full {}-day history",
                self.config.history_days
            )));
        }
        Ok(dates)
    }
}

/// Artifacts a stage reads from the output directory, each with the stage
/// that produces it, in the order they are checked.
fn requirements(stage: Stage, config: &PipelineConfig) -> Vec<(&'static str, Stage)> {
    let needs_formatted = config.ablation.event_features == crate::prompt::EventFeatures::CountTimeFormatted;
    match stage {
        Stage::Ingest | Stage::FormatEvents => vec![],
        Stage::Decompose => vec![(DAILY_DEMAND, Stage::Ingest)],
        Stage::Predict => {
            let mut v = vec![(DECOMPOSITION, Stage::Decompose), (DAILY_DEMAND, Stage::Ingest)];
            if needs_formatted {
                v.push((FORMATTED_EVENTS, Stage::FormatEvents));
            }
            v
        }
        Stage::Evaluate => {
            let mut v = vec![(PREDICTIONS, Stage::Predict), (DECOMPOSITION, Stage::Decompose), (DAILY_DEMAND, Stage::Ingest)];
            if needs_formatted && config.comparators.use_formatted_text {
                v.push((FORMATTED_EVENTS, Stage::FormatEvents));
            }
            v
        }
        Stage::Ablate => vec![(DECOMPOSITION, Stage::Decompose), (DAILY_DEMAND, Stage::Ingest), (FORMATTED_EVENTS, Stage::FormatEvents)],
        Stage::Report => vec![(REPORT_CSV, Stage::Evaluate)],
    }
}

/// Inputs that are read when present but not required.
fn optional_inputs(stage: Stage) -> &'static [&'static str] {
    match stage {
        Stage::Predict | Stage::Evaluate => &[FORMATTED_EVENTS],
        Stage::Report => &[ABLATION_CSV],
        _ => &[],
    }
}

fn settings(stage: Stage, run: &Run<'_>) -> Result<Value, PipelineError> {
    let c = run.config;
    let span = c.span();
    Ok(match stage {
        Stage::Ingest => json!({ "venue": c.venue, "span": span }),
        Stage::FormatEvents => json!({ "span": span, "templates": run.templates.digest(), "backend": backend_fingerprint(c)? }),
        Stage::Decompose => json!({ "span": span, "baseline": c.baseline }),
        Stage::Predict => json!({
            "test": c.test_range, "history_days": c.history_days, "ablation": c.ablation.to_string(),
            "baseline": c.baseline, "templates": run.templates.digest(), "backend": backend_fingerprint(c)?,
            "budget": c.fallback_budget,
        }),
        Stage::Evaluate => json!({
            "train": c.train_range, "test": c.test_range, "history_days": c.history_days,
            "ablation": c.ablation.to_string(), "baseline": c.baseline, "comparators": c.comparators,
        }),
        Stage::Ablate => json!({
            "train": c.train_range, "test": c.test_range, "history_days": c.history_days, "baseline": c.baseline,
            "comparators": c.comparators, "templates": run.templates.digest(), "backend": backend_fingerprint(c)?,
            "budget": c.fallback_budget,
        }),
        Stage::Report => json!({ "test": c.test_range, "venue": c.venue.name, "history_days": c.history_days, "ablation": c.ablation.to_string() }),
    })
}

fn external_inputs(stage: Stage, config: &PipelineConfig) -> Vec<(String, PathBuf)> {
    let mut v = Vec::new();
    match stage {
        Stage::Ingest => v.push(("trip_source".to_string(), config.trip_source.clone())),
        Stage::Report => {}
        _ => v.push(("event_source".to_string(), config.event_source.clone())),
    }
    if stage == Stage::Evaluate {
        for (i, p) in config.external_predictions.iter().enumerate() {
            v.push((format!("external_predictions[{i}]"), p.clone()));
        }
    }
    v
}

fn load_templates(config: &PipelineConfig) -> Result<PromptTemplates, PipelineError> {
    match &config.prompt_dir {
        Some(dir) => PromptTemplates::load_overrides(dir).map_err(|e| PipelineError::Config(e.to_string())),
        None => Ok(PromptTemplates::default()),
    }
}

/// Human-readable plan for `stage`, used by dry runs.
pub fn plan(stage: Stage, config: &PipelineConfig) -> Result<Vec<String>, PipelineError> {
    let manifest = RunManifest::load(&config.output_dir)?;
    let run = Run { config, out: config.output_dir.clone(), templates: load_templates(config)?, injected: None };
    let mut lines = vec![format!("stage {stage} in {}", config.output_dir.display())];
    for (name, path) in external_inputs(stage, config) {
        lines.push(format!("  reads {name}: {}", path.display()));
    }
    let mut ready = true;
    for (artifact, producer) in requirements(stage, config) {
        let present = run.path(artifact).exists();
        ready &= present;
        lines.push(format!("  reads {artifact} ({})", if present { "present".to_string() } else { format!("missing; produced by `{producer}`") }));
    }
    let state = match (ready, fingerprint(stage, &run).ok(), manifest.stage(stage)) {
        (false, _, _) => "blocked on a missing input",
        (true, Some((fp, _)), Some(rec)) if rec.fingerprint == fp && outputs_intact(&run, rec) => "up to date; would be skipped",
        _ => "would run",
    };
    lines.push(format!("  {state}"));
    Ok(lines)
}

fn fingerprint(stage: Stage, run: &Run<'_>) -> Result<(String, BTreeMap<String, String>), PipelineError> {
    let mut inputs = BTreeMap::new();
    for (name, path) in external_inputs(stage, run.config) {
        if !path.exists() {
            return Err(PipelineError::Config(format!("{name} {} does not exist", path.display())));
        }
        inputs.insert(name, file_digest(&path)?);
    }
    for (artifact, _) in requirements(stage, run.config) {
        inputs.insert(artifact.to_string(), file_digest(&run.path(artifact))?);
    }
    for artifact in optional_inputs(stage) {
        let p = run.path(artifact);
        if p.exists() {
            inputs.insert(artifact.to_string(), file_digest(&p)?);
        }
    }
    let doc = json!({ "stage": stage.name(), "inputs": inputs, "settings": settings(stage, run)? });
    Ok((hex::encode(Sha256::digest(doc.to_string().as_bytes())), inputs))
}

fn outputs_intact(run: &Run<'_>, record: &StageRecord) -> bool {
    record.outputs.iter().all(|(rel, digest)| file_digest(&run.path(rel)).map(|d| &d == digest).unwrap_or(false))
}

/// Runs one stage against `config`, skipping it when its inputs and
/// settings are unchanged since the recorded run.
pub fn run_stage(stage: Stage, config: &PipelineConfig) -> Result<StageOutcome, PipelineError> {
    run_stage_with(stage, config, None)
}

/// Like [`run_stage`], sending requests to `backend` instead of the one the
/// configuration names. Replies still pass through the response cache.
pub fn run_stage_with(stage: Stage, config: &PipelineConfig, backend: Option<Arc<dyn ChatBackend>>) -> Result<StageOutcome, PipelineError> {
    config.validate()?;
    let out = config.output_dir.clone();
    fs::create_dir_all(&out).map_err(|e| PipelineError::io(&out, e))?;
    let run = Run { config, out, templates: load_templates(config)?, injected: backend };

    for (artifact, producer) in requirements(stage, config) {
        if !run.path(artifact).exists() {
            return Err(PipelineError::Precondition { stage, artifact: artifact.to_string(), run_first: producer });
        }
    }
    let (fp, inputs) = fingerprint(stage, &run)?;
    let mut manifest = RunManifest::load(&run.out)?;
    if let Some(rec) = manifest.stage(stage) {
        if rec.fingerprint == fp && outputs_intact(&run, rec) {
            log::info!("stage {stage}: inputs unchanged, skipping");
            return Ok(StageOutcome::Skipped);
        }
    }

    log::info!("stage {stage}: running");
    let produced = match stage {
        Stage::Ingest => ingest(&run)?,
        Stage::FormatEvents => format_events(&run)?,
        Stage::Decompose => decompose(&run)?,
        Stage::Predict => predict(&run)?,
        Stage::Evaluate => evaluate(&run)?,
        Stage::Ablate => ablate(&run)?,
        Stage::Report => report(&run, &manifest)?,
    };
    if let Some(err) = produced.deferred {
        // Outputs stay on disk for inspection but the stage is not recorded
        // as complete, so the next run retries it.
        manifest.stages.remove(stage.name());
        save_manifest(&run, &mut manifest)?;
        return Err(err);
    }
    let mut outputs = BTreeMap::new();
    for rel in &produced.outputs {
        outputs.insert(rel.clone(), file_digest(&run.path(rel))?);
    }
    let finished_unix_s = std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    manifest.stages.insert(
        stage.name().to_string(),
        StageRecord { fingerprint: fp, inputs, outputs, summary: produced.summary.clone(), finished_unix_s },
    );
    save_manifest(&run, &mut manifest)?;
    Ok(StageOutcome::Ran { summary: produced.summary })
}

fn save_manifest(run: &Run<'_>, manifest: &mut RunManifest) -> Result<(), PipelineError> {
    manifest.format_version = MANIFEST_VERSION;
    manifest.config_digest = run.config.digest();
    manifest.template_digest = run.templates.digest();
    manifest.backend = backend_fingerprint(run.config).map(|v| v.to_string()).unwrap_or_else(|e| format!("unavailable: {e}"));
    let text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    write_atomic(&run.path(MANIFEST), text.as_bytes())
}

fn summary(pairs: &[(&str, Value)]) -> BTreeMap<String, Value> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
}

fn ingest(run: &Run<'_>) -> Result<Produced, PipelineError> {
    let path = &run.config.trip_source;
    let file = fs::File::open(path).map_err(|e| PipelineError::io(path, e))?;
    let parsed = parse_trip_records(std::io::BufReader::new(file)).map_err(PipelineError::data)?;
    let threads = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1).min(8);
    let series = aggregate_daily_demand_chunked(&parsed.records, &run.config.venue, run.config.span(), threads);
    let mut buf = Vec::new();
    write_daily_demand(&mut buf, &series).map_err(PipelineError::data)?;
    let mut rej = csv::Writer::from_writer(Vec::new());
    for r in &parsed.rejections {
        rej.serialize(r).map_err(PipelineError::data)?;
    }
    let rej = rej.into_inner().map_err(PipelineError::data)?;
    if !parsed.rejections.is_empty() {
        log::warn!("ingest: {} row(s) rejected, see {INGEST_REJECTIONS}", parsed.rejections.len());
    }
    Ok(Produced {
        outputs: vec![run.write(DAILY_DEMAND, &buf)?, run.write(INGEST_REJECTIONS, &rej)?],
        summary: summary(&[
            ("trips", json!(parsed.records.len())),
            ("rejected_rows", json!(parsed.rejections.len())),
            ("days", json!(series.len())),
        ]),
        deferred: None,
    })
}

fn backend_summary(backend: &Backend) -> [(&'static str, Value); 2] {
    [("backend_calls", json!(backend.misses())), ("cache_hits", json!(backend.hits()))]
}

fn format_events(run: &Run<'_>) -> Result<Produced, PipelineError> {
    let catalog = run.catalog()?;
    let backend = build_backend(run)?;
    let formatted = format_catalog(&*backend, &run.builder(), &catalog, run.config.max_in_flight)?;
    let failures: Vec<&ParseFailure> = formatted.iter().filter_map(|(_, f)| f.as_ref()).collect();
    let mut s = summary(&[("events", json!(catalog.len())), ("fallbacks", json!(failures.len()))]);
    s.extend(backend_summary(&backend).map(|(k, v)| (k.to_string(), v)));
    Ok(Produced {
        outputs: vec![
            run.write(FORMATTED_EVENTS, &jsonl(formatted.iter().map(|(f, _)| f)))?,
            run.write(FORMAT_FAILURES, &jsonl(failures))?,
        ],
        summary: s,
        deferred: None,
    })
}

fn decompose(run: &Run<'_>) -> Result<Produced, PipelineError> {
    let series = run.daily_demand()?;
    let calendar = EventCalendar::new(&run.catalog()?, run.config.span());
    let decs = decompose_series(&series, &calendar, &run.config.baseline).map_err(PipelineError::data)?;
    let mut buf = Vec::new();
    write_decompositions(&mut buf, &decs).map_err(PipelineError::data)?;
    let event_days = decs.iter().filter(|d| calendar.is_event_day(d.date)).count();
    Ok(Produced {
        outputs: vec![run.write(DECOMPOSITION, &buf)?],
        summary: summary(&[("days", json!(decs.len())), ("event_days", json!(event_days))]),
        deferred: None,
    })
}

#[derive(Serialize, Deserialize)]
struct ReasoningRow {
    date: NaiveDate,
    pickup: u64,
    dropoff: u64,
    baseline_out: f64,
    baseline_in: f64,
    history_start: NaiveDate,
    history_end: NaiveDate,
    request_digest: String,
    fallback: bool,
    reasoning: String,
}

fn exchange_csv(predictions: &[Prediction]) -> Result<Vec<u8>, PipelineError> {
    let rows: Vec<ExchangeRow> = predictions
        .iter()
        .map(|p| ExchangeRow {
            date: p.result.date,
            pred_out: p.result.pickup as f64,
            pred_in: p.result.dropoff as f64,
            model_name: LLM_MODEL_NAME.into(),
        })
        .collect();
    let mut buf = Vec::new();
    write_predictions(&mut buf, &rows).map_err(PipelineError::data)?;
    Ok(buf)
}

fn budget_check(config: &PipelineConfig, fallbacks: usize, total: usize) -> Option<PipelineError> {
    (total > 0 && fallbacks as f64 / total as f64 > config.fallback_budget).then_some(PipelineError::FallbackBudget {
        fallbacks,
        total,
        budget: config.fallback_budget,
    })
}

fn predict(run: &Run<'_>) -> Result<Produced, PipelineError> {
    let index = run.index()?;
    let dates = run.test_dates(&index)?;
    let backend = build_backend(run)?;
    let c = run.config;
    let predictions = predict_dates(&*backend, &run.builder(), &index, &dates, &c.ablation, c.history_days, c.max_in_flight)?;

    let reasoning = predictions.iter().map(|p| ReasoningRow {
        date: p.result.date,
        pickup: p.result.pickup,
        dropoff: p.result.dropoff,
        baseline_out: p.baseline.outflow,
        baseline_in: p.baseline.inflow,
        history_start: p.history_start,
        history_end: p.history_end,
        request_digest: p.request_digest.clone(),
        fallback: p.is_fallback(),
        reasoning: p.result.reasoning.clone(),
    });
    let failures: Vec<&ParseFailure> = predictions.iter().filter_map(|p| p.failure.as_ref()).collect();
    let violations = predictions.iter().filter(|p| p.history_end >= p.result.date).count();
    let latest = predictions.iter().map(|p| p.history_end).max();
    let mut s = summary(&[
        ("predictions", json!(predictions.len())),
        ("fallbacks", json!(failures.len())),
        ("fallback_rate", json!(failures.len() as f64 / predictions.len().max(1) as f64)),
        ("causality_violations", json!(violations)),
        ("latest_history_date", json!(latest)),
    ]);
    s.extend(backend_summary(&backend).map(|(k, v)| (k.to_string(), v)));
    let outputs = vec![
        run.write(PREDICTIONS, &exchange_csv(&predictions)?)?,
        run.write(REASONING, &jsonl(reasoning))?,
        run.write(PARSE_FAILURES, &jsonl(&failures))?,
    ];
    Ok(Produced { outputs, summary: s, deferred: budget_check(c, failures.len(), predictions.len()) })
}

fn records_from_exchange(index: &DayIndex, rows: &[ExchangeRow], test: crate::dates::DateRange) -> Result<Vec<PredictionRecord>, PipelineError> {
    rows.iter()
        .map(|r| {
            if !test.contains(r.date) {
                return Err(PipelineError::Data(format!("{} prediction for {} lies outside the test range", r.model_name, r.date)));
            }
            let truth = index.actual(r.date).ok_or_else(|| PipelineError::Data(format!("no observed demand on {}", r.date)))?;
            Ok(PredictionRecord { date: r.date, truth, predicted: crate::decomposition::DemandPair::new(r.pred_out, r.pred_in) })
        })
        .collect()
}

fn report_rows<'a>(rows: &'a [(String, AblationConfig, Option<MetricsReport>)]) -> Vec<(String, AblationConfig, Option<&'a MetricsReport>)> {
    rows.iter().map(|(m, a, r)| (m.clone(), *a, r.as_ref())).collect()
}

fn plot_name(model: &str) -> String {
    let safe: String = model.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' { c.to_ascii_lowercase() } else { '_' }).collect();
    format!("plot_data_{safe}.csv")
}

fn evaluate(run: &Run<'_>) -> Result<Produced, PipelineError> {
    let c = run.config;
    let index = run.index()?;
    let test_dates = run.test_dates(&index)?;
    let calendar = index.calendar();
    let eval_err = PipelineError::data;

    let predictions_path = run.path(PREDICTIONS);
    let llm_rows = read_predictions(fs::File::open(&predictions_path).map_err(|e| PipelineError::io(&predictions_path, e))?)
        .map_err(eval_err)?;
    let mut models: Vec<(String, Option<Vec<PredictionRecord>>)> =
        vec![(LLM_MODEL_NAME.into(), Some(records_from_exchange(&index, &llm_rows, c.test_range)?))];
    models.push((HISTORICAL_AVERAGE.into(), Some(comparators::historical_average(&index, &test_dates)?)));

    let mut outputs = Vec::new();
    if comparators::applicable(&c.comparators, &c.ablation) {
        let train = index.predictable(c.train_range, c.history_days);
        for doc in comparators::fit_comparators(&index, &train, c.history_days, c.ablation, &c.comparators)? {
            outputs.push(run.write(&format!("models/{}.json", doc.name.to_lowercase()), doc.to_json().as_bytes())?);
            models.push((doc.name.clone(), Some(comparators::predict_comparator(&index, &doc, &test_dates)?)));
        }
    } else {
        models.push((LINEAR.into(), None));
        models.push((GBDT.into(), None));
    }
    let mut external: BTreeMap<String, Vec<ExchangeRow>> = BTreeMap::new();
    for path in &c.external_predictions {
        let rows = read_predictions(fs::File::open(path).map_err(|e| PipelineError::io(path, e))?).map_err(eval_err)?;
        for r in rows {
            external.entry(r.model_name.clone()).or_default().push(r);
        }
    }
    for (name, rows) in external {
        models.push((name, Some(records_from_exchange(&index, &rows, c.test_range)?)));
    }

    let mut rows = Vec::new();
    let mut s = BTreeMap::new();
    for (name, records) in &models {
        let report = match records {
            Some(r) => {
                let report = segment_report(r, calendar, name, c.ablation).map_err(eval_err)?;
                s.insert(format!("{name}_rmse"), json!(report.all_days.rmse));
                let mut buf = Vec::new();
                write_plot_data(&mut buf, r, calendar).map_err(eval_err)?;
                let file = if name == LLM_MODEL_NAME { PLOT_DATA.to_string() } else { plot_name(name) };
                outputs.push(run.write(&file, &buf)?);
                Some(report)
            }
            None => None,
        };
        rows.push((name.clone(), c.ablation, report));
    }
    let mut buf = Vec::new();
    write_report_csv(&mut buf, &report_rows(&rows)).map_err(eval_err)?;
    outputs.push(run.write(REPORT_CSV, &buf)?);
    s.insert("models".into(), json!(models.len()));
    Ok(Produced { outputs, summary: s, deferred: None })
}

fn ablate(run: &Run<'_>) -> Result<Produced, PipelineError> {
    let c = run.config;
    let index = run.index()?;
    let test_dates = run.test_dates(&index)?;
    let train_dates = index.predictable(c.train_range, c.history_days);
    let backend = build_backend(run)?;
    let builder = run.builder();
    let grid = AblationConfig::canonical_grid();
    let calendar = index.calendar();
    let mut outputs = Vec::new();
    let (mut fallbacks, mut total) = (0usize, 0usize);

    let mut llm_runs: Vec<(AblationConfig, Vec<PredictionRecord>)> = Vec::new();
    for ablation in &grid {
        let predictions = predict_dates(&*backend, &builder, &index, &test_dates, ablation, c.history_days, c.max_in_flight)?;
        fallbacks += predictions.iter().filter(|p| p.is_fallback()).count();
        total += predictions.len();
        outputs.push(run.write(&format!("ablation/predictions_{ablation}.csv"), &exchange_csv(&predictions)?)?);
        let records = predictions
            .iter()
            .map(|p| {
                let truth = index.actual(p.result.date).expect("test dates have observed demand");
                PredictionRecord {
                    date: p.result.date,
                    truth,
                    predicted: crate::decomposition::DemandPair::new(p.result.pickup as f64, p.result.dropoff as f64),
                }
            })
            .collect();
        llm_runs.push((*ablation, records));
    }

    let mut rows: Vec<(String, AblationConfig, Option<MetricsReport>)> = Vec::new();
    let llm = run_ablation(
        &grid,
        |a: &AblationConfig| -> Result<_, PipelineError> {
            Ok(llm_runs.iter().find(|(b, _)| b == a).map(|(_, r)| r.clone()))
        },
        calendar,
        LLM_MODEL_NAME,
    )
    .map_err(PipelineError::data)?;
    rows.extend(llm.into_iter().map(|r| (LLM_MODEL_NAME.to_string(), r.ablation, r.report)));

    let mut fitted: BTreeMap<(String, String), Vec<PredictionRecord>> = BTreeMap::new();
    for ablation in &grid {
        if !comparators::applicable(&c.comparators, ablation) {
            continue;
        }
        for doc in comparators::fit_comparators(&index, &train_dates, c.history_days, *ablation, &c.comparators)? {
            let records = comparators::predict_comparator(&index, &doc, &test_dates)?;
            fitted.insert((doc.name.clone(), ablation.to_string()), records);
        }
    }
    for model in [LINEAR, GBDT] {
        let reports = run_ablation(
            &grid,
            |a: &AblationConfig| -> Result<_, PipelineError> { Ok(fitted.get(&(model.to_string(), a.to_string())).cloned()) },
            calendar,
            model,
        )
        .map_err(PipelineError::data)?;
        rows.extend(reports.into_iter().map(|r| (model.to_string(), r.ablation, r.report)));
    }

    let mut buf = Vec::new();
    write_report_csv(&mut buf, &report_rows(&rows)).map_err(PipelineError::data)?;
    outputs.push(run.write(ABLATION_CSV, &buf)?);
    let mut s = summary(&[("configurations", json!(grid.len())), ("predictions", json!(total)), ("fallbacks", json!(fallbacks))]);
    s.extend(backend_summary(&backend).map(|(k, v)| (k.to_string(), v)));
    Ok(Produced { outputs, summary: s, deferred: budget_check(c, fallbacks, total) })
}

fn markdown_table(path: &Path, with_ablation: bool) -> Result<String, PipelineError> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| PipelineError::io(path, e))?;
    let mut out = String::new();
    out.push_str(if with_ablation { "| Model | Ablation | Segment | n | RMSE | MAE | MAPE | R² |\n|---|---|---|---:|---:|---:|---:|---:|\n" } else {
        "| Model | Segment | n | RMSE | MAE | MAPE | R² |\n|---|---|---:|---:|---:|---:|---:|\n"
    });
    for rec in reader.records() {
        let rec = rec.map_err(|e| PipelineError::Data(format!("{}: {e}", path.display())))?;
        let f = |i: usize| rec.get(i).unwrap_or("");
        if !matches!(f(2), "all" | "event" | "non_event") {
            continue;
        }
        let cell = |i: usize| match f(i) {
            "" => "-".to_string(),
            v => v.parse::<f64>().map(|x| format!("{x:.3}")).unwrap_or_else(|_| v.to_string()),
        };
        let segment = f(2).replace('_', "-");
        match with_ablation {
            true => out.push_str(&format!(
                "| {} | {} | {segment} | {} | {} | {} | {} | {} |\n",
                f(0), f(1), f(3), cell(4), cell(5), cell(6), cell(7)
            )),
            false => out.push_str(&format!(
                "| {} | {segment} | {} | {} | {} | {} | {} |\n",
                f(0), f(3), cell(4), cell(5), cell(6), cell(7)
            )),
        }
    }
    Ok(out)
}

fn report(run: &Run<'_>, manifest: &RunManifest) -> Result<Produced, PipelineError> {
    let c = run.config;
    let mut md = format!(
        "# Demand prediction report: {}\n\nTest period {} to {}, {}-day history window, prompt features `{}`.\n\n",
        c.venue.name,
        c.test_range.start(),
        c.test_range.end(),
        c.history_days,
        c.ablation
    );
    if let Some(p) = manifest.stage(Stage::Predict) {
        let get = |k: &str| p.summary.get(k).and_then(Value::as_u64).unwrap_or(0);
        md.push_str(&format!("Baseline fallbacks: {} of {} predictions.\n\n", get("fallbacks"), get("predictions")));
    }
    md.push_str("## Models\n\nMAPE is a fraction; `-` marks a segment or model that does not apply.\n\n");
    md.push_str(&markdown_table(&run.path(REPORT_CSV), false)?);
    let ablation = run.path(ABLATION_CSV);
    if ablation.exists() {
        md.push_str("\n## Feature ablation\n\n");
        md.push_str(&markdown_table(&ablation, true)?);
    }
    Ok(Produced { outputs: vec![run.write(REPORT_MD, md.as_bytes())?], summary: BTreeMap::new(), deferred: None })
}
