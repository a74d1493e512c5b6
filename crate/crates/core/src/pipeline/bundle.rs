//! Self-contained synthetic dataset: trips, events, a configuration and a
//! mock script recorded from the heuristic backend, so the whole pipeline
//! runs offline and byte-for-byte reproducibly.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::Duration;

use super::stages::{run_stage_with, write_atomic};
use super::{BackendKind, PipelineConfig, PipelineError, Stage};
use crate::events::write_event_records;
use crate::llm::{ChatBackend, RecordingBackend};
use crate::synthetic::{generate, generate_trips, write_trips_csv, HeuristicBackend, SyntheticConfig};

pub const BUNDLE_CONFIG: &str = "config.toml";
pub const BUNDLE_TRIPS: &str = "trips.csv";
pub const BUNDLE_EVENTS: &str = "events.json";
pub const BUNDLE_SCRIPT: &str = "mock_script.json";

/// Every 500th trip row is a null-island sentinel, exercising the
/// ingest rejection path.
const SENTINEL_EVERY: usize = 500;

#[derive(Debug, Clone)]
pub struct BundleOptions {
    pub synthetic: SyntheticConfig,
    pub test_days: usize,
    pub history_days: usize,
    /// Record the mock script. Without it the bundle can still be run with
    /// the heuristic backend.
    pub record_script: bool,
}

impl Default for BundleOptions {
    fn default() -> Self {
        BundleOptions { synthetic: SyntheticConfig { days: 240, ..SyntheticConfig::default() }, test_days: 60, history_days: 28, record_script: true }
    }
}

fn config_text(options: &BundleOptions) -> String {
    let start = options.synthetic.start;
    let last = start + Duration::days(options.synthetic.days as i64 - 1);
    let test_start = last - Duration::days(options.test_days as i64 - 1);
    let train_end = test_start - Duration::days(1);
    format!(
        r#"trip_source = "{BUNDLE_TRIPS}"
event_source = "{BUNDLE_EVENTS}"
train_range = ["{start}", "{train_end}"]
test_range = ["{test_start}", "{last}"]
history_days = {history}
ablation = "c_t_h_prime+r_i"
output_dir = "out"
cache_dir = "cache"

[venue]
name = "Barclays Center"
center = {{ lat = 40.6826, lon = -73.9754 }}
radius_m = 220.0
timezone = "America/New_York"

[backend]
kind = "mock"
model = "gpt-4"
mock_script = "{BUNDLE_SCRIPT}"

[comparators]
use_formatted_text = true
"#,
        history = options.history_days
    )
}

/// Writes the bundle into `dir` and returns the configuration path.
pub fn write_bundle(dir: &Path, options: &BundleOptions) -> Result<PathBuf, PipelineError> {
    let s = &options.synthetic;
    if s.days < options.test_days + 2 * options.history_days + 7 || options.test_days == 0 {
        return Err(PipelineError::Argument(format!(
            "{} days cannot hold a {}-day test period after {} days of history plus training",
            s.days, options.test_days, options.history_days
        )));
    }
    fs::create_dir_all(dir).map_err(|e| PipelineError::io(dir, e))?;
    let dataset = generate(s);
    let trips = generate_trips(&dataset, s.seed);
    let mut buf = Vec::new();
    write_trips_csv(&mut buf, &trips, SENTINEL_EVERY).map_err(|e| PipelineError::io(&dir.join(BUNDLE_TRIPS), e))?;
    write_atomic(&dir.join(BUNDLE_TRIPS), &buf)?;
    write_atomic(&dir.join(BUNDLE_EVENTS), write_event_records(&dataset.events).as_bytes())?;
    let config_path = dir.join(BUNDLE_CONFIG);
    write_atomic(&config_path, config_text(options).as_bytes())?;

    if !options.record_script {
        return Ok(config_path);
    }
    // Record every reply the bundled run will ask for by running the
    // backend stages once against the heuristic backend.
    let scratch = dir.join(".recording");
    if scratch.exists() {
        fs::remove_dir_all(&scratch).map_err(|e| PipelineError::io(&scratch, e))?;
    }
    let mut config = PipelineConfig::from_toml(&config_text(options), dir)?;
    config.backend.kind = BackendKind::Heuristic;
    config.output_dir = scratch.join("out");
    config.cache_dir = scratch.join("cache");
    let recorder = Arc::new(RecordingBackend::new(HeuristicBackend));
    let injected: Arc<dyn ChatBackend> = recorder.clone();
    for stage in [Stage::Ingest, Stage::FormatEvents, Stage::Decompose, Stage::Predict, Stage::Ablate] {
        run_stage_with(stage, &config, Some(Arc::clone(&injected)))?;
    }
    write_atomic(&dir.join(BUNDLE_SCRIPT), recorder.script().to_json().as_bytes())?;
    fs::remove_dir_all(&scratch).map_err(|e| PipelineError::io(&scratch, e))?;
    Ok(config_path)
}
