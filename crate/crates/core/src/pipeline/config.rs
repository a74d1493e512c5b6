use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::baselines::GbdtParams;
use crate::dates::DateRange;
use crate::decomposition::BaselineConfig;
use crate::prompt::{AblationConfig, DEFAULT_HISTORY_DAYS};
use crate::trips::VenueConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    /// Live chat-completions endpoint behind the response cache.
    Live,
    /// Scripted replies from `mock_script`, behind the response cache.
    Mock,
    /// Replay from the response cache only; a miss is an error.
    Cache,
    /// The built-in prompt-reading heuristic, behind the response cache.
    Heuristic,
}

impl std::str::FromStr for BackendKind {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "live" => Ok(BackendKind::Live),
            "mock" => Ok(BackendKind::Mock),
            "cache" => Ok(BackendKind::Cache),
            "heuristic" => Ok(BackendKind::Heuristic),
            other => Err(PipelineError::Config(format!("unknown backend {other:?} (expected live, mock, cache or heuristic)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendSection {
    pub kind: BackendKind,
    pub model: String,
    pub mock_script: Option<PathBuf>,
    pub base_url: String,
    pub timeout_s: f64,
    pub max_retries: u32,
    pub retry_backoff_s: f64,
}

impl Default for BackendSection {
    fn default() -> Self {
        BackendSection {
            kind: BackendKind::Mock,
            model: "gpt-4".into(),
            mock_script: None,
            base_url: "https://api.openai.com".into(),
            timeout_s: 60.0,
            max_retries: 3,
            retry_backoff_s: 2.0,
        }
    }
}

/// Settings of the classical comparators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ComparatorSettings {
    pub ridge_lambda: f64,
    pub gbdt: GbdtParams,
    pub time_bins: usize,
    pub text_dim: usize,
    /// Whether the comparators may use formatted event summaries. When off,
    /// their `c_t_h_prime` rows are reported as not applicable.
    pub use_formatted_text: bool,
}

impl Default for ComparatorSettings {
    fn default() -> Self {
        ComparatorSettings { ridge_lambda: 1.0, gbdt: GbdtParams::default(), time_bins: 24, text_dim: 32, use_formatted_text: false }
    }
}

fn default_history_days() -> usize {
    DEFAULT_HISTORY_DAYS
}
fn default_cache_dir() -> PathBuf {
    PathBuf::from("cache")
}
fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}
fn default_ablation() -> String {
    AblationConfig::full().to_string()
}
fn default_in_flight() -> usize {
    4
}
fn default_budget() -> f64 {
    0.2
}

/// The TOML document as written.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    venue: VenueConfig,
    trip_source: PathBuf,
    event_source: PathBuf,
    train_range: DateRange,
    test_range: DateRange,
    #[serde(default = "default_history_days")]
    history_days: usize,
    #[serde(default)]
    baseline: BaselineConfig,
    #[serde(default)]
    backend: BackendSection,
    #[serde(default = "default_cache_dir")]
    cache_dir: PathBuf,
    #[serde(default = "default_output_dir")]
    output_dir: PathBuf,
    #[serde(default = "default_ablation")]
    ablation: String,
    #[serde(default = "default_in_flight")]
    max_in_flight: usize,
    #[serde(default = "default_budget")]
    fallback_budget: f64,
    #[serde(default)]
    prompt_dir: Option<PathBuf>,
    #[serde(default)]
    comparators: ComparatorSettings,
    #[serde(default)]
    external_predictions: Vec<PathBuf>,
}

/// Validated pipeline configuration. Relative paths are resolved against
/// the directory of the configuration file.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PipelineConfig {
    pub venue: VenueConfig,
    pub trip_source: PathBuf,
    pub event_source: PathBuf,
    pub train_range: DateRange,
    pub test_range: DateRange,
    pub history_days: usize,
    pub baseline: BaselineConfig,
    pub backend: BackendSection,
    pub cache_dir: PathBuf,
    pub output_dir: PathBuf,
    pub ablation: AblationConfig,
    pub max_in_flight: usize,
    /// Largest tolerated share of predictions that fell back to the baseline.
    pub fallback_budget: f64,
    pub prompt_dir: Option<PathBuf>,
    pub comparators: ComparatorSettings,
    /// Prediction exchange files from other models to include in `evaluate`.
    pub external_predictions: Vec<PathBuf>,
}

/// Command-line overrides, applied after loading.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub output_dir: Option<PathBuf>,
    pub backend: Option<BackendKind>,
    pub mock_script: Option<PathBuf>,
    pub ablation: Option<AblationConfig>,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::Config(format!("cannot read {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, base)
    }

    pub fn from_toml(text: &str, base: &Path) -> Result<Self, PipelineError> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        let resolve = |p: PathBuf| if p.is_absolute() { p } else { base.join(p) };
        let ablation = raw.ablation.parse().map_err(|e: crate::prompt::PromptError| PipelineError::Config(e.to_string()))?;
        let mut backend = raw.backend;
        backend.mock_script = backend.mock_script.map(resolve);
        let config = PipelineConfig {
            venue: raw.venue,
            trip_source: resolve(raw.trip_source),
            event_source: resolve(raw.event_source),
            train_range: raw.train_range,
            test_range: raw.test_range,
            history_days: raw.history_days,
            baseline: raw.baseline,
            backend,
            cache_dir: resolve(raw.cache_dir),
            output_dir: resolve(raw.output_dir),
            ablation,
            max_in_flight: raw.max_in_flight,
            fallback_budget: raw.fallback_budget,
            prompt_dir: raw.prompt_dir.map(resolve),
            comparators: raw.comparators,
            external_predictions: raw.external_predictions.into_iter().map(resolve).collect(),
        };
        config.validate()?;
        Ok(config)
    }

    pub fn apply(&mut self, overrides: Overrides) -> Result<(), PipelineError> {
        if let Some(p) = overrides.output_dir {
            self.output_dir = p;
        }
        if let Some(b) = overrides.backend {
            self.backend.kind = b;
        }
        if let Some(s) = overrides.mock_script {
            self.backend.mock_script = Some(s);
        }
        if let Some(a) = overrides.ablation {
            self.ablation = a;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        self.venue.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        self.baseline.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        if self.train_range.end() >= self.test_range.start() {
            return bad(format!(
                "train_range must end before test_range begins ({} >= {})",
                self.train_range.end(),
                self.test_range.start()
            ));
        }
        if self.history_days == 0 {
            return bad("history_days must be positive".into());
        }
        if self.max_in_flight == 0 {
            return bad("max_in_flight must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.fallback_budget) {
            return bad(format!("fallback_budget must be within [0, 1], got {}", self.fallback_budget));
        }
        if self.backend.kind == BackendKind::Mock && self.backend.mock_script.is_none() {
            return bad("backend kind \"mock\" needs backend.mock_script".into());
        }
        if self.backend.model.trim().is_empty() {
            return bad("backend.model is empty".into());
        }
        Ok(())
    }

    /// The whole covered period, from the first training day to the last
    /// test day.
    pub fn span(&self) -> DateRange {
        DateRange::new(self.train_range.start(), self.test_range.end()).expect("train precedes test")
    }

    /// Stable digest of every setting that can change an output.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        hex::encode(Sha256::digest(serde_json::to_string(self).expect("config serializes").as_bytes()))
    }
}
