//! Stage-oriented orchestration: ingest, event formatting, decomposition,
//! next-day prediction, evaluation, ablation and reporting, with a run
//! manifest that turns unchanged reruns into no-ops.

pub mod bundle;
pub mod comparators;
pub mod config;
pub mod context;
pub mod predict;
pub mod stages;

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::llm::LlmError;

pub use config::{BackendKind, BackendSection, ComparatorSettings, Overrides, PipelineConfig};
pub use context::DayIndex;
pub use predict::{format_catalog, format_event, predict_dates, predict_next_day, Prediction};
pub use stages::{plan, run_stage, run_stage_with, RunManifest, StageOutcome};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("stage `{stage}` needs {artifact}; run `{run_first}` first")]
    Precondition { stage: Stage, artifact: String, run_first: Stage },
    #[error("backend error: {0}")]
    Backend(#[from] LlmError),
    #[error("{fallbacks} of {total} predictions fell back to the baseline, above the budget of {budget}")]
    FallbackBudget { fallbacks: usize, total: usize, budget: f64 },
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("i/o error on {path}: {message}")]
    Io { path: String, message: String },
}

impl PipelineError {
    /// Process exit status for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::Precondition { .. } => 3,
            PipelineError::Backend(_) => 4,
            PipelineError::FallbackBudget { .. } => 5,
            PipelineError::Argument(_) | PipelineError::Data(_) | PipelineError::Io { .. } => 1,
        }
    }

    pub(crate) fn data(e: impl fmt::Display) -> Self {
        PipelineError::Data(e.to_string())
    }

    pub(crate) fn io(path: &std::path::Path, e: impl fmt::Display) -> Self {
        PipelineError::Io { path: path.display().to_string(), message: e.to_string() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stage {
    Ingest,
    FormatEvents,
    Decompose,
    Predict,
    Evaluate,
    Ablate,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 7] =
        [Stage::Ingest, Stage::FormatEvents, Stage::Decompose, Stage::Predict, Stage::Evaluate, Stage::Ablate, Stage::Report];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::FormatEvents => "format_events",
            Stage::Decompose => "decompose",
            Stage::Predict => "predict",
            Stage::Evaluate => "evaluate",
            Stage::Ablate => "ablate",
            Stage::Report => "report",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.replace('-', "_");
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| PipelineError::Config(format!("unknown stage {s:?}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_names_round_trip() {
        for s in Stage::ALL {
            assert_eq!(s.name().parse::<Stage>().unwrap(), s);
        }
        assert_eq!("format-events".parse::<Stage>().unwrap(), Stage::FormatEvents);
        assert!("train".parse::<Stage>().is_err());
    }

    #[test]
    fn exit_codes() {
        assert_eq!(PipelineError::Config("x".into()).exit_code(), 2);
        let p = PipelineError::Precondition { stage: Stage::Predict, artifact: "decomposition.csv".into(), run_first: Stage::Decompose };
        assert_eq!(p.exit_code(), 3);
        assert_eq!(p.to_string(), "stage `predict` needs decomposition.csv; run `decompose` first");
        assert_eq!(PipelineError::Backend(LlmError::Config("x".into())).exit_code(), 4);
        assert_eq!(PipelineError::FallbackBudget { fallbacks: 3, total: 5, budget: 0.2 }.exit_code(), 5);
    }
}
