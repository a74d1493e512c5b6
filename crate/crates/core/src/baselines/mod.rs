//! Classical comparators over a shared day-level feature vector: the
//! historical (weekday) average, ridge/OLS regression and gradient-boosted
//! regression trees.

pub mod features;
pub mod gbdt;
pub mod linear;
pub mod text;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use features::{featurize_day, FeaturizerConfig};
pub use gbdt::{fit_gbdt, predict_gbdt, GbdtModel, GbdtParams};
pub use linear::{fit_linear, predict_linear, LinearModel};
pub use text::hashed_text_vector;

use crate::prompt::AblationConfig;

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("model document error: {0}")]
    Document(String),
}

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelBody {
    Linear { pickup: LinearModel, dropoff: LinearModel },
    Gbdt { params: GbdtParams, pickup: GbdtModel, dropoff: GbdtModel },
}

/// Self-describing persisted model: one single-output model per flow.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDocument {
    pub format_version: u32,
    pub name: String,
    pub featurizer: FeaturizerConfig,
    pub feature_names: Vec<String>,
    pub model: ModelBody,
}

impl ModelDocument {
    pub fn new(name: impl Into<String>, featurizer: FeaturizerConfig, model: ModelBody) -> Self {
        ModelDocument {
            format_version: MODEL_FORMAT_VERSION,
            name: name.into(),
            feature_names: featurizer.feature_names(),
            featurizer,
            model,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, BaselineError> {
        let doc: ModelDocument = serde_json::from_str(text).map_err(|e| BaselineError::Document(e.to_string()))?;
        if doc.format_version != MODEL_FORMAT_VERSION {
            return Err(BaselineError::Document(format!("unsupported format version {}", doc.format_version)));
        }
        Ok(doc)
    }

    /// Predicts the (pickup, dropoff) targets for one feature vector.
    pub fn predict(&self, x: &[f64]) -> Result<(f64, f64), BaselineError> {
        match &self.model {
            ModelBody::Linear { pickup, dropoff } => Ok((predict_linear(pickup, x)?, predict_linear(dropoff, x)?)),
            ModelBody::Gbdt { pickup, dropoff, .. } => Ok((predict_gbdt(pickup, x)?, predict_gbdt(dropoff, x)?)),
        }
    }

    pub fn ablation(&self) -> AblationConfig {
        self.featurizer.ablation
    }
}
