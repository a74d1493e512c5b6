//! Fitting and running the classical comparators over a [`DayIndex`].
//!
//! Under decomposed demand the models learn the deviation and the final
//! prediction adds the day's baseline back; under raw demand they learn the
//! observed counts directly.

use chrono::NaiveDate;

use super::{ComparatorSettings, DayIndex, PipelineError};
use crate::baselines::{fit_gbdt, fit_linear, featurize_day, FeaturizerConfig, ModelBody, ModelDocument};
use crate::decomposition::DemandPair;
use crate::evaluation::PredictionRecord;
use crate::prompt::{AblationConfig, DemandFeatures, EventFeatures};

pub const HISTORICAL_AVERAGE: &str = "HA";
pub const LINEAR: &str = "LR";
pub const GBDT: &str = "GBDT";

pub fn featurizer(settings: &ComparatorSettings, history_days: usize, ablation: AblationConfig) -> FeaturizerConfig {
    FeaturizerConfig { lag_days: history_days, time_bins: settings.time_bins, text_dim: settings.text_dim, ablation }
}

/// Whether the comparators take part at this ablation level.
pub fn applicable(settings: &ComparatorSettings, ablation: &AblationConfig) -> bool {
    ablation.event_features != EventFeatures::CountTimeFormatted || settings.use_formatted_text
}

fn features(index: &DayIndex, date: NaiveDate, config: &FeaturizerConfig) -> Result<Vec<f64>, PipelineError> {
    let window = index.window(date, config.lag_days)?;
    featurize_day(&window, &index.target(date)?, config).map_err(PipelineError::data)
}

fn target_value(index: &DayIndex, date: NaiveDate, demand: DemandFeatures) -> Result<DemandPair, PipelineError> {
    let dec = index.decomposition(date).ok_or_else(|| PipelineError::Argument(format!("no decomposed demand on {date}")))?;
    Ok(match demand {
        DemandFeatures::Decomposed => dec.deviation,
        DemandFeatures::Original => DemandPair::from(dec.actual),
    })
}

/// Fits the linear and boosted-tree models on `train_dates`.
pub fn fit_comparators(
    index: &DayIndex,
    train_dates: &[NaiveDate],
    history_days: usize,
    ablation: AblationConfig,
    settings: &ComparatorSettings,
) -> Result<Vec<ModelDocument>, PipelineError> {
    if train_dates.is_empty() {
        return Err(PipelineError::Argument("no training days with a full history window".into()));
    }
    let config = featurizer(settings, history_days, ablation);
    let mut x = Vec::with_capacity(train_dates.len());
    let (mut y_out, mut y_in) = (Vec::new(), Vec::new());
    for date in train_dates {
        x.push(features(index, *date, &config)?);
        let y = target_value(index, *date, ablation.demand_features)?;
        y_out.push(y.outflow);
        y_in.push(y.inflow);
    }
    let numeric = PipelineError::data;
    let linear = ModelBody::Linear {
        pickup: fit_linear(&x, &y_out, settings.ridge_lambda).map_err(numeric)?,
        dropoff: fit_linear(&x, &y_in, settings.ridge_lambda).map_err(numeric)?,
    };
    let gbdt = ModelBody::Gbdt {
        params: settings.gbdt,
        pickup: fit_gbdt(&x, &y_out, &settings.gbdt).map_err(numeric)?,
        dropoff: fit_gbdt(&x, &y_in, &settings.gbdt).map_err(numeric)?,
    };
    Ok(vec![ModelDocument::new(LINEAR, config, linear), ModelDocument::new(GBDT, config, gbdt)])
}

fn record(index: &DayIndex, date: NaiveDate, predicted: DemandPair) -> Result<PredictionRecord, PipelineError> {
    let truth = index.actual(date).ok_or_else(|| PipelineError::Argument(format!("no observed demand on {date}")))?;
    Ok(PredictionRecord { date, truth, predicted })
}

pub fn predict_comparator(index: &DayIndex, model: &ModelDocument, dates: &[NaiveDate]) -> Result<Vec<PredictionRecord>, PipelineError> {
    dates
        .iter()
        .map(|date| {
            let x = features(index, *date, &model.featurizer)?;
            let (out, inn) = model.predict(&x).map_err(PipelineError::data)?;
            let raw = DemandPair::new(out, inn);
            let predicted = match model.featurizer.ablation.demand_features {
                DemandFeatures::Decomposed => index.baseline(*date)? + raw,
                DemandFeatures::Original => raw,
            };
            record(index, *date, predicted)
        })
        .collect()
}

/// The regular (same-weekday, no-event) level as the prediction.
pub fn historical_average(index: &DayIndex, dates: &[NaiveDate]) -> Result<Vec<PredictionRecord>, PipelineError> {
    dates.iter().map(|d| record(index, *d, index.baseline(*d)?)).collect()
}
