use std::collections::BTreeMap;

use chrono::{Duration, NaiveDate};

use super::PipelineError;
use crate::dates::DateRange;
use crate::decomposition::{history_from, weekday_baseline, BaselineConfig, DemandDecomposition, DemandHistory, DemandPair};
use crate::events::{EventCalendar, EventRecord, FormattedEvent};
use crate::prompt::{DayContext, DayEvent, HistoryWindow};
use crate::trips::DailyDemand;

/// Everything known about each day: observed demand, its decomposition,
/// scheduled events and their formatted summaries.
#[derive(Debug, Clone)]
pub struct DayIndex {
    history: DemandHistory,
    decompositions: BTreeMap<NaiveDate, DemandDecomposition>,
    calendar: EventCalendar,
    formatted: BTreeMap<String, FormattedEvent>,
    baseline: BaselineConfig,
}

impl DayIndex {
    pub fn new(
        series: &[DailyDemand],
        decompositions: &[DemandDecomposition],
        catalog: &[EventRecord],
        formatted: &[FormattedEvent],
        coverage: DateRange,
        baseline: BaselineConfig,
    ) -> Self {
        DayIndex {
            history: history_from(series),
            decompositions: decompositions.iter().map(|d| (d.date, *d)).collect(),
            calendar: EventCalendar::new(catalog, coverage),
            formatted: formatted.iter().map(|f| (f.source.digest(), f.clone())).collect(),
            baseline,
        }
    }

    pub fn calendar(&self) -> &EventCalendar {
        &self.calendar
    }

    pub fn actual(&self, date: NaiveDate) -> Option<DailyDemand> {
        self.history.get(&date).copied()
    }

    pub fn decomposition(&self, date: NaiveDate) -> Option<&DemandDecomposition> {
        self.decompositions.get(&date)
    }

    pub fn events(&self, date: NaiveDate) -> Result<Vec<DayEvent>, PipelineError> {
        let day = self.calendar.day(date).map_err(PipelineError::data)?;
        Ok(day
            .events
            .into_iter()
            .map(|record| DayEvent { formatted: self.formatted.get(&record.digest()).cloned(), record })
            .collect())
    }

    /// The target day as the model sees it: its events, never its demand.
    pub fn target(&self, date: NaiveDate) -> Result<DayContext, PipelineError> {
        Ok(DayContext { date, events: self.events(date)?, decomposition: None })
    }

    /// The `history_days` days before `target`, each with its decomposition.
    pub fn window(&self, target: NaiveDate, history_days: usize) -> Result<HistoryWindow, PipelineError> {
        let days = (1..=history_days as i64)
            .rev()
            .map(|k| {
                let date = target - Duration::days(k);
                let dec = self.decompositions.get(&date).ok_or_else(|| {
                    PipelineError::Argument(format!(
                        "insufficient history for {target}: no decomposed demand on {date} (need {history_days} prior days)"
                    ))
                })?;
                Ok(DayContext { date, events: self.events(date)?, decomposition: Some(*dec) })
            })
            .collect::<Result<Vec<_>, PipelineError>>()?;
        HistoryWindow::new(days, history_days, target).map_err(PipelineError::data)
    }

    /// Regular (no-event) demand expected on `target`, from days before it.
    pub fn baseline(&self, target: NaiveDate) -> Result<DemandPair, PipelineError> {
        weekday_baseline(&self.history, &self.calendar, target, &self.baseline).map_err(|e| PipelineError::Argument(e.to_string()))
    }

    /// Dates of `range` that have a full window of `history_days` before them
    /// and observed demand themselves.
    pub fn predictable(&self, range: DateRange, history_days: usize) -> Vec<NaiveDate> {
        range
            .days()
            .filter(|d| self.history.contains_key(d))
            .filter(|d| (1..=history_days as i64).all(|k| self.decompositions.contains_key(&(*d - Duration::days(k)))))
            .collect()
    }
}
