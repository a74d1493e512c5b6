//! Splits observed daily demand into a regular same-weekday baseline and the
//! irregular deviation left over once that baseline is removed.

use std::collections::BTreeMap;
use std::io::Write;
use std::ops::{Add, Sub};

use chrono::{Datelike, Duration, NaiveDate};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::events::EventCalendar;
use crate::trips::DailyDemand;

#[derive(Debug, Error)]
pub enum DecompositionError {
    #[error("no history strictly before {0}")]
    EmptyHistory(NaiveDate),
    #[error("invalid baseline config: {0}")]
    Config(String),
    #[error("baseline must be non-negative, got ({0}, {1})")]
    NegativeBaseline(f64, f64),
    #[error("failed to write decomposition: {0}")]
    Write(String),
}

/// Real-valued (outflow, inflow) pair.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DemandPair {
    pub outflow: f64,
    pub inflow: f64,
}

impl DemandPair {
    pub const ZERO: DemandPair = DemandPair { outflow: 0.0, inflow: 0.0 };

    pub fn new(outflow: f64, inflow: f64) -> Self {
        DemandPair { outflow, inflow }
    }

    pub fn map(self, f: impl Fn(f64) -> f64) -> Self {
        DemandPair { outflow: f(self.outflow), inflow: f(self.inflow) }
    }
}

impl From<DailyDemand> for DemandPair {
    fn from(d: DailyDemand) -> Self {
        DemandPair { outflow: d.outflow as f64, inflow: d.inflow as f64 }
    }
}

impl Add for DemandPair {
    type Output = DemandPair;
    fn add(self, rhs: DemandPair) -> DemandPair {
        DemandPair { outflow: self.outflow + rhs.outflow, inflow: self.inflow + rhs.inflow }
    }
}

impl Sub for DemandPair {
    type Output = DemandPair;
    fn sub(self, rhs: DemandPair) -> DemandPair {
        DemandPair { outflow: self.outflow - rhs.outflow, inflow: self.inflow - rhs.inflow }
    }
}

/// What to average when too few same-weekday non-event days are found
/// inside the lookback.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineFallback {
    /// Keep scanning same-weekday non-event days beyond the lookback.
    #[default]
    ExpandWindow,
    /// All prior non-event days, any weekday.
    AllHistory,
    /// All prior same-weekday days, event days included.
    GlobalWeekdayMean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineConfig {
    pub lookback_weeks: u32,
    pub min_samples: u32,
    pub fallback: BaselineFallback,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig { lookback_weeks: 8, min_samples: 2, fallback: BaselineFallback::ExpandWindow }
    }
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<(), DecompositionError> {
        if self.lookback_weeks == 0 {
            return Err(DecompositionError::Config("lookback_weeks must be at least 1".into()));
        }
        if self.min_samples == 0 {
            return Err(DecompositionError::Config("min_samples must be at least 1".into()));
        }
        Ok(())
    }
}

/// Date-indexed demand observations. Gaps are allowed.
pub type DemandHistory = BTreeMap<NaiveDate, DailyDemand>;

pub fn history_from(series: &[DailyDemand]) -> DemandHistory {
    series.iter().map(|d| (d.date, *d)).collect()
}

fn mean<'a>(days: impl Iterator<Item = &'a DailyDemand>) -> Option<DemandPair> {
    let (sum, n) = days.fold((DemandPair::ZERO, 0usize), |(s, n), d| (s + DemandPair::from(*d), n + 1));
    (n > 0).then(|| sum.map(|v| v / n as f64))
}

/// Mean demand of the same weekday over the trailing `lookback_weeks`,
/// skipping event days and anything on or after `target`.
pub fn weekday_baseline(
    history: &DemandHistory,
    calendar: &EventCalendar,
    target: NaiveDate,
    config: &BaselineConfig,
) -> Result<DemandPair, DecompositionError> {
    config.validate()?;
    let prior = history.range(..target);
    if prior.clone().next().is_none() {
        return Err(DecompositionError::EmptyHistory(target));
    }
    let is_quiet = |d: &&DailyDemand| !calendar.is_event_day(d.date);

    let in_window: Vec<&DailyDemand> = (1..=config.lookback_weeks as i64)
        .filter_map(|w| history.get(&(target - Duration::weeks(w))))
        .filter(is_quiet)
        .collect();
    if in_window.len() >= config.min_samples as usize {
        return Ok(mean(in_window.into_iter()).expect("non-empty"));
    }

    let weekday = target.weekday();
    let same_weekday = move |d: &&DailyDemand| d.date.weekday() == weekday;
    let all_prior = || prior.clone().map(|(_, d)| d);
    let fallback = match config.fallback {
        BaselineFallback::ExpandWindow => mean(all_prior().filter(same_weekday).filter(is_quiet))
            .or_else(|| mean(all_prior().filter(is_quiet))),
        BaselineFallback::AllHistory => mean(all_prior().filter(is_quiet)),
        BaselineFallback::GlobalWeekdayMean => mean(all_prior().filter(same_weekday)),
    };
    // Every fallback degrades to the plain mean of all prior days.
    Ok(fallback.or_else(|| mean(all_prior())).expect("prior history is non-empty"))
}

/// Actual demand split into baseline and deviation for one day.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DemandDecomposition {
    pub date: NaiveDate,
    pub actual: DailyDemand,
    pub baseline: DemandPair,
    pub deviation: DemandPair,
}

// Baselines are snapped to this dyadic grid so that `actual - baseline` is
// exact in f64 and `baseline + deviation` reproduces `actual` bit-for-bit.
const GRID: f64 = (1u64 << 20) as f64;

fn snap(v: f64) -> f64 {
    (v * GRID).round() / GRID
}

pub fn decompose(actual: DailyDemand, baseline: DemandPair) -> Result<DemandDecomposition, DecompositionError> {
    if !(baseline.outflow >= 0.0 && baseline.inflow >= 0.0) {
        return Err(DecompositionError::NegativeBaseline(baseline.outflow, baseline.inflow));
    }
    let baseline = baseline.map(snap);
    Ok(DemandDecomposition { date: actual.date, actual, baseline, deviation: DemandPair::from(actual) - baseline })
}

pub fn recompose(decomposition: &DemandDecomposition) -> DemandPair {
    decomposition.baseline + decomposition.deviation
}

/// Decomposes every day of `series` against a causal baseline. Days with no
/// prior history (the first day) are skipped.
pub fn decompose_series(
    series: &[DailyDemand],
    calendar: &EventCalendar,
    config: &BaselineConfig,
) -> Result<Vec<DemandDecomposition>, DecompositionError> {
    let history = history_from(series);
    let mut out = Vec::with_capacity(series.len());
    for day in series {
        match weekday_baseline(&history, calendar, day.date, config) {
            Ok(b) => out.push(decompose(*day, b)?),
            Err(DecompositionError::EmptyHistory(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct DecompositionRow {
    date: NaiveDate,
    actual_out: u64,
    actual_in: u64,
    baseline_out: f64,
    baseline_in: f64,
    dev_out: f64,
    dev_in: f64,
}

pub fn write_decompositions<W: Write>(out: W, rows: &[DemandDecomposition]) -> Result<(), DecompositionError> {
    let mut w = csv::Writer::from_writer(out);
    for d in rows {
        w.serialize(DecompositionRow {
            date: d.date,
            actual_out: d.actual.outflow,
            actual_in: d.actual.inflow,
            baseline_out: d.baseline.outflow,
            baseline_in: d.baseline.inflow,
            dev_out: d.deviation.outflow,
            dev_in: d.deviation.inflow,
        })
        .map_err(|e| DecompositionError::Write(e.to_string()))?;
    }
    w.flush().map_err(|e| DecompositionError::Write(e.to_string()))
}

pub fn read_decompositions<R: std::io::Read>(source: R) -> Result<Vec<DemandDecomposition>, DecompositionError> {
    let mut r = csv::Reader::from_reader(source);
    r.deserialize::<DecompositionRow>()
        .map(|row| {
            let row = row.map_err(|e| DecompositionError::Write(e.to_string()))?;
            Ok(DemandDecomposition {
                date: row.date,
                actual: DailyDemand::new(row.date, row.actual_out, row.actual_in),
                baseline: DemandPair::new(row.baseline_out, row.baseline_in),
                deviation: DemandPair::new(row.dev_out, row.dev_in),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dates::DateRange;
    use crate::events::EventRecord;
    use chrono::NaiveTime;

    fn d(y: i32, m: u32, day: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(y, m, day).unwrap()
    }

    fn calendar(event_dates: &[NaiveDate]) -> EventCalendar {
        let t = |h| NaiveTime::from_hms_opt(h, 0, 0).unwrap();
        let events: Vec<_> = event_dates
            .iter()
            .map(|date| EventRecord::new("Show", None, *date, t(19), t(22)).unwrap())
            .collect();
        EventCalendar::new(&events, DateRange::new(d(2000, 1, 1), d(2030, 1, 1)).unwrap())
    }

    #[test]
    fn three_fridays_average() {
        // 2014-07-25 is a Friday.
        let target = d(2014, 7, 25);
        let history = history_from(&[
            DailyDemand::new(d(2014, 7, 4), 300, 200),
            DailyDemand::new(d(2014, 7, 11), 330, 210),
            DailyDemand::new(d(2014, 7, 18), 363, 211),
            DailyDemand::new(d(2014, 7, 24), 900, 900),
        ]);
        let b = weekday_baseline(&history, &calendar(&[]), target, &BaselineConfig::default()).unwrap();
        assert_eq!(b, DemandPair::new(331.0, 207.0));
    }

    #[test]
    fn event_days_excluded_and_all_history_fallback() {
        let target = d(2014, 7, 25);
        let history = history_from(&[
            DailyDemand::new(d(2014, 7, 11), 500, 500),
            DailyDemand::new(d(2014, 7, 18), 700, 700),
            DailyDemand::new(d(2014, 7, 21), 100, 50),
            DailyDemand::new(d(2014, 7, 22), 200, 150),
        ]);
        let cal = calendar(&[d(2014, 7, 11), d(2014, 7, 18)]);
        let cfg = BaselineConfig { fallback: BaselineFallback::AllHistory, ..Default::default() };
        let b = weekday_baseline(&history, &cal, target, &cfg).unwrap();
        assert_eq!(b, DemandPair::new(150.0, 100.0));
        let cfg = BaselineConfig { fallback: BaselineFallback::GlobalWeekdayMean, ..Default::default() };
        assert_eq!(weekday_baseline(&history, &cal, target, &cfg).unwrap(), DemandPair::new(600.0, 600.0));
        // expand_window finds no quiet Friday at all and drops to quiet days of any weekday
        let cfg = BaselineConfig::default();
        assert_eq!(weekday_baseline(&history, &cal, target, &cfg).unwrap(), DemandPair::new(150.0, 100.0));
    }

    #[test]
    fn expand_window_reaches_past_lookback() {
        let target = d(2014, 7, 25);
        let history = history_from(&[
            DailyDemand::new(d(2014, 1, 3), 100, 100),
            DailyDemand::new(d(2014, 7, 18), 300, 300),
        ]);
        let cfg = BaselineConfig { lookback_weeks: 4, min_samples: 2, fallback: BaselineFallback::ExpandWindow };
        assert_eq!(weekday_baseline(&history, &calendar(&[]), target, &cfg).unwrap(), DemandPair::new(200.0, 200.0));
    }

    #[test]
    fn single_sample_mean() {
        let target = d(2014, 7, 25);
        let history = history_from(&[DailyDemand::new(d(2014, 7, 18), 420, 240)]);
        let cfg = BaselineConfig { min_samples: 1, ..Default::default() };
        assert_eq!(weekday_baseline(&history, &calendar(&[]), target, &cfg).unwrap(), DemandPair::new(420.0, 240.0));
    }

    #[test]
    fn empty_history_errors() {
        let target = d(2014, 7, 25);
        let cal = calendar(&[]);
        assert!(weekday_baseline(&DemandHistory::new(), &cal, target, &BaselineConfig::default()).is_err());
        let only_future = history_from(&[DailyDemand::new(target, 1, 1)]);
        assert!(matches!(
            weekday_baseline(&only_future, &cal, target, &BaselineConfig::default()),
            Err(DecompositionError::EmptyHistory(_))
        ));
    }

    #[test]
    fn bad_config_rejected() {
        let cfg = BaselineConfig { lookback_weeks: 0, ..Default::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn decompose_katy_perry_day() {
        let actual = DailyDemand::new(d(2014, 7, 25), 555, 354);
        let dec = decompose(actual, DemandPair::new(331.0, 207.0)).unwrap();
        assert_eq!(dec.deviation, DemandPair::new(224.0, 147.0));
        assert_eq!(recompose(&dec), DemandPair::new(555.0, 354.0));
    }

    #[test]
    fn decompose_identity_and_negative() {
        let a = DailyDemand::new(d(2014, 7, 25), 100, 100);
        assert_eq!(decompose(a, DemandPair::new(100.0, 100.0)).unwrap().deviation, DemandPair::ZERO);
        let dec = decompose(a, DemandPair::new(150.0, 120.0)).unwrap();
        assert_eq!(dec.deviation, DemandPair::new(-50.0, -20.0));
        assert!(decompose(a, DemandPair::new(-1.0, 0.0)).is_err());
    }

    #[test]
    fn recompose_with_stated_increase() {
        let dec = DemandDecomposition {
            date: d(2014, 7, 25),
            actual: DailyDemand::new(d(2014, 7, 25), 562, 353),
            baseline: DemandPair::new(331.0, 207.0),
            deviation: DemandPair::new(231.0, 146.0),
        };
        assert_eq!(recompose(&dec), DemandPair::new(562.0, 353.0));
    }

    #[test]
    fn constant_series_fixed_point() {
        let series: Vec<_> = DateRange::new(d(2014, 1, 1), d(2014, 6, 30))
            .unwrap()
            .days()
            .map(|date| DailyDemand::new(date, 123, 45))
            .collect();
        let decs = decompose_series(&series, &calendar(&[]), &BaselineConfig::default()).unwrap();
        assert_eq!(decs.len(), series.len() - 1);
        assert!(decs.iter().all(|x| x.baseline == DemandPair::new(123.0, 45.0)));
    }

    #[test]
    fn csv_header() {
        let dec = decompose(DailyDemand::new(d(2014, 7, 25), 555, 354), DemandPair::new(331.0, 207.5)).unwrap();
        let mut buf = Vec::new();
        write_decompositions(&mut buf, &[dec]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("date,actual_out,actual_in,baseline_out,baseline_in,dev_out,dev_in\n"));
        assert_eq!(read_decompositions(text.as_bytes()).unwrap(), vec![dec]);
    }
}
