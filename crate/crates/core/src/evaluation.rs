//! RMSE / MAE / MAPE / R² over pooled pickup and dropoff residuals,
//! segmented into event and non-event days.

use std::io::{Read, Write};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decomposition::DemandPair;
use crate::events::EventCalendar;
use crate::prompt::AblationConfig;
use crate::trips::DailyDemand;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("ablation {ablation} failed: {message}")]
    Runner { ablation: AblationConfig, message: String },
    #[error("csv error: {0}")]
    Csv(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub n: usize,
    pub rmse: f64,
    pub mae: f64,
    /// Fraction, averaged over samples with a non-zero true value. `None`
    /// when every true value is zero.
    pub mape: Option<f64>,
    /// Samples left out of MAPE because their true value is zero.
    pub mape_excluded: usize,
    /// `None` when the true values are constant.
    pub r2: Option<f64>,
    /// Sum of squared errors.
    pub sse: f64,
}

pub fn compute_metrics(y_true: &[f64], y_pred: &[f64]) -> Result<Metrics, EvalError> {
    if y_true.is_empty() {
        return Err(EvalError::Argument("metrics need at least one sample".into()));
    }
    if y_true.len() != y_pred.len() {
        return Err(EvalError::Argument(format!("{} true values but {} predictions", y_true.len(), y_pred.len())));
    }
    let n = y_true.len() as f64;
    let mut sse = 0.0;
    let mut sae = 0.0;
    let mut ape = 0.0;
    let mut ape_n = 0usize;
    for (y, p) in y_true.iter().zip(y_pred) {
        let err = y - p;
        sse += err * err;
        sae += err.abs();
        if *y != 0.0 {
            ape += (err / y).abs();
            ape_n += 1;
        }
    }
    let mean = y_true.iter().sum::<f64>() / n;
    let sst: f64 = y_true.iter().map(|y| (y - mean) * (y - mean)).sum();
    Ok(Metrics {
        n: y_true.len(),
        rmse: (sse / n).sqrt(),
        mae: sae / n,
        mape: (ape_n > 0).then(|| ape / ape_n as f64),
        mape_excluded: y_true.len() - ape_n,
        r2: (sst > 0.0).then(|| 1.0 - sse / sst),
        sse,
    })
}

/// One evaluated day.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub date: NaiveDate,
    pub truth: DailyDemand,
    pub predicted: DemandPair,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub model_name: String,
    pub ablation: AblationConfig,
    pub all_days: Metrics,
    pub event_days: Option<Metrics>,
    pub non_event_days: Option<Metrics>,
    /// Per-flow breakdown over all days.
    pub pickup: Metrics,
    pub dropoff: Metrics,
}

fn pooled(records: &[&PredictionRecord]) -> Result<Option<Metrics>, EvalError> {
    if records.is_empty() {
        return Ok(None);
    }
    let mut t = Vec::with_capacity(records.len() * 2);
    let mut p = Vec::with_capacity(records.len() * 2);
    for r in records {
        t.push(r.truth.outflow as f64);
        t.push(r.truth.inflow as f64);
        p.push(r.predicted.outflow);
        p.push(r.predicted.inflow);
    }
    compute_metrics(&t, &p).map(Some)
}

pub fn segment_report(
    records: &[PredictionRecord],
    calendar: &EventCalendar,
    model_name: &str,
    ablation: AblationConfig,
) -> Result<MetricsReport, EvalError> {
    if records.is_empty() {
        return Err(EvalError::Argument("no prediction records".into()));
    }
    let mut event = Vec::new();
    let mut quiet = Vec::new();
    for r in records {
        let day = calendar.day(r.date).map_err(|e| EvalError::Argument(e.to_string()))?;
        match day.is_event_day() {
            true => event.push(r),
            false => quiet.push(r),
        }
    }
    let all: Vec<&PredictionRecord> = records.iter().collect();
    let flow = |f: fn(&PredictionRecord) -> (f64, f64)| {
        let (t, p): (Vec<f64>, Vec<f64>) = records.iter().map(f).unzip();
        compute_metrics(&t, &p)
    };
    Ok(MetricsReport {
        model_name: model_name.to_string(),
        ablation,
        all_days: pooled(&all)?.expect("records are non-empty"),
        event_days: pooled(&event)?,
        non_event_days: pooled(&quiet)?,
        pickup: flow(|r| (r.truth.outflow as f64, r.predicted.outflow))?,
        dropoff: flow(|r| (r.truth.inflow as f64, r.predicted.inflow))?,
    })
}

/// One row of an ablation study; `report` is `None` for configurations the
/// model does not support.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub ablation: AblationConfig,
    pub report: Option<MetricsReport>,
}

/// Runs `runner` once per configuration, in order. A runner returns `None`
/// when the configuration does not apply to its model.
pub fn run_ablation<F, E>(
    grid: &[AblationConfig],
    mut runner: F,
    calendar: &EventCalendar,
    model_name: &str,
) -> Result<Vec<AblationRow>, EvalError>
where
    F: FnMut(&AblationConfig) -> Result<Option<Vec<PredictionRecord>>, E>,
    E: std::fmt::Display,
{
    if grid.is_empty() {
        return Err(EvalError::Argument("empty ablation grid".into()));
    }
    grid.iter()
        .map(|ablation| {
            let records = runner(ablation).map_err(|e| EvalError::Runner { ablation: *ablation, message: e.to_string() })?;
            let report = records.map(|r| segment_report(&r, calendar, model_name, *ablation)).transpose()?;
            Ok(AblationRow { ablation: *ablation, report })
        })
        .collect()
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

fn metric_row(model: &str, ablation: &AblationConfig, segment: &str, m: Option<&Metrics>) -> [String; 8] {
    match m {
        Some(m) => [
            model.into(),
            ablation.to_string(),
            segment.into(),
            m.n.to_string(),
            format!("{:.6}", m.rmse),
            format!("{:.6}", m.mae),
            opt(m.mape),
            opt(m.r2),
        ],
        None => [model.into(), ablation.to_string(), segment.into(), "0".into(), String::new(), String::new(), String::new(), String::new()],
    }
}

pub const REPORT_HEADER: [&str; 8] = ["model", "ablation", "segment", "n", "rmse", "mae", "mape", "r2"];

/// Writes `model,ablation,segment,n,rmse,mae,mape,r2`. Segments are `all`,
/// `event`, `non_event`, then the per-flow `all_pickup` and `all_dropoff`.
/// Absent segments and unsupported configurations keep their row with
/// `n = 0` and empty metric cells.
pub fn write_report_csv<W: Write>(out: W, rows: &[(String, AblationConfig, Option<&MetricsReport>)]) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_writer(out);
    let err = |e: csv::Error| EvalError::Csv(e.to_string());
    w.write_record(REPORT_HEADER).map_err(err)?;
    for (model, ablation, report) in rows {
        let segments: [(&str, Option<&Metrics>); 5] = match report {
            Some(r) => [
                ("all", Some(&r.all_days)),
                ("event", r.event_days.as_ref()),
                ("non_event", r.non_event_days.as_ref()),
                ("all_pickup", Some(&r.pickup)),
                ("all_dropoff", Some(&r.dropoff)),
            ],
            None => [("all", None), ("event", None), ("non_event", None), ("all_pickup", None), ("all_dropoff", None)],
        };
        for (segment, m) in segments {
            w.write_record(metric_row(model, ablation, segment, m)).map_err(err)?;
        }
    }
    w.flush().map_err(|e| EvalError::Csv(e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotRow {
    pub date: NaiveDate,
    pub true_out: u64,
    pub true_in: u64,
    pub pred_out: f64,
    pub pred_in: f64,
    pub is_event_day: bool,
}

pub fn write_plot_data<W: Write>(out: W, records: &[PredictionRecord], calendar: &EventCalendar) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(PlotRow {
            date: r.date,
            true_out: r.truth.outflow,
            true_in: r.truth.inflow,
            pred_out: r.predicted.outflow,
            pred_in: r.predicted.inflow,
            is_event_day: calendar.is_event_day(r.date),
        })
        .map_err(|e| EvalError::Csv(e.to_string()))?;
    }
    w.flush().map_err(|e| EvalError::Csv(e.to_string()))
}

/// A row of the prediction exchange CSV (`date,pred_out,pred_in,model_name`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExchangeRow {
    pub date: NaiveDate,
    pub pred_out: f64,
    pub pred_in: f64,
    pub model_name: String,
}

pub fn write_predictions<W: Write>(out: W, rows: &[ExchangeRow]) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(|e| EvalError::Csv(e.to_string()))?;
    }
    w.flush().map_err(|e| EvalError::Csv(e.to_string()))
}

pub fn read_predictions<R: Read>(source: R) -> Result<Vec<ExchangeRow>, EvalError> {
    csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(source)
        .deserialize()
        .map(|r| r.map_err(|e| EvalError::Csv(e.to_string())))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dates::DateRange;
    use crate::events::EventRecord;
    use chrono::NaiveTime;

    fn d(day: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(2014, 7, day).unwrap()
    }

    fn calendar() -> EventCalendar {
        let t = |h| NaiveTime::from_hms_opt(h, 0, 0).unwrap();
        let e = EventRecord::new("Game", None, d(2), t(19), t(22)).unwrap();
        EventCalendar::new(&[e], DateRange::new(d(1), d(31)).unwrap())
    }

    fn rec(day: u32, t: (u64, u64), p: (f64, f64)) -> PredictionRecord {
        PredictionRecord { date: d(day), truth: DailyDemand::new(d(day), t.0, t.1), predicted: DemandPair::new(p.0, p.1) }
    }

    #[test]
    fn hand_example() {
        let m = compute_metrics(&[100.0, 200.0], &[110.0, 190.0]).unwrap();
        assert_eq!(m.mae, 10.0);
        assert_eq!(m.rmse, 10.0);
        approx::assert_abs_diff_eq!(m.mape.unwrap(), 0.075, epsilon = 1e-12);
        approx::assert_abs_diff_eq!(m.r2.unwrap(), 0.96, epsilon = 1e-12);
        assert_eq!(m.n, 2);
    }

    #[test]
    fn perfect_and_mean_predictions() {
        let y = [3.0, 5.0, 10.0];
        let m = compute_metrics(&y, &y).unwrap();
        assert_eq!((m.rmse, m.mae, m.mape, m.r2), (0.0, 0.0, Some(0.0), Some(1.0)));
        let m = compute_metrics(&y, &[6.0; 3]).unwrap();
        assert_eq!(m.r2, Some(0.0));
    }

    #[test]
    fn zero_truth_and_constant_truth() {
        let m = compute_metrics(&[0.0, 10.0], &[1.0, 11.0]).unwrap();
        approx::assert_abs_diff_eq!(m.mape.unwrap(), 0.1, epsilon = 1e-12);
        assert_eq!(m.mape_excluded, 1);
        let m = compute_metrics(&[5.0, 5.0], &[4.0, 6.0]).unwrap();
        assert_eq!(m.r2, None);
        let m = compute_metrics(&[0.0], &[0.0]).unwrap();
        assert_eq!(m.mape, None);
    }

    #[test]
    fn argument_errors() {
        assert!(compute_metrics(&[], &[]).is_err());
        assert!(compute_metrics(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn segments_pool_two_flows() {
        let recs = [rec(1, (100, 50), (90.0, 55.0)), rec(2, (400, 300), (350.0, 310.0))];
        let r = segment_report(&recs, &calendar(), "m", AblationConfig::full()).unwrap();
        assert_eq!(r.all_days.n, 4);
        assert_eq!(r.event_days.unwrap().n, 2);
        assert_eq!(r.non_event_days.unwrap().n, 2);
        assert_eq!(r.all_days.sse, r.event_days.unwrap().sse + r.non_event_days.unwrap().sse);
        assert_eq!(r.pickup.n, 2);
    }

    #[test]
    fn empty_event_segment_is_absent() {
        let recs = [rec(1, (100, 50), (90.0, 55.0)), rec(3, (100, 50), (90.0, 55.0))];
        let r = segment_report(&recs, &calendar(), "m", AblationConfig::full()).unwrap();
        assert!(r.event_days.is_none());
        assert!(segment_report(&[], &calendar(), "m", AblationConfig::full()).is_err());
        let outside = [rec(1, (1, 1), (1.0, 1.0))];
        let narrow = EventCalendar::new(&[], DateRange::new(d(5), d(6)).unwrap());
        assert!(segment_report(&outside, &narrow, "m", AblationConfig::full()).is_err());
    }

    #[test]
    fn ablation_rows_in_order_with_absent() {
        let grid = AblationConfig::canonical_grid();
        let rows = run_ablation(
            &grid,
            |a: &AblationConfig| -> Result<_, String> {
                Ok((a.event_features != crate::prompt::EventFeatures::CountTimeFormatted).then(|| vec![rec(2, (10, 10), (9.0, 9.0))]))
            },
            &calendar(),
            "gbdt",
        )
        .unwrap();
        assert_eq!(rows.len(), 6);
        assert!(rows[4].report.is_none() && rows[5].report.is_none());
        assert!(rows[0].report.is_some());
        let failed = run_ablation(&grid, |_: &AblationConfig| -> Result<Option<Vec<PredictionRecord>>, String> { Err("boom".into()) }, &calendar(), "x");
        assert!(matches!(failed, Err(EvalError::Runner { .. })));
        assert!(run_ablation(&[], |_: &AblationConfig| -> Result<_, String> { Ok(None) }, &calendar(), "x").is_err());
    }

    #[test]
    fn report_csv_layout() {
        let recs = [rec(1, (100, 50), (90.0, 55.0))];
        let r = segment_report(&recs, &calendar(), "llm", AblationConfig::full()).unwrap();
        let mut buf = Vec::new();
        write_report_csv(&mut buf, &[("llm".into(), AblationConfig::full(), Some(&r)), ("gbdt".into(), AblationConfig::full(), None)]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "model,ablation,segment,n,rmse,mae,mape,r2");
        assert_eq!(lines.len(), 11);
        assert!(lines[2].starts_with("llm,c_t_h_prime+r_i,event,0,,"));
        assert_eq!(lines[6], "gbdt,c_t_h_prime+r_i,all,0,,,,");
    }

    #[test]
    fn exchange_round_trip() {
        let rows = vec![ExchangeRow { date: d(1), pred_out: 1.5, pred_in: 2.0, model_name: "gbdt".into() }];
        let mut buf = Vec::new();
        write_predictions(&mut buf, &rows).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("date,pred_out,pred_in,model_name\n"));
        assert_eq!(read_predictions(buf.as_slice()).unwrap(), rows);
    }
}
