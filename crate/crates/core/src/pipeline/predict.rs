use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use super::{DayIndex, PipelineError};
use crate::decomposition::DemandPair;
use crate::events::{EventRecord, FormattedEvent};
use crate::llm::{cache_key, ChatBackend, ChatRequest};
use crate::parse::{parse_formatted_event, parse_prediction, ParseFailure, PredictionResult};
use crate::prompt::{round_half_up, with_format_reminder, AblationConfig, PromptBuilder, EVENT_OUTPUT_FORM, PREDICTION_OUTPUT_FORM};

pub const FALLBACK_REASONING: &str = "fallback: baseline";

/// One next-day prediction with its provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub result: PredictionResult,
    pub baseline: DemandPair,
    pub request_digest: String,
    /// First and last day of demand data the prompt was built from.
    pub history_start: NaiveDate,
    pub history_end: NaiveDate,
    /// Set when both the reply and the re-prompt were malformed.
    pub failure: Option<ParseFailure>,
}

impl Prediction {
    pub fn is_fallback(&self) -> bool {
        self.failure.is_some()
    }
}

/// Predicts demand on `target` from the `history_days` days before it.
///
/// A malformed reply is retried once with a format reminder appended; when
/// that also fails, the rounded baseline stands in as the prediction and the
/// failure is returned alongside it.
pub fn predict_next_day(
    backend: &dyn ChatBackend,
    builder: &PromptBuilder,
    index: &DayIndex,
    target: NaiveDate,
    ablation: &AblationConfig,
    history_days: usize,
) -> Result<Prediction, PipelineError> {
    let window = index.window(target, history_days)?;
    let baseline = index.baseline(target)?;
    let request = builder
        .build_prediction_prompt(&window, &index.target(target)?, baseline, ablation)
        .map_err(PipelineError::data)?;
    let request_digest = cache_key(&request);
    let history_start = window.days()[0].date;
    let history_end = window.end();

    let reply = backend.complete(&request)?.content;
    let first = match parse_prediction(&reply, target) {
        Ok(result) => return Ok(Prediction { result, baseline, request_digest, history_start, history_end, failure: None }),
        Err(e) => e,
    };
    log::warn!("malformed reply for {target} ({}), re-prompting", first.reason);
    let retry = with_format_reminder(&request, PREDICTION_OUTPUT_FORM);
    let reply = backend.complete(&retry)?.content;
    match parse_prediction(&reply, target) {
        Ok(result) => Ok(Prediction { result, baseline, request_digest, history_start, history_end, failure: None }),
        Err(second) => {
            log::warn!("second malformed reply for {target} ({}), using the baseline", second.reason);
            let result = PredictionResult {
                date: target,
                pickup: round_half_up(baseline.outflow).max(0) as u64,
                dropoff: round_half_up(baseline.inflow).max(0) as u64,
                reasoning: FALLBACK_REASONING.into(),
                raw_response: reply.clone(),
            };
            let failure = ParseFailure { date: target, request_digest: request_digest.clone(), reason: second.reason, raw_reply: reply };
            Ok(Prediction { result, baseline, request_digest, history_start, history_end, failure: Some(failure) })
        }
    }
}

/// Applies `f` to every item with at most `max_in_flight` calls running at
/// once. Results keep the input order; the error reported is the one for the
/// earliest failing item.
pub fn run_bounded<T, R, E, F>(items: &[T], max_in_flight: usize, f: F) -> Result<Vec<R>, E>
where
    T: Sync,
    R: Send,
    E: Send,
    F: Fn(&T) -> Result<R, E> + Sync,
{
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<R, E>>>> = items.iter().map(|_| Mutex::new(None)).collect();
    let workers = max_in_flight.max(1).min(items.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= items.len() {
                    break;
                }
                *slots[i].lock().expect("slot lock") = Some(f(&items[i]));
            });
        }
    });
    slots.into_iter().map(|s| s.into_inner().expect("slot lock").expect("every slot filled")).collect()
}

pub fn predict_dates(
    backend: &dyn ChatBackend,
    builder: &PromptBuilder,
    index: &DayIndex,
    dates: &[NaiveDate],
    ablation: &AblationConfig,
    history_days: usize,
    max_in_flight: usize,
) -> Result<Vec<Prediction>, PipelineError> {
    run_bounded(dates, max_in_flight, |d| predict_next_day(backend, builder, index, *d, ablation, history_days))
}

/// Formats one event. A malformed reply is retried once with a reminder;
/// after that the category `Other` and the title stand in.
pub fn format_event(
    backend: &dyn ChatBackend,
    builder: &PromptBuilder,
    record: &EventRecord,
) -> Result<(FormattedEvent, Option<ParseFailure>), PipelineError> {
    let request = builder.build_event_format_prompt(record);
    format_with(backend, &request, record)
}

fn format_with(
    backend: &dyn ChatBackend,
    request: &ChatRequest,
    record: &EventRecord,
) -> Result<(FormattedEvent, Option<ParseFailure>), PipelineError> {
    let reply = backend.complete(request)?.content;
    if let Ok(f) = parse_formatted_event(&reply, record) {
        return Ok((f, None));
    }
    let reply = backend.complete(&with_format_reminder(request, EVENT_OUTPUT_FORM))?.content;
    match parse_formatted_event(&reply, record) {
        Ok(f) => Ok((f, None)),
        Err(e) => {
            let fallback = FormattedEvent { category: "Other".into(), summary: record.title.clone(), source: record.clone() };
            let failure = ParseFailure { date: record.date, request_digest: cache_key(request), reason: e.reason, raw_reply: reply };
            Ok((fallback, Some(failure)))
        }
    }
}

/// Formats a catalog in order. Listings that render to the same prompt
/// (repeat showings of one production) share a single backend call.
pub fn format_catalog(
    backend: &dyn ChatBackend,
    builder: &PromptBuilder,
    catalog: &[EventRecord],
    max_in_flight: usize,
) -> Result<Vec<(FormattedEvent, Option<ParseFailure>)>, PipelineError> {
    let mut unique: BTreeMap<String, (ChatRequest, &EventRecord)> = BTreeMap::new();
    let mut keys = Vec::with_capacity(catalog.len());
    for record in catalog {
        let request = builder.build_event_format_prompt(record);
        let key = cache_key(&request);
        unique.entry(key.clone()).or_insert((request, record));
        keys.push(key);
    }
    let jobs: Vec<(&String, &(ChatRequest, &EventRecord))> = unique.iter().collect();
    let done = run_bounded(&jobs, max_in_flight, |(_, (request, record))| format_with(backend, request, record))?;
    let by_key: BTreeMap<&String, (FormattedEvent, Option<ParseFailure>)> = jobs.iter().map(|(k, _)| *k).zip(done).collect();
    Ok(catalog
        .iter()
        .zip(&keys)
        .map(|(record, key)| {
            let (f, failure) = by_key[key].clone();
            let failure = failure.map(|x| ParseFailure { date: record.date, ..x });
            (FormattedEvent { source: record.clone(), ..f }, failure)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dates::DateRange;
    use crate::decomposition::{decompose_series, BaselineConfig};
    use crate::llm::{MockScript, ScriptedBackend};
    use crate::trips::DailyDemand;
    use chrono::{Duration, NaiveTime};

    fn d(n: i64) -> NaiveDate {
        NaiveDate::from_ymd_opt(2014, 6, 1).unwrap() + Duration::days(n)
    }

    fn index() -> DayIndex {
        let series: Vec<DailyDemand> = (0..40).map(|i| DailyDemand::new(d(i), 300 + (i % 7) as u64, 200)).collect();
        let t = |h| NaiveTime::from_hms_opt(h, 0, 0).unwrap();
        let catalog = vec![
            EventRecord::new("Disney On Ice", Some("Ice show.".into()), d(35), t(13), t(15)).unwrap(),
            EventRecord::new("Disney On Ice", Some("Ice show.".into()), d(35), t(17), t(19)).unwrap(),
        ];
        let range = DateRange::new(d(0), d(39)).unwrap();
        let cal = crate::events::EventCalendar::new(&catalog, range);
        let decs = decompose_series(&series, &cal, &BaselineConfig::default()).unwrap();
        DayIndex::new(&series, &decs, &catalog, &[], range, BaselineConfig::default())
    }

    fn text_features() -> AblationConfig {
        AblationConfig::new(crate::prompt::EventFeatures::CountTimeText, crate::prompt::DemandFeatures::Decomposed)
    }

    fn builder() -> PromptBuilder {
        PromptBuilder::new("m", "Barclays Center")
    }

    #[test]
    fn scripted_reply_is_parsed() {
        let idx = index();
        let mut script = MockScript::default();
        script.register_substring("Date: 2014-07-06", "[pickup] 562 [dropoff] 353 [reasoning] busy");
        let backend = ScriptedBackend::new(script);
        let p = predict_next_day(&backend, &builder(), &idx, d(35), &text_features(), 28).unwrap();
        assert_eq!((p.result.pickup, p.result.dropoff), (562, 353));
        assert!(p.history_end < d(35));
        assert!(!p.is_fallback());
        assert_eq!(backend.calls(), 1);
    }

    #[test]
    fn two_malformed_replies_fall_back() {
        let idx = index();
        let mut script = MockScript::default();
        script.register_substring("Date: 2014-07-06", "no idea");
        let backend = ScriptedBackend::new(script);
        let p = predict_next_day(&backend, &builder(), &idx, d(35), &text_features(), 28).unwrap();
        assert_eq!(backend.calls(), 2);
        assert_eq!(p.result.reasoning, FALLBACK_REASONING);
        let b = idx.baseline(d(35)).unwrap();
        assert_eq!(p.result.pickup, round_half_up(b.outflow) as u64);
        assert_eq!(p.failure.unwrap().raw_reply, "no idea");
    }

    #[test]
    fn short_history_is_argument_error() {
        let idx = index();
        let backend = ScriptedBackend::new(MockScript::default());
        let err = predict_next_day(&backend, &builder(), &idx, d(10), &text_features(), 28).unwrap_err();
        assert!(matches!(err, PipelineError::Argument(_)));
    }

    #[test]
    fn unknown_prompt_is_backend_error() {
        let idx = index();
        let backend = ScriptedBackend::new(MockScript::default());
        let err = predict_next_day(&backend, &builder(), &idx, d(35), &text_features(), 28).unwrap_err();
        assert_eq!(err.exit_code(), 4);
    }

    #[test]
    fn bounded_runs_keep_order() {
        let items: Vec<usize> = (0..50).collect();
        let out: Vec<usize> = run_bounded(&items, 4, |i| Ok::<_, String>(i * 2)).unwrap();
        assert_eq!(out, (0..50).map(|i| i * 2).collect::<Vec<_>>());
        let err = run_bounded(&items, 4, |i| if *i % 10 == 7 { Err(*i) } else { Ok(*i) }).unwrap_err();
        assert_eq!(err, 7);
    }

    #[test]
    fn repeat_showings_share_one_call() {
        let idx = index();
        let catalog: Vec<EventRecord> = idx.events(d(35)).unwrap().into_iter().map(|e| e.record).collect();
        let mut script = MockScript::default();
        script.register_substring("Event title: Disney On Ice", "[Category] Family Show [Summary] Ice show.");
        let backend = ScriptedBackend::new(script);
        let out = format_catalog(&backend, &builder(), &catalog, 4).unwrap();
        assert_eq!(backend.calls(), 1);
        assert_eq!(out.len(), 2);
        assert_eq!(out[1].0.source, catalog[1]);
        assert_eq!(out[0].0.category, "Family Show");
    }
}
