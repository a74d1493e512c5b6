//! Event catalog: typed event listings, per-day grouping and the
//! LLM-standardized summaries attached to them.

use std::collections::BTreeMap;

use chrono::{NaiveDate, NaiveTime};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dates::DateRange;

pub const TIME_FORMAT: &str = "%H:%M";

#[derive(Debug, Error)]
pub enum EventError {
    #[error("malformed event catalog: {0}")]
    Document(String),
    #[error("event #{index}: {reason}")]
    Record { index: usize, reason: String },
    #[error("date {0} is outside the event calendar")]
    OutsideCalendar(NaiveDate),
}

/// A raw event listing for a single day at the venue.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EventRecord {
    pub title: String,
    pub description: Option<String>,
    pub date: NaiveDate,
    #[serde(with = "hhmm")]
    pub start_time: NaiveTime,
    #[serde(with = "hhmm")]
    pub end_time: NaiveTime,
}

impl EventRecord {
    pub fn new(
        title: impl Into<String>,
        description: Option<String>,
        date: NaiveDate,
        start_time: NaiveTime,
        end_time: NaiveTime,
    ) -> Result<Self, String> {
        let title = title.into();
        if title.trim().is_empty() {
            return Err("empty title".into());
        }
        if end_time < start_time {
            return Err(format!("end_time {} precedes start_time {}", end_time.format(TIME_FORMAT), start_time.format(TIME_FORMAT)));
        }
        let description = description.filter(|d| !d.is_empty());
        Ok(EventRecord { title, description, date, start_time, end_time })
    }

    /// Stable identity used to key formatted summaries and caches.
    pub fn digest(&self) -> String {
        let canonical = serde_json::to_string(self).expect("event serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    pub fn time_span(&self) -> String {
        format!("{}-{}", self.start_time.format(TIME_FORMAT), self.end_time.format(TIME_FORMAT))
    }
}

mod hhmm {
    use chrono::NaiveTime;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(t: &NaiveTime, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&t.format(super::TIME_FORMAT).to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<NaiveTime, D::Error> {
        let raw = String::deserialize(d)?;
        NaiveTime::parse_from_str(&raw, super::TIME_FORMAT).map_err(serde::de::Error::custom)
    }
}

/// LLM-standardized description of an event.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FormattedEvent {
    pub category: String,
    pub summary: String,
    pub source: EventRecord,
}

/// Events held on one date, ordered by start time then title.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DayEvents {
    pub date: NaiveDate,
    pub events: Vec<EventRecord>,
}

impl DayEvents {
    pub fn is_event_day(&self) -> bool {
        !self.events.is_empty()
    }
}

#[derive(Deserialize)]
struct RawEvent {
    title: Option<String>,
    description: Option<String>,
    date: Option<String>,
    start_time: Option<String>,
    end_time: Option<String>,
}

/// Parses an event catalog document: a JSON array of event objects.
///
/// The document is all-or-nothing; the first invalid entry is reported with
/// its index. Use [`parse_event_records_lenient`] to keep the valid entries.
pub fn parse_event_records(source: &str) -> Result<Vec<EventRecord>, EventError> {
    let (records, mut errors) = parse_event_records_lenient(source)?;
    match errors.is_empty() {
        true => Ok(records),
        false => Err(errors.swap_remove(0)),
    }
}

/// Parses every entry, returning the valid records and one error per invalid
/// entry. Only a malformed document is fatal.
pub fn parse_event_records_lenient(source: &str) -> Result<(Vec<EventRecord>, Vec<EventError>), EventError> {
    let raw: Vec<serde_json::Value> = serde_json::from_str(source).map_err(|e| EventError::Document(e.to_string()))?;
    let mut records = Vec::with_capacity(raw.len());
    let mut errors = Vec::new();
    for (index, value) in raw.into_iter().enumerate() {
        match convert(value) {
            Ok(r) => records.push(r),
            Err(reason) => errors.push(EventError::Record { index, reason }),
        }
    }
    Ok((records, errors))
}

fn convert(value: serde_json::Value) -> Result<EventRecord, String> {
    let raw: RawEvent = serde_json::from_value(value).map_err(|e| e.to_string())?;
    let title = raw.title.ok_or("missing title")?;
    if title.trim().is_empty() {
        return Err("empty title".into());
    }
    let date = raw.date.ok_or("missing date")?;
    let date = NaiveDate::parse_from_str(&date, crate::dates::DATE_FORMAT).map_err(|_| format!("invalid date {date:?}"))?;
    let time = |name: &str, v: Option<String>| -> Result<NaiveTime, String> {
        let v = v.ok_or_else(|| format!("missing {name}"))?;
        NaiveTime::parse_from_str(&v, TIME_FORMAT).map_err(|_| format!("invalid {name} {v:?}"))
    };
    let start = time("start_time", raw.start_time)?;
    let end = time("end_time", raw.end_time)?;
    EventRecord::new(title, raw.description, date, start, end)
}

pub fn write_event_records(records: &[EventRecord]) -> String {
    serde_json::to_string_pretty(records).expect("events serialize")
}

fn sort_day(events: &mut [EventRecord]) {
    events.sort_by(|a, b| a.start_time.cmp(&b.start_time).then_with(|| a.title.cmp(&b.title)));
}

pub fn events_for_day(catalog: &[EventRecord], date: NaiveDate) -> DayEvents {
    let mut events: Vec<EventRecord> = catalog.iter().filter(|e| e.date == date).cloned().collect();
    sort_day(&mut events);
    DayEvents { date, events }
}

/// Whitespace-delimited token count; absent descriptions count zero.
pub fn description_word_count(description: Option<&str>) -> usize {
    description.map_or(0, |d| d.split_whitespace().count())
}

/// Date-indexed view over a catalog, bounded to the dates it is known to
/// cover.
#[derive(Debug, Clone)]
pub struct EventCalendar {
    coverage: DateRange,
    by_date: BTreeMap<NaiveDate, Vec<EventRecord>>,
}

impl EventCalendar {
    pub fn new(catalog: &[EventRecord], coverage: DateRange) -> Self {
        let mut by_date: BTreeMap<NaiveDate, Vec<EventRecord>> = BTreeMap::new();
        for e in catalog.iter().filter(|e| coverage.contains(e.date)) {
            by_date.entry(e.date).or_default().push(e.clone());
        }
        by_date.values_mut().for_each(|v| sort_day(v));
        EventCalendar { coverage, by_date }
    }

    pub fn coverage(&self) -> DateRange {
        self.coverage
    }

    pub fn day(&self, date: NaiveDate) -> Result<DayEvents, EventError> {
        if !self.coverage.contains(date) {
            return Err(EventError::OutsideCalendar(date));
        }
        Ok(DayEvents { date, events: self.by_date.get(&date).cloned().unwrap_or_default() })
    }

    /// False for dates outside the coverage as well as for quiet days.
    pub fn is_event_day(&self, date: NaiveDate) -> bool {
        self.by_date.contains_key(&date)
    }

    pub fn event_days(&self) -> impl Iterator<Item = (&NaiveDate, &Vec<EventRecord>)> {
        self.by_date.iter()
    }

    pub fn event_count(&self) -> usize {
        self.by_date.values().map(Vec::len).sum()
    }
}
