//! Taxi trip ingestion: CSV parsing, radius filtering around a venue and
//! aggregation into a dense daily demand series.
//!
//! Trip timestamps carry no zone; they are read as venue-local wall-clock
//! time, so each end of a trip is attributed to the calendar date of its own
//! timestamp.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use chrono::{NaiveDate, NaiveDateTime};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dates::{DateRange, EmptyRange};
use crate::geo::{haversine_m, GeoPoint};

pub const TIMESTAMP_FORMAT: &str = "%Y-%m-%d %H:%M:%S";
pub const DEFAULT_RADIUS_M: f64 = 220.0;
pub const MAX_TRIP_HOURS: i64 = 12;

const REQUIRED_COLUMNS: [&str; 6] = [
    "pickup_datetime",
    "dropoff_datetime",
    "pickup_longitude",
    "pickup_latitude",
    "dropoff_longitude",
    "dropoff_latitude",
];

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("failed to read trip source: {0}")]
    Transport(String),
    #[error("trip header is missing required column(s): {}", .0.join(", "))]
    Schema(Vec<String>),
    #[error(transparent)]
    Range(#[from] EmptyRange),
    #[error("invalid venue: {0}")]
    Venue(String),
    #[error("failed to write daily demand: {0}")]
    Write(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripRecord {
    pub pickup_time: NaiveDateTime,
    pub dropoff_time: NaiveDateTime,
    pub pickup_point: GeoPoint,
    pub dropoff_point: GeoPoint,
}

/// A skipped input row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Rejection {
    /// 1-based line number in the source (the header is line 1).
    pub row: u64,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct ParsedTrips {
    pub records: Vec<TripRecord>,
    pub rejections: Vec<Rejection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VenueConfig {
    pub name: String,
    pub center: GeoPoint,
    #[serde(default = "default_radius")]
    pub radius_m: f64,
    pub timezone: String,
}

fn default_radius() -> f64 {
    DEFAULT_RADIUS_M
}

impl VenueConfig {
    pub fn new(name: impl Into<String>, center: GeoPoint, radius_m: f64, timezone: impl Into<String>) -> Result<Self, IngestError> {
        let venue = VenueConfig { name: name.into(), center, radius_m, timezone: timezone.into() };
        venue.validate()?;
        Ok(venue)
    }

    pub fn validate(&self) -> Result<(), IngestError> {
        if !(self.radius_m > 0.0) || !self.radius_m.is_finite() {
            return Err(IngestError::Venue(format!("radius_m must be positive, got {}", self.radius_m)));
        }
        if self.timezone.parse::<chrono_tz::Tz>().is_err() {
            return Err(IngestError::Venue(format!("unknown IANA timezone {:?}", self.timezone)));
        }
        Ok(())
    }

    pub fn contains(&self, point: GeoPoint) -> bool {
        haversine_m(point, self.center) <= self.radius_m
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DailyDemand {
    pub date: NaiveDate,
    pub outflow: u64,
    pub inflow: u64,
}

impl DailyDemand {
    pub fn new(date: NaiveDate, outflow: u64, inflow: u64) -> Self {
        DailyDemand { date, outflow, inflow }
    }
}

/// Parses the trip CSV. Malformed rows are skipped and reported; a source that
/// cannot be read or lacks a required column is fatal.
pub fn parse_trip_records<R: Read>(source: R) -> Result<ParsedTrips, IngestError> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(source);
    let headers = reader.headers().map_err(|e| IngestError::Transport(e.to_string()))?.clone();
    let mut index = [0usize; 6];
    let mut missing = Vec::new();
    for (slot, name) in index.iter_mut().zip(REQUIRED_COLUMNS) {
        match headers.iter().position(|h| h == name) {
            Some(i) => *slot = i,
            None => missing.push(name.to_string()),
        }
    }
    if !missing.is_empty() {
        return Err(IngestError::Schema(missing));
    }

    let mut parsed = ParsedTrips::default();
    let mut record = csv::StringRecord::new();
    loop {
        let row = reader.position().line();
        match reader.read_record(&mut record) {
            Ok(false) => break,
            Ok(true) => match parse_row(&record, &index) {
                Ok(trip) => parsed.records.push(trip),
                Err(reason) => parsed.rejections.push(Rejection { row: line_of(&record, row), reason }),
            },
            Err(e) => match e.kind() {
                csv::ErrorKind::Io(_) => return Err(IngestError::Transport(e.to_string())),
                _ => {
                    let row = e.position().map(|p| p.line()).unwrap_or(row);
                    parsed.rejections.push(Rejection { row, reason: format!("unreadable row: {e}") });
                }
            },
        }
    }
    Ok(parsed)
}

fn line_of(record: &csv::StringRecord, fallback: u64) -> u64 {
    record.position().map(|p| p.line()).unwrap_or(fallback)
}

fn parse_row(record: &csv::StringRecord, index: &[usize; 6]) -> Result<TripRecord, String> {
    let field = |i: usize| record.get(index[i]).ok_or_else(|| format!("missing field {}", REQUIRED_COLUMNS[i]));
    let time = |i: usize| -> Result<NaiveDateTime, String> {
        let raw = field(i)?;
        NaiveDateTime::parse_from_str(raw, TIMESTAMP_FORMAT)
            .map_err(|_| format!("invalid {} {:?}", REQUIRED_COLUMNS[i], raw))
    };
    let coord = |i: usize| -> Result<f64, String> {
        let raw = field(i)?;
        raw.parse::<f64>().map_err(|_| format!("invalid {} {:?}", REQUIRED_COLUMNS[i], raw))
    };
    let pickup_time = time(0)?;
    let dropoff_time = time(1)?;
    let (plon, plat, dlon, dlat) = (coord(2)?, coord(3)?, coord(4)?, coord(5)?);
    if (plat == 0.0 && plon == 0.0) || (dlat == 0.0 && dlon == 0.0) {
        return Err("null-island sentinel".into());
    }
    let pickup_point = GeoPoint::new(plat, plon).map_err(|e| format!("pickup: {e}"))?;
    let dropoff_point = GeoPoint::new(dlat, dlon).map_err(|e| format!("dropoff: {e}"))?;
    if dropoff_time < pickup_time {
        return Err("dropoff before pickup".into());
    }
    if dropoff_time - pickup_time > chrono::Duration::hours(MAX_TRIP_HOURS) {
        return Err(format!("trip longer than {MAX_TRIP_HOURS} hours"));
    }
    Ok(TripRecord { pickup_time, dropoff_time, pickup_point, dropoff_point })
}

/// Running per-day counts. Merging is integer addition, so any chunking of
/// the input yields the same totals.
#[derive(Debug, Clone)]
pub struct DemandAccumulator<'a> {
    venue: &'a VenueConfig,
    range: DateRange,
    counts: BTreeMap<NaiveDate, (u64, u64)>,
}

impl<'a> DemandAccumulator<'a> {
    pub fn new(venue: &'a VenueConfig, range: DateRange) -> Self {
        DemandAccumulator { venue, range, counts: BTreeMap::new() }
    }

    pub fn add(&mut self, trip: &TripRecord) {
        let pickup_date = trip.pickup_time.date();
        if self.range.contains(pickup_date) && self.venue.contains(trip.pickup_point) {
            self.counts.entry(pickup_date).or_default().0 += 1;
        }
        let dropoff_date = trip.dropoff_time.date();
        if self.range.contains(dropoff_date) && self.venue.contains(trip.dropoff_point) {
            self.counts.entry(dropoff_date).or_default().1 += 1;
        }
    }

    pub fn merge(mut self, other: DemandAccumulator<'_>) -> Self {
        for (date, (out, inn)) in other.counts {
            let slot = self.counts.entry(date).or_default();
            slot.0 += out;
            slot.1 += inn;
        }
        self
    }

    pub fn finish(self) -> Vec<DailyDemand> {
        self.range
            .days()
            .map(|date| {
                let (outflow, inflow) = self.counts.get(&date).copied().unwrap_or_default();
                DailyDemand { date, outflow, inflow }
            })
            .collect()
    }
}

/// One [`DailyDemand`] per date of `range`, including days with no trips.
pub fn aggregate_daily_demand(trips: &[TripRecord], venue: &VenueConfig, range: DateRange) -> Vec<DailyDemand> {
    let mut acc = DemandAccumulator::new(venue, range);
    for trip in trips {
        acc.add(trip);
    }
    acc.finish()
}

/// Same result as [`aggregate_daily_demand`], filtering `chunks` slices on
/// separate threads.
pub fn aggregate_daily_demand_chunked(
    trips: &[TripRecord],
    venue: &VenueConfig,
    range: DateRange,
    chunks: usize,
) -> Vec<DailyDemand> {
    let chunk_len = trips.len().div_ceil(chunks.max(1)).max(1);
    let partials: Vec<DemandAccumulator<'_>> = std::thread::scope(|scope| {
        let handles: Vec<_> = trips
            .chunks(chunk_len)
            .map(|chunk| {
                scope.spawn(move || {
                    let mut acc = DemandAccumulator::new(venue, range);
                    chunk.iter().for_each(|t| acc.add(t));
                    acc
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("aggregation worker panicked")).collect()
    });
    partials
        .into_iter()
        .fold(DemandAccumulator::new(venue, range), DemandAccumulator::merge)
        .finish()
}

/// Convenience wrapper checking the date bounds before aggregating.
pub fn aggregate_between(
    trips: &[TripRecord],
    venue: &VenueConfig,
    start: NaiveDate,
    end: NaiveDate,
) -> Result<Vec<DailyDemand>, IngestError> {
    Ok(aggregate_daily_demand(trips, venue, DateRange::new(start, end)?))
}

#[derive(Serialize, Deserialize)]
struct DemandRow {
    date: NaiveDate,
    outflow: u64,
    inflow: u64,
}

/// Writes the `date,outflow,inflow` CSV.
pub fn write_daily_demand<W: Write>(out: W, series: &[DailyDemand]) -> Result<(), IngestError> {
    let mut writer = csv::Writer::from_writer(out);
    for d in series {
        writer
            .serialize(DemandRow { date: d.date, outflow: d.outflow, inflow: d.inflow })
            .map_err(|e| IngestError::Write(e.to_string()))?;
    }
    writer.flush().map_err(|e| IngestError::Write(e.to_string()))
}

pub fn read_daily_demand<R: Read>(source: R) -> Result<Vec<DailyDemand>, IngestError> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(source);
    reader
        .deserialize::<DemandRow>()
        .map(|row| {
            row.map(|r| DailyDemand { date: r.date, outflow: r.outflow, inflow: r.inflow })
                .map_err(|e| IngestError::Transport(e.to_string()))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEADER: &str =
        "pickup_datetime,dropoff_datetime,pickup_longitude,pickup_latitude,dropoff_longitude,dropoff_latitude\n";

    fn venue() -> VenueConfig {
        VenueConfig::new("Barclays Center", GeoPoint::new(40.68265, -73.97469).unwrap(), 220.0, "America/New_York")
            .unwrap()
    }

    fn day(d: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(2014, 7, d).unwrap()
    }

    fn trip(date: NaiveDate, from: (f64, f64), to: (f64, f64)) -> TripRecord {
        TripRecord {
            pickup_time: date.and_hms_opt(19, 5, 0).unwrap(),
            dropoff_time: date.and_hms_opt(19, 30, 0).unwrap(),
            pickup_point: GeoPoint::new(from.0, from.1).unwrap(),
            dropoff_point: GeoPoint::new(to.0, to.1).unwrap(),
        }
    }

    #[test]
    fn parses_well_formed_row() {
        let src = format!("{HEADER}2014-07-25 19:05:00,2014-07-25 19:30:00,-73.975,40.683,-73.990,40.750\n");
        let parsed = parse_trip_records(src.as_bytes()).unwrap();
        assert!(parsed.rejections.is_empty());
        let t = &parsed.records[0];
        assert_eq!(t.pickup_time, day(25).and_hms_opt(19, 5, 0).unwrap());
        assert_eq!(t.dropoff_time, day(25).and_hms_opt(19, 30, 0).unwrap());
        assert_eq!((t.pickup_point.lon(), t.pickup_point.lat()), (-73.975, 40.683));
        assert_eq!((t.dropoff_point.lon(), t.dropoff_point.lat()), (-73.990, 40.750));
    }

    #[test]
    fn rejects_null_island() {
        let src = format!("{HEADER}2014-07-25 19:05:00,2014-07-25 19:30:00,0.0,0.0,-73.990,40.750\n");
        let parsed = parse_trip_records(src.as_bytes()).unwrap();
        assert!(parsed.records.is_empty());
        assert_eq!(parsed.rejections, vec![Rejection { row: 2, reason: "null-island sentinel".into() }]);
    }

    #[test]
    fn header_only_is_empty() {
        let parsed = parse_trip_records(HEADER.as_bytes()).unwrap();
        assert!(parsed.records.is_empty());
        assert!(parsed.rejections.is_empty());
    }

    #[test]
    fn missing_column_is_schema_error() {
        let src = "pickup_datetime,dropoff_datetime,pickup_longitude\n";
        match parse_trip_records(src.as_bytes()) {
            Err(IngestError::Schema(cols)) => assert_eq!(cols.len(), 3),
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn extra_columns_and_order_do_not_matter() {
        let src = "vendor_id,dropoff_latitude,dropoff_longitude,pickup_latitude,pickup_longitude,dropoff_datetime,pickup_datetime\n\
                   CMT,40.750,-73.990,40.683,-73.975,2014-07-25 19:30:00,2014-07-25 19:05:00\n";
        let parsed = parse_trip_records(src.as_bytes()).unwrap();
        assert_eq!(parsed.records.len(), 1);
        assert_eq!(parsed.records[0].pickup_point.lat(), 40.683);
    }

    #[test]
    fn rejection_reasons_keep_order_and_rows() {
        let src = format!(
            "{HEADER}\
             2014-07-25 19:05:00,2014-07-25 19:30:00,-73.975,40.683,-73.990,40.750\n\
             2014-07-25 19:05:00,2014-07-25 18:30:00,-73.975,40.683,-73.990,40.750\n\
             2014-07-25 01:05:00,2014-07-25 14:30:00,-73.975,40.683,-73.990,40.750\n\
             not-a-date,2014-07-25 19:30:00,-73.975,40.683,-73.990,40.750\n\
             2014-07-25 19:05:00,2014-07-25 19:30:00,-73.975,95.0,-73.990,40.750\n\
             2014-07-26 19:05:00,2014-07-26 19:30:00,-73.975,40.683,-73.990,40.750\n"
        );
        let parsed = parse_trip_records(src.as_bytes()).unwrap();
        assert_eq!(parsed.records.len(), 2);
        assert_eq!(parsed.records[1].pickup_time.date(), day(26));
        let rows: Vec<u64> = parsed.rejections.iter().map(|r| r.row).collect();
        assert_eq!(rows, vec![3, 4, 5, 6]);
        assert_eq!(parsed.rejections[0].reason, "dropoff before pickup");
        assert!(parsed.rejections[1].reason.contains("12 hours"));
    }

    #[test]
    fn three_trip_fixture() {
        let c = (40.68265, -73.97469);
        let near = (40.6830, -73.9750);
        let far = (40.7500, -73.9900);
        let trips = vec![trip(day(25), c, far), trip(day(25), near, far), trip(day(25), far, near)];
        let range = DateRange::new(day(25), day(25)).unwrap();
        let series = aggregate_daily_demand(&trips, &venue(), range);
        assert_eq!(series, vec![DailyDemand::new(day(25), 2, 1)]);
    }

    #[test]
    fn both_ends_inside_count_once_each() {
        let c = (40.68265, -73.97469);
        let range = DateRange::new(day(25), day(25)).unwrap();
        let series = aggregate_daily_demand(&[trip(day(25), c, c)], &venue(), range);
        assert_eq!(series, vec![DailyDemand::new(day(25), 1, 1)]);
    }

    #[test]
    fn dense_calendar_emits_zero_days() {
        let c = (40.68265, -73.97469);
        let range = DateRange::new(day(24), day(26)).unwrap();
        let series = aggregate_daily_demand(&[trip(day(24), c, c)], &venue(), range);
        assert_eq!(series.len(), 3);
        assert_eq!(series[1], DailyDemand::new(day(25), 0, 0));
    }

    #[test]
    fn overnight_trip_splits_dates() {
        let c = (40.68265, -73.97469);
        let mut t = trip(day(25), c, c);
        t.pickup_time = day(25).and_hms_opt(23, 50, 0).unwrap();
        t.dropoff_time = day(26).and_hms_opt(0, 10, 0).unwrap();
        let range = DateRange::new(day(25), day(26)).unwrap();
        let series = aggregate_daily_demand(&[t], &venue(), range);
        assert_eq!(series, vec![DailyDemand::new(day(25), 1, 0), DailyDemand::new(day(26), 0, 1)]);
    }

    #[test]
    fn venue_validation() {
        let center = GeoPoint::new(40.0, -73.0).unwrap();
        assert!(VenueConfig::new("v", center, 0.0, "America/New_York").is_err());
        assert!(VenueConfig::new("v", center, 10.0, "Mars/Olympus").is_err());
    }

    #[test]
    fn demand_csv_round_trip() {
        let series = vec![DailyDemand::new(day(1), 3, 4), DailyDemand::new(day(2), 0, 0)];
        let mut buf = Vec::new();
        write_daily_demand(&mut buf, &series).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("date,outflow,inflow\n2014-07-01,3,4\n"));
        assert_eq!(read_daily_demand(buf.as_slice()).unwrap(), series);
    }
}
