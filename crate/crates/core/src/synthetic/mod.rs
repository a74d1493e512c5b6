//! Seeded synthetic venue data: a daily demand series with additive
//! per-category event effects, the event catalog behind it, and trip records
//! that aggregate back to the series.

mod heuristic;

use std::io::Write;

use chrono::{Datelike, Duration, NaiveDate, NaiveDateTime, NaiveTime};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use heuristic::HeuristicBackend;

use crate::dates::DateRange;
use crate::decomposition::DemandPair;
use crate::events::EventRecord;
use crate::geo::GeoPoint;
use crate::trips::{DailyDemand, TripRecord, VenueConfig, TIMESTAMP_FORMAT};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub start: NaiveDate,
    pub days: usize,
    /// Probability that a day hosts an event.
    pub event_rate: f64,
    /// Standard deviation of the daily noise on each flow.
    pub noise_sd: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            seed: 7,
            start: NaiveDate::from_ymd_opt(2013, 7, 1).expect("valid date"),
            days: 730,
            event_rate: 0.4,
            noise_sd: 12.0,
        }
    }
}

/// Regular demand (pickups, dropoffs) by weekday, Monday first.
const WEEKDAY_LEVELS: [(f64, f64); 7] =
    [(330.0, 215.0), (340.0, 220.0), (345.0, 225.0), (360.0, 235.0), (400.0, 260.0), (380.0, 250.0), (300.0, 195.0)];

pub struct Category {
    pub name: &'static str,
    /// Mean additive effect on (pickups, dropoffs).
    pub effect: (f64, f64),
    pub weight: f64,
    pub showings: &'static [((u32, u32), (u32, u32))],
}

pub const CATEGORIES: [Category; 5] = [
    Category { name: "NBA Basketball Game", effect: (300.0, 150.0), weight: 0.35, showings: &[((19, 30), (22, 30))] },
    Category { name: "Concert", effect: (220.0, 140.0), weight: 0.25, showings: &[((20, 0), (23, 0))] },
    Category { name: "Family Show", effect: (80.0, 60.0), weight: 0.15, showings: &[((13, 0), (15, 0)), ((17, 0), (19, 0))] },
    Category { name: "College Basketball", effect: (100.0, 60.0), weight: 0.15, showings: &[((18, 0), (20, 30))] },
    Category { name: "Boxing", effect: (160.0, 100.0), weight: 0.10, showings: &[((21, 0), (23, 45))] },
];

const NBA_OPPONENTS: [&str; 8] = [
    "Boston Celtics",
    "New York Knicks",
    "Miami Heat",
    "Chicago Bulls",
    "Toronto Raptors",
    "Philadelphia 76ers",
    "Washington Wizards",
    "Atlanta Hawks",
];
const ARTISTS: [(&str, &str); 6] = [
    ("Katy Perry", "Prismatic World"),
    ("Jay Z", "Magna Carter World"),
    ("Lady Gaga", "ArtRave"),
    ("Justin Timberlake", "20/20 Experience World"),
    ("Beyonce", "Mrs. Carter Show World"),
    ("Arcade Fire", "Reflektor"),
];
const ICE_SHOWS: [&str; 3] = ["Frozen", "Rockin' Ever After", "Treasure Trove"];
const COLLEGES: [&str; 6] = ["St. John's", "Georgetown", "Villanova", "Syracuse", "Louisville", "Kentucky"];
const BOXERS: [&str; 6] = ["Danny Garcia", "Paulie Malignaggi", "Amir Khan", "Keith Thurman", "Adrien Broner", "Deontay Wilder"];

/// Ground truth for one planted event day.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedEffect {
    pub date: NaiveDate,
    pub category: String,
    pub effect: DemandPair,
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub venue: VenueConfig,
    pub range: DateRange,
    pub demand: Vec<DailyDemand>,
    pub events: Vec<EventRecord>,
    pub effects: Vec<PlantedEffect>,
}

pub fn synthetic_venue() -> VenueConfig {
    VenueConfig::new("Barclays Center", GeoPoint::new(40.6826, -73.9754).expect("valid point"), 220.0, "America/New_York")
        .expect("valid venue")
}

fn pick<'a, T>(rng: &mut ChaCha8Rng, items: &'a [T]) -> &'a T {
    &items[rng.random_range(0..items.len())]
}

fn time(h: u32, m: u32) -> NaiveTime {
    NaiveTime::from_hms_opt(h, m, 0).expect("valid time")
}

fn listing(rng: &mut ChaCha8Rng, category: &Category) -> (String, String) {
    match category.name {
        "NBA Basketball Game" => {
            let opp = pick(rng, &NBA_OPPONENTS);
            (
                format!("Brooklyn Nets vs. {opp}"),
                format!(
                    "The Brooklyn Nets host the {opp} in a regular season NBA matchup. Doors open one hour before tip-off. \
                     Tickets are available at the box office and online."
                ),
            )
        }
        "Concert" => {
            let (artist, tour) = pick(rng, &ARTISTS);
            (
                format!("{artist}: The {tour} Tour"),
                format!(
                    "{artist} brings The {tour} Tour to Brooklyn for one night only. The concert features the hit \
                     songs from the new album with special guests. All ages welcome."
                ),
            )
        }
        "Family Show" => {
            let show = pick(rng, &ICE_SHOWS);
            (
                format!("Disney On Ice: {show}"),
                format!(
                    "Disney On Ice presents {show}, a family ice skating spectacular with beloved characters. \
                     Two performances today. Children under two ride free on a lap."
                ),
            )
        }
        "College Basketball" => {
            let a = pick(rng, &COLLEGES);
            let mut b = pick(rng, &COLLEGES);
            while b == a {
                b = pick(rng, &COLLEGES);
            }
            (format!("{a} vs. {b}"), format!("NCAA men's college basketball doubleheader featuring {a} and {b}."))
        }
        _ => {
            let a = pick(rng, &BOXERS);
            let mut b = pick(rng, &BOXERS);
            while b == a {
                b = pick(rng, &BOXERS);
            }
            (
                format!("Premier Boxing Champions: {a} vs. {b}"),
                format!("Championship boxing night headlined by {a} against {b}, with a full undercard of title bouts."),
            )
        }
    }
}

/// Generates the daily series and the catalog. Event effects are drawn per
/// event around the category mean, so event-free days carry only the
/// weekday level, a mild annual cycle and noise.
pub fn generate(config: &SyntheticConfig) -> SyntheticDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let noise = Normal::new(0.0, config.noise_sd.max(0.0)).expect("finite sd");
    let jitter = Normal::new(1.0, 0.1).expect("finite sd");
    let total_weight: f64 = CATEGORIES.iter().map(|c| c.weight).sum();
    let end = config.start + Duration::days(config.days.max(1) as i64 - 1);
    let range = DateRange::new(config.start, end).expect("non-empty range");

    let mut demand = Vec::with_capacity(config.days);
    let mut events = Vec::new();
    let mut effects = Vec::new();
    for date in range.days() {
        let (base_out, base_in) = WEEKDAY_LEVELS[date.weekday().num_days_from_monday() as usize];
        let season = 1.0 + 0.03 * (std::f64::consts::TAU * date.ordinal() as f64 / 365.25).sin();
        let mut out = base_out * season + noise.sample(&mut rng);
        let mut inn = base_in * season + noise.sample(&mut rng);

        if rng.random::<f64>() < config.event_rate {
            let mut u = rng.random::<f64>() * total_weight;
            let category = CATEGORIES
                .iter()
                .find(|c| {
                    u -= c.weight;
                    u < 0.0
                })
                .unwrap_or(&CATEGORIES[0]);
            let (title, description) = listing(&mut rng, category);
            let k = jitter.sample(&mut rng);
            let effect = DemandPair::new(category.effect.0 * k, category.effect.1 * k);
            out += effect.outflow;
            inn += effect.inflow;
            for ((sh, sm), (eh, em)) in category.showings {
                events.push(
                    EventRecord::new(title.clone(), Some(description.clone()), date, time(*sh, *sm), time(*eh, *em))
                        .expect("valid synthetic event"),
                );
            }
            effects.push(PlantedEffect { date, category: category.name.to_string(), effect });
        }
        demand.push(DailyDemand::new(date, out.round().max(0.0) as u64, inn.round().max(0.0) as u64));
    }
    SyntheticDataset { venue: synthetic_venue(), range, demand, events, effects }
}

fn offset(center: GeoPoint, distance_m: f64, bearing: f64) -> GeoPoint {
    let dlat = distance_m * bearing.cos() / 111_320.0;
    let dlon = distance_m * bearing.sin() / (111_320.0 * center.lat().to_radians().cos());
    GeoPoint::new(center.lat() + dlat, center.lon() + dlon).expect("offset stays in range")
}

/// Expands the series into individual trips: one pickup inside the venue
/// radius per unit of outflow, one dropoff inside per unit of inflow, plus
/// through-traffic that never touches the radius. Aggregating the result
/// over the venue reproduces `dataset.demand` exactly.
pub fn generate_trips(dataset: &SyntheticDataset, seed: u64) -> Vec<TripRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let venue = &dataset.venue;
    let inside = |rng: &mut ChaCha8Rng| offset(venue.center, rng.random::<f64>() * venue.radius_m * 0.8, rng.random::<f64>() * std::f64::consts::TAU);
    let outside =
        |rng: &mut ChaCha8Rng| offset(venue.center, venue.radius_m * 1.5 + rng.random::<f64>() * 4000.0, rng.random::<f64>() * std::f64::consts::TAU);
    let mut trips = Vec::new();
    for day in &dataset.demand {
        let midnight = day.date.and_time(NaiveTime::MIN);
        let moment = |rng: &mut ChaCha8Rng| midnight + Duration::seconds(rng.random_range(0..86_400));
        let ride = |rng: &mut ChaCha8Rng| Duration::seconds(rng.random_range(300..2_400));
        for _ in 0..day.outflow {
            let t = moment(&mut rng);
            let d = ride(&mut rng);
            trips.push(TripRecord { pickup_time: t, dropoff_time: t + d, pickup_point: inside(&mut rng), dropoff_point: outside(&mut rng) });
        }
        for _ in 0..day.inflow {
            let t = moment(&mut rng);
            let d = ride(&mut rng);
            trips.push(TripRecord { pickup_time: t - d, dropoff_time: t, pickup_point: outside(&mut rng), dropoff_point: inside(&mut rng) });
        }
        for _ in 0..(day.outflow + day.inflow) / 4 {
            let t = moment(&mut rng);
            let d = ride(&mut rng);
            trips.push(TripRecord { pickup_time: t, dropoff_time: t + d, pickup_point: outside(&mut rng), dropoff_point: outside(&mut rng) });
        }
    }
    trips.sort_by_key(|t| t.pickup_time);
    trips
}

fn stamp(t: NaiveDateTime) -> String {
    t.format(TIMESTAMP_FORMAT).to_string()
}

/// Writes trips in the ingest CSV layout. Every `sentinel_every`-th row is
/// followed by a null-island row that ingestion must reject (0 disables).
pub fn write_trips_csv<W: Write>(out: W, trips: &[TripRecord], sentinel_every: usize) -> std::io::Result<()> {
    let mut w = std::io::BufWriter::new(out);
    writeln!(w, "pickup_datetime,dropoff_datetime,pickup_longitude,pickup_latitude,dropoff_longitude,dropoff_latitude")?;
    for (i, t) in trips.iter().enumerate() {
        writeln!(
            w,
            "{},{},{:.6},{:.6},{:.6},{:.6}",
            stamp(t.pickup_time),
            stamp(t.dropoff_time),
            t.pickup_point.lon(),
            t.pickup_point.lat(),
            t.dropoff_point.lon(),
            t.dropoff_point.lat()
        )?;
        if sentinel_every > 0 && (i + 1) % sentinel_every == 0 {
            writeln!(w, "{},{},0,0,0,0", stamp(t.pickup_time), stamp(t.dropoff_time))?;
        }
    }
    w.flush()
}
