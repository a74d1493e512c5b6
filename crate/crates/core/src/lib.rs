//! Daily travel demand prediction at an event venue.
//!
//! The crate covers the whole pipeline: trip ingestion and aggregation,
//! event catalogs, baseline/deviation decomposition, the chat-completion
//! gateway and its offline backends, prompt rendering and reply parsing,
//! classical comparators, and evaluation.

pub mod baselines;
pub mod dates;
pub mod decomposition;
pub mod evaluation;
pub mod events;
pub mod geo;
pub mod llm;
pub mod parse;
pub mod pipeline;
pub mod prompt;
pub mod synthetic;
pub mod trips;

pub use dates::DateRange;
pub use decomposition::{BaselineConfig, BaselineFallback, DemandDecomposition, DemandPair};
pub use events::{DayEvents, EventCalendar, EventRecord, FormattedEvent};
pub use geo::{haversine_m, GeoPoint};
pub use trips::{DailyDemand, TripRecord, VenueConfig};
