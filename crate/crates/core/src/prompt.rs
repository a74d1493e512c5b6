//! Prompt rendering for event formatting and next-day demand prediction.
//!
//! Rendering is a pure function of its inputs: equal inputs give
//! byte-identical requests. The skeleton text comes from [`PromptTemplates`]
//! (overridable from a directory); per-day lines and event blocks are
//! rendered here so that their layout stays stable.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use chrono::{Duration, NaiveDate};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dates::weekday_name;
use crate::decomposition::{DemandDecomposition, DemandPair};
use crate::events::{EventRecord, FormattedEvent};
use crate::llm::{ChatMessage, ChatRequest};

pub const DEFAULT_HISTORY_DAYS: usize = 28;
pub const DEFAULT_DESCRIPTION_WORD_CAP: usize = 500;
pub const TRUNCATION_MARKER: &str = "[truncated]";
pub const PREDICTION_OUTPUT_FORM: &str = "[pickup] <integer> [dropoff] <integer> [reasoning] <your step-by-step reasoning>";
pub const EVENT_OUTPUT_FORM: &str = "[Category] <event category> [Summary] <one to two sentence summary>";

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("invalid history window: {0}")]
    Window(String),
    #[error("day {0} has no demand decomposition")]
    MissingDecomposition(NaiveDate),
    #[error("event {title:?} on {date} has no formatted summary")]
    MissingFormatted { title: String, date: NaiveDate },
    #[error("target date {target} does not follow window end {window_end}")]
    TargetMismatch { target: NaiveDate, window_end: NaiveDate },
    #[error("template error: {0}")]
    Template(String),
    #[error("unknown ablation {0:?}")]
    Ablation(String),
}

/// Which event information reaches the model: nothing, count, count+time,
/// count+time+raw text, or count+time+formatted summary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EventFeatures {
    #[serde(rename = "NA")]
    None,
    #[serde(rename = "c")]
    Count,
    #[serde(rename = "c_t")]
    CountTime,
    #[serde(rename = "c_t_h")]
    CountTimeText,
    #[serde(rename = "c_t_h_prime")]
    CountTimeFormatted,
}

impl EventFeatures {
    pub const ALL: [EventFeatures; 5] = [
        EventFeatures::None,
        EventFeatures::Count,
        EventFeatures::CountTime,
        EventFeatures::CountTimeText,
        EventFeatures::CountTimeFormatted,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EventFeatures::None => "NA",
            EventFeatures::Count => "c",
            EventFeatures::CountTime => "c_t",
            EventFeatures::CountTimeText => "c_t_h",
            EventFeatures::CountTimeFormatted => "c_t_h_prime",
        }
    }

    pub fn has_count(self) -> bool {
        self != EventFeatures::None
    }

    pub fn has_time(self) -> bool {
        self >= EventFeatures::CountTime
    }
}

/// Demand input form: raw observed demand, or regular baseline plus
/// irregular deviation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DemandFeatures {
    #[serde(rename = "o")]
    Original,
    #[serde(rename = "r_i")]
    Decomposed,
}

impl DemandFeatures {
    pub fn name(self) -> &'static str {
        match self {
            DemandFeatures::Original => "o",
            DemandFeatures::Decomposed => "r_i",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AblationConfig {
    pub event_features: EventFeatures,
    pub demand_features: DemandFeatures,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig::full()
    }
}

impl AblationConfig {
    pub fn new(event_features: EventFeatures, demand_features: DemandFeatures) -> Self {
        AblationConfig { event_features, demand_features }
    }

    pub fn full() -> Self {
        AblationConfig::new(EventFeatures::CountTimeFormatted, DemandFeatures::Decomposed)
    }

    /// Every event-feature level with decomposed demand, then raw demand with
    /// the full event features.
    pub fn canonical_grid() -> Vec<AblationConfig> {
        EventFeatures::ALL
            .iter()
            .map(|e| AblationConfig::new(*e, DemandFeatures::Decomposed))
            .chain(std::iter::once(AblationConfig::new(EventFeatures::CountTimeFormatted, DemandFeatures::Original)))
            .collect()
    }
}

impl fmt::Display for AblationConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}+{}", self.event_features.name(), self.demand_features.name())
    }
}

impl FromStr for AblationConfig {
    type Err = PromptError;

    /// Accepts `<event>+<demand>` or a bare event level (demand defaults to
    /// `r_i`).
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (event, demand) = s.split_once('+').unwrap_or((s, "r_i"));
        let event_features = EventFeatures::ALL
            .into_iter()
            .find(|e| e.name().eq_ignore_ascii_case(event.trim()))
            .ok_or_else(|| PromptError::Ablation(s.to_string()))?;
        let demand_features = match demand.trim() {
            "o" => DemandFeatures::Original,
            "r_i" | "r+i" => DemandFeatures::Decomposed,
            _ => return Err(PromptError::Ablation(s.to_string())),
        };
        Ok(AblationConfig { event_features, demand_features })
    }
}

/// One scheduled event with its formatted summary when available.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DayEvent {
    pub record: EventRecord,
    pub formatted: Option<FormattedEvent>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DayContext {
    pub date: NaiveDate,
    pub events: Vec<DayEvent>,
    pub decomposition: Option<DemandDecomposition>,
}

impl DayContext {
    pub fn weekday(&self) -> &'static str {
        weekday_name(self.date)
    }
}

/// The `T` days immediately preceding a target date, oldest first.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryWindow {
    days: Vec<DayContext>,
}

impl HistoryWindow {
    pub fn new(days: Vec<DayContext>, history_days: usize, target: NaiveDate) -> Result<Self, PromptError> {
        if history_days == 0 {
            return Err(PromptError::Window("history length must be positive".into()));
        }
        if days.len() != history_days {
            return Err(PromptError::Window(format!("expected {history_days} days, got {}", days.len())));
        }
        for pair in days.windows(2) {
            if pair[1].date != pair[0].date + Duration::days(1) {
                return Err(PromptError::Window(format!("dates {} and {} are not consecutive", pair[0].date, pair[1].date)));
            }
        }
        let last = days.last().expect("non-empty").date;
        if last + Duration::days(1) != target {
            return Err(PromptError::TargetMismatch { target, window_end: last });
        }
        if let Some(day) = days.iter().find(|d| d.decomposition.is_none()) {
            return Err(PromptError::MissingDecomposition(day.date));
        }
        Ok(HistoryWindow { days })
    }

    pub fn days(&self) -> &[DayContext] {
        &self.days
    }

    pub fn len(&self) -> usize {
        self.days.len()
    }

    pub fn is_empty(&self) -> bool {
        self.days.is_empty()
    }

    pub fn end(&self) -> NaiveDate {
        self.days.last().expect("non-empty").date
    }
}

const DEFAULT_EVENT_TEMPLATE: &str = "\
You are helping to analyze how public events at {{venue}} affect local travel demand. Below is an event listing collected from the venue's website.

Event title: {{title}}
{{description}}
Based on the title and the description (if given), identify the category of the event and summarize it in one to two sentences. Keep the details that indicate how many people may attend, such as performers, teams, tour names and popularity, and leave out ticketing and logistics details.

Reply exactly in the form: {{output_form}}";

const DEFAULT_PREDICTION_TEMPLATE: &str = "\
{{task}}

Reply exactly in the form: {{output_form}}

Daily travel demand near {{venue}} over the past {{history_days}} days, oldest first:
{{history}}

Next day:
{{target}}

Guidelines:
{{guidelines}}";

/// Prompt skeletons with `{{name}}` placeholders.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplates {
    pub event_format: String,
    pub prediction: String,
}

const EVENT_KEYS: &[&str] = &["venue", "title", "description", "output_form"];
const PREDICTION_KEYS: &[&str] = &["task", "output_form", "venue", "history_days", "history", "target", "guidelines"];

impl Default for PromptTemplates {
    fn default() -> Self {
        PromptTemplates { event_format: DEFAULT_EVENT_TEMPLATE.into(), prediction: DEFAULT_PREDICTION_TEMPLATE.into() }
    }
}

impl PromptTemplates {
    /// Defaults, with `event_format.txt` and/or `prediction.txt` from `dir`
    /// replacing the corresponding skeleton when present.
    pub fn load_overrides(dir: &Path) -> Result<Self, PromptError> {
        let mut t = PromptTemplates::default();
        let read = |name: &str| -> Result<Option<String>, PromptError> {
            let path = dir.join(name);
            match std::fs::read_to_string(&path) {
                Ok(s) => Ok(Some(s)),
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
                Err(e) => Err(PromptError::Template(format!("{}: {e}", path.display()))),
            }
        };
        if let Some(s) = read("event_format.txt")? {
            t.event_format = s;
        }
        if let Some(s) = read("prediction.txt")? {
            t.prediction = s;
        }
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<(), PromptError> {
        check_placeholders(&self.event_format, EVENT_KEYS)?;
        check_placeholders(&self.prediction, PREDICTION_KEYS)
    }

    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.event_format.as_bytes());
        h.update([0u8]);
        h.update(self.prediction.as_bytes());
        hex::encode(h.finalize())
    }
}

fn placeholders(template: &str) -> impl Iterator<Item = Result<(usize, usize, &str), PromptError>> + '_ {
    let mut pos = 0;
    std::iter::from_fn(move || {
        let open = template[pos..].find("{{")? + pos;
        let Some(close) = template[open + 2..].find("}}") else {
            pos = template.len();
            return Some(Err(PromptError::Template(format!("unclosed placeholder at byte {open}"))));
        };
        let close = open + 2 + close;
        pos = close + 2;
        Some(Ok((open, close + 2, template[open + 2..close].trim())))
    })
}

fn check_placeholders(template: &str, allowed: &[&str]) -> Result<(), PromptError> {
    for p in placeholders(template) {
        let (_, _, name) = p?;
        if !allowed.contains(&name) {
            return Err(PromptError::Template(format!("unknown placeholder {{{{{name}}}}}")));
        }
    }
    Ok(())
}

/// Single-pass substitution; substituted values are never re-scanned.
fn fill(template: &str, vars: &[(&str, &str)]) -> Result<String, PromptError> {
    let mut out = String::with_capacity(template.len() + 256);
    let mut last = 0;
    for p in placeholders(template) {
        let (start, end, name) = p?;
        let value = vars
            .iter()
            .find(|(k, _)| *k == name)
            .map(|(_, v)| *v)
            .ok_or_else(|| PromptError::Template(format!("unknown placeholder {{{{{name}}}}}")))?;
        out.push_str(&template[last..start]);
        out.push_str(value);
        last = end;
    }
    out.push_str(&template[last..]);
    Ok(out)
}

/// Round half up to an integer.
pub fn round_half_up(v: f64) -> i64 {
    (v + 0.5).floor() as i64
}

fn collapse_whitespace(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// First `cap` whitespace tokens joined by single spaces, with a marker when
/// anything was dropped.
pub fn cap_words(text: &str, cap: usize) -> String {
    let words: Vec<&str> = text.split_whitespace().collect();
    if words.len() <= cap {
        words.join(" ")
    } else {
        format!("{} {TRUNCATION_MARKER}", words[..cap].join(" "))
    }
}

fn pair_text(p: DemandPair) -> String {
    format!("{} pickups, {} dropoffs", round_half_up(p.outflow), round_half_up(p.inflow))
}

fn signed_pair_text(p: DemandPair) -> String {
    format!("{:+} pickups, {:+} dropoffs", round_half_up(p.outflow), round_half_up(p.inflow))
}

#[derive(Debug, Clone)]
pub struct PromptBuilder {
    pub model: String,
    pub venue: String,
    pub temperature: f64,
    pub max_tokens: Option<u32>,
    pub description_word_cap: usize,
    pub templates: PromptTemplates,
}

impl PromptBuilder {
    pub fn new(model: impl Into<String>, venue: impl Into<String>) -> Self {
        PromptBuilder {
            model: model.into(),
            venue: venue.into(),
            temperature: 0.0,
            max_tokens: None,
            description_word_cap: DEFAULT_DESCRIPTION_WORD_CAP,
            templates: PromptTemplates::default(),
        }
    }

    fn request(&self, content: String) -> ChatRequest {
        ChatRequest {
            model: self.model.clone(),
            temperature: self.temperature,
            messages: vec![ChatMessage::user(content)],
            max_tokens: self.max_tokens,
        }
    }

    pub fn build_event_format_prompt(&self, event: &EventRecord) -> ChatRequest {
        let description = match &event.description {
            Some(d) => format!("Event description: {}\n", cap_words(d, self.description_word_cap)),
            None => String::new(),
        };
        let title = collapse_whitespace(&event.title);
        let content = fill(
            &self.templates.event_format,
            &[("venue", &self.venue), ("title", &title), ("description", &description), ("output_form", EVENT_OUTPUT_FORM)],
        )
        .expect("templates are validated on load");
        self.request(content)
    }

    /// The event block of one day, e.g. `2 events: [time] 13:00-16:00,17:00-20:00 [Category] ...`.
    /// Returns `None` when event features are disabled.
    pub fn render_event_block(&self, events: &[DayEvent], features: EventFeatures) -> Result<Option<String>, PromptError> {
        if !features.has_count() {
            return Ok(None);
        }
        if events.is_empty() {
            return Ok(Some("no event".into()));
        }
        let mut block = match events.len() {
            1 => "1 event".to_string(),
            n => format!("{n} events"),
        };
        if features.has_time() {
            let spans: Vec<String> = events.iter().map(|e| e.record.time_span()).collect();
            block.push_str(&format!(": [time] {}", spans.join(",")));
        }
        let mut seen: Vec<String> = Vec::new();
        for e in events {
            let text = match features {
                EventFeatures::CountTimeText => {
                    let mut t = format!(" [Title] {}", collapse_whitespace(&e.record.title));
                    if let Some(d) = &e.record.description {
                        t.push_str(&format!(" [Description] {}", cap_words(d, self.description_word_cap)));
                    }
                    t
                }
                EventFeatures::CountTimeFormatted => {
                    let f = e.formatted.as_ref().ok_or_else(|| PromptError::MissingFormatted {
                        title: e.record.title.clone(),
                        date: e.record.date,
                    })?;
                    format!(" [Category] {} [Summary] {}", collapse_whitespace(&f.category), collapse_whitespace(&f.summary))
                }
                _ => continue,
            };
            // Repeated showings of one production render once.
            if !seen.contains(&text) {
                seen.push(text);
            }
        }
        seen.iter().for_each(|t| block.push_str(t));
        Ok(Some(block))
    }

    pub fn render_history_line(&self, day: &DayContext, ablation: &AblationConfig) -> Result<String, PromptError> {
        let dec = day.decomposition.as_ref().ok_or(PromptError::MissingDecomposition(day.date))?;
        let mut line = format!("{} {}: ", day.date, day.weekday());
        match ablation.demand_features {
            DemandFeatures::Original => line.push_str(&pair_text(DemandPair::from(dec.actual))),
            DemandFeatures::Decomposed => {
                line.push_str(&format!("regular {}; deviation {}", pair_text(dec.baseline), signed_pair_text(dec.deviation)))
            }
        }
        if let Some(block) = self.render_event_block(&day.events, ablation.event_features)? {
            line.push_str("; ");
            line.push_str(&block);
        }
        Ok(line)
    }

    pub fn build_prediction_prompt(
        &self,
        window: &HistoryWindow,
        target: &DayContext,
        baseline: DemandPair,
        ablation: &AblationConfig,
    ) -> Result<ChatRequest, PromptError> {
        if window.end() + Duration::days(1) != target.date {
            return Err(PromptError::TargetMismatch { target: target.date, window_end: window.end() });
        }
        let history = window
            .days()
            .iter()
            .map(|d| self.render_history_line(d, ablation))
            .collect::<Result<Vec<_>, _>>()?
            .join("\n");

        let events_on = ablation.event_features.has_count();
        let mut target_block = format!("Date: {} {}", target.date, target.weekday());
        if let Some(block) = self.render_event_block(&target.events, ablation.event_features)? {
            target_block.push_str(&format!("\nEvents: {block}"));
        }
        if ablation.demand_features == DemandFeatures::Decomposed {
            let label = match events_on {
                true => "Expected demand if no event occurs",
                false => "Regular demand estimate",
            };
            target_block.push_str(&format!("\n{label}: {}", pair_text(baseline)));
        }

        let history_days = window.len().to_string();
        let task = task_text(&self.venue, window.len(), ablation);
        let guidelines = guideline_text(events_on);
        let content = fill(
            &self.templates.prediction,
            &[
                ("task", &task),
                ("output_form", PREDICTION_OUTPUT_FORM),
                ("venue", &self.venue),
                ("history_days", &history_days),
                ("history", &history),
                ("target", &target_block),
                ("guidelines", &guidelines),
            ],
        )?;
        Ok(self.request(content))
    }
}

fn task_text(venue: &str, history_days: usize, ablation: &AblationConfig) -> String {
    let events_on = ablation.event_features.has_count();
    let demand = match (ablation.demand_features, events_on) {
        (DemandFeatures::Original, _) => "the observed numbers of taxi pickups and dropoffs".to_string(),
        (DemandFeatures::Decomposed, true) => "the regular demand (the average for that weekday over past days without events) and the deviation of the observed demand from that regular level".to_string(),
        (DemandFeatures::Decomposed, false) => "the regular demand (the historical average for that weekday) and the deviation of the observed demand from that regular level".to_string(),
    };
    let mut text = format!(
        "Your task is to predict the number of taxi pickups (outflow) and dropoffs (inflow) near {venue} for the next day. \
         For each of the past {history_days} days you are given {demand}"
    );
    text.push_str(match events_on {
        true => ", together with the events held at the venue that day. You are also given the events scheduled for the next day",
        false => ". You are also given the date of the next day",
    });
    if ablation.demand_features == DemandFeatures::Decomposed {
        text.push_str(match events_on {
            true => " and the demand expected if no event occurs.",
            false => " and its regular demand estimate.",
        });
    } else {
        text.push('.');
    }
    text
}

fn guideline_text(events_on: bool) -> String {
    let factors = match events_on {
        true => "date, time, event category, and performer popularity",
        false => "date and day of the week",
    };
    let similar = match events_on {
        true => "learning from similar historical days, such as days with events of the same category",
        false => "learning from similar historical days, such as the same weekday in previous weeks",
    };
    format!(
        "1. Make the prediction by considering both positive and negative factors affecting travel demand, including {factors}.\n\
         2. Make the prediction by {similar}.\n\
         3. Please think step-by-step before making the prediction, and write your reasoning after [reasoning]."
    )
}

/// The same request with a reminder of the required reply form appended to
/// the last message.
pub fn with_format_reminder(request: &ChatRequest, output_form: &str) -> ChatRequest {
    let mut r = request.clone();
    if let Some(last) = r.messages.last_mut() {
        last.content.push_str(&format!(
            "\n\nReminder: your previous reply could not be parsed. Reply exactly in the form: {output_form}"
        ));
    }
    r
}
