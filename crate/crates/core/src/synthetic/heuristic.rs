//! A deterministic stand-in for the LLM that reads only the rendered prompt.
//!
//! Event-format prompts get a category from title/description keywords and
//! the first sentence of the description as summary. Prediction prompts get
//! the target's regular level plus the mean deviation of history days whose
//! events look like the target's: same formatted categories, similar titles,
//! same count and times, or the same count, depending on what the prompt
//! shows. With no event information it falls back to the window mean.

use std::collections::BTreeSet;

use crate::llm::{ChatBackend, ChatRequest, ChatResponse, LlmError};
use crate::prompt::round_half_up;

#[derive(Debug, Default, Clone, Copy)]
pub struct HeuristicBackend;

const KEYWORDS: [(&str, &[&str]); 5] = [
    ("NBA Basketball Game", &["nba", "nets"]),
    ("Family Show", &["on ice", "family"]),
    ("College Basketball", &["ncaa", "college"]),
    ("Boxing", &["boxing", "boxer"]),
    ("Concert", &["concert", "tour", "album"]),
];

impl ChatBackend for HeuristicBackend {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        request.validate()?;
        let text = request.prompt_text();
        let reply = match text.contains("\nEvent title: ") {
            true => format_reply(&text),
            false => predict_reply(&text).unwrap_or_else(|| "I cannot determine the demand from this prompt.".into()),
        };
        Ok(ChatResponse::offline(request, reply))
    }

    fn identity(&self) -> String {
        "heuristic".into()
    }
}

fn line_after<'a>(text: &'a str, label: &str) -> Option<&'a str> {
    text.lines().find_map(|l| l.strip_prefix(label)).map(str::trim)
}

fn format_reply(text: &str) -> String {
    let title = line_after(text, "Event title: ").unwrap_or("");
    let description = line_after(text, "Event description: ").unwrap_or("");
    let haystack = format!("{title} {description}").to_lowercase();
    let category = KEYWORDS
        .iter()
        .find(|(_, words)| words.iter().any(|w| haystack.contains(w)))
        .map_or("Other", |(c, _)| *c);
    let summary = match description.find(". ") {
        Some(i) => &description[..=i],
        None if !description.is_empty() => description,
        None => title,
    };
    format!("[Category] {category} [Summary] {summary}")
}

/// Event information of one day as shown in the prompt.
#[derive(Debug, Clone, PartialEq, Default)]
struct Block {
    shown: bool,
    count: usize,
    times: Option<String>,
    titles: Vec<BTreeSet<String>>,
    categories: BTreeSet<String>,
}

fn segment<'a>(text: &'a str, tag: &str) -> Vec<&'a str> {
    let mut out = Vec::new();
    let mut rest = text;
    while let Some(i) = rest.find(tag) {
        rest = &rest[i + tag.len()..];
        let end = rest.find(" [").unwrap_or(rest.len());
        out.push(rest[..end].trim());
    }
    out
}

fn tokens(s: &str) -> BTreeSet<String> {
    s.split(|c: char| !c.is_alphanumeric()).filter(|t| t.len() > 1).map(str::to_lowercase).collect()
}

fn parse_block(block: Option<&str>) -> Block {
    let Some(b) = block else { return Block::default() };
    let b = b.trim();
    if b == "no event" {
        return Block { shown: true, ..Block::default() };
    }
    let count = b.split_whitespace().next().and_then(|n| n.parse().ok()).unwrap_or(1);
    Block {
        shown: true,
        count,
        times: segment(b, "[time] ").first().map(|s| s.to_string()),
        titles: segment(b, "[Title] ").into_iter().map(tokens).collect(),
        categories: segment(b, "[Category] ").into_iter().map(str::to_string).collect(),
    }
}

fn jaccard(a: &BTreeSet<String>, b: &BTreeSet<String>) -> f64 {
    let union = a.union(b).count();
    match union {
        0 => 0.0,
        _ => a.intersection(b).count() as f64 / union as f64,
    }
}

impl Block {
    fn similar(&self, other: &Block) -> bool {
        if self.count == 0 || other.count == 0 {
            return self.count == other.count;
        }
        if !self.categories.is_empty() {
            return self.categories == other.categories;
        }
        if !self.titles.is_empty() {
            return self.titles.iter().any(|a| other.titles.iter().any(|b| jaccard(a, b) >= 0.4));
        }
        match &self.times {
            Some(t) => self.count == other.count && other.times.as_ref() == Some(t),
            None => self.count == other.count,
        }
    }
}

struct Day {
    weekday: String,
    observed: (f64, f64),
    /// Regular level as stated in the prompt, when decomposed demand is shown.
    regular: Option<(f64, f64)>,
    block: Block,
}

/// The first two signed integers in `s`.
fn two_numbers(s: &str) -> Option<(f64, f64)> {
    let mut nums = s
        .split(|c: char| !(c.is_ascii_digit() || c == '-' || c == '+'))
        .filter_map(|t| t.parse::<i64>().ok());
    Some((nums.next()? as f64, nums.next()? as f64))
}

fn parse_history_line(line: &str) -> Option<Day> {
    let (head, body) = line.split_once(": ")?;
    let weekday = head.split_whitespace().nth(1)?.to_string();
    if let Some(rest) = body.strip_prefix("regular ") {
        let (regular, rest) = rest.split_once("; deviation ")?;
        let regular = two_numbers(regular)?;
        let (deviation, block) = match rest.split_once("; ") {
            Some((d, b)) => (d, Some(b)),
            None => (rest, None),
        };
        let dev = two_numbers(deviation)?;
        Some(Day { weekday, observed: (regular.0 + dev.0, regular.1 + dev.1), regular: Some(regular), block: parse_block(block) })
    } else {
        let (observed, block) = match body.split_once("; ") {
            Some((o, b)) => (o, Some(b)),
            None => (body, None),
        };
        Some(Day { weekday, observed: two_numbers(observed)?, regular: None, block: parse_block(block) })
    }
}

fn mean(values: impl Iterator<Item = (f64, f64)>) -> Option<(f64, f64)> {
    let (mut a, mut b, mut n) = (0.0, 0.0, 0usize);
    for (x, y) in values {
        a += x;
        b += y;
        n += 1;
    }
    (n > 0).then(|| (a / n as f64, b / n as f64))
}

fn predict_reply(text: &str) -> Option<String> {
    let history_start = text.find("oldest first:\n")? + "oldest first:\n".len();
    let history_end = text[history_start..].find("\n\nNext day:")? + history_start;
    let days: Vec<Day> = text[history_start..history_end].lines().map(parse_history_line).collect::<Option<_>>()?;
    let target_text = &text[history_end..];
    let target_weekday = line_after(target_text, "Date: ")?.split_whitespace().nth(1)?.to_string();
    let target_block = parse_block(line_after(target_text, "Events: "));
    let stated = line_after(target_text, "Expected demand if no event occurs: ")
        .or_else(|| line_after(target_text, "Regular demand estimate: "))
        .and_then(two_numbers);

    // Regular level of a day: stated in the prompt, or the mean of quiet
    // same-weekday days in the window.
    let quiet = |d: &&Day| !d.block.shown || d.block.count == 0;
    let level = |weekday: &str| {
        mean(days.iter().filter(quiet).filter(|d| d.weekday == weekday).map(|d| d.observed))
            .or_else(|| mean(days.iter().filter(quiet).map(|d| d.observed)))
            .unwrap_or((0.0, 0.0))
    };
    let regular = |d: &Day| d.regular.unwrap_or_else(|| level(&d.weekday));
    let deviation = |d: &Day| {
        let r = regular(d);
        (d.observed.0 - r.0, d.observed.1 - r.1)
    };

    let base = stated.unwrap_or_else(|| level(&target_weekday));
    let (shift, how) = if !target_block.shown {
        (mean(days.iter().map(deviation)), "the mean deviation of the whole window")
    } else {
        let similar: Vec<&Day> = days.iter().filter(|d| target_block.similar(&d.block)).collect();
        match (similar.is_empty(), target_block.count) {
            (false, _) => (mean(similar.into_iter().map(deviation)), "the mean deviation of similar days"),
            (true, 0) => (None, "no adjustment"),
            (true, _) => (
                mean(days.iter().filter(|d| d.block.count > 0).map(deviation)),
                "the mean deviation of event days, as no similar day was found",
            ),
        }
    };
    let shift = shift.unwrap_or((0.0, 0.0));
    let pickup = round_half_up(base.0 + shift.0).max(0);
    let dropoff = round_half_up(base.1 + shift.1).max(0);
    Some(format!(
        "[pickup] {pickup} [dropoff] {dropoff} [reasoning] Regular level {} pickups and {} dropoffs, adjusted by {how} ({:+} pickups, {:+} dropoffs).",
        round_half_up(base.0),
        round_half_up(base.1),
        round_half_up(shift.0),
        round_half_up(shift.1)
    ))
}
