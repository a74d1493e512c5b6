//! Extraction of tagged values from free-form model replies.
//!
//! Tags such as `[pickup]` are matched case-insensitively, tolerate
//! whitespace inside the brackets, and only their first occurrence counts.

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::events::{EventRecord, FormattedEvent};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("malformed reply ({reason})")]
pub struct MalformedReply {
    pub reason: String,
    pub raw: String,
}

impl MalformedReply {
    fn new(reason: impl Into<String>, raw: &str) -> Self {
        MalformedReply { reason: reason.into(), raw: raw.to_string() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionResult {
    pub date: NaiveDate,
    pub pickup: u64,
    pub dropoff: u64,
    pub reasoning: String,
    pub raw_response: String,
}

impl PredictionResult {
    /// The canonical reply form this parser expects.
    pub fn to_reply(&self) -> String {
        format!("[pickup] {} [dropoff] {} [reasoning] {}", self.pickup, self.dropoff, self.reasoning)
    }
}

/// Byte span of the first `[name]` tag at or after `from`.
fn find_tag(text: &str, from: usize, name: &str) -> Option<(usize, usize)> {
    let bytes = text.as_bytes();
    let mut i = from;
    while let Some(off) = text.get(i..)?.find('[') {
        let open = i + off;
        let mut j = open + 1;
        j = skip_ws(text, j);
        let end_name = j + name.len();
        if end_name <= bytes.len() && bytes[j..end_name].eq_ignore_ascii_case(name.as_bytes()) {
            let k = skip_ws(text, end_name);
            if bytes.get(k) == Some(&b']') {
                return Some((open, k + 1));
            }
        }
        i = open + 1;
    }
    None
}

fn skip_ws(text: &str, mut i: usize) -> usize {
    while let Some(c) = text.get(i..).and_then(|s| s.chars().next()) {
        if !c.is_whitespace() {
            break;
        }
        i += c.len_utf8();
    }
    i
}

fn collapse(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub fn parse_formatted_event(reply: &str, source: &EventRecord) -> Result<FormattedEvent, MalformedReply> {
    let (_, cat_end) = find_tag(reply, 0, "category").ok_or_else(|| MalformedReply::new("missing [Category] tag", reply))?;
    let (sum_start, sum_end) =
        find_tag(reply, cat_end, "summary").ok_or_else(|| MalformedReply::new("missing [Summary] tag after [Category]", reply))?;
    let category = collapse(&reply[cat_end..sum_start]);
    let summary = collapse(&reply[sum_end..]);
    if category.is_empty() {
        return Err(MalformedReply::new("empty category", reply));
    }
    if summary.is_empty() {
        return Err(MalformedReply::new("empty summary", reply));
    }
    Ok(FormattedEvent { category, summary, source: source.clone() })
}

/// Parses the integer right after a tag: optional `:`/`=`, digits with
/// optional comma grouping (`1,024`).
fn number_after(reply: &str, pos: usize, tag: &str) -> Result<u64, MalformedReply> {
    let bytes = reply.as_bytes();
    let mut i = skip_ws(reply, pos);
    if matches!(bytes.get(i), Some(b':') | Some(b'=')) {
        i = skip_ws(reply, i + 1);
    }
    match bytes.get(i) {
        Some(b'-') => return Err(MalformedReply::new(format!("negative {tag} value"), reply)),
        Some(b'+') => i += 1,
        _ => {}
    }
    let start = i;
    let mut digits = String::new();
    while i < bytes.len() && bytes[i].is_ascii_digit() {
        digits.push(bytes[i] as char);
        i += 1;
    }
    if digits.is_empty() {
        return Err(MalformedReply::new(format!("non-numeric {tag} value"), reply));
    }
    // Comma groups only when the first group is short and every group has
    // exactly three digits.
    if i - start <= 3 {
        while bytes.get(i) == Some(&b',')
            && bytes.len() >= i + 4
            && bytes[i + 1..i + 4].iter().all(u8::is_ascii_digit)
            && !bytes.get(i + 4).is_some_and(u8::is_ascii_digit)
        {
            digits.extend(bytes[i + 1..i + 4].iter().map(|b| *b as char));
            i += 4;
        }
    }
    if bytes.get(i) == Some(&b'.') && bytes.get(i + 1).is_some_and(u8::is_ascii_digit) {
        return Err(MalformedReply::new(format!("non-integer {tag} value"), reply));
    }
    digits.parse::<u64>().map_err(|_| MalformedReply::new(format!("{tag} value out of range"), reply))
}

pub fn parse_prediction(reply: &str, date: NaiveDate) -> Result<PredictionResult, MalformedReply> {
    let (_, p_end) = find_tag(reply, 0, "pickup").ok_or_else(|| MalformedReply::new("missing [pickup] tag", reply))?;
    let pickup = number_after(reply, p_end, "pickup")?;
    let (_, d_end) = find_tag(reply, 0, "dropoff").ok_or_else(|| MalformedReply::new("missing [dropoff] tag", reply))?;
    let dropoff = number_after(reply, d_end, "dropoff")?;
    let reasoning = match find_tag(reply, 0, "reasoning") {
        Some((_, end)) => reply[end..].trim().to_string(),
        None => reply.to_string(),
    };
    Ok(PredictionResult { date, pickup, dropoff, reasoning, raw_response: reply.to_string() })
}

/// One line of `parse_failures.jsonl`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseFailure {
    pub date: NaiveDate,
    pub request_digest: String,
    pub reason: String,
    pub raw_reply: String,
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::NaiveTime;

    fn date() -> NaiveDate {
        NaiveDate::from_ymd_opt(2014, 7, 25).unwrap()
    }

    fn nets() -> EventRecord {
        let t = |h, m| NaiveTime::from_hms_opt(h, m, 0).unwrap();
        EventRecord::new("Brooklyn Nets vs. Dallas Mavericks", None, NaiveDate::from_ymd_opt(2015, 5, 1).unwrap(), t(19, 30), t(22, 30))
            .unwrap()
    }

    #[test]
    fn formatted_event_example() {
        let f = parse_formatted_event(
            "[Category] NBA Basketball Game [Summary] A popular match between the Brooklyn Nets and Dallas Mavericks.",
            &nets(),
        )
        .unwrap();
        assert_eq!(f.category, "NBA Basketball Game");
        assert_eq!(f.summary, "A popular match between the Brooklyn Nets and Dallas Mavericks.");
        assert_eq!(f.source, nets());
    }

    #[test]
    fn formatted_event_layout_variants() {
        let f = parse_formatted_event("Sure!\n[ category ]\n  Concert  \n\n[SUMMARY]:\n  A  show.  ", &nets()).unwrap();
        assert_eq!((f.category.as_str(), f.summary.as_str()), ("Concert", ": A show."));
        assert!(parse_formatted_event("Here is a summary with no tags.", &nets()).is_err());
        assert!(parse_formatted_event("[Summary] x [Category] y", &nets()).is_err());
        assert!(parse_formatted_event("[Category]   [Summary] x", &nets()).is_err());
        assert!(parse_formatted_event("[Category] x [Summary]  ", &nets()).is_err());
    }

    #[test]
    fn prediction_examples() {
        let r = parse_prediction("[pickup] 562 [dropoff] 353 [reasoning] The event is a popular pop music concert...", date()).unwrap();
        assert_eq!((r.pickup, r.dropoff), (562, 353));
        assert_eq!(r.reasoning, "The event is a popular pop music concert...");
        let r = parse_prediction(
            "[pickup] 850 [dropoff] 600 [reasoning] First, we note that the event is an NBA All-Star Event...",
            date(),
        )
        .unwrap();
        assert_eq!((r.pickup, r.dropoff), (850, 600));
    }

    #[test]
    fn negative_and_non_numeric_rejected() {
        assert!(parse_prediction("[pickup] -5 [dropoff] 10", date()).unwrap_err().reason.contains("negative"));
        assert!(parse_prediction("[pickup] many [dropoff] 10", date()).is_err());
        assert!(parse_prediction("[pickup] 5.5 [dropoff] 10", date()).is_err());
        assert!(parse_prediction("[pickup] 5", date()).is_err());
        assert!(parse_prediction("[pickup] 99999999999999999999999 [dropoff] 1", date()).is_err());
    }

    #[test]
    fn commas_case_and_missing_reasoning() {
        let r = parse_prediction("[PICKUP]: 1,024 [Dropoff] = 2,048,000", date()).unwrap();
        assert_eq!((r.pickup, r.dropoff), (1024, 2_048_000));
        assert_eq!(r.reasoning, r.raw_response);
        let r = parse_prediction("[pickup] 562, [dropoff] 353.", date()).unwrap();
        assert_eq!((r.pickup, r.dropoff), (562, 353));
        let r = parse_prediction("[pickup] 1234,567 [dropoff] 1", date()).unwrap();
        assert_eq!(r.pickup, 1234);
    }

    #[test]
    fn first_occurrence_wins() {
        let r = parse_prediction(
            "[pickup] 10 [dropoff] 20 [reasoning] earlier I thought [pickup] 99 [dropoff] 98",
            date(),
        )
        .unwrap();
        assert_eq!((r.pickup, r.dropoff), (10, 20));
        assert_eq!(r.reasoning, "earlier I thought [pickup] 99 [dropoff] 98");
        let f = parse_formatted_event("[Category] A [Summary] s1 [Category] B [Summary] s2", &nets()).unwrap();
        assert_eq!(f.category, "A");
    }

    #[test]
    fn unicode_does_not_panic() {
        assert!(parse_prediction("[\u{3000}pickup\u{3000}] 5 [dropoff] 6 é", date()).is_ok());
        assert!(parse_prediction("[é", date()).is_err());
        assert!(parse_formatted_event("[Category] Lemâitre [Summary] électro", &nets()).is_ok());
    }
}
