#![allow(dead_code)]

use chrono::{Duration, NaiveDate, NaiveTime};
use mpe_core::dates::DateRange;
use mpe_core::decomposition::{decompose_series, BaselineConfig};
use mpe_core::events::{EventCalendar, EventRecord, FormattedEvent};
use mpe_core::pipeline::DayIndex;
use mpe_core::trips::DailyDemand;

pub fn date(s: &str) -> NaiveDate {
    NaiveDate::parse_from_str(s, "%Y-%m-%d").unwrap()
}

fn hm(h: u32, m: u32) -> NaiveTime {
    NaiveTime::from_hms_opt(h, m, 0).unwrap()
}

pub const FIXTURE_START: &str = "2014-06-01";
pub const FIXTURE_TARGET: &str = "2014-07-25";

pub fn fixture_catalog() -> Vec<EventRecord> {
    let ev = |title: &str, desc: Option<&str>, d: &str, s: (u32, u32), e: (u32, u32)| {
        EventRecord::new(title, desc.map(str::to_string), date(d), hm(s.0, s.1), hm(e.0, e.1)).unwrap()
    };
    vec![
        ev(
            "Brooklyn Nets vs. Dallas Mavericks",
            Some("The Nets host the Mavericks. Tickets available at the box office."),
            "2014-07-04",
            (19, 30),
            (22, 30),
        ),
        ev("Disney On Ice: Frozen", Some("Skating show for the whole family."), "2014-07-12", (13, 0), (15, 0)),
        ev("Disney On Ice: Frozen", Some("Skating show for the whole family."), "2014-07-12", (17, 0), (19, 0)),
        ev("Charlie Wilson", None, "2014-07-18", (20, 0), (23, 0)),
        ev(
            "Katy Perry: The Prismatic World Tour",
            Some("International superstar Katy Perry brings her tour to Brooklyn. Special guest is Capital Cities."),
            "2014-07-25",
            (19, 30),
            (22, 30),
        ),
    ]
}

pub fn fixture_formatted(catalog: &[EventRecord]) -> Vec<FormattedEvent> {
    catalog
        .iter()
        .map(|r| {
            let (category, summary) = match r.title.as_str() {
                t if t.starts_with("Brooklyn Nets") => ("NBA Basketball Game", "The Brooklyn Nets host the Dallas Mavericks."),
                t if t.starts_with("Disney") => ("Family Show", "A skating show based on Frozen."),
                t if t.starts_with("Charlie") => ("Concert", "An R&B concert by Charlie Wilson."),
                _ => ("Pop Music Concert", "Katy Perry's Prismatic World Tour with special guest Capital Cities."),
            };
            FormattedEvent { category: category.into(), summary: summary.into(), source: r.clone() }
        })
        .collect()
}

/// 55 days of demand with bumps on event days; the target is the last day.
pub fn fixture_series() -> Vec<DailyDemand> {
    let start = date(FIXTURE_START);
    let bumps = [("2014-07-04", 290, 140), ("2014-07-12", 90, 70), ("2014-07-18", 210, 130), ("2014-07-25", 230, 150)];
    (0..55)
        .map(|i| {
            let d = start + Duration::days(i);
            let (mut out, mut inn) = (330 + 9 * (i % 7) as u64 + (i % 3) as u64, 210 + 5 * (i % 7) as u64 + (i % 2) as u64);
            if let Some((_, bo, bi)) = bumps.iter().find(|(s, _, _)| date(s) == d) {
                out += bo;
                inn += bi;
            }
            DailyDemand::new(d, out, inn)
        })
        .collect()
}

pub fn fixture_index() -> DayIndex {
    let series = fixture_series();
    let catalog = fixture_catalog();
    let range = DateRange::new(series[0].date, series.last().unwrap().date).unwrap();
    let calendar = EventCalendar::new(&catalog, range);
    let decs = decompose_series(&series, &calendar, &BaselineConfig::default()).unwrap();
    DayIndex::new(&series, &decs, &catalog, &fixture_formatted(&catalog), range, BaselineConfig::default())
}

pub fn snapshot_path(name: &str) -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/snapshots").join(name)
}

/// Compares `actual` with the stored snapshot byte for byte. Set
/// `MPE_UPDATE_SNAPSHOTS=1` to rewrite the stored copy instead.
pub fn check_snapshot(name: &str, actual: &str) -> Result<(), String> {
    let path = snapshot_path(name);
    if std::env::var("MPE_UPDATE_SNAPSHOTS").as_deref() == Ok("1") {
        std::fs::write(&path, actual).map_err(|e| e.to_string())?;
        return Ok(());
    }
    let stored = std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    if stored == actual {
        return Ok(());
    }
    let line = stored.lines().zip(actual.lines()).position(|(a, b)| a != b).map(|i| i + 1);
    Err(format!("{name} differs from the stored snapshot (first differing line: {line:?})"))
}

pub fn fixture_prompts() -> Vec<(&'static str, String)> {
    use mpe_core::prompt::{AblationConfig, PromptBuilder};
    let index = fixture_index();
    let target = date(FIXTURE_TARGET);
    let builder = PromptBuilder::new("gpt-4", "Barclays Center");
    let window = index.window(target, 28).unwrap();
    let ctx = index.target(target).unwrap();
    let baseline = index.baseline(target).unwrap();
    let katy = fixture_catalog().pop().unwrap();
    let mut out = vec![("event_format.txt", builder.build_event_format_prompt(&katy).prompt_text())];
    for (name, ablation) in [("prediction_full.txt", "c_t_h_prime+r_i"), ("prediction_na.txt", "NA+r_i"), ("prediction_text_original.txt", "c_t_h+o")] {
        let a: AblationConfig = ablation.parse().unwrap();
        out.push((name, builder.build_prediction_prompt(&window, &ctx, baseline, &a).unwrap().prompt_text()));
    }
    out
}

/// Lines of the history section of a prediction prompt.
pub fn history_lines(prompt: &str) -> Vec<&str> {
    let start = prompt.find("oldest first:\n").expect("history header") + "oldest first:\n".len();
    let end = prompt.find("\n\nNext day:").expect("target header");
    prompt[start..end].lines().collect()
}
