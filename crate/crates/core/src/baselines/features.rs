use chrono::{Datelike, Duration, NaiveTime, Timelike};
use serde::{Deserialize, Serialize};

use super::text::hashed_text_vector;
use super::BaselineError;
use crate::decomposition::DemandPair;
use crate::prompt::{AblationConfig, DayContext, DayEvent, DemandFeatures, EventFeatures, HistoryWindow};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeaturizerConfig {
    pub lag_days: usize,
    pub time_bins: usize,
    pub text_dim: usize,
    pub ablation: AblationConfig,
}

impl Default for FeaturizerConfig {
    fn default() -> Self {
        FeaturizerConfig { lag_days: 28, time_bins: 24, text_dim: 32, ablation: AblationConfig::full() }
    }
}

impl FeaturizerConfig {
    pub fn validate(&self) -> Result<(), BaselineError> {
        if self.lag_days == 0 || self.time_bins == 0 || self.text_dim == 0 {
            return Err(BaselineError::Argument("featurizer dimensions must be positive".into()));
        }
        Ok(())
    }

    fn has_text(&self) -> bool {
        self.ablation.event_features >= EventFeatures::CountTimeText
    }

    /// Column names in feature order:
    /// 1. `lag{k}_out`, `lag{k}_in` for k = lag_days..1 (oldest first),
    ///    deviations under `r_i`, observed demand under `o`;
    /// 2. `wd_mon` .. `wd_sun`, the target weekday one-hot;
    /// 3. `event_count` (any event features);
    /// 4. `time_bin{b}` occupancy (timing and above);
    /// 5. `text{j}` hashed text (raw or formatted text levels).
    pub fn feature_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.dimension());
        for k in (1..=self.lag_days).rev() {
            names.push(format!("lag{k}_out"));
            names.push(format!("lag{k}_in"));
        }
        for wd in ["mon", "tue", "wed", "thu", "fri", "sat", "sun"] {
            names.push(format!("wd_{wd}"));
        }
        let ev = self.ablation.event_features;
        if ev.has_count() {
            names.push("event_count".into());
        }
        if ev.has_time() {
            names.extend((0..self.time_bins).map(|b| format!("time_bin{b}")));
        }
        if self.has_text() {
            names.extend((0..self.text_dim).map(|j| format!("text{j}")));
        }
        names
    }

    pub fn dimension(&self) -> usize {
        let ev = self.ablation.event_features;
        2 * self.lag_days
            + 7
            + usize::from(ev.has_count())
            + if ev.has_time() { self.time_bins } else { 0 }
            + if self.has_text() { self.text_dim } else { 0 }
    }
}

fn minutes(t: NaiveTime) -> f64 {
    t.hour() as f64 * 60.0 + t.minute() as f64
}

/// Adds one to every bin that an event's start-end span overlaps. A
/// zero-length event marks the bin containing its start.
pub fn time_occupancy(events: &[DayEvent], bins: usize) -> Vec<f64> {
    let width = 24.0 * 60.0 / bins as f64;
    let mut v = vec![0.0; bins];
    for e in events {
        let (start, end) = (minutes(e.record.start_time), minutes(e.record.end_time));
        for (b, slot) in v.iter_mut().enumerate() {
            let (lo, hi) = (b as f64 * width, (b + 1) as f64 * width);
            let covers = if end > start { start < hi && end > lo } else { start >= lo && start < hi };
            if covers {
                *slot += 1.0;
            }
        }
    }
    v
}

fn event_text(events: &[DayEvent], features: EventFeatures) -> Result<String, BaselineError> {
    let mut parts = Vec::new();
    for e in events {
        match features {
            EventFeatures::CountTimeFormatted => {
                let f = e.formatted.as_ref().ok_or_else(|| {
                    BaselineError::Argument(format!("event {:?} on {} lacks a formatted summary", e.record.title, e.record.date))
                })?;
                parts.push(format!("{} {}", f.category, f.summary));
            }
            _ => {
                parts.push(e.record.title.clone());
                if let Some(d) = &e.record.description {
                    parts.push(d.clone());
                }
            }
        }
    }
    Ok(parts.join(" "))
}

/// Builds the feature vector for predicting `target` from `window`. Only the
/// window's history enters the lag block, never the target day's demand.
pub fn featurize_day(window: &HistoryWindow, target: &DayContext, config: &FeaturizerConfig) -> Result<Vec<f64>, BaselineError> {
    config.validate()?;
    if window.len() != config.lag_days {
        return Err(BaselineError::Argument(format!(
            "window has {} days but the featurizer expects {}",
            window.len(),
            config.lag_days
        )));
    }
    if window.end() + Duration::days(1) != target.date {
        return Err(BaselineError::Argument(format!("target {} does not follow window end {}", target.date, window.end())));
    }
    let mut x = Vec::with_capacity(config.dimension());
    for day in window.days() {
        let dec = day.decomposition.as_ref().expect("window days carry decompositions");
        let value = match config.ablation.demand_features {
            DemandFeatures::Decomposed => dec.deviation,
            DemandFeatures::Original => DemandPair::from(dec.actual),
        };
        x.push(value.outflow);
        x.push(value.inflow);
    }
    let mut weekday = [0.0; 7];
    weekday[target.date.weekday().num_days_from_monday() as usize] = 1.0;
    x.extend(weekday);
    let ev = config.ablation.event_features;
    if ev.has_count() {
        x.push(target.events.len() as f64);
    }
    if ev.has_time() {
        x.extend(time_occupancy(&target.events, config.time_bins));
    }
    if config.has_text() {
        x.extend(hashed_text_vector(&event_text(&target.events, ev)?, config.text_dim));
    }
    debug_assert_eq!(x.len(), config.dimension());
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decomposition::decompose;
    use crate::events::EventRecord;
    use crate::trips::DailyDemand;
    use chrono::NaiveDate;

    fn d(day: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(2014, 7, day).unwrap()
    }

    fn window(n: usize, end: u32) -> HistoryWindow {
        let days = (0..n)
            .map(|i| {
                let date = d(end) - Duration::days((n - 1 - i) as i64);
                let dec = decompose(DailyDemand::new(date, 100 + i as u64, 50), DemandPair::new(90.0, 40.0)).unwrap();
                DayContext { date, events: vec![], decomposition: Some(dec) }
            })
            .collect();
        HistoryWindow::new(days, n, d(end) + Duration::days(1)).unwrap()
    }

    fn event(date: NaiveDate, start: (u32, u32), end: (u32, u32)) -> DayEvent {
        let t = |(h, m): (u32, u32)| NaiveTime::from_hms_opt(h, m, 0).unwrap();
        DayEvent { record: EventRecord::new("Rock show", Some("A rock band".into()), date, t(start), t(end)).unwrap(), formatted: None }
    }

    fn cfg(lag: usize, ev: EventFeatures) -> FeaturizerConfig {
        FeaturizerConfig { lag_days: lag, ablation: AblationConfig::new(ev, DemandFeatures::Decomposed), ..Default::default() }
    }

    #[test]
    fn count_only_layout() {
        let w = window(3, 24);
        let target = DayContext { date: d(25), events: vec![event(d(25), (19, 30), (22, 30))], decomposition: None };
        let c = cfg(3, EventFeatures::Count);
        let x = featurize_day(&w, &target, &c).unwrap();
        assert_eq!(x.len(), 6 + 7 + 1);
        assert_eq!(c.feature_names().len(), x.len());
        assert_eq!(&x[..2], &[10.0, 10.0]);
        assert_eq!(x[6 + 4], 1.0); // Friday
        assert_eq!(x[13], 1.0);
    }

    #[test]
    fn time_bins_for_evening_event() {
        let v = time_occupancy(&[event(d(25), (19, 30), (22, 30))], 24);
        let hot: Vec<usize> = v.iter().enumerate().filter(|(_, x)| **x > 0.0).map(|(i, _)| i).collect();
        assert_eq!(hot, vec![19, 20, 21, 22]);
        let v = time_occupancy(&[event(d(25), (13, 0), (16, 0)), event(d(25), (15, 0), (17, 0))], 24);
        assert_eq!(v[15], 2.0);
        assert_eq!(v[16], 1.0);
        assert_eq!(v[12], 0.0);
    }

    #[test]
    fn no_events_block_is_zero() {
        let w = window(2, 24);
        let target = DayContext { date: d(25), events: vec![], decomposition: None };
        let c = cfg(2, EventFeatures::CountTimeText);
        let x = featurize_day(&w, &target, &c).unwrap();
        assert_eq!(x.len(), 4 + 7 + 1 + 24 + 32);
        assert!(x[11..].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn blocks_are_omitted_not_padded() {
        let dims: Vec<usize> = EventFeatures::ALL.iter().map(|e| cfg(28, *e).dimension()).collect();
        assert_eq!(dims, vec![63, 64, 88, 120, 120]);
    }

    #[test]
    fn length_mismatch_is_error() {
        let w = window(3, 24);
        let target = DayContext { date: d(25), events: vec![], decomposition: None };
        assert!(featurize_day(&w, &target, &cfg(4, EventFeatures::Count)).is_err());
        let wrong = DayContext { date: d(26), events: vec![], decomposition: None };
        assert!(featurize_day(&w, &wrong, &cfg(3, EventFeatures::Count)).is_err());
    }

    #[test]
    fn formatted_text_required_under_prime() {
        let w = window(1, 24);
        let target = DayContext { date: d(25), events: vec![event(d(25), (19, 0), (21, 0))], decomposition: None };
        assert!(featurize_day(&w, &target, &cfg(1, EventFeatures::CountTimeFormatted)).is_err());
    }
}
