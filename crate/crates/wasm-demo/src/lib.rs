//! Browser bindings for `www/index.html`. Every function returns a JSON
//! string; the page does its own drawing.

use mpe_core::baselines::{fit_gbdt, predict_gbdt, GbdtParams};
use mpe_core::decomposition::{decompose_series, BaselineConfig, DemandPair};
use mpe_core::events::EventCalendar;
use mpe_core::llm::ChatBackend;
use mpe_core::pipeline::{format_event, DayIndex};
use mpe_core::prompt::{AblationConfig, PromptBuilder};
use mpe_core::synthetic::{generate, HeuristicBackend, SyntheticConfig, SyntheticDataset};
use serde::Serialize;
use wasm_bindgen::prelude::*;

fn js_err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

fn to_json(v: &impl Serialize) -> Result<String, JsError> {
    serde_json::to_string(v).map_err(js_err)
}

fn dataset(seed: u32, days: u32, event_rate: f64) -> Result<SyntheticDataset, JsError> {
    if !(28..=1460).contains(&days) {
        return Err(js_err(format!("days must be within 28..=1460, got {days}")));
    }
    if !(0.0..=1.0).contains(&event_rate) {
        return Err(js_err(format!("event rate must be within [0, 1], got {event_rate}")));
    }
    Ok(generate(&SyntheticConfig { seed: seed as u64, days: days as usize, event_rate, ..SyntheticConfig::default() }))
}

#[derive(Serialize)]
struct DecomposedDay {
    date: String,
    pickups: u64,
    dropoffs: u64,
    baseline: DemandPair,
    deviation: DemandPair,
    events: Vec<String>,
}

/// Generates a synthetic venue series and splits each day into its regular
/// level and deviation.
#[wasm_bindgen]
pub fn decompose_demo(seed: u32, days: u32, event_rate: f64) -> Result<String, JsError> {
    let data = dataset(seed, days, event_rate)?;
    let calendar = EventCalendar::new(&data.events, data.range);
    let decs = decompose_series(&data.demand, &calendar, &BaselineConfig::default()).map_err(js_err)?;
    let rows: Vec<DecomposedDay> = decs
        .iter()
        .map(|d| DecomposedDay {
            date: d.date.to_string(),
            pickups: d.actual.outflow,
            dropoffs: d.actual.inflow,
            baseline: d.baseline,
            deviation: d.deviation,
            events: data.events.iter().filter(|e| e.date == d.date).map(|e| e.title.clone()).collect(),
        })
        .collect();
    to_json(&rows)
}

#[derive(Serialize)]
struct FitCurve {
    x: Vec<f64>,
    y: Vec<f64>,
    fitted: Vec<f64>,
    training_mse: Vec<f64>,
}

/// Fits boosted trees to a fixed one-dimensional curve.
#[wasm_bindgen]
pub fn gbdt_demo(n_trees: u32, max_depth: u32, learning_rate: f64, min_leaf: u32) -> Result<String, JsError> {
    if n_trees > 2000 {
        return Err(js_err("at most 2000 trees"));
    }
    let x: Vec<f64> = (0..240).map(|i| i as f64 / 24.0).collect();
    // Deterministic wiggle in place of noise.
    let y: Vec<f64> = x.iter().map(|v| 30.0 * (v / 1.5).sin() + 4.0 * v + 6.0 * ((v * 37.0).sin() * 0.5).round()).collect();
    let rows: Vec<Vec<f64>> = x.iter().map(|v| vec![*v]).collect();
    let params = GbdtParams { n_trees: n_trees as usize, max_depth: max_depth as usize, learning_rate, min_leaf: min_leaf as usize };
    let model = fit_gbdt(&rows, &y, &params).map_err(js_err)?;
    let fitted = rows.iter().map(|r| predict_gbdt(&model, r)).collect::<Result<Vec<_>, _>>().map_err(js_err)?;
    to_json(&FitCurve { x, y, fitted, training_mse: model.training_mse })
}

#[derive(Serialize)]
struct PromptView {
    target: String,
    prompt: String,
    reply: String,
    pickups: u64,
    dropoffs: u64,
}

/// Renders the prediction prompt for the last event day of a synthetic
/// series under `ablation`, with the heuristic backend's reply.
#[wasm_bindgen]
pub fn prompt_demo(seed: u32, ablation: &str, history_days: u32) -> Result<String, JsError> {
    let ablation: AblationConfig = ablation.parse().map_err(js_err)?;
    if !(1..=56).contains(&history_days) {
        return Err(js_err("history length must be within 1..=56"));
    }
    let data = dataset(seed, 150, 0.4)?;
    let calendar = EventCalendar::new(&data.events, data.range);
    let decs = decompose_series(&data.demand, &calendar, &BaselineConfig::default()).map_err(js_err)?;
    let builder = PromptBuilder::new("gpt-4", data.venue.name.clone());
    let backend = HeuristicBackend;
    let formatted = data
        .events
        .iter()
        .map(|e| format_event(&backend, &builder, e).map(|(f, _)| f))
        .collect::<Result<Vec<_>, _>>()
        .map_err(js_err)?;
    let index = DayIndex::new(&data.demand, &decs, &data.events, &formatted, data.range, BaselineConfig::default());
    let target = data.events.last().ok_or_else(|| js_err("series has no events"))?.date;
    let window = index.window(target, history_days as usize).map_err(js_err)?;
    let baseline = index.baseline(target).map_err(js_err)?;
    let request = builder
        .build_prediction_prompt(&window, &index.target(target).map_err(js_err)?, baseline, &ablation)
        .map_err(js_err)?;
    let reply = backend.complete(&request).map_err(js_err)?.content;
    let truth = index.actual(target).ok_or_else(|| js_err("no demand on the target day"))?;
    to_json(&PromptView { target: target.to_string(), prompt: request.prompt_text(), reply, pickups: truth.outflow, dropoffs: truth.inflow })
}
