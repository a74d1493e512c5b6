use std::fs;
use std::path::{Path, PathBuf};

use mpe_core::llm::MockScript;
use mpe_core::pipeline::bundle::{write_bundle, BundleOptions};
use mpe_core::pipeline::{plan, run_stage, BackendKind, PipelineConfig, PipelineError, Stage, StageOutcome};
use mpe_core::synthetic::SyntheticConfig;

fn small_bundle(dir: &Path) -> PipelineConfig {
    let options = BundleOptions {
        synthetic: SyntheticConfig { days: 100, seed: 11, ..SyntheticConfig::default() },
        test_days: 14,
        ..BundleOptions::default()
    };
    PipelineConfig::load(&write_bundle(dir, &options).unwrap()).unwrap()
}

fn run(config: &PipelineConfig, stages: &[Stage]) -> Result<(), PipelineError> {
    stages.iter().try_for_each(|s| run_stage(*s, config).map(|_| ()))
}

fn calls(outcome: StageOutcome) -> u64 {
    match outcome {
        StageOutcome::Ran { summary } => summary["backend_calls"].as_u64().unwrap(),
        StageOutcome::Skipped => panic!("stage was skipped"),
    }
}

#[test]
fn predict_before_decompose_names_decompose() {
    let tmp = tempfile::tempdir().unwrap();
    let config = small_bundle(tmp.path());
    let err = run_stage(Stage::Predict, &config).unwrap_err();
    assert_eq!(err.exit_code(), 3);
    assert!(matches!(err, PipelineError::Precondition { run_first: Stage::Decompose, .. }), "{err}");
    let err = run_stage(Stage::Report, &config).unwrap_err();
    assert!(err.to_string().contains("run `evaluate` first"), "{err}");
}

#[test]
fn changed_settings_rerun_only_affected_stages() {
    let tmp = tempfile::tempdir().unwrap();
    let mut config = small_bundle(tmp.path());
    run(&config, &[Stage::Ingest, Stage::FormatEvents, Stage::Decompose, Stage::Predict]).unwrap();
    let before = fs::read(config.output_dir.join("predictions.csv")).unwrap();

    config.ablation = "NA+r_i".parse().unwrap();
    assert_eq!(run_stage(Stage::Ingest, &config).unwrap(), StageOutcome::Skipped);
    assert_eq!(run_stage(Stage::Decompose, &config).unwrap(), StageOutcome::Skipped);
    assert!(matches!(run_stage(Stage::Predict, &config).unwrap(), StageOutcome::Ran { .. }));
    assert_ne!(fs::read(config.output_dir.join("predictions.csv")).unwrap(), before);

    // A damaged output is regenerated even when inputs are unchanged.
    fs::write(config.output_dir.join("decomposition.csv"), "date\n").unwrap();
    assert!(matches!(run_stage(Stage::Decompose, &config).unwrap(), StageOutcome::Ran { .. }));
}

#[test]
fn cache_replays_without_backend() {
    let tmp = tempfile::tempdir().unwrap();
    let mut config = small_bundle(tmp.path());
    run(&config, &[Stage::Ingest, Stage::FormatEvents, Stage::Decompose]).unwrap();
    assert!(calls(run_stage(Stage::Predict, &config).unwrap()) > 0);

    config.backend.kind = BackendKind::Cache;
    config.output_dir = tmp.path().join("replay");
    run(&config, &[Stage::Ingest, Stage::FormatEvents, Stage::Decompose]).unwrap();
    assert_eq!(calls(run_stage(Stage::Predict, &config).unwrap()), 0);

    config.cache_dir = tmp.path().join("empty-cache");
    config.output_dir = tmp.path().join("cold");
    run_stage(Stage::Ingest, &config).unwrap();
    let err = run_stage(Stage::FormatEvents, &config).unwrap_err();
    assert_eq!(err.exit_code(), 4, "{err}");
}

#[test]
fn unscripted_prompt_is_a_backend_error() {
    let tmp = tempfile::tempdir().unwrap();
    let mut config = small_bundle(tmp.path());
    let empty = tmp.path().join("empty.json");
    fs::write(&empty, MockScript::default().to_json()).unwrap();
    config.backend.mock_script = Some(empty);
    run_stage(Stage::Ingest, &config).unwrap();
    assert_eq!(run_stage(Stage::FormatEvents, &config).unwrap_err().exit_code(), 4);
}

fn malformed_script(dir: &Path) -> PathBuf {
    let mut script = MockScript::default();
    script.register_substring("Event title:", "[Category] Concert [Summary] A show.");
    script.register_substring("Next day:", "Demand will probably rise a little.");
    let path = dir.join("malformed.json");
    fs::write(&path, script.to_json()).unwrap();
    path
}

#[test]
fn fallback_budget_exceeded_keeps_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let mut config = small_bundle(tmp.path());
    config.backend.mock_script = Some(malformed_script(tmp.path()));
    run(&config, &[Stage::Ingest, Stage::FormatEvents, Stage::Decompose]).unwrap();
    let err = run_stage(Stage::Predict, &config).unwrap_err();
    assert_eq!(err.exit_code(), 5, "{err}");
    assert!(matches!(err, PipelineError::FallbackBudget { fallbacks: 14, total: 14, .. }));

    let failures = fs::read_to_string(config.output_dir.join("parse_failures.jsonl")).unwrap();
    assert_eq!(failures.lines().count(), 14);
    let reasoning = fs::read_to_string(config.output_dir.join("reasoning.jsonl")).unwrap();
    assert!(reasoning.lines().all(|l| l.contains("\"reasoning\":\"fallback: baseline\"")));

    // Not recorded as complete, so evaluate still refuses and the next run retries.
    let manifest = fs::read_to_string(config.output_dir.join("manifest.json")).unwrap();
    assert!(!manifest.contains("\"predict\""));
    config.fallback_budget = 1.0;
    assert!(matches!(run_stage(Stage::Predict, &config).unwrap(), StageOutcome::Ran { .. }));
}

#[test]
fn external_predictions_are_scored() {
    let tmp = tempfile::tempdir().unwrap();
    let mut config = small_bundle(tmp.path());
    run(&config, &[Stage::Ingest, Stage::FormatEvents, Stage::Decompose, Stage::Predict]).unwrap();
    let llm = fs::read_to_string(config.output_dir.join("predictions.csv")).unwrap();
    let external = tmp.path().join("ext.csv");
    fs::write(&external, llm.replace("llm-mpe", "my-model")).unwrap();
    config.external_predictions = vec![external];
    run(&config, &[Stage::Evaluate, Stage::Report]).unwrap();

    let report = fs::read_to_string(config.output_dir.join("report.csv")).unwrap();
    let row = |model: &str| report.lines().find(|l| l.starts_with(&format!("{model},")) && l.contains(",all,")).unwrap().to_string();
    assert_eq!(row("my-model").replacen("my-model", "llm-mpe", 1), row("llm-mpe"));
    for model in ["HA", "LR", "GBDT"] {
        assert!(report.contains(&format!("{model},")), "{model} missing");
    }
    assert!(config.output_dir.join("models/gbdt.json").exists());
    let md = fs::read_to_string(config.output_dir.join("report.md")).unwrap();
    assert!(md.contains("| my-model | all | 28 |"), "{md}");
}

#[test]
fn dry_run_plan_reports_state() {
    let tmp = tempfile::tempdir().unwrap();
    let config = small_bundle(tmp.path());
    let lines = plan(Stage::Decompose, &config).unwrap().join("\n");
    assert!(lines.contains("daily_demand.csv (missing; produced by `ingest`)"), "{lines}");
    assert!(lines.ends_with("blocked on a missing input"));
    run_stage(Stage::Ingest, &config).unwrap();
    assert!(plan(Stage::Ingest, &config).unwrap().last().unwrap().contains("would be skipped"));
    assert!(!config.output_dir.join("decomposition.csv").exists());
}
