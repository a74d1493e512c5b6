use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mpe_core::pipeline::bundle::{write_bundle, BundleOptions};
use mpe_core::pipeline::{plan, run_stage, BackendKind, Overrides, PipelineConfig, PipelineError, Stage, StageOutcome};
use mpe_core::prompt::AblationConfig;
use mpe_core::synthetic::SyntheticConfig;

/// Event-aware next-day travel demand prediction.
#[derive(Parser)]
#[command(name = "mpe", version)]
struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Aggregate trip records into daily venue demand.
    Ingest(StageArgs),
    /// Standardize event listings through the backend.
    FormatEvents(StageArgs),
    /// Split daily demand into regular level and deviation.
    Decompose(StageArgs),
    /// Predict each test day from its history window.
    Predict(StageArgs),
    /// Score predictions and comparators over the test range.
    Evaluate(StageArgs),
    /// Run the feature ablation grid.
    Ablate(StageArgs),
    /// Render report.md from the evaluation outputs.
    Report(StageArgs),
    /// Run every stage in order.
    All(StageArgs),
    /// Write the synthetic dataset bundle with its recorded mock script.
    Synth(SynthArgs),
}

#[derive(Args)]
struct StageArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// live, mock, cache or heuristic.
    #[arg(long)]
    backend: Option<BackendKind>,
    #[arg(long)]
    mock_script: Option<PathBuf>,
    /// Feature configuration such as `c_t_h_prime+r_i` or `NA+o`.
    #[arg(long)]
    ablation: Option<AblationConfig>,
    /// Print what would run and exit.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 240)]
    days: usize,
    #[arg(long, default_value_t = 60)]
    test_days: usize,
}

fn load(args: StageArgs) -> Result<(PipelineConfig, bool), PipelineError> {
    let mut config = PipelineConfig::load(&args.config)?;
    config.apply(Overrides { output_dir: args.output_dir, backend: args.backend, mock_script: args.mock_script, ablation: args.ablation })?;
    Ok((config, args.dry_run))
}

fn run(stages: &[Stage], args: StageArgs) -> Result<(), PipelineError> {
    let (config, dry_run) = load(args)?;
    for &stage in stages {
        if dry_run {
            for line in plan(stage, &config)? {
                println!("{line}");
            }
            continue;
        }
        match run_stage(stage, &config)? {
            StageOutcome::Skipped => println!("{stage}: up to date"),
            StageOutcome::Ran { summary } => {
                let fields: Vec<String> = summary.iter().map(|(k, v)| format!("{k}={v}")).collect();
                println!("{stage}: done {}", fields.join(" "));
            }
        }
    }
    Ok(())
}

fn synth(args: SynthArgs) -> Result<(), PipelineError> {
    let options = BundleOptions {
        synthetic: SyntheticConfig { seed: args.seed, days: args.days, ..SyntheticConfig::default() },
        test_days: args.test_days,
        ..BundleOptions::default()
    };
    let config = write_bundle(&args.out, &options)?;
    println!("wrote {}", config.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();

    let result = match cli.command {
        Command::Ingest(a) => run(&[Stage::Ingest], a),
        Command::FormatEvents(a) => run(&[Stage::FormatEvents], a),
        Command::Decompose(a) => run(&[Stage::Decompose], a),
        Command::Predict(a) => run(&[Stage::Predict], a),
        Command::Evaluate(a) => run(&[Stage::Evaluate], a),
        Command::Ablate(a) => run(&[Stage::Ablate], a),
        Command::Report(a) => run(&[Stage::Report], a),
        Command::All(a) => run(&Stage::ALL, a),
        Command::Synth(a) => synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
