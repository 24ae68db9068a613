//! Command-line driver: run one pipeline stage (plus its dependencies) for a
//! scenario file and report per-stage pass/fail.
//!
//! Exit codes: 0 when every stage passed, 1 when a stage contract failed,
//! 2 when the scenario or environment is unusable.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use growfrag_core::pipeline::{run_pipeline, PipelineReport, Stage, StageStatus};
use growfrag_core::scenario::load_scenario;

#[derive(Parser)]
#[command(name = "growfrag", version, about = "Growth-fragmentation simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Scenario description (JSON).
    #[arg(long)]
    scenario: PathBuf,

    /// Output directory; overrides the scenario's `output.dir`.
    #[arg(long)]
    out: Option<PathBuf>,

    /// Run on a single thread (GROWFRAG_THREADS sets an explicit count).
    #[arg(long)]
    single_thread: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Check the coefficient assumptions on the grid.
    Validate(RunArgs),
    /// Compute the dominant eigentriplet.
    Eigen(RunArgs),
    /// Evolve the initial measure and write snapshots.
    Simulate(RunArgs),
    /// Certify entropy monotonicity and the dissipation budget.
    Entropy(RunArgs),
    /// Run the grid refinement study.
    Converge(RunArgs),
}

impl Command {
    fn split(&self) -> (Stage, &RunArgs) {
        match self {
            Command::Validate(a) => (Stage::Validate, a),
            Command::Eigen(a) => (Stage::Eigen, a),
            Command::Simulate(a) => (Stage::Simulate, a),
            Command::Entropy(a) => (Stage::Entropy, a),
            Command::Converge(a) => (Stage::Converge, a),
        }
    }
}

/// Install the global thread pool: `--single-thread` wins, then
/// `GROWFRAG_THREADS`, then the rayon default.
fn configure_threads(single_thread: bool) -> Result<(), String> {
    let threads = if single_thread {
        Some(1)
    } else {
        match std::env::var("GROWFRAG_THREADS") {
            Ok(raw) => {
                let n: usize = raw.parse().map_err(|_| {
                    format!("GROWFRAG_THREADS must be a positive integer, got \"{raw}\"")
                })?;
                if n == 0 {
                    return Err("GROWFRAG_THREADS must be a positive integer, got \"0\"".into());
                }
                Some(n)
            }
            Err(_) => None,
        }
    };
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| e.to_string())?;
    }
    Ok(())
}

fn print_report(report: &PipelineReport) {
    for stage in Stage::ALL {
        let Some(sr) = report.stages.get(stage.name()) else {
            continue;
        };
        let status = match sr.status {
            StageStatus::Pass => "pass",
            StageStatus::Fail => "FAIL",
            StageStatus::Skipped => "skipped",
        };
        let mut line = format!("{}: {}", stage.name(), status);
        if let Some(lambda) = sr.metrics.get("lambda").and_then(|v| v.as_f64()) {
            line.push_str(&format!("  lambda = {lambda:.6}"));
        }
        if let Some(drift) = sr
            .metrics
            .get("conservation_drift")
            .and_then(|v| v.as_f64())
        {
            line.push_str(&format!("  drift = {drift:.3e}"));
        }
        for key in ["error", "reason"] {
            if let Some(msg) = sr.metrics.get(key).and_then(|v| v.as_str()) {
                line.push_str(&format!("  ({msg})"));
            }
        }
        println!("{line}");
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (stage, args) = cli.command.split();

    if let Err(msg) = configure_threads(args.single_thread) {
        eprintln!("error: {msg}");
        return ExitCode::from(2);
    }

    let scenario = match load_scenario(&args.scenario) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let out_dir = args
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(&scenario.output.dir));

    match run_pipeline(&scenario, &[stage], &out_dir) {
        Ok(report) => {
            print_report(&report);
            println!("summary: {}", out_dir.join("summary.json").display());
            if report.passed {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
