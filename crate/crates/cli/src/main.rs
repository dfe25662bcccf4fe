//! Scenario-driven front end for the geodesic-flow laboratory.
//!
//! Exit status: 0 on success, 2 on a scenario or report schema problem
//! (message names the file, line, and offending key), 3 on a numerical
//! failure (the failing stage's diagnostic is serialized to stderr).

mod plots;
mod run;
mod scenario;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::plots::PlotError;
use crate::scenario::SchemaError;

#[derive(Parser)]
#[command(name = "anosovlab", version, about = "Geodesic-flow experiments on negatively curved surfaces")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Override the scenario's RNG seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for the batch stages (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory; overrides the scenario's `output_dir`.
    #[arg(long, global = true)]
    output: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Execute a scenario file and write its report directory.
    Run { scenario_file: PathBuf },
    /// Convert a report directory into plot-ready two-column CSV files.
    EmitPlots { report_dir: PathBuf },
}

enum AppError {
    /// Malformed input: scenario schema or missing/unreadable report.
    Schema(String),
    /// A pipeline stage failed numerically.
    Stage(anosovlab::Error),
}

impl From<SchemaError> for AppError {
    fn from(e: SchemaError) -> Self {
        AppError::Schema(e.to_string())
    }
}

impl From<anosovlab::Error> for AppError {
    fn from(e: anosovlab::Error) -> Self {
        AppError::Stage(e)
    }
}

/// Label for the diagnostic record; variants without an explicit stage
/// get the subsystem they come from.
fn stage_of(err: &anosovlab::Error) -> &'static str {
    use anosovlab::Error as E;
    match err {
        E::NonConvergence { stage, .. }
        | E::Numerical { stage, .. }
        | E::InvalidArgument { stage, .. }
        | E::InsufficientSamples { stage, .. } => stage,
        E::ChartDomain { .. } | E::ChartUnderflow { .. } => "chart",
        E::BaseMismatch(..) | E::ModelMismatch | E::NotAdmissible(_) | E::DegeneratePlane
        | E::ZeroVector => "geometry",
        E::SplittingFailure { .. } => "splitting",
        E::IndeterminateBand { .. } => "bowen ball",
        E::Io(_) => "io",
        E::Serialize(_) => "serialize",
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(AppError::Schema(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(AppError::Stage(err)) => {
            let diag = serde_json::json!({
                "stage": stage_of(&err),
                "detail": err.to_string(),
            });
            eprintln!("{diag}");
            ExitCode::from(3)
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), AppError> {
    match cli.command {
        Command::Run { scenario_file } => {
            let text = std::fs::read_to_string(&scenario_file).map_err(|e| {
                AppError::Schema(format!("{}: {e}", scenario_file.display()))
            })?;
            let mut sc = scenario::parse_scenario(&scenario_file, &text)?;
            if let Some(seed) = cli.seed {
                sc.seed = seed;
            }
            let out = match cli.output.or_else(|| sc.output_dir.clone()) {
                Some(dir) => dir,
                None => {
                    return Err(SchemaError {
                        file: sc.file.clone(),
                        line: sc.scenario_line,
                        message: "missing required key `output_dir` (or pass --output)".into(),
                    }
                    .into())
                }
            };
            configure_threads(cli.threads.or(sc.threads));
            run::run_scenario(&sc, &out)?;
            println!("report written to {}", out.display());
            Ok(())
        }
        Command::EmitPlots { report_dir } => {
            configure_threads(cli.threads);
            let written = plots::emit_plots(&report_dir).map_err(|e| match e {
                PlotError::Report(r) => AppError::Schema(r.to_string()),
                PlotError::Run(err) => AppError::Stage(err),
            })?;
            println!("{} plot series under {}", written.len(), report_dir.join("plots").display());
            Ok(())
        }
    }
}

fn configure_threads(threads: Option<usize>) {
    if let Some(n) = threads {
        // a second build_global is an error only after the pool is used;
        // this runs before any batch work, so the failure mode is unreachable
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
}
