//! `ccr`: batch front end for the closed-chain continuum robot simulator.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ccr_core::config::ScenarioConfig;
use ccr_core::control::ControllerVariant;
use ccr_core::model::SystemModel;
use ccr_core::report::{self, Comparison, RunSummary};
use ccr_core::sim::{self, RunOutput, Scenario};
use ccr_core::verify::{self, Level};
use ccr_core::Error;

const EXIT_IO: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;
const EXIT_VERIFY: u8 = 4;

#[derive(Parser)]
#[command(
    name = "ccr",
    version,
    about = "Closed-chain continuum robot simulation and control"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and write trace.csv and metrics.json.
    Simulate {
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Integration step (s).
        #[arg(long)]
        dt: Option<f64>,
        /// Simulated time (s).
        #[arg(long)]
        horizon: Option<f64>,
        #[arg(long)]
        controller: Option<ControllerVariant>,
    },
    /// Run all three controllers and write one trace each plus comparison.json.
    Compare {
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Repetitions with perturbed initial states.
        #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
        trials: u32,
        /// Fail unless RMSE and TV_e order as adaptive <= baseline <= nominal.
        #[arg(long)]
        assert_ordering: bool,
    },
    /// Run the numerical property suite.
    Verify {
        #[arg(default_value = "fast")]
        level: Level,
    },
}

struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Io(_) => EXIT_IO,
            Error::Config(_) | Error::Json(_) => EXIT_CONFIG,
            Error::InvalidArgument(_)
            | Error::Assembly { .. }
            | Error::SingularInertia(_)
            | Error::NonFinite { .. } => EXIT_NUMERICAL,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

type CliResult = Result<(), Failure>;

fn threads() -> usize {
    std::env::var("GVS_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|n| *n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Parses the config and applies command-line overrides; touches no files.
fn load(
    path: &Path,
    dt: Option<f64>,
    horizon: Option<f64>,
    controller: Option<ControllerVariant>,
) -> Result<(SystemModel, Scenario), Failure> {
    let mut cfg = ScenarioConfig::load(path).map_err(|e| match e {
        Error::Io(io) => Failure {
            code: EXIT_IO,
            message: format!("{}: {io}", path.display()),
        },
        other => other.into(),
    })?;
    cfg.dt = dt.or(cfg.dt);
    cfg.horizon = horizon.or(cfg.horizon);
    cfg.controller = controller.or(cfg.controller);
    Ok((cfg.build_model()?, cfg.scenario()?))
}

fn write_trace(path: &Path, run: &RunOutput) -> CliResult {
    let mut buf = Vec::new();
    report::write_trace(&mut buf, &run.records)?;
    report::write_atomic(path, &buf)?;
    Ok(())
}

fn simulate(
    config: &Path,
    out: &Path,
    dt: Option<f64>,
    horizon: Option<f64>,
    controller: Option<ControllerVariant>,
) -> CliResult {
    let (model, sc) = load(config, dt, horizon, controller)?;
    let run = sim::run(&model, &sc)?;
    std::fs::create_dir_all(out).map_err(Error::from)?;
    write_trace(&out.join("trace.csv"), &run)?;
    let summary = RunSummary::new(&sc, run.metrics.clone());
    report::write_atomic(
        &out.join("metrics.json"),
        &report::to_json_pretty(&summary)?,
    )?;
    let m = &run.metrics;
    println!(
        "{}: rmse {:.4} mm, TV_e {:.4} mm, TV_S {:.4} mm, saturation {} steps, {:.3} ms/step",
        sc.variant.name(),
        m.rmse_mm,
        m.tv_e_mm,
        m.tv_s_mm,
        m.saturation_events,
        m.mean_step_time_ms
    );
    Ok(())
}

fn compare(config: &Path, out: &Path, trials: usize, assert_ordering: bool) -> CliResult {
    let (model, sc) = load(config, None, None, None)?;
    let runs = sim::compare_trials(&model, &sc, trials, threads())?;
    std::fs::create_dir_all(out).map_err(Error::from)?;
    for (entry, run) in &runs[0] {
        write_trace(
            &out.join(format!("trace_{}.csv", entry.controller.name())),
            run,
        )?;
    }
    let entries: Vec<Vec<_>> = runs
        .iter()
        .map(|t| t.iter().map(|(e, _)| e.clone()).collect())
        .collect();
    let table = Comparison::from_trials(&sc, &entries);
    report::write_atomic(
        &out.join("comparison.json"),
        &report::to_json_pretty(&table)?,
    )?;
    println!(
        "{:<10} {:>18} {:>20} {:>18} {:>18}",
        "controller", "RMSE [mm]", "TV_e [mm]", "TV_S [mm]", "saturation"
    );
    for c in &table.controllers {
        let f = |s: report::MeanStd| format!("{:.3} ± {:.3}", s.mean, s.std);
        println!(
            "{:<10} {:>18} {:>20} {:>18} {:>18}",
            c.controller.name(),
            f(c.rmse_mm),
            f(c.tv_e_mm),
            f(c.tv_s_mm),
            f(c.saturation_events)
        );
    }
    if assert_ordering {
        let bad = table.ordering_violations();
        if !bad.is_empty() {
            return Err(Failure {
                code: EXIT_VERIFY,
                message: format!("ordering violated: {}", bad.join("; ")),
            });
        }
    }
    Ok(())
}

fn verify_cmd(level: Level) -> CliResult {
    let model = SystemModel::build_default(0.7)?;
    let results = verify::run_suite(&model, level, 1.0);
    print!("{}", verify::format_table(&results));
    let failed = results.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        return Err(Failure {
            code: EXIT_VERIFY,
            message: format!("{failed} check(s) failed"),
        });
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate {
            config,
            out,
            dt,
            horizon,
            controller,
        } => simulate(&config, &out, dt, horizon, controller),
        Command::Compare {
            config,
            out,
            trials,
            assert_ordering,
        } => compare(&config, &out, trials as usize, assert_ordering),
        Command::Verify { level } => verify_cmd(level),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
