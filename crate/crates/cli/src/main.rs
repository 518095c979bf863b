use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use ballworld::sim::{run_scenario, TrajectoryLog};
use ballworld::verify::{feasibility_suite, qp_oracle_suite, scenario_suite, Check, DiffeoSuiteSizes};
use ballworld_cli::exit;
use ballworld_cli::scenario_file::{load, LoadedScenario};
use ballworld_cli::{output, svg};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "ballworld", version, about = "Safe navigation among non-convex obstacles with control barrier functions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate every initial state; write per-trajectory CSVs, report.csv and an SVG plot.
    Run {
        /// Scenario file (TOML) or built-in name.
        #[arg(long)]
        scenario: String,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Accepted for symmetry with `verify`; runs are deterministic.
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        quiet: bool,
    },
    /// Run the property suites (QP oracle, main-QP feasibility, and the
    /// scenario's safe-start and diffeomorphism checks).
    Verify {
        /// Scenario file (TOML) or built-in name; without it only the
        /// world-independent suites run.
        #[arg(long)]
        scenario: Option<String>,
        /// Unused; `verify` prints its results.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Print only failing checks and the final verdict.
        #[arg(long)]
        quiet: bool,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            let code = if e.use_stderr() { exit::INVALID_INPUT } else { exit::SUCCESS };
            return ExitCode::from(code);
        }
    };
    let code = match cli.command {
        Command::Run { scenario, out, seed: _, quiet } => run(&scenario, &out, quiet),
        Command::Verify { scenario, out: _, seed, quiet } => verify(scenario.as_deref(), seed, quiet),
    };
    ExitCode::from(code)
}

fn loaded(spec: &str) -> Result<LoadedScenario, u8> {
    load(spec).map_err(|e| {
        eprintln!("error: {e}");
        exit::INVALID_INPUT
    })
}

fn file_name(scenario: &str, log: &TrajectoryLog) -> String {
    let safe: String = scenario.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' }).collect();
    format!("{safe}_traj{}.csv", log.index)
}

fn write_outputs(file: &LoadedScenario, logs: &[TrajectoryLog], out: &Path) -> Result<(), String> {
    let scn = &file.scenario;
    fs::create_dir_all(out).map_err(|e| format!("{}: {e}", out.display()))?;
    let create = |name: &str| {
        let path = out.join(name);
        File::create(&path).map(BufWriter::new).map_err(|e| format!("{}: {e}", path.display()))
    };
    for log in logs {
        output::write_trajectory(log, create(&file_name(&scn.name, log))?).map_err(|e| e.to_string())?;
    }
    output::write_report(logs, create("report.csv")?).map_err(|e| e.to_string())?;
    let plot = svg::render(scn, logs, file.output.grid, file.output.snapshots).map_err(|e| e.to_string())?;
    let path = out.join(format!("{}.svg", file_name(&scn.name, &logs[0]).trim_end_matches("_traj0.csv")));
    fs::write(&path, plot).map_err(|e| format!("{}: {e}", path.display()))
}

fn run(spec: &str, out: &Path, quiet: bool) -> u8 {
    let file = match loaded(spec) {
        Ok(f) => f,
        Err(code) => return code,
    };
    // trajectories run in parallel; everything is written afterwards
    let logs = match run_scenario(&file.scenario) {
        Ok(logs) => logs,
        Err(e) => {
            eprintln!("error: {}", file.input_error(&e));
            return exit::INVALID_INPUT;
        }
    };
    if let Err(e) = write_outputs(&file, &logs, out) {
        eprintln!("error: writing outputs: {e}");
        return exit::FAILURE;
    }
    if !quiet {
        for log in &logs {
            let s = &log.summary;
            println!(
                "trajectory {} from {:?}: {:?}, {:?} at t={:.3}, min β {:.3e}, min β̂ {:.3e}",
                log.index,
                log.initial.as_slice(),
                s.outcome,
                s.termination,
                s.final_time,
                s.min_real_barrier,
                s.min_ball_barrier
            );
        }
        println!("wrote {} trajectories to {}", logs.len(), out.display());
    }
    let failed: Vec<&TrajectoryLog> = logs.iter().filter(|l| l.has_error()).collect();
    if failed.is_empty() {
        return exit::SUCCESS;
    }
    for log in failed {
        eprintln!("trajectory {} from {:?} failed; events:", log.index, log.initial.as_slice());
        for e in &log.events {
            eprintln!("  step {}: {}", e.step(), e.describe());
        }
    }
    exit::FAILURE
}

fn verify(spec: Option<&str>, seed: u64, quiet: bool) -> u8 {
    let mut checks: Vec<Check> = Vec::new();
    checks.extend(qp_oracle_suite(seed, 1000));
    checks.extend(feasibility_suite(seed, 1000, 5));
    if let Some(spec) = spec {
        let file = match loaded(spec) {
            Ok(f) => f,
            Err(code) => return code,
        };
        match scenario_suite(&file.scenario, seed, DiffeoSuiteSizes::default()) {
            Ok(c) => checks.extend(c),
            Err(e) => {
                eprintln!("error: {}", file.input_error(&e));
                return exit::INVALID_INPUT;
            }
        }
    }
    let failures = checks.iter().filter(|c| !c.passed).count();
    for c in &checks {
        if !quiet || !c.passed {
            println!("{c}");
        }
    }
    println!("{} of {} checks passed", checks.len() - failures, checks.len());
    if failures == 0 {
        exit::SUCCESS
    } else {
        exit::FAILURE
    }
}
