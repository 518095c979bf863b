//! Acceptance criteria 1–8. Runs without the libtest harness so each
//! criterion prints exactly one PASS/FAIL line; exits nonzero if any fail.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use ballworld::sim::{run_scenario, EquilibriumClass, Scenario, SimEvent, TrajectoryLog, BUILTIN_NAMES};
use ballworld::verify::{diffeo_suite, feasibility_suite, qp_oracle_suite, Check, DiffeoSuiteSizes};
use ballworld::{Diffeo, DiffeoParams};

type Criterion = fn() -> Result<Outcome, String>;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome { passed, detail: detail.into() }
}

fn run(name: &str) -> Result<Vec<TrajectoryLog>, String> {
    let scn = Scenario::builtin(name).ok_or_else(|| format!("no built-in {name}"))?;
    run_scenario(&scn).map_err(|e| e.to_string())
}

fn within(limit: Duration, start: Instant) -> (bool, String) {
    let t = start.elapsed();
    (t < limit, format!("{:.2}s of {}s", t.as_secs_f64(), limit.as_secs()))
}

fn last_barrier(log: &TrajectoryLog) -> f64 {
    log.records.last().and_then(|r| r.real_barriers.last().copied()).unwrap_or(f64::NAN)
}

fn checks_outcome(checks: &[Check]) -> Outcome {
    let failed: Vec<String> = checks.iter().filter(|c| !c.passed).map(|c| c.to_string()).collect();
    let worst = checks.iter().map(|c| format!("{} {:.1e}", c.name, c.measured)).collect::<Vec<_>>().join(", ");
    if failed.is_empty() {
        outcome(true, worst)
    } else {
        outcome(false, failed.join("; "))
    }
}

fn convex_equilibrium() -> Result<Outcome, String> {
    let start = Instant::now();
    let logs = run("fig1-right")?;
    let log = logs.iter().find(|l| l.initial.as_slice() == [0.0, 6.0]).ok_or("start (0,6) missing")?;
    let x = &log.summary.final_state;
    let err = (x[0].powi(2) + (x[1] - 4.0).powi(2)).sqrt();
    let (fast, time) = within(Duration::from_secs(5), start);
    Ok(outcome(err <= 1e-2 && fast, format!("final ({:.5}, {:.5}), distance to (0,4) {err:.2e}, {time}", x[0], x[1])))
}

fn funnel_equilibrium() -> Result<Outcome, String> {
    let start = Instant::now();
    let logs = run("fig1-left")?;
    let mut ok = true;
    let mut parts = Vec::new();
    for log in &logs {
        let h = last_barrier(log);
        ok &= log.summary.outcome == EquilibriumClass::Undesired && h <= 1e-3;
        parts.push(format!("{:?}: {:?} h={h:.1e}", log.initial.as_slice(), log.summary.outcome));
    }
    let (fast, time) = within(Duration::from_secs(5), start);
    Ok(outcome(ok && fast && logs.len() == 2, format!("{}, {time}", parts.join(", "))))
}

fn two_star_reproduction() -> Result<Outcome, String> {
    let start = Instant::now();
    let logs = run("fig3-right")?;
    let off_line = logs.iter().filter(|l| l.initial[0] != 0.0).count();
    let mut ok = off_line >= 6;
    let (mut worst_norm, mut worst_beta) = (0.0f64, f64::INFINITY);
    for log in &logs {
        worst_norm = worst_norm.max(log.summary.final_state.norm());
        // obstacle level sets only; index 0 is the workspace
        for r in &log.records {
            worst_beta = r.real_barriers[1..3].iter().fold(worst_beta, |w, &b| w.min(b));
        }
    }
    ok &= worst_norm < 5e-2 && worst_beta >= -1e-6;
    let (fast, time) = within(Duration::from_secs(60), start);
    Ok(outcome(
        ok && fast,
        format!("{} starts, max ‖x(T)‖ {worst_norm:.2e}, min β {worst_beta:.2e}, {time}", logs.len()),
    ))
}

fn deadlock_measure_zero() -> Result<Outcome, String> {
    let logs = run("fig3-left")?;
    let find = |x: f64, y: f64| {
        logs.iter().find(|l| l.initial.as_slice() == [x, y]).ok_or_else(|| format!("start ({x},{y}) missing"))
    };
    let on_line = find(0.0, 4.0)?;
    let stall = match on_line.deadlock() {
        Some(SimEvent::Deadlock { x, .. }) => Some(x[1]),
        _ => None,
    };
    let mut ok = stall.is_some();
    for x in [-0.01, 0.01] {
        ok &= find(x, 4.0)?.summary.outcome == EquilibriumClass::Desired;
    }
    let line = match stall {
        Some(y) => format!("(0,4) deadlocks at x₂={y:.4} (reference line starts at 3.45, reported only)"),
        None => "(0,4) did not deadlock".into(),
    };
    Ok(outcome(ok, format!("{line}; (±0.01,4) desired: {ok}")))
}

fn main_qp_feasibility() -> Result<Outcome, String> {
    Ok(checks_outcome(&feasibility_suite(2024, 1000, 5)))
}

fn qp_oracle() -> Result<Outcome, String> {
    let start = Instant::now();
    let mut o = checks_outcome(&qp_oracle_suite(2024, 1000));
    let (fast, time) = within(Duration::from_secs(10), start);
    o.passed &= fast;
    o.detail = format!("{}, {time}", o.detail);
    Ok(o)
}

fn diffeo_checks() -> Result<Outcome, String> {
    let scn = Scenario::builtin("fig3-right").ok_or("no fig3-right")?;
    let world = scn.world.as_ref().ok_or("no world")?.build().map_err(|e| e.to_string())?;
    let balls = ballworld::sim::ball_world_for(&world, None, None).map_err(|e| e.to_string())?;
    let diffeo = Diffeo::new(DiffeoParams::default(), world).map_err(|e| e.to_string())?;
    Ok(checks_outcome(&diffeo_suite(&diffeo, &balls, 2024, DiffeoSuiteSizes::default())))
}

fn safety_invariant() -> Result<Outcome, String> {
    let mut ok = true;
    let mut parts = Vec::new();
    for name in BUILTIN_NAMES {
        let logs = run(name)?;
        let real = logs.iter().map(|l| l.summary.min_real_barrier).fold(f64::INFINITY, f64::min);
        let ball = logs.iter().map(|l| l.summary.min_ball_barrier).fold(f64::INFINITY, f64::min);
        let errors = logs.iter().filter(|l| l.has_error()).count();
        ok &= real >= -1e-6 && ball >= -1e-6 && errors == 0;
        let ball = if ball.is_finite() { format!("{ball:.1e}") } else { "-".into() };
        parts.push(format!("{name} β {real:.1e} β̂ {ball} errors {errors}"));
    }
    Ok(outcome(ok, parts.join("; ")))
}

fn main() -> ExitCode {
    let criteria: [(&str, Criterion); 8] = [
        ("1 convex obstacle spurious equilibrium", convex_equilibrium),
        ("2 funnel spurious equilibrium", funnel_equilibrium),
        ("3 two-star reproduction", two_star_reproduction),
        ("4 deadlock on a measure-zero line", deadlock_measure_zero),
        ("5 main QP feasibility (Monte-Carlo)", main_qp_feasibility),
        ("6 QP solver oracle equivalence", qp_oracle),
        ("7 diffeomorphism suite", diffeo_checks),
        ("8 safety invariant over built-ins", safety_invariant),
    ];
    let mut failures = 0;
    for (name, check) in criteria {
        let o = check().unwrap_or_else(|e| outcome(false, format!("error: {e}")));
        failures += usize::from(!o.passed);
        println!("criterion {name}: {} — {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
    }
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failures} criteria failed");
        ExitCode::FAILURE
    }
}
