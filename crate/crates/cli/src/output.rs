//! CSV writers. Floats use Rust's shortest round-trip formatting, so parsing
//! a file gives back the logged values bit for bit.

use std::io::Write;

use ballworld::sim::TrajectoryLog;

pub fn trajectory_header(log: &TrajectoryLog) -> Vec<String> {
    let first = log.records.first();
    let n = log.initial.len();
    let count = |f: fn(&ballworld::sim::Record) -> usize| first.map_or(0, f);
    let mut cols = vec!["t".to_string()];
    cols.extend((0..n).map(|i| format!("x{i}")));
    cols.extend(["out0".into(), "out1".into()]);
    cols.extend((0..count(|r| r.q.len())).map(|i| format!("q{i}")));
    cols.extend((0..count(|r| r.real_barriers.len())).map(|i| format!("beta{i}")));
    cols.extend((0..count(|r| r.ball_barriers.len())).map(|i| format!("ball_beta{i}")));
    cols.extend((0..count(|r| r.balls.len())).map(|i| format!("ball{i}")));
    cols.extend(["speed", "intent_speed", "active_rows", "flags"].map(String::from));
    cols
}

/// One row per step: `t, x…, output, q…, β…, β̂…, ball configuration
/// (ρ₀ then center and radius per ball), speeds, active rows, flags`.
pub fn write_trajectory<W: Write>(log: &TrajectoryLog, out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(trajectory_header(log))?;
    for r in &log.records {
        let mut row: Vec<String> = Vec::with_capacity(16);
        row.push(r.t.to_string());
        row.extend(r.x.iter().map(f64::to_string));
        row.extend(r.output.iter().map(f64::to_string));
        row.extend(r.q.iter().map(f64::to_string));
        row.extend(r.real_barriers.iter().map(f64::to_string));
        row.extend(r.ball_barriers.iter().map(f64::to_string));
        row.extend(r.balls.iter().map(f64::to_string));
        row.push(r.speed.to_string());
        row.push(r.intent_speed.to_string());
        row.push(r.active_rows.to_string());
        row.push(r.flags.to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

fn joined(v: impl IntoIterator<Item = f64>) -> String {
    v.into_iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ")
}

/// One summary row per trajectory.
pub fn write_report<W: Write>(logs: &[TrajectoryLog], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "index",
        "initial_state",
        "outcome",
        "termination",
        "final_state",
        "final_time",
        "goal_distance",
        "min_real_beta",
        "min_ball_beta",
        "qp_solves",
        "wall_time_s",
        "events",
    ])?;
    for log in logs {
        let s = &log.summary;
        w.write_record([
            log.index.to_string(),
            joined(log.initial.iter().copied()),
            format!("{:?}", s.outcome).to_lowercase(),
            format!("{:?}", s.termination).to_lowercase(),
            joined(s.final_state.iter().copied()),
            s.final_time.to_string(),
            s.goal_distance.to_string(),
            s.min_real_barrier.to_string(),
            s.min_ball_barrier.to_string(),
            s.qp_solves.to_string(),
            s.wall_time.to_string(),
            log.events.len().to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
