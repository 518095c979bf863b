use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use ballworld::sim::{run_trajectory, Scenario, FLAG_UNSAFE};
use ballworld_cli::output::{trajectory_header, write_trajectory};

fn ballworld(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ballworld")).args(args).output().expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const TWO_STARS: &str = r#"
name = "two-stars"
initial_states = [[-1.0, 5.5]]
horizon = 12.0

[system]
kind = "linear"
drift = [[-6.0, 0.0], [0.0, -1.0]]

[controller]
kind = "ball-world"
alpha = 10.0

[world.workspace]
shape = { kind = "disk", radius = 10.0 }

[[world.obstacles]]
center = [0.0, 3.0]
shape = { kind = "two-lobe", a = 1.0, b = 1.1 }

[[world.obstacles]]
center = [0.0, -3.0]
shape = { kind = "two-lobe", a = 1.0, b = 1.1 }
"#;

#[test]
fn builtin_run_writes_csvs_report_and_plot() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = ballworld(&["run", "--scenario", "fig3-right", "--out", out, "--quiet"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for k in 0..7 {
        assert!(dir.path().join(format!("fig3-right_traj{k}.csv")).is_file());
    }
    let report = fs::read_to_string(dir.path().join("report.csv")).unwrap();
    assert_eq!(report.lines().count(), 8);
    assert!(report.lines().skip(1).all(|l| l.contains(",desired,converged,")), "{report}");
    let svg = fs::read_to_string(dir.path().join("fig3-right.svg")).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 7);
}

#[test]
fn svg_is_byte_for_byte_deterministic() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        let o = ballworld(&["run", "--scenario", "fig1-left", "--out", d.path().to_str().unwrap(), "--quiet"]);
        assert_eq!(o.status.code(), Some(0));
    }
    let read = |d: &tempfile::TempDir| fs::read(d.path().join("fig1-left.svg")).unwrap();
    assert_eq!(read(&a), read(&b));
}

#[test]
fn file_scenario_runs() {
    let dir = tempfile::tempdir().unwrap();
    let path = write(dir.path(), "s.toml", TWO_STARS);
    let out = dir.path().join("out");
    let o = ballworld(&["run", "--scenario", &path, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("Desired"), "{}", stdout(&o));
    assert!(out.join("two-stars_traj0.csv").is_file());
}

#[test]
fn empty_initial_states_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = write(dir.path(), "s.toml", &TWO_STARS.replace("[[-1.0, 5.5]]", "[]"));
    let o = ballworld(&["run", "--scenario", &path, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("s.toml:3:") && err.contains("initial_states must not be empty"), "{err}");
}

#[test]
fn unknown_keys_are_rejected_with_their_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = write(dir.path(), "s.toml", &TWO_STARS.replace("alpha = 10.0", "alpha = 10.0\ngamma = 3"));
    let o = ballworld(&["run", "--scenario", &path, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("s.toml:13:") && err.contains("gamma"), "{err}");
}

#[test]
fn missing_scenario_and_bad_flags_exit_2() {
    assert_eq!(ballworld(&["run", "--scenario", "no-such-thing"]).status.code(), Some(2));
    assert_eq!(ballworld(&["run"]).status.code(), Some(2));
    assert_eq!(ballworld(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(ballworld(&["--help"]).status.code(), Some(0));
}

#[test]
fn unfiltered_run_flags_incursions() {
    let dir = tempfile::tempdir().unwrap();
    let text = TWO_STARS
        .replace("[[-1.0, 5.5]]", "[[0.2, 6.0]]")
        .replace("kind = \"ball-world\"\nalpha = 10.0", "kind = \"none\"")
        .replace("drift = [[-6.0, 0.0], [0.0, -1.0]]", "drift = [[-6.0, 0.0], [0.0, -1.0]]\nnominal_gain = 1.0");
    let path = write(dir.path(), "s.toml", &text);
    let o = ballworld(&["run", "--scenario", &path, "--out", dir.path().to_str().unwrap(), "--quiet"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let mut rdr = csv::Reader::from_path(dir.path().join("two-stars_traj0.csv")).unwrap();
    let flags_col = rdr.headers().unwrap().iter().position(|h| h == "flags").unwrap();
    let unsafe_rows = rdr
        .records()
        .filter(|r| r.as_ref().unwrap()[flags_col].parse::<u32>().unwrap() & FLAG_UNSAFE != 0)
        .count();
    assert!(unsafe_rows > 0);
}

#[test]
fn runtime_failure_exits_1_with_event_dump() {
    // no actuation: the filter cannot stop the drift into the disk
    let text = r#"
name = "unactuated"
initial_states = [[0.0, 6.0]]
horizon = 6.0

[system]
kind = "linear"
drift = [[0.0, 0.0], [0.0, -1.0]]
input = [[0.0], [0.0]]

[controller]
kind = "standard-cbf"
barrier = { kind = "circle", center = [0.0, 3.0], radius = 1.0 }
"#;
    let dir = tempfile::tempdir().unwrap();
    let path = write(dir.path(), "s.toml", text);
    let o = ballworld(&["run", "--scenario", &path, "--out", dir.path().to_str().unwrap(), "--quiet"]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("events") && err.contains("infeasible"), "{err}");
}

#[test]
fn verify_passes_on_two_star_world() {
    let dir = tempfile::tempdir().unwrap();
    let path = write(dir.path(), "s.toml", TWO_STARS);
    let o = ballworld(&["verify", "--scenario", &path, "--seed", "5"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let text = stdout(&o);
    assert!(text.contains("PASS inverse(F(x)) = x") && !text.contains("FAIL"), "{text}");
}

#[test]
fn verify_rejects_overlapping_obstacles() {
    let dir = tempfile::tempdir().unwrap();
    let path = write(dir.path(), "s.toml", &TWO_STARS.replace("center = [0.0, -3.0]", "center = [0.5, 3.5]"));
    let o = ballworld(&["verify", "--scenario", &path, "--quiet"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("FAIL real obstacles disjoint"), "{}", stdout(&o));
}

#[test]
fn verify_flags_small_lambda() {
    let dir = tempfile::tempdir().unwrap();
    let path = write(dir.path(), "s.toml", &TWO_STARS.replace("alpha = 10.0", "alpha = 10.0\nlambda = 0.01"));
    let o = ballworld(&["verify", "--scenario", &path, "--quiet"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("FAIL safe set maps into ball-world safe set"), "{}", stdout(&o));
}

#[test]
fn csv_round_trip_is_exact() {
    let scn = Scenario::builtin("fig3-left").unwrap();
    let log = run_trajectory(&scn, 1).unwrap();
    let mut buf = Vec::new();
    write_trajectory(&log, &mut buf).unwrap();
    let mut rdr = csv::Reader::from_reader(buf.as_slice());
    assert_eq!(rdr.headers().unwrap().iter().collect::<Vec<_>>(), trajectory_header(&log));
    let rows: Vec<Vec<f64>> =
        rdr.records().map(|r| r.unwrap().iter().map(|f| f.parse::<f64>().unwrap()).collect()).collect();
    assert_eq!(rows.len(), log.records.len());
    for (row, rec) in rows.iter().zip(&log.records) {
        let expected: Vec<f64> = [rec.t]
            .into_iter()
            .chain(rec.x.iter().copied())
            .chain(rec.output)
            .chain(rec.q.iter().copied())
            .chain(rec.real_barriers.iter().copied())
            .chain(rec.ball_barriers.iter().copied())
            .chain(rec.balls.iter().copied())
            .chain([rec.speed, rec.intent_speed, rec.active_rows as f64, rec.flags as f64])
            .collect();
        // bitwise equality, not approximate
        assert_eq!(row.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), expected.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }
}
