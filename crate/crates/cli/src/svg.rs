//! Deterministic SVG overlay: zero contours of the real-world level sets (or
//! of the filter barrier), trajectories of the controlled point, and
//! ball-world snapshots drawn in the same plane.

use std::fmt::Write as _;

use nalgebra::Vector2;
use ballworld::sim::{ControllerSpec, EquilibriumClass, Scenario, SimError, TrajectoryLog};
use ballworld::Vector;

const WIDTH: f64 = 640.0;
const MARGIN: f64 = 20.0;
const PALETTE: [&str; 8] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#9467bd", "#8c564b", "#e377c2", "#17becf", "#bcbd22"];

type Segment = ([f64; 2], [f64; 2]);

/// Zero level of `f` by marching squares on a `grid × grid` lattice over the
/// box `lo..hi`. Saddles are split by the cell-center value.
pub fn marching_squares<F: Fn(f64, f64) -> f64>(f: F, lo: [f64; 2], hi: [f64; 2], grid: usize) -> Vec<Segment> {
    let step = [(hi[0] - lo[0]) / (grid - 1) as f64, (hi[1] - lo[1]) / (grid - 1) as f64];
    let at = |i: usize, j: usize| [lo[0] + i as f64 * step[0], lo[1] + j as f64 * step[1]];
    let values: Vec<f64> = (0..grid * grid).map(|k| { let p = at(k % grid, k / grid); f(p[0], p[1]) }).collect();
    let v = |i: usize, j: usize| values[j * grid + i];
    let cross = |p: [f64; 2], q: [f64; 2], a: f64, b: f64| {
        let s = if a == b { 0.5 } else { a / (a - b) };
        [p[0] + s * (q[0] - p[0]), p[1] + s * (q[1] - p[1])]
    };
    let mut out = Vec::new();
    for j in 0..grid - 1 {
        for i in 0..grid - 1 {
            // corners counter-clockwise from the lower left
            let c = [at(i, j), at(i + 1, j), at(i + 1, j + 1), at(i, j + 1)];
            let w = [v(i, j), v(i + 1, j), v(i + 1, j + 1), v(i, j + 1)];
            if w.iter().any(|x| !x.is_finite()) {
                continue;
            }
            let case = w.iter().enumerate().fold(0u8, |acc, (k, &x)| acc | (u8::from(x < 0.0) << k));
            let e = |k: usize| cross(c[k], c[(k + 1) % 4], w[k], w[(k + 1) % 4]);
            match case {
                0 | 15 => {}
                1 | 14 => out.push((e(3), e(0))),
                2 | 13 => out.push((e(0), e(1))),
                3 | 12 => out.push((e(3), e(1))),
                4 | 11 => out.push((e(1), e(2))),
                6 | 9 => out.push((e(0), e(2))),
                7 | 8 => out.push((e(2), e(3))),
                5 | 10 => {
                    let center_negative = w.iter().sum::<f64>() < 0.0;
                    if (case == 5) == center_negative {
                        out.push((e(0), e(1)));
                        out.push((e(2), e(3)));
                    } else {
                        out.push((e(3), e(0)));
                        out.push((e(1), e(2)));
                    }
                }
                _ => unreachable!(),
            }
        }
    }
    out
}

struct Frame {
    lo: [f64; 2],
    scale: f64,
    height: f64,
}

impl Frame {
    fn new(lo: [f64; 2], hi: [f64; 2]) -> Self {
        let scale = (WIDTH - 2.0 * MARGIN) / (hi[0] - lo[0]);
        let height = (hi[1] - lo[1]) * scale + 2.0 * MARGIN;
        Self { lo, scale, height }
    }

    fn px(&self, p: [f64; 2]) -> (f64, f64) {
        (MARGIN + (p[0] - self.lo[0]) * self.scale, self.height - MARGIN - (p[1] - self.lo[1]) * self.scale)
    }
}

fn plot_box(scn: &Scenario, logs: &[TrajectoryLog]) -> Result<([f64; 2], [f64; 2]), SimError> {
    let (mut lo, mut hi) = if let Some(world) = &scn.world {
        let (a, b) = world.build()?.workspace.bounds();
        ([a.x, a.y], [b.x, b.y])
    } else {
        (scn.goal, scn.goal)
    };
    let mut grow = |p: [f64; 2]| {
        for k in 0..2 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    };
    for log in logs {
        for r in &log.records {
            grow(r.output);
        }
    }
    if let ControllerSpec::StandardCbf { barrier: ballworld::sim::BarrierSpec::Circle { center, radius }, .. } =
        &scn.controller
    {
        grow([center[0] - radius, center[1] - radius]);
        grow([center[0] + radius, center[1] + radius]);
    }
    let pad = 0.05 * (hi[0] - lo[0]).max(hi[1] - lo[1]).max(1.0);
    Ok(([lo[0] - pad, lo[1] - pad], [hi[0] + pad, hi[1] + pad]))
}

fn path_of(segments: &[Segment], frame: &Frame) -> String {
    let mut d = String::new();
    for (a, b) in segments {
        let ((x0, y0), (x1, y1)) = (frame.px(*a), frame.px(*b));
        let _ = write!(d, "M{x0:.2} {y0:.2}L{x1:.2} {y1:.2}");
    }
    d
}

/// Renders the plot. Output depends only on the scenario and the logs, so
/// repeated runs give identical bytes.
pub fn render(scn: &Scenario, logs: &[TrajectoryLog], grid: usize, snapshots: usize) -> Result<String, SimError> {
    let (lo, hi) = plot_box(scn, logs)?;
    let frame = Frame::new(lo, hi);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH:.0}" height="{h:.0}" viewBox="0 0 {WIDTH:.0} {h:.0}">"#,
        h = frame.height
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{MARGIN}" y="14" font-family="sans-serif" font-size="12">{}</text>"#, scn.name);

    // zero contours
    let _ = writeln!(s, r#"<g id="contours" fill="none" stroke-width="1.5">"#);
    let n = logs.first().map_or(2, |l| l.initial.len());
    if let Some(spec) = &scn.world {
        let world = spec.build()?;
        for k in 0..=world.obstacles.len() {
            let segs = marching_squares(|x, y| world.betas2(Vector2::new(x, y))[k], lo, hi, grid);
            let color = if k == 0 { "black" } else { "#b22222" };
            let _ = writeln!(s, r#"<path stroke="{color}" d="{}"/>"#, path_of(&segs, &frame));
        }
    }
    if let ControllerSpec::StandardCbf { barrier, .. } = &scn.controller {
        let h = barrier.build(n)?;
        let segs = marching_squares(
            |x, y| {
                let mut p = Vector::zeros(n);
                p[0] = x;
                p[1] = y;
                h.value(&p)
            },
            lo,
            hi,
            grid,
        );
        let _ = writeln!(s, r##"<path stroke="#b22222" d="{}"/>"##, path_of(&segs, &frame));
    }
    let _ = writeln!(s, "</g>");

    // ball-world snapshots, evenly spaced in time
    let center0 = match &scn.world {
        Some(w) => w.workspace.center,
        None => [0.0, 0.0],
    };
    let _ = writeln!(s, r#"<g id="balls" fill="none" stroke-dasharray="4 3" stroke-width="1">"#);
    for (idx, log) in logs.iter().enumerate() {
        let color = PALETTE[idx % PALETTE.len()];
        let last = log.records.len().saturating_sub(1);
        if log.records.first().is_none_or(|r| r.balls.is_empty()) || snapshots == 0 {
            continue;
        }
        let picks: Vec<usize> = if snapshots == 1 {
            vec![0]
        } else {
            (0..snapshots).map(|k| k * last / (snapshots - 1)).collect()
        };
        for (k, &i) in picks.iter().enumerate() {
            let balls = &log.records[i].balls;
            let opacity = 0.25 + 0.75 * k as f64 / picks.len().max(1) as f64;
            let mut circle = |c: [f64; 2], r: f64| {
                let (x, y) = frame.px(c);
                let _ = writeln!(
                    s,
                    r#"<circle cx="{x:.2}" cy="{y:.2}" r="{:.2}" stroke="{color}" stroke-opacity="{opacity:.2}"/>"#,
                    r * frame.scale
                );
            };
            circle(center0, balls[0]);
            for b in balls[1..].chunks(3) {
                circle([b[0], b[1]], b[2]);
            }
        }
    }
    let _ = writeln!(s, "</g>");

    let _ = writeln!(s, r#"<g id="trajectories" fill="none" stroke-width="1.5">"#);
    for (idx, log) in logs.iter().enumerate() {
        let color = PALETTE[idx % PALETTE.len()];
        let stride = (log.records.len() / 1500).max(1);
        let mut pts: Vec<[f64; 2]> = log.records.iter().step_by(stride).map(|r| r.output).collect();
        if let Some(r) = log.records.last() {
            pts.push(r.output);
        }
        let points = pts
            .iter()
            .map(|&p| {
                let (x, y) = frame.px(p);
                format!("{x:.2},{y:.2}")
            })
            .collect::<Vec<_>>()
            .join(" ");
        let _ = writeln!(s, r#"<polyline stroke="{color}" points="{points}"/>"#);
    }
    let _ = writeln!(s, "</g>");

    let _ = writeln!(s, r#"<g id="markers">"#);
    for (idx, log) in logs.iter().enumerate() {
        let color = PALETTE[idx % PALETTE.len()];
        if let (Some(a), Some(b)) = (log.records.first(), log.records.last()) {
            let (x0, y0) = frame.px(a.output);
            let (x1, y1) = frame.px(b.output);
            let end = match log.summary.outcome {
                EquilibriumClass::Undesired => "red",
                _ => color,
            };
            let _ = writeln!(s, r#"<circle cx="{x0:.2}" cy="{y0:.2}" r="3" fill="{color}"/>"#);
            let _ = writeln!(s, r#"<rect x="{:.2}" y="{:.2}" width="6" height="6" fill="{end}"/>"#, x1 - 3.0, y1 - 3.0);
        }
    }
    let (gx, gy) = frame.px(scn.goal);
    let _ = writeln!(s, r#"<path d="M{:.2} {gy:.2}H{:.2}M{gx:.2} {:.2}V{:.2}" stroke="black" stroke-width="2"/>"#, gx - 5.0, gx + 5.0, gy - 5.0, gy + 5.0);
    let _ = writeln!(s, "</g>");
    s.push_str("</svg>\n");
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_circle_contour() {
        let segs = marching_squares(|x, y| x * x + y * y - 1.0, [-2.0, -2.0], [2.0, 2.0], 101);
        assert!(!segs.is_empty());
        for (a, b) in &segs {
            for p in [a, b] {
                assert!(((p[0] * p[0] + p[1] * p[1]).sqrt() - 1.0).abs() < 2e-3);
            }
        }
        let length: f64 = segs.iter().map(|(a, b)| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()).sum();
        assert!((length - std::f64::consts::TAU).abs() < 1e-2, "{length}");
    }

    #[test]
    fn no_contour_without_sign_change() {
        assert!(marching_squares(|_, _| 1.0, [0.0, 0.0], [1.0, 1.0], 10).is_empty());
    }
}
