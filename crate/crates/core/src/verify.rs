//! Seeded property suites shared by the acceptance tests and the `verify`
//! command. Every suite returns [`Check`]s carrying the measured worst case
//! next to its tolerance.

use std::f64::consts::TAU;
use std::fmt;

use nalgebra::Vector2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::avoidance::{assemble_main_qp, solve_obstacle_commands, AvoidanceError, AvoidanceGains};
use crate::cbf::ClassKappa;
use crate::diffeo::{Diffeo, DiffeoParams};
use crate::geometry::{BallObstacle, BallWorld, StarWorld};
use crate::oracle::{ball_barriers, barrier_rates, enumerate_qp, Enumerated};
use crate::qp::{certifies_infeasibility, kkt_residual, solve_qp, QpStatus, QuadraticProgram};
use crate::sim::{ball_world_for, ControllerSpec, Scenario, SimError};
use crate::{Matrix, Vector};

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    /// Worst value seen (an error, a violation or a failure count).
    pub measured: f64,
    pub tolerance: f64,
    pub samples: usize,
}

impl Check {
    /// Passes when `measured ≤ tolerance`.
    pub fn at_most(name: impl Into<String>, measured: f64, tolerance: f64, samples: usize) -> Self {
        Self { name: name.into(), passed: measured <= tolerance, measured, tolerance, samples }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {}: worst {:.3e} (tolerance {:.1e}, {} samples)",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.measured,
            self.tolerance,
            self.samples
        )
    }
}

fn uniform_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize, lo: f64, hi: f64) -> Matrix {
    Matrix::from_fn(r, c, |_, _| rng.gen_range(lo..hi))
}

fn uniform_vector(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vector {
    Vector::from_fn(n, |_, _| rng.gen_range(lo..hi))
}

/// A strictly convex QP with `d` variables and `m` rows. Feasible unless
/// `infeasible`, in which case a row contradicting row 0 is appended (so the
/// instance has `m + 1` rows).
pub fn random_qp(rng: &mut ChaCha8Rng, d: usize, m: usize, infeasible: bool) -> QuadraticProgram {
    let l = uniform_matrix(rng, d, d, -1.0, 1.0);
    let h = &l * l.transpose() + Matrix::identity(d, d) * 0.1;
    let c = uniform_vector(rng, d, -2.0, 2.0);
    let mut a = uniform_matrix(rng, m, d, -1.0, 1.0);
    let z0 = uniform_vector(rng, d, -1.0, 1.0);
    let mut b = &a * &z0;
    for v in b.iter_mut() {
        // some rows pass exactly through z0 to exercise degenerate vertices
        if rng.gen_bool(0.7) {
            *v += rng.gen_range(0.0..1.0);
        }
    }
    if infeasible && m > 0 {
        let row = -a.row(0).into_owned();
        let bound = -b[0] - rng.gen_range(0.1..1.0);
        a = a.insert_row(m, 0.0);
        a.set_row(m, &row);
        b = b.insert_row(m, bound);
    }
    QuadraticProgram::new(h, c, a, b).expect("generated Hessian is positive definite")
}

/// Solver against exhaustive active-set enumeration on random instances
/// (`d ≤ 4`, `m ≤ 6`); one in ten instances is made infeasible.
pub fn qp_oracle_suite(seed: u64, cases: usize) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut worst_z, mut worst_kkt, mut disagreements) = (0.0f64, 0.0f64, 0usize);
    let mut optimal = 0;
    for k in 0..cases {
        let d = rng.gen_range(1..=4);
        let infeasible = k % 10 == 9;
        let m = if infeasible { rng.gen_range(1..=5) } else { rng.gen_range(0..=6) };
        let qp = random_qp(&mut rng, d, m, infeasible);
        let reference = enumerate_qp(qp.hessian(), qp.linear(), qp.constraints(), qp.bounds(), 1e-10);
        let sol = match solve_qp(&qp) {
            Ok(s) => s,
            Err(_) => {
                disagreements += 1;
                continue;
            }
        };
        match (&reference, sol.status) {
            (Enumerated::Optimal { minimizer, .. }, QpStatus::Optimal) => {
                optimal += 1;
                worst_z = worst_z.max((&sol.minimizer - minimizer).amax());
                worst_kkt = worst_kkt.max(kkt_residual(&qp, &sol));
            }
            (Enumerated::Infeasible, QpStatus::Infeasible) => {
                if !sol.certificate.as_ref().is_some_and(|y| certifies_infeasibility(&qp, y)) {
                    disagreements += 1;
                }
            }
            _ => disagreements += 1,
        }
    }
    vec![
        Check::at_most("qp minimizer vs enumeration", worst_z, 1e-8, optimal),
        Check::at_most("qp KKT residual", worst_kkt, 1e-8, optimal),
        Check::at_most("qp status/certificate disagreements", disagreements as f64, 0.0, cases),
    ]
}

/// A random safe ball world with up to `max_obstacles` balls, displaced from
/// its initial configuration, plus a mapped state (often grazing a ball and
/// heading into it) and its velocity.
pub fn random_configuration(rng: &mut ChaCha8Rng, max_obstacles: usize) -> (BallWorld, Vector, Vector) {
    let rho0 = rng.gen_range(3.0..10.0);
    let m = rng.gen_range(0..=max_obstacles);
    let mut balls: Vec<(Vector2<f64>, f64)> = Vec::new();
    let mut attempts = 0;
    while balls.len() < m && attempts < 1000 {
        attempts += 1;
        let r = rng.gen_range(0.1..0.3 * rho0);
        let c = Vector2::new(rng.gen_range(-rho0..rho0), rng.gen_range(-rho0..rho0));
        let inside = c.norm() + r < 0.95 * rho0;
        if inside && balls.iter().all(|(o, s)| (o - c).norm() > r + s + 0.05) {
            balls.push((c, r));
        }
    }
    let to_vec = |p: Vector2<f64>| Vector::from_column_slice(p.as_slice());
    let obstacles: Vec<BallObstacle> =
        balls.iter().map(|(c, r)| BallObstacle::new(to_vec(*c), *r).expect("positive radius")).collect();
    let mut world = BallWorld::new(Vector::zeros(2), rho0, obstacles).expect("consistent dimensions");

    // displace the current configuration when that keeps it safe
    let mut moved = world.clone();
    moved.boundary_radius *= rng.gen_range(1.0..1.5);
    for o in &mut moved.obstacles {
        o.center[0] += rng.gen_range(-0.5..0.5);
        o.center[1] += rng.gen_range(-0.5..0.5);
        o.radius *= rng.gen_range(0.5..1.2);
    }
    if moved.configuration_barriers().iter().all(|&h| h > 0.0) {
        world = moved;
    }

    let speed = rng.gen_range(0.0..10.0);
    let heading = rng.gen_range(0.0..TAU);
    let mut qdot = Vector2::new(heading.cos(), heading.sin()) * speed;
    let q = loop {
        let grazing = !world.obstacles.is_empty() && rng.gen_bool(0.5);
        let cand = if grazing {
            let o = &world.obstacles[rng.gen_range(0..world.obstacles.len())];
            let phi = rng.gen_range(0.0..TAU);
            let dir = Vector2::new(phi.cos(), phi.sin());
            let c = Vector2::new(o.center[0], o.center[1]);
            qdot = -dir * speed;
            c + dir * (o.radius + rng.gen_range(0.0..0.05))
        } else {
            let r = world.boundary_radius * rng.gen_range(0.0f64..1.0).sqrt();
            let phi = rng.gen_range(0.0..TAU);
            Vector2::new(r * phi.cos(), r * phi.sin())
        };
        let qv = to_vec(cand);
        if ball_barriers(&world, &qv).iter().all(|&h| h >= 0.0) {
            break qv;
        }
    };
    (world, q, to_vec(qdot))
}

/// Monte-Carlo check that the Main QP is feasible on random safe
/// configurations and that its command satisfies every row and, by an
/// independent finite-difference evaluation, every barrier condition.
pub fn feasibility_suite(seed: u64, cases: usize, max_obstacles: usize) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut infeasible, mut worst_row, mut worst_cbf) = (0usize, 0.0f64, 0.0f64);
    for _ in 0..cases {
        let (world, q, qdot) = random_configuration(&mut rng, max_obstacles);
        let gains = AvoidanceGains::new(rng.gen_range(0.5..2.0), rng.gen_range(0.5..5.0)).expect("positive gains");
        let gamma = ClassKappa::new(rng.gen_range(0.5..20.0)).expect("positive alpha");
        let Ok(solve) = solve_obstacle_commands(&world, &q, &qdot, gains, gamma) else {
            infeasible += 1;
            continue;
        };
        let z = solve.command.to_decision();
        let main = assemble_main_qp(&world, &q, &qdot, gains, gamma).expect("assembled once already");
        worst_row = main.qp.slack(&z).iter().fold(worst_row, |w, &s| w.max(-s));
        let h = ball_barriers(&world, &q);
        let rates = barrier_rates(&world, &q, &qdot, &z, 1e-6);
        for (hd, hv) in rates.iter().zip(&h) {
            let scale = 1.0 + hd.abs() + gamma.apply(*hv).abs();
            worst_cbf = worst_cbf.max(-(hd + gamma.apply(*hv)) / scale);
        }
    }
    vec![
        Check::at_most("main QP infeasible cases", infeasible as f64, 0.0, cases),
        Check::at_most("main QP row violation", worst_row, 1e-9, cases - infeasible),
        Check::at_most("barrier condition (finite differences, relative)", worst_cbf, 1e-6, cases - infeasible),
    ]
}

/// Sample counts for [`diffeo_suite`].
#[derive(Debug, Clone, Copy)]
pub struct DiffeoSuiteSizes {
    pub boundary_points: usize,
    pub round_trips: usize,
    pub jacobian_points: usize,
    pub grid: usize,
}

impl Default for DiffeoSuiteSizes {
    fn default() -> Self {
        Self { boundary_points: 200, round_trips: 1000, jacobian_points: 200, grid: 100 }
    }
}

fn safe_sample(rng: &mut ChaCha8Rng, diffeo: &Diffeo, margin: f64) -> Vector2<f64> {
    let (lo, hi) = diffeo.world().workspace.bounds();
    loop {
        let x = Vector2::new(rng.gen_range(lo.x..hi.x), rng.gen_range(lo.y..hi.y));
        if diffeo.levels2(x).iter().all(|&b| b > margin) {
            return x;
        }
    }
}

/// Goal, boundary correspondence, round trip, Jacobian consistency and
/// safe-set mapping of the diffeomorphism for the given ball world.
pub fn diffeo_suite(diffeo: &Diffeo, balls: &BallWorld, seed: u64, sizes: DiffeoSuiteSizes) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checks = Vec::new();
    let p = diffeo.params();
    let xg = Vector2::new(p.real_goal[0], p.real_goal[1]);
    let qg = Vector2::new(p.ball_goal[0], p.ball_goal[1]);
    let goal_err = diffeo.eval2(balls, xg).map_or(f64::INFINITY, |q| (q - qg).norm());
    checks.push(Check::at_most("F(goal) = ball goal", goal_err, 1e-12, 1));

    // Boundary points sit on the zero level set up to rounding; they are
    // pushed out by a relative 1e-12 so the domain check accepts them.
    let world = diffeo.world();
    let mut worst = 0.0f64;
    let mut count = 0;
    for (k, obs) in world.obstacles.iter().enumerate() {
        let ball = &balls.obstacles[k];
        let qk = Vector2::new(ball.center[0], ball.center[1]);
        for j in 0..sizes.boundary_points {
            let theta = TAU * (j as f64 + 0.5) / sizes.boundary_points as f64;
            let dir = Vector2::new(theta.cos(), theta.sin());
            let x = obs.center2() + dir * obs.radius(theta) * (1.0 + 1e-12);
            if diffeo.levels2(x).iter().any(|&b| b < 0.0) {
                continue; // overlaps the workspace boundary or another obstacle
            }
            count += 1;
            worst = worst.max(diffeo.eval2(balls, x).map_or(f64::INFINITY, |q| ((q - qk).norm() - ball.radius).abs()));
        }
    }
    let q0 = Vector2::new(balls.boundary_center[0], balls.boundary_center[1]);
    for j in 0..sizes.boundary_points {
        let theta = TAU * (j as f64 + 0.5) / sizes.boundary_points as f64;
        let dir = Vector2::new(theta.cos(), theta.sin());
        let x = world.workspace.center2() + dir * world.workspace.radius_along(dir) * (1.0 - 1e-12);
        if diffeo.levels2(x).iter().any(|&b| b < 0.0) {
            continue;
        }
        count += 1;
        worst = worst.max(diffeo.eval2(balls, x).map_or(f64::INFINITY, |q| ((q - q0).norm() - balls.boundary_radius).abs()));
    }
    checks.push(Check::at_most("boundary maps to ball surface", worst, 1e-6, count));

    let mut worst = 0.0f64;
    for _ in 0..sizes.round_trips {
        let x = safe_sample(&mut rng, diffeo, 1e-3);
        let nudge = Vector2::new(rng.gen_range(-0.05..0.05), rng.gen_range(-0.05..0.05));
        let guess = if diffeo.levels2(x + nudge).iter().all(|&b| b > 0.0) { x + nudge } else { x };
        let err = diffeo
            .eval2(balls, x)
            .and_then(|q| diffeo.inverse2(balls, q, guess))
            .map_or(f64::INFINITY, |y| (y - x).norm());
        worst = worst.max(err);
    }
    checks.push(Check::at_most("inverse(F(x)) = x", worst, 1e-8, sizes.round_trips));

    let (mut two_step, mut directional) = (0.0f64, 0.0f64);
    for _ in 0..sizes.jacobian_points {
        let x = safe_sample(&mut rng, diffeo, 1e-2);
        let scale = 1.0 + x.norm();
        let (Ok(j1), Ok(j2)) =
            (diffeo.jacobian_with_step(balls, x, 1e-6 * scale), diffeo.jacobian_with_step(balls, x, 1e-5 * scale))
        else {
            two_step = f64::INFINITY;
            continue;
        };
        two_step = two_step.max((j1.matrix - j2.matrix).amax() / (1.0 + j1.matrix.amax()));
        let phi = rng.gen_range(0.0..TAU);
        let v = Vector2::new(phi.cos(), phi.sin());
        let eps = 1e-5 * scale;
        let fd = match (diffeo.eval2(balls, x + v * eps), diffeo.eval2(balls, x - v * eps)) {
            (Ok(a), Ok(b)) => (a - b) / (2.0 * eps),
            _ => {
                directional = f64::INFINITY;
                continue;
            }
        };
        let jv = j1.matrix * v;
        directional = directional.max((fd - jv).norm() / (1.0 + jv.norm()));
    }
    checks.push(Check::at_most("jacobian at two step sizes (relative)", two_step, 1e-4, sizes.jacobian_points));
    checks.push(Check::at_most("directional derivative (relative)", directional, 1e-4, sizes.jacobian_points));

    // worst ball-world violation of F over a grid of safe points
    let (lo, hi) = world.workspace.bounds();
    let mut worst = 0.0f64;
    let mut count = 0;
    let g = sizes.grid;
    for i in 0..g {
        for j in 0..g {
            let x = Vector2::new(
                lo.x + (hi.x - lo.x) * (i as f64 + 0.5) / g as f64,
                lo.y + (hi.y - lo.y) * (j as f64 + 0.5) / g as f64,
            );
            if diffeo.levels2(x).iter().any(|&b| b <= 0.0) {
                continue;
            }
            count += 1;
            let violation = match diffeo.eval2(balls, x) {
                Ok(q) => {
                    let h = ball_barriers(balls, &Vector::from_column_slice(q.as_slice()));
                    h[..=balls.obstacles.len()].iter().fold(0.0f64, |w, &v| w.max(-v))
                }
                Err(_) => f64::INFINITY,
            };
            worst = worst.max(violation);
        }
    }
    checks.push(Check::at_most("safe set maps into ball-world safe set", worst, 1e-9, count));
    checks
}

/// Preconditions of a run: the ball world is a safe configuration, the real
/// obstacles are disjoint and inside the workspace, and every start is safe.
pub fn safe_start_checks(world: &StarWorld, balls: &BallWorld, starts: &[Vector2<f64>]) -> Vec<Check> {
    let conf = balls.configuration_barriers();
    let worst_conf = conf.iter().fold(0.0f64, |w, &h| w.max(-h));
    let mut overlap = 0.0f64;
    for (k, obs) in world.obstacles.iter().enumerate() {
        for j in 0..720 {
            let theta = TAU * j as f64 / 720.0;
            let x = obs.center2() + Vector2::new(theta.cos(), theta.sin()) * obs.radius(theta);
            let betas = world.betas2(x);
            // index 0 is the workspace, obstacle k sits at k + 1
            for (i, b) in betas.iter().enumerate() {
                if i != k + 1 {
                    overlap = overlap.max(-b);
                }
            }
        }
    }
    let worst_start = starts
        .iter()
        .map(|&x| world.betas2(x).iter().fold(0.0f64, |w, &b| w.max(-b)))
        .fold(0.0f64, f64::max);
    vec![
        Check::at_most("initial ball configuration safe", worst_conf, 0.0, conf.len()),
        Check::at_most("real obstacles disjoint and inside workspace", overlap, 0.0, world.obstacles.len() * 720),
        Check::at_most("initial states safe", worst_start, 0.0, starts.len()),
    ]
}

/// Scenario-specific checks: safe start for every controller that has a
/// world, and for ball-world controllers the diffeomorphism suite (skipped
/// when the safe-start checks already fail).
pub fn scenario_suite(scn: &Scenario, seed: u64, sizes: DiffeoSuiteSizes) -> Result<Vec<Check>, SimError> {
    let Some(spec) = &scn.world else { return Ok(Vec::new()) };
    let world = spec.build()?;
    let starts = scn.initial_outputs();
    let ControllerSpec::BallWorld { lambda, ball_radii, boundary_radius, .. } = &scn.controller else {
        let worst = starts.iter().map(|&x| world.betas2(x).iter().fold(0.0f64, |w, &b| w.max(-b))).fold(0.0, f64::max);
        return Ok(vec![Check::at_most("initial states safe", worst, 0.0, starts.len())]);
    };
    let balls = ball_world_for(&world, ball_radii.as_deref(), *boundary_radius)?;
    let mut checks = safe_start_checks(&world, &balls, &starts);
    if checks.iter().all(|c| c.passed) {
        let goal = Vector::from_column_slice(&scn.goal);
        let params = DiffeoParams { lambda: *lambda, real_goal: goal.clone(), ball_goal: goal };
        let diffeo = Diffeo::new(params, world).map_err(AvoidanceError::from)?;
        checks.extend(diffeo_suite(&diffeo, &balls, seed, sizes));
    }
    Ok(checks)
}
