//! State avoidance in the ball world: instead of steering the state around
//! fixed obstacles, the ball obstacles are moved and shrunk (and the world
//! boundary grown) so that they keep clear of the mapped state `q = F(x)`.

use std::fmt;

use nalgebra::Vector2;
use thiserror::Error;

use crate::cbf::{
    build_state_boundary_row, build_state_obstacle_row, build_pairwise_row, build_containment_row, CbfError, ClassKappa, ConstraintRow,
};
use crate::diffeo::{Diffeo, DiffeoError};
use crate::geometry::{BallWorld, GeometryError};
use crate::qp::{solve_qp, QpError, QpStatus, QuadraticProgram};
use crate::{Matrix, Vector};

/// Obstacle radii never go below this.
pub const RADIUS_FLOOR: f64 = 1e-3;
/// The boundary radius never grows beyond this multiple of its initial value.
pub const BOUNDARY_GROWTH_CAP: f64 = 100.0;
/// Barrier values down to `-SAFETY_TOLERANCE` still count as safe; this
/// absorbs the `O(Δt²)` error of explicit time stepping.
pub const SAFETY_TOLERANCE: f64 = 1e-6;
/// Largest row violation accepted from the Main QP solution.
/// Sampling spacing used to check that a realized step stays in the real safe set.
pub const CHORD_SPACING: f64 = 1e-2;
/// A step may be halved at most this many times (Δt/256 by default).
pub const MAX_SUBDIVISIONS: u32 = 8;
const LANDING_ITERATIONS: usize = 4;
pub const ROW_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AvoidanceError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Cbf(#[from] CbfError),
    #[error(transparent)]
    Qp(#[from] QpError),
    #[error(transparent)]
    Diffeo(#[from] DiffeoError),
    #[error("invalid gains: {0}")]
    InvalidGains(String),
    #[error("unsafe configuration: {row} barrier = {value}")]
    UnsafeConfiguration { row: RowLabel, value: f64 },
    #[error("main QP infeasible\n{dump}")]
    Infeasible { dump: String },
    #[error("main QP solution violates {row} by {violation}")]
    Certification { row: RowLabel, violation: f64 },
    #[error("input cannot realize the desired velocity: {0}")]
    Unrealizable(String),
    #[error("step {step}: {source}")]
    AtStep {
        step: usize,
        #[source]
        source: Box<AvoidanceError>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AvoidanceGains {
    /// Weight on radius changes relative to center motion.
    pub kappa: f64,
    /// Proportional gain pulling obstacles back to their initial configuration.
    pub kp: f64,
}

impl AvoidanceGains {
    pub fn new(kappa: f64, kp: f64) -> Result<Self, AvoidanceError> {
        for (name, v) in [("kappa", kappa), ("kp", kp)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(AvoidanceError::InvalidGains(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(Self { kappa, kp })
    }
}

impl Default for AvoidanceGains {
    fn default() -> Self {
        Self { kappa: 1.0, kp: 1.0 }
    }
}

/// Stacked obstacle inputs. `radius_rates[0]` belongs to the boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct ObstacleCommand {
    pub center_velocities: Vector,
    pub radius_rates: Vector,
}

impl ObstacleCommand {
    pub fn zeros(world: &BallWorld) -> Self {
        Self {
            center_velocities: Vector::zeros(world.dim() * world.len()),
            radius_rates: Vector::zeros(world.len() + 1),
        }
    }

    pub fn center_velocity(&self, i: usize, n: usize) -> Vector {
        self.center_velocities.rows(i * n, n).into_owned()
    }

    /// Decision vector `z = (u_q, u_ρ)`.
    pub fn to_decision(&self) -> Vector {
        let nq = self.center_velocities.len();
        let mut z = Vector::zeros(nq + self.radius_rates.len());
        z.rows_mut(0, nq).copy_from(&self.center_velocities);
        z.rows_mut(nq, self.radius_rates.len()).copy_from(&self.radius_rates);
        z
    }

    pub fn from_decision(z: &Vector, n: usize, m: usize) -> Self {
        Self {
            center_velocities: z.rows(0, n * m).into_owned(),
            radius_rates: z.rows(n * m, m + 1).into_owned(),
        }
    }
}

/// Which barrier a Main QP row protects. Obstacle indices start at 1; 0 is
/// the boundary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RowLabel {
    StateObstacle(usize),
    StateBoundary,
    Pairwise(usize, usize),
    Containment(usize),
}

impl fmt::Display for RowLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RowLabel::StateObstacle(i) => write!(f, "state/obstacle {i}"),
            RowLabel::StateBoundary => write!(f, "state/boundary"),
            RowLabel::Pairwise(i, j) => write!(f, "obstacles {i}/{j}"),
            RowLabel::Containment(i) => write!(f, "containment {i}"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct MainQp {
    pub qp: QuadraticProgram,
    pub labels: Vec<RowLabel>,
    pub nominal: ObstacleCommand,
}

/// `û_{q_i} = K_p(q_i(t_0) − q_i)`, `û_{ρ_i} = K_p(ρ_i(t_0) − ρ_i)`.
pub fn nominal_obstacle_control(world: &BallWorld, gains: AvoidanceGains) -> ObstacleCommand {
    let n = world.dim();
    let mut cmd = ObstacleCommand::zeros(world);
    cmd.radius_rates[0] = gains.kp * (world.initial_boundary_radius() - world.boundary_radius);
    for (i, o) in world.obstacles.iter().enumerate() {
        let u = (o.initial_center() - &o.center) * gains.kp;
        cmd.center_velocities.rows_mut(i * n, n).copy_from(&u);
        cmd.radius_rates[i + 1] = gains.kp * (o.initial_radius() - o.radius);
    }
    cmd
}

/// Every barrier the Main QP protects, labelled, in row order.
pub fn labelled_barriers(world: &BallWorld, q: &Vector) -> Result<Vec<(RowLabel, f64)>, AvoidanceError> {
    let m = world.len();
    let state = world.state_barriers(q)?;
    let conf = world.configuration_barriers();
    let mut out = Vec::with_capacity(m + 1 + conf.len());
    out.extend(state.iter().enumerate().skip(1).map(|(i, &h)| (RowLabel::StateObstacle(i), h)));
    out.push((RowLabel::StateBoundary, state[0]));
    let mut k = 0;
    for i in 1..=m {
        for j in (i + 1)..=m {
            out.push((RowLabel::Pairwise(i, j), conf[k]));
            k += 1;
        }
    }
    for i in 1..=m {
        out.push((RowLabel::Containment(i), conf[k]));
        k += 1;
    }
    Ok(out)
}

fn check_vec(world: &BallWorld, v: &Vector) -> Result<(), GeometryError> {
    if v.len() != world.dim() {
        return Err(GeometryError::DimensionMismatch { expected: world.dim(), got: v.len() });
    }
    Ok(())
}

/// Main QP over `z = (u_q, u_ρ)`: minimize `‖u_q − û_q‖² + κ‖u_ρ − û_ρ‖²`
/// subject to state/obstacle, state/boundary, pairwise and containment rows.
pub fn assemble_main_qp(
    world: &BallWorld,
    q: &Vector,
    qdot: &Vector,
    gains: AvoidanceGains,
    gamma: ClassKappa,
) -> Result<MainQp, AvoidanceError> {
    check_vec(world, q)?;
    check_vec(world, qdot)?;
    for (row, value) in labelled_barriers(world, q)? {
        if !(value >= -SAFETY_TOLERANCE) {
            return Err(AvoidanceError::UnsafeConfiguration { row, value });
        }
    }
    if let Some((i, o)) = world.obstacles.iter().enumerate().find(|(_, o)| o.radius >= world.boundary_radius) {
        return Err(AvoidanceError::UnsafeConfiguration {
            row: RowLabel::Containment(i + 1),
            value: world.boundary_radius - o.radius,
        });
    }

    let (n, m) = (world.dim(), world.len());
    let d = n * m + m + 1;
    let rho0 = n * m;
    let rho = |i: usize| n * m + 1 + i;

    let nominal = nominal_obstacle_control(world, gains);
    let mut h = Matrix::zeros(d, d);
    let mut c = Vector::zeros(d);
    for k in 0..d {
        let (w, target) = if k < n * m {
            (1.0, nominal.center_velocities[k])
        } else {
            (gains.kappa, nominal.radius_rates[k - n * m])
        };
        h[(k, k)] = 2.0 * w;
        c[k] = -2.0 * w * target;
    }

    let mut rows: Vec<(Vec<(usize, f64)>, f64)> = Vec::new();
    let mut labels = Vec::new();
    let spread = |row: &ConstraintRow, slots: &[usize]| -> Vec<(usize, f64)> {
        slots.iter().zip(row.coefficients.iter()).map(|(&s, &a)| (s, a)).collect()
    };
    let center_slots = |i: usize| (0..n).map(move |k| i * n + k);

    for (i, ball) in world.obstacles.iter().enumerate() {
        let row = build_state_obstacle_row(ball, q, qdot, gamma)?;
        let slots: Vec<usize> = center_slots(i).chain([rho(i)]).collect();
        rows.push((spread(&row, &slots), row.bound));
        labels.push(RowLabel::StateObstacle(i + 1));
    }
    let row = build_state_boundary_row(world, q, qdot, gamma)?;
    rows.push((spread(&row, &[rho0]), row.bound));
    labels.push(RowLabel::StateBoundary);
    for i in 0..m {
        for j in (i + 1)..m {
            let row = build_pairwise_row(&world.obstacles[i], &world.obstacles[j], gamma)?;
            let slots: Vec<usize> = center_slots(i).chain(center_slots(j)).chain([rho(i), rho(j)]).collect();
            rows.push((spread(&row, &slots), row.bound));
            labels.push(RowLabel::Pairwise(i + 1, j + 1));
        }
    }
    for (i, ball) in world.obstacles.iter().enumerate() {
        let row = build_containment_row(ball, world, gamma)?;
        let slots: Vec<usize> = center_slots(i).chain([rho(i), rho0]).collect();
        rows.push((spread(&row, &slots), row.bound));
        labels.push(RowLabel::Containment(i + 1));
    }

    let mut a = Matrix::zeros(rows.len(), d);
    let mut b = Vector::zeros(rows.len());
    for (r, (entries, bound)) in rows.into_iter().enumerate() {
        for (col, v) in entries {
            a[(r, col)] = v;
        }
        b[r] = bound;
    }
    let qp = QuadraticProgram::new(h, c, a, b)?;
    Ok(MainQp { qp, labels, nominal })
}

#[derive(Debug, Clone)]
pub struct ObstacleSolve {
    pub command: ObstacleCommand,
    pub active: Vec<RowLabel>,
    pub max_violation: f64,
    pub iterations: usize,
}

fn dump_configuration(world: &BallWorld, q: &Vector, qdot: &Vector, main: &MainQp) -> String {
    let mut s = format!(
        "q = {:?}\nqdot = {:?}\nboundary: center {:?}, radius {}\n",
        q.as_slice(),
        qdot.as_slice(),
        world.boundary_center.as_slice(),
        world.boundary_radius
    );
    for (i, o) in world.obstacles.iter().enumerate() {
        s += &format!("obstacle {}: center {:?}, radius {}\n", i + 1, o.center.as_slice(), o.radius);
    }
    for (r, label) in main.labels.iter().enumerate() {
        let a: Vec<f64> = main.qp.constraints().row(r).iter().copied().collect();
        s += &format!("row {label}: a = {a:?}, b = {}\n", main.qp.bounds()[r]);
    }
    s
}

/// Solves the Main QP. Infeasibility would contradict the theory behind the
/// method, so it is reported with a full configuration dump.
pub fn solve_obstacle_commands(
    world: &BallWorld,
    q: &Vector,
    qdot: &Vector,
    gains: AvoidanceGains,
    gamma: ClassKappa,
) -> Result<ObstacleSolve, AvoidanceError> {
    let main = assemble_main_qp(world, q, qdot, gains, gamma)?;
    let sol = solve_qp(&main.qp)?;
    if sol.status == QpStatus::Infeasible {
        return Err(AvoidanceError::Infeasible { dump: dump_configuration(world, q, qdot, &main) });
    }
    let slack = main.qp.slack(&sol.minimizer);
    let mut max_violation = 0.0f64;
    for (r, &s) in slack.iter().enumerate() {
        if -s > ROW_TOLERANCE {
            return Err(AvoidanceError::Certification { row: main.labels[r], violation: -s });
        }
        max_violation = max_violation.max(-s);
    }
    Ok(ObstacleSolve {
        command: ObstacleCommand::from_decision(&sol.minimizer, world.dim(), world.len()),
        active: sol.active_set.iter().map(|&r| main.labels[r]).collect(),
        max_violation,
        iterations: sol.iterations,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ObstacleEvent {
    /// Obstacle radius clamped at [`RADIUS_FLOOR`]; index from 1.
    RadiusFloor(usize),
    /// Boundary radius clamped at [`BOUNDARY_GROWTH_CAP`] times its initial value.
    BoundaryCap,
    /// The mapped state's Euler step was shortened to this fraction because,
    /// seen from a moving ball, it would have jumped across it.
    StepTruncated(f64),
}

/// Explicit Euler update of centers and radii.
pub fn step_obstacles(
    world: &BallWorld,
    cmd: &ObstacleCommand,
    dt: f64,
) -> Result<(BallWorld, Vec<ObstacleEvent>), AvoidanceError> {
    let (n, m) = (world.dim(), world.len());
    if cmd.center_velocities.len() != n * m || cmd.radius_rates.len() != m + 1 {
        return Err(GeometryError::DimensionMismatch { expected: n * m + m + 1, got: cmd.to_decision().len() }.into());
    }
    let mut next = world.clone();
    let mut events = Vec::new();
    for (i, o) in next.obstacles.iter_mut().enumerate() {
        o.center += cmd.center_velocity(i, n) * dt;
        let r = o.radius + cmd.radius_rates[i + 1] * dt;
        if r < RADIUS_FLOOR {
            events.push(ObstacleEvent::RadiusFloor(i + 1));
            o.radius = RADIUS_FLOOR;
        } else {
            o.radius = r;
        }
    }
    let cap = BOUNDARY_GROWTH_CAP * world.initial_boundary_radius();
    let r0 = next.boundary_radius + cmd.radius_rates[0] * dt;
    if r0 > cap {
        events.push(ObstacleEvent::BoundaryCap);
        next.boundary_radius = cap;
    } else {
        next.boundary_radius = r0;
    }
    Ok((next, events))
}

/// The physical system seen through the point it steers in the plane.
/// For a fully actuated plant that point is the state itself; for a
/// unicycle it is a look-ahead point in front of the wheels.
pub trait Plant: Send + Sync {
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
    /// Planar point fed to the diffeomorphism.
    fn output(&self, state: &Vector) -> Vector2<f64>;
    /// Velocity of the output point under input `u`.
    fn output_velocity(&self, state: &Vector, u: &Vector) -> Vector2<f64>;
    /// Nominal (safety-agnostic) input.
    fn nominal_input(&self, state: &Vector) -> Vector;
    /// An input making the output move with `velocity`.
    fn realize(&self, state: &Vector, velocity: Vector2<f64>) -> Result<Vector, AvoidanceError>;
    /// Advances the state by `dt` holding `u` constant.
    fn advance(&self, state: &Vector, u: &Vector, dt: f64) -> Vector;
}

#[derive(Debug, Clone)]
pub struct LoopState {
    pub x: Vector,
    /// `F(output(x))` under the current ball world.
    pub q: Vector,
    /// Ball-world velocity from the last step.
    pub qdot: Vector,
    pub u: Vector,
    pub k: usize,
    pub dt: f64,
    pub world: BallWorld,
}

impl LoopState {
    pub fn new(plant: &dyn Plant, diffeo: &Diffeo, world: BallWorld, x: Vector, dt: f64) -> Result<Self, AvoidanceError> {
        diffeo.check_ball_world(&world)?;
        let p = plant.output(&x);
        let q = diffeo.eval2(&world, p)?;
        let u = plant.nominal_input(&x);
        Ok(Self {
            q: Vector::from_column_slice(q.as_slice()),
            qdot: Vector::zeros(2),
            u,
            k: 0,
            dt,
            world,
            x,
        })
    }

    pub fn time(&self) -> f64 {
        self.k as f64 * self.dt
    }
}

#[derive(Debug, Clone)]
pub struct StepReport {
    pub state: LoopState,
    pub events: Vec<ObstacleEvent>,
    pub active: Vec<RowLabel>,
    pub qp_iterations: usize,
    /// Velocity the nominal input asks of the output point.
    pub nominal_velocity: Vector2<f64>,
    /// Velocity actually commanded to the output point.
    pub velocity: Vector2<f64>,
    pub jacobian_condition: f64,
}

/// Whether `‖a + τ(b − a)‖ > r_a + τ(r_b − r_a)` for all τ ∈ [0, 1]. The
/// squared gap is a quadratic in τ, so its minimum is checked exactly.
fn segment_clears(a: Vector2<f64>, b: Vector2<f64>, r_a: f64, r_b: f64) -> bool {
    let d = b - a;
    let dr = r_b - r_a;
    let c2 = d.norm_squared() - dr * dr;
    let c1 = 2.0 * (a.dot(&d) - r_a * dr);
    let c0 = a.norm_squared() - r_a * r_a;
    let gap = |t: f64| c0 + t * (c1 + t * c2);
    let mut lowest = gap(0.0).min(gap(1.0));
    if c2 > 0.0 {
        let t = -c1 / (2.0 * c2);
        if (0.0..=1.0).contains(&t) {
            lowest = lowest.min(gap(t));
        }
    }
    lowest > 0.0
}

/// Refines `u` so the plant's own integration step puts the output exactly
/// on `target`; a velocity-level `realize` is only first-order accurate,
/// which matters when the state is grazing an obstacle.
fn land_on(plant: &dyn Plant, x: &Vector, target: Vector2<f64>, dt: f64, mut u: Vector) -> Vector {
    if u.len() != 2 {
        return u;
    }
    let miss = |u: &Vector| plant.output(&plant.advance(x, u, dt)) - target;
    let mut r = miss(&u);
    for _ in 0..LANDING_ITERATIONS {
        if r.norm() <= 1e-14 * (1.0 + target.norm()) {
            break;
        }
        let mut jac = nalgebra::Matrix2::zeros();
        for j in 0..2 {
            let h = 1e-7 * (1.0 + u[j].abs());
            let mut up = u.clone();
            up[j] += h;
            jac.set_column(j, &((miss(&up) - r) / h));
        }
        let Some(du) = jac.lu().solve(&-r) else { break };
        let trial = &u + Vector::from_column_slice(du.as_slice());
        let rt = miss(&trial);
        if rt.norm() >= r.norm() {
            break;
        }
        u = trial;
        r = rt;
    }
    u
}

/// Largest s ∈ [0, 1] such that moving q by s·dq while the world moves from
/// `old` to `new` never crosses a ball or leaves the boundary, taking the
/// relative motion as straight. Continuous time rules such crossings out; in
/// discrete time they occur once a floored ball is smaller than one step.
fn admissible_fraction(old: &BallWorld, new: &BallWorld, q: Vector2<f64>, dq: Vector2<f64>) -> f64 {
    let to2 = |v: &Vector| Vector2::new(v[0], v[1]);
    let clear = |s: f64| {
        let target = q + dq * s;
        let inside = new.boundary_radius.min(old.boundary_radius);
        (q - to2(&old.boundary_center)).norm() < inside
            && (target - to2(&new.boundary_center)).norm() < inside
            && old.obstacles.iter().zip(&new.obstacles).all(|(o, n)| {
                segment_clears(q - to2(&o.center), target - to2(&n.center), o.radius, n.radius)
            })
    };
    if clear(1.0) {
        return 1.0;
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        if clear(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

/// One pass of the state-avoidance loop:
///
/// 1. `q̇ = J_F(x)·ẋ_nom`, the ball-world image of the nominal velocity;
/// 2. Main QP for the obstacle commands, obstacles stepped by Euler;
/// 3. `x' = F_new⁻¹(q)` absorbs the motion of the map itself, and
///    `ẋ_des = (x' − x)/Δt + J_F_new(x')⁻¹·q̇`;
/// 4. the plant realizes `ẋ_des` and is integrated over `Δt`.
pub fn avoidance_step(
    state: &LoopState,
    plant: &dyn Plant,
    diffeo: &Diffeo,
    gains: AvoidanceGains,
    gamma: ClassKappa,
) -> Result<StepReport, AvoidanceError> {
    subdivided_step(state, plant, diffeo, gains, gamma, 0)
        .map_err(|e| AvoidanceError::AtStep { step: state.k, source: Box::new(e) })
}

fn retry_with_smaller_step(e: &AvoidanceError) -> bool {
    matches!(
        e,
        AvoidanceError::Unrealizable(_)
            | AvoidanceError::Diffeo(DiffeoError::NoConvergence { .. } | DiffeoError::OutsideSafeSet { .. })
            | AvoidanceError::UnsafeConfiguration { .. }
    )
}

/// Fast passes around an obstacle can need far more resolution than the
/// logging step, so a failed step is retried as two half steps.
fn subdivided_step(
    state: &LoopState,
    plant: &dyn Plant,
    diffeo: &Diffeo,
    gains: AvoidanceGains,
    gamma: ClassKappa,
    depth: u32,
) -> Result<StepReport, AvoidanceError> {
    match step_inner(state, plant, diffeo, gains, gamma) {
        Err(e) if depth < MAX_SUBDIVISIONS && retry_with_smaller_step(&e) => {}
        done => return done,
    }
    let half = LoopState { dt: 0.5 * state.dt, ..state.clone() };
    let first = subdivided_step(&half, plant, diffeo, gains, gamma, depth + 1)?;
    let mut second = subdivided_step(&first.state, plant, diffeo, gains, gamma, depth + 1)?;
    let p0 = plant.output(&state.x);
    let p1 = plant.output(&second.state.x);
    let mut events = first.events;
    events.append(&mut second.events);
    Ok(StepReport {
        state: LoopState { k: state.k + 1, dt: state.dt, ..second.state },
        events,
        active: second.active,
        qp_iterations: first.qp_iterations + second.qp_iterations,
        nominal_velocity: first.nominal_velocity,
        velocity: (p1 - p0) / state.dt,
        jacobian_condition: first.jacobian_condition.max(second.jacobian_condition),
    })
}

fn step_inner(
    state: &LoopState,
    plant: &dyn Plant,
    diffeo: &Diffeo,
    gains: AvoidanceGains,
    gamma: ClassKappa,
) -> Result<StepReport, AvoidanceError> {
    let dt = state.dt;
    let p = plant.output(&state.x);
    let q = diffeo.eval2(&state.world, p)?;
    let jac = diffeo.jacobian2(&state.world, p)?;
    let u_nom = plant.nominal_input(&state.x);
    let nominal_velocity = plant.output_velocity(&state.x, &u_nom);
    let qdot = jac.matrix * nominal_velocity;

    let qv = Vector::from_column_slice(q.as_slice());
    let qdv = Vector::from_column_slice(qdot.as_slice());
    let solve = solve_obstacle_commands(&state.world, &qv, &qdv, gains, gamma)?;
    let (world, events) = step_obstacles(&state.world, &solve.command, dt)?;

    // Pull q's Euler step back through the updated map instead of linearising
    // J⁻¹q̇: near an obstacle the first-order step overshoots the boundary.
    let mut events = events;
    let fraction = admissible_fraction(&state.world, &world, q, qdot * dt);
    if fraction < 1.0 {
        events.push(ObstacleEvent::StepTruncated(fraction));
    }
    let q_target = q + qdot * (fraction * dt);
    let target = match jac.solve(qdot).map(|v| p + v * dt) {
        Some(guess) => diffeo.inverse2(&world, q_target, guess).or_else(|_| diffeo.inverse2(&world, q_target, p))?,
        None => diffeo.inverse2(&world, q_target, p)?,
    };
    // Newton may land on a distant preimage once a strongly deformed world
    // folds the map; the straight chord would then cut through an obstacle.
    let samples = ((target - p).norm() / CHORD_SPACING).ceil().min(1e5) as usize;
    for j in 1..samples {
        let y = p + (target - p) * (j as f64 / samples as f64);
        if diffeo.levels2(y).iter().any(|&b| b <= 0.0) {
            return Err(AvoidanceError::Unrealizable(format!(
                "step from ({:.6}, {:.6}) to ({:.6}, {:.6}) crosses an obstacle",
                p.x, p.y, target.x, target.y
            )));
        }
    }
    let velocity = (target - p) / dt;

    let u = land_on(plant, &state.x, target, dt, plant.realize(&state.x, velocity)?);
    let x = plant.advance(&state.x, &u, dt);
    let q_next = diffeo.eval2(&world, plant.output(&x))?;

    Ok(StepReport {
        state: LoopState {
            x,
            q: Vector::from_column_slice(q_next.as_slice()),
            qdot: qdv,
            u,
            k: state.k + 1,
            dt,
            world,
        },
        events,
        active: solve.active,
        qp_iterations: solve.iterations,
        nominal_velocity,
        velocity,
        jacobian_condition: jac.condition,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BallObstacle;

    fn v(xs: &[f64]) -> Vector {
        Vector::from_column_slice(xs)
    }

    fn two_balls() -> BallWorld {
        BallWorld::new(
            v(&[0.0, 0.0]),
            10.0,
            vec![BallObstacle::new(v(&[0.0, 3.0]), 1.0).unwrap(), BallObstacle::new(v(&[0.0, -3.0]), 1.0).unwrap()],
        )
        .unwrap()
    }

    #[test]
    fn nominal_is_zero_at_initial_configuration() {
        let cmd = nominal_obstacle_control(&two_balls(), AvoidanceGains::default());
        assert_eq!(cmd, ObstacleCommand::zeros(&two_balls()));
    }

    #[test]
    fn nominal_is_proportional() {
        let mut w = two_balls();
        w.obstacles[0].center = v(&[-0.5, 3.0]);
        w.obstacles[1].radius = 0.8;
        let cmd = nominal_obstacle_control(&w, AvoidanceGains::new(1.0, 2.0).unwrap());
        assert_eq!(cmd.center_velocity(0, 2), v(&[1.0, 0.0]));
        assert!((cmd.radius_rates[2] - 0.4).abs() < 1e-15);
    }

    #[test]
    fn main_qp_shape() {
        let main = assemble_main_qp(&two_balls(), &v(&[5.0, 0.0]), &v(&[0.0, 0.0]), Default::default(), Default::default())
            .unwrap();
        assert_eq!(main.qp.dim(), 7);
        assert_eq!(main.qp.num_constraints(), 6);
        assert_eq!(
            main.labels,
            vec![
                RowLabel::StateObstacle(1),
                RowLabel::StateObstacle(2),
                RowLabel::StateBoundary,
                RowLabel::Pairwise(1, 2),
                RowLabel::Containment(1),
                RowLabel::Containment(2)
            ]
        );

        let empty = BallWorld::new(v(&[0.0, 0.0]), 5.0, vec![]).unwrap();
        let main = assemble_main_qp(&empty, &v(&[1.0, 0.0]), &v(&[0.0, 0.0]), Default::default(), Default::default())
            .unwrap();
        assert_eq!((main.qp.dim(), main.qp.num_constraints()), (1, 1));
    }

    #[test]
    fn far_state_gets_nominal() {
        let mut w = two_balls();
        w.obstacles[0].center = v(&[0.5, 3.0]);
        let sol = solve_obstacle_commands(&w, &v(&[6.0, 0.0]), &v(&[0.1, 0.0]), Default::default(), Default::default())
            .unwrap();
        let nominal = nominal_obstacle_control(&w, Default::default());
        assert!((sol.command.to_decision() - nominal.to_decision()).amax() < 1e-12);
        assert!(sol.active.is_empty());
    }

    #[test]
    fn head_on_approach_dodges_or_shrinks() {
        let w = two_balls();
        let q = v(&[0.0, 4.05]);
        let qdot = v(&[0.0, -2.0]);
        let sol = solve_obstacle_commands(&w, &q, &qdot, Default::default(), Default::default()).unwrap();
        assert!(sol.active.contains(&RowLabel::StateObstacle(1)));
        let away = (&w.obstacles[0].center - &q).dot(&sol.command.center_velocity(0, 2));
        assert!(away > 0.0 || sol.command.radius_rates[1] < 0.0);
    }

    #[test]
    fn unsafe_configuration_is_refused() {
        let err = assemble_main_qp(&two_balls(), &v(&[0.0, 3.5]), &v(&[0.0, 0.0]), Default::default(), Default::default())
            .unwrap_err();
        assert!(matches!(err, AvoidanceError::UnsafeConfiguration { row: RowLabel::StateObstacle(1), .. }));
    }

    #[test]
    fn radius_floor_binds() {
        let w = two_balls();
        let mut cmd = ObstacleCommand::zeros(&w);
        cmd.radius_rates[1] = -1.0 / 1e-3;
        let (next, events) = step_obstacles(&w, &cmd, 1e-3).unwrap();
        assert_eq!(next.obstacles[0].radius, RADIUS_FLOOR);
        assert_eq!(events, vec![ObstacleEvent::RadiusFloor(1)]);

        let (same, events) = step_obstacles(&w, &ObstacleCommand::zeros(&w), 1e-3).unwrap();
        assert_eq!(same, w);
        assert!(events.is_empty());
    }

    #[test]
    fn boundary_cap_binds() {
        let w = two_balls();
        let mut cmd = ObstacleCommand::zeros(&w);
        cmd.radius_rates[0] = 1e7;
        let (next, events) = step_obstacles(&w, &cmd, 1e-3).unwrap();
        assert_eq!(next.boundary_radius, 1000.0);
        assert_eq!(events, vec![ObstacleEvent::BoundaryCap]);
    }
}
