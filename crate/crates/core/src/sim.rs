//! Scenarios, integration, deadlock detection and the built-in experiments.

use std::sync::Arc;
use std::time::Instant;

use nalgebra::Vector2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::avoidance::{
    avoidance_step, labelled_barriers, AvoidanceError, AvoidanceGains, LoopState, ObstacleEvent, Plant,
};
use crate::cbf::{
    standard_filter, BarrierFunction, CbfError, CircleBarrier, ClassKappa, ControlAffineSystem, FunnelBarrier,
    LinearSystem,
};
use crate::diffeo::{Diffeo, DiffeoParams};
use crate::geometry::{
    BallObstacle, BallWorld, GeometryError, StarObstacle, StarShape, StarWorld, Workspace, WorkspaceShape,
};
use crate::{Matrix, Vector};

pub const DEFAULT_DT: f64 = 1e-3;
pub const DEFAULT_HORIZON: f64 = 20.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Cbf(#[from] CbfError),
    #[error(transparent)]
    Avoidance(#[from] AvoidanceError),
}

fn invalid<T>(msg: impl Into<String>) -> Result<T, SimError> {
    Err(SimError::Invalid(msg.into()))
}

/// Classic fourth-order Runge–Kutta step of `ẋ = f(x)`.
pub fn rk4<F: Fn(&Vector) -> Vector>(f: F, x: &Vector, dt: f64) -> Vector {
    let k1 = f(x);
    let k2 = f(&(x + &k1 * (dt / 2.0)));
    let k3 = f(&(x + &k2 * (dt / 2.0)));
    let k4 = f(&(x + &k3 * dt));
    x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0)
}

/// Look-ahead feedback linearization of a unicycle at `pose = (p, θ)`: the
/// point `p + ℓ(cos θ, sin θ)` moves with exactly `v_des` under the returned
/// `(v, ω)`.
pub fn unicycle_track(v_des: Vector2<f64>, heading: f64, lookahead: f64) -> (f64, f64) {
    let (s, c) = heading.sin_cos();
    (c * v_des.x + s * v_des.y, (-s * v_des.x + c * v_des.y) / lookahead)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SystemSpec {
    /// `ẋ = Ax + Bu` (`B = I` when omitted), nominal input `K(goal − x)`.
    Linear {
        drift: Vec<Vec<f64>>,
        #[serde(default)]
        input: Option<Vec<Vec<f64>>>,
        #[serde(default)]
        nominal_gain: f64,
    },
    /// Differential drive with state `(x, y, θ)` and input `(v, ω)`; the
    /// look-ahead point is driven toward the goal with `K(goal − p)`.
    Unicycle { lookahead: f64, nominal_gain: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum BarrierSpec {
    /// `‖x − c‖² − r²`.
    Circle { center: Vec<f64>, radius: f64 },
    /// `‖x − c‖⁴ − (x − c)ᵀM(x − c)`.
    Funnel { center: Vec<f64>, matrix: Vec<Vec<f64>> },
}

fn default_alpha() -> f64 {
    1.0
}
fn default_lambda() -> f64 {
    100.0
}
fn default_kappa() -> f64 {
    1.0
}
fn default_kp() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ControllerSpec {
    /// Nominal input only. A struct variant so that stray keys are still
    /// rejected (serde ignores them on tagged unit variants).
    None {},
    /// CBF-QP filter on the nominal input.
    StandardCbf {
        barrier: BarrierSpec,
        #[serde(default = "default_alpha")]
        alpha: f64,
    },
    /// State avoidance through the ball world.
    BallWorld {
        #[serde(default = "default_lambda")]
        lambda: f64,
        #[serde(default = "default_kappa")]
        kappa: f64,
        #[serde(default = "default_kp")]
        kp: f64,
        #[serde(default = "default_alpha")]
        alpha: f64,
        /// Ball radii; default `0.85·min_θ r_i(θ)` per obstacle.
        #[serde(default)]
        ball_radii: Option<Vec<f64>>,
        /// Ball-world boundary radius; default the workspace's largest extent.
        #[serde(default)]
        boundary_radius: Option<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkspaceSpec {
    #[serde(default)]
    pub center: [f64; 2],
    pub shape: WorkspaceShape,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObstacleSpec {
    pub center: [f64; 2],
    pub shape: StarShape,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldSpec {
    pub workspace: WorkspaceSpec,
    #[serde(default)]
    pub obstacles: Vec<ObstacleSpec>,
}

impl WorldSpec {
    pub fn build(&self) -> Result<StarWorld, GeometryError> {
        let ws = Workspace::new(&Vector::from_column_slice(&self.workspace.center), self.workspace.shape.clone())?;
        let obstacles = self
            .obstacles
            .iter()
            .map(|o| StarObstacle::new(&Vector::from_column_slice(&o.center), o.shape.clone()))
            .collect::<Result<_, _>>()?;
        Ok(StarWorld::new(ws, obstacles))
    }
}

/// Operational deadlock definition: over the last `window` steps the mean
/// speed stays below `velocity_threshold` away from the goal while the
/// controller still asks for motion (mean intended speed at least the same
/// threshold).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeadlockMonitor {
    pub window: usize,
    pub velocity_threshold: f64,
    pub goal_radius: f64,
}

impl Default for DeadlockMonitor {
    fn default() -> Self {
        Self { window: 500, velocity_threshold: 1e-3, goal_radius: 5e-2 }
    }
}

impl DeadlockMonitor {
    fn validate(&self) -> Result<(), SimError> {
        if self.window == 0 || !(self.velocity_threshold > 0.0) || !(self.goal_radius > 0.0) {
            return invalid("monitor needs window >= 1 and positive thresholds");
        }
        Ok(())
    }
}

fn default_goal() -> [f64; 2] {
    [0.0, 0.0]
}
fn default_dt() -> f64 {
    DEFAULT_DT
}
fn default_horizon() -> f64 {
    DEFAULT_HORIZON
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub system: SystemSpec,
    pub controller: ControllerSpec,
    #[serde(default)]
    pub world: Option<WorldSpec>,
    #[serde(default = "default_goal")]
    pub goal: [f64; 2],
    pub initial_states: Vec<Vec<f64>>,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_horizon")]
    pub horizon: f64,
    #[serde(default)]
    pub monitor: DeadlockMonitor,
}

fn matrix_from_rows(rows: &[Vec<f64>], what: &str) -> Result<Matrix, SimError> {
    let r = rows.len();
    let c = rows.first().map_or(0, |row| row.len());
    if r == 0 || c == 0 || rows.iter().any(|row| row.len() != c) {
        return invalid(format!("{what} must be a non-empty rectangular matrix"));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return invalid(format!("{what} has non-finite entries"));
    }
    Ok(Matrix::from_fn(r, c, |i, j| rows[i][j]))
}

/// Fully actuated (or at least planar-output) linear plant.
#[derive(Debug, Clone)]
pub struct LinearPlant {
    pub system: LinearSystem,
    pub goal: Vector,
    pub nominal_gain: f64,
}

impl Plant for LinearPlant {
    fn state_dim(&self) -> usize {
        self.system.state_dim()
    }

    fn input_dim(&self) -> usize {
        self.system.input_dim()
    }

    fn output(&self, state: &Vector) -> Vector2<f64> {
        Vector2::new(state[0], state[1])
    }

    fn output_velocity(&self, state: &Vector, u: &Vector) -> Vector2<f64> {
        let v = self.system.dynamics(state, u);
        Vector2::new(v[0], v[1])
    }

    fn nominal_input(&self, state: &Vector) -> Vector {
        let m = self.system.input_dim();
        if self.nominal_gain == 0.0 {
            return Vector::zeros(m);
        }
        // K(goal − x) through the input map's pseudo-inverse
        let target = (&self.goal - state) * self.nominal_gain;
        let g = self.system.input_map(state);
        g.pseudo_inverse(1e-12).map(|p| p * target).unwrap_or_else(|_| Vector::zeros(m))
    }

    fn realize(&self, state: &Vector, velocity: Vector2<f64>) -> Result<Vector, AvoidanceError> {
        let g = self.system.input_map(state);
        if g.nrows() != 2 || g.ncols() != 2 {
            return Err(AvoidanceError::Unrealizable("input map is not square 2x2".into()));
        }
        let rhs = Vector::from_column_slice(velocity.as_slice()) - self.system.drift(state);
        g.lu().solve(&rhs).ok_or_else(|| AvoidanceError::Unrealizable("input map is singular".into()))
    }

    fn advance(&self, state: &Vector, u: &Vector, dt: f64) -> Vector {
        rk4(|x| self.system.dynamics(x, u), state, dt)
    }
}

/// Differential-drive robot steered through its look-ahead point.
#[derive(Debug, Clone)]
pub struct UnicyclePlant {
    pub lookahead: f64,
    pub goal: Vector2<f64>,
    pub nominal_gain: f64,
}

impl Plant for UnicyclePlant {
    fn state_dim(&self) -> usize {
        3
    }

    fn input_dim(&self) -> usize {
        2
    }

    fn output(&self, state: &Vector) -> Vector2<f64> {
        let (s, c) = state[2].sin_cos();
        Vector2::new(state[0] + self.lookahead * c, state[1] + self.lookahead * s)
    }

    fn output_velocity(&self, state: &Vector, u: &Vector) -> Vector2<f64> {
        let (s, c) = state[2].sin_cos();
        Vector2::new(c * u[0] - self.lookahead * s * u[1], s * u[0] + self.lookahead * c * u[1])
    }

    fn nominal_input(&self, state: &Vector) -> Vector {
        let v = (self.goal - self.output(state)) * self.nominal_gain;
        let (lin, ang) = unicycle_track(v, state[2], self.lookahead);
        Vector::from_column_slice(&[lin, ang])
    }

    fn realize(&self, state: &Vector, velocity: Vector2<f64>) -> Result<Vector, AvoidanceError> {
        let (lin, ang) = unicycle_track(velocity, state[2], self.lookahead);
        Ok(Vector::from_column_slice(&[lin, ang]))
    }

    fn advance(&self, state: &Vector, u: &Vector, dt: f64) -> Vector {
        rk4(
            |x| {
                let (s, c) = x[2].sin_cos();
                Vector::from_column_slice(&[u[0] * c, u[0] * s, u[1]])
            },
            state,
            dt,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EquilibriumClass {
    Desired,
    Undesired,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Termination {
    Horizon,
    Converged,
    Deadlock,
    Error,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SimEvent {
    Deadlock { step: usize, t: f64, x: Vector },
    RadiusFloor { step: usize, obstacle: usize },
    BoundaryCap { step: usize },
    StepTruncated { step: usize, fraction: f64 },
    NearSingularJacobian { step: usize, condition: f64 },
    Unsafe { step: usize, barrier: usize, value: f64 },
    Error { step: usize, message: String },
}

impl SimEvent {
    pub fn step(&self) -> usize {
        match self {
            SimEvent::Deadlock { step, .. }
            | SimEvent::RadiusFloor { step, .. }
            | SimEvent::BoundaryCap { step }
            | SimEvent::StepTruncated { step, .. }
            | SimEvent::NearSingularJacobian { step, .. }
            | SimEvent::Unsafe { step, .. }
            | SimEvent::Error { step, .. } => *step,
        }
    }

    pub fn describe(&self) -> String {
        match self {
            SimEvent::Deadlock { t, x, .. } => format!("deadlock at t={t} x={:?}", x.as_slice()),
            SimEvent::RadiusFloor { obstacle, .. } => format!("radius floor binding on obstacle {obstacle}"),
            SimEvent::BoundaryCap { .. } => "boundary growth cap binding".into(),
            SimEvent::StepTruncated { fraction, .. } => {
                format!("mapped-state step truncated to {fraction:.3} to stay clear of the balls")
            }
            SimEvent::NearSingularJacobian { condition, .. } => format!("near-singular Jacobian (cond {condition:e})"),
            SimEvent::Unsafe { barrier, value, .. } => format!("real-world barrier {barrier} = {value}"),
            SimEvent::Error { message, .. } => format!("error: {message}"),
        }
    }
}

pub const FLAG_UNSAFE: u32 = 1;
pub const FLAG_RADIUS_FLOOR: u32 = 2;
pub const FLAG_BOUNDARY_CAP: u32 = 4;
pub const FLAG_NEAR_SINGULAR: u32 = 8;
pub const FLAG_FILTER_ACTIVE: u32 = 16;
pub const FLAG_STEP_TRUNCATED: u32 = 32;

/// State at the start of one step together with what the step did.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub t: f64,
    pub x: Vector,
    /// Controlled point (the look-ahead point for a unicycle); goal distance
    /// is measured here.
    pub output: [f64; 2],
    /// Mapped state (empty without a ball world).
    pub q: Vec<f64>,
    /// Workspace and obstacle level sets, then the filter barrier if any.
    pub real_barriers: Vec<f64>,
    /// State and configuration barriers of the ball world.
    pub ball_barriers: Vec<f64>,
    /// `ρ_0`, then `(q_i, ρ_i)` per obstacle.
    pub balls: Vec<f64>,
    pub speed: f64,
    pub intent_speed: f64,
    pub active_rows: usize,
    pub flags: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub final_state: Vector,
    pub final_output: [f64; 2],
    pub final_time: f64,
    pub goal_distance: f64,
    pub min_real_barrier: f64,
    pub min_ball_barrier: f64,
    pub outcome: EquilibriumClass,
    pub termination: Termination,
    pub qp_solves: usize,
    pub wall_time: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryLog {
    pub index: usize,
    pub initial: Vector,
    pub records: Vec<Record>,
    pub events: Vec<SimEvent>,
    pub summary: Summary,
}

impl TrajectoryLog {
    pub fn has_error(&self) -> bool {
        self.events.iter().any(|e| matches!(e, SimEvent::Error { .. }))
    }

    pub fn deadlock(&self) -> Option<&SimEvent> {
        self.events.iter().find(|e| matches!(e, SimEvent::Deadlock { .. }))
    }
}

/// Sliding-window means of speed and intended speed.
#[derive(Debug, Clone)]
struct Window {
    speeds: Vec<(f64, f64)>,
    next: usize,
    filled: bool,
    sum: (f64, f64),
}

impl Window {
    fn new(n: usize) -> Self {
        Self { speeds: vec![(0.0, 0.0); n], next: 0, filled: false, sum: (0.0, 0.0) }
    }

    fn push(&mut self, speed: f64, intent: f64) {
        let old = self.speeds[self.next];
        self.sum.0 += speed - old.0;
        self.sum.1 += intent - old.1;
        self.speeds[self.next] = (speed, intent);
        self.next += 1;
        if self.next == self.speeds.len() {
            self.next = 0;
            self.filled = true;
        }
    }

    fn means(&self) -> Option<(f64, f64)> {
        if !self.filled {
            return None;
        }
        // recompute instead of trusting the running sum for the decision
        let n = self.speeds.len() as f64;
        let (a, b) = self.speeds.iter().fold((0.0, 0.0), |acc, s| (acc.0 + s.0, acc.1 + s.1));
        Some((a / n, b / n))
    }
}

fn is_deadlocked(monitor: &DeadlockMonitor, means: (f64, f64), goal_distance: f64) -> bool {
    means.0 < monitor.velocity_threshold && goal_distance > monitor.goal_radius && means.1 >= monitor.velocity_threshold
}

fn goal_distance(p: &[f64; 2], goal: &[f64; 2]) -> f64 {
    (p[0] - goal[0]).hypot(p[1] - goal[1])
}

/// Scans a finished log for the first window that meets the deadlock
/// definition.
pub fn detect_deadlock(log: &TrajectoryLog, monitor: &DeadlockMonitor, goal: [f64; 2]) -> Option<SimEvent> {
    let w = monitor.window;
    if log.records.len() < w {
        return None;
    }
    let mut win = Window::new(w);
    for (k, r) in log.records.iter().enumerate() {
        win.push(r.speed, r.intent_speed);
        if let Some(m) = win.means() {
            if is_deadlocked(monitor, m, goal_distance(&r.output, &goal)) {
                return Some(SimEvent::Deadlock { step: k, t: r.t, x: r.x.clone() });
            }
        }
    }
    None
}

/// Desired if the run ends at the goal; undesired if it came to rest (or
/// deadlocked) anywhere else; none otherwise.
pub fn classify_equilibrium(log: &TrajectoryLog, monitor: &DeadlockMonitor, goal: [f64; 2]) -> EquilibriumClass {
    if log.deadlock().is_some() {
        return EquilibriumClass::Undesired;
    }
    if goal_distance(&log.summary.final_output, &goal) < monitor.goal_radius {
        return EquilibriumClass::Desired;
    }
    let tail = &log.records[log.records.len().saturating_sub(monitor.window)..];
    if tail.len() == monitor.window {
        let mean = tail.iter().map(|r| r.speed).sum::<f64>() / tail.len() as f64;
        if mean < monitor.velocity_threshold {
            return EquilibriumClass::Undesired;
        }
    }
    EquilibriumClass::None
}

enum Controller {
    None,
    Standard { barrier: Arc<dyn BarrierFunction>, gamma: ClassKappa, system: LinearSystem },
    BallWorld { diffeo: Diffeo, balls: BallWorld, gains: AvoidanceGains, gamma: ClassKappa },
}

struct Prepared {
    plant: Box<dyn Plant>,
    controller: Controller,
    world: Option<StarWorld>,
}

impl BarrierSpec {
    /// The barrier on an `n`-dimensional state.
    pub fn build(&self, n: usize) -> Result<Arc<dyn BarrierFunction>, SimError> {
        barrier_from_spec(self, n)
    }
}

fn barrier_from_spec(spec: &BarrierSpec, n: usize) -> Result<Arc<dyn BarrierFunction>, SimError> {
    match spec {
        BarrierSpec::Circle { center, radius } => {
            if center.len() != n || !(*radius > 0.0) {
                return invalid("circle barrier needs a center of the state dimension and a positive radius");
            }
            Ok(Arc::new(CircleBarrier { center: Vector::from_column_slice(center), radius: *radius }))
        }
        BarrierSpec::Funnel { center, matrix } => {
            let m = matrix_from_rows(matrix, "funnel matrix")?;
            if center.len() != n || m.nrows() != n || m.ncols() != n {
                return invalid("funnel barrier dimensions do not match the state");
            }
            Ok(Arc::new(FunnelBarrier { center: Vector::from_column_slice(center), shape: m }))
        }
    }
}

/// Smallest boundary radius of an obstacle, sampled over angles.
pub fn min_radius(obs: &StarObstacle) -> f64 {
    (0..3600).map(|k| obs.radius(k as f64 * std::f64::consts::TAU / 3600.0)).fold(f64::INFINITY, f64::min)
}

/// Ball world matching a star world: boundary centered on the workspace,
/// one ball per obstacle at the obstacle center.
pub fn ball_world_for(
    world: &StarWorld,
    radii: Option<&[f64]>,
    boundary_radius: Option<f64>,
) -> Result<BallWorld, SimError> {
    let m = world.obstacles.len();
    let radii: Vec<f64> = match radii {
        Some(r) if r.len() != m => return invalid(format!("ball_radii has {} entries for {m} obstacles", r.len())),
        Some(r) => r.to_vec(),
        None => world.obstacles.iter().map(|o| 0.85 * min_radius(o)).collect(),
    };
    let r0 = boundary_radius.unwrap_or_else(|| {
        let (lo, hi) = world.workspace.bounds();
        (hi - lo).amax() / 2.0
    });
    let c0 = world.workspace.center2();
    let balls = world
        .obstacles
        .iter()
        .zip(&radii)
        .map(|(o, &r)| BallObstacle::new(o.center(), r))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(BallWorld::new(Vector::from_column_slice(c0.as_slice()), r0, balls)?)
}

impl Scenario {
    fn state_dim(&self) -> usize {
        match &self.system {
            SystemSpec::Linear { drift, .. } => drift.len(),
            SystemSpec::Unicycle { .. } => 3,
        }
    }

    fn prepare(&self) -> Result<Prepared, SimError> {
        if !(self.dt > 0.0 && self.dt.is_finite()) || !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return invalid("dt and horizon must be positive");
        }
        self.monitor.validate()?;
        if self.initial_states.is_empty() {
            return invalid("initial_states must not be empty");
        }
        let n = self.state_dim();
        let goal = Vector2::new(self.goal[0], self.goal[1]);

        let (plant, linear): (Box<dyn Plant>, Option<LinearSystem>) = match &self.system {
            SystemSpec::Linear { drift, input, nominal_gain } => {
                let a = matrix_from_rows(drift, "drift")?;
                let b = match input {
                    Some(rows) => matrix_from_rows(rows, "input")?,
                    None => Matrix::identity(a.nrows(), a.nrows()),
                };
                let system = LinearSystem::new(a, b).map_err(SimError::from)?;
                if n < 2 {
                    return invalid("planar scenarios need a state dimension of at least 2");
                }
                let mut g = Vector::zeros(n);
                g[0] = goal.x;
                g[1] = goal.y;
                let plant = LinearPlant { system: system.clone(), goal: g, nominal_gain: *nominal_gain };
                (Box::new(plant), Some(system))
            }
            SystemSpec::Unicycle { lookahead, nominal_gain } => {
                if !(*lookahead > 0.0) || !(*nominal_gain > 0.0) {
                    return invalid("unicycle lookahead and nominal_gain must be positive");
                }
                (Box::new(UnicyclePlant { lookahead: *lookahead, goal, nominal_gain: *nominal_gain }), None)
            }
        };

        let world = self.world.as_ref().map(|w| w.build()).transpose()?;

        let controller = match &self.controller {
            ControllerSpec::None {} => Controller::None,
            ControllerSpec::StandardCbf { barrier, alpha } => {
                let Some(system) = linear else {
                    return invalid("standard-cbf requires a linear system");
                };
                Controller::Standard {
                    barrier: barrier_from_spec(barrier, n)?,
                    gamma: ClassKappa::new(*alpha)?,
                    system,
                }
            }
            ControllerSpec::BallWorld { lambda, kappa, kp, alpha, ball_radii, boundary_radius } => {
                let Some(world) = &world else {
                    return invalid("ball-world controller requires a world");
                };
                if linear.as_ref().is_some_and(|s| s.state_dim() != 2 || s.input_dim() != 2) {
                    return invalid("ball-world controller needs a 2-state, 2-input linear system");
                }
                let params = DiffeoParams {
                    lambda: *lambda,
                    real_goal: Vector::from_column_slice(&self.goal),
                    ball_goal: Vector::from_column_slice(&self.goal),
                };
                let diffeo = Diffeo::new(params, world.clone()).map_err(AvoidanceError::from)?;
                let balls = ball_world_for(world, ball_radii.as_deref(), *boundary_radius)?;
                diffeo.check_ball_world(&balls).map_err(AvoidanceError::from)?;
                let probe = Vector::from_column_slice(&self.goal);
                if !balls.is_safe_configuration(&probe)? {
                    return invalid("initial ball world is not a safe configuration (overlapping or escaping balls)");
                }
                Controller::BallWorld {
                    diffeo,
                    balls,
                    gains: AvoidanceGains::new(*kappa, *kp)?,
                    gamma: ClassKappa::new(*alpha)?,
                }
            }
        };

        for (i, x0) in self.initial_states.iter().enumerate() {
            if x0.len() != n {
                return invalid(format!("initial state {i} has {} components, expected {n}", x0.len()));
            }
            if x0.iter().any(|v| !v.is_finite()) {
                return invalid(format!("initial state {i} is not finite"));
            }
            let x = Vector::from_column_slice(x0);
            let p = plant.output(&x);
            if let Some(w) = &world {
                if !matches!(controller, Controller::None) && !w.is_safe2(p) {
                    return invalid(format!("initial state {i} is not in the safe set"));
                }
            }
            if let Controller::Standard { barrier, .. } = &controller {
                if barrier.value(&x) < 0.0 {
                    return invalid(format!("initial state {i} violates the barrier"));
                }
            }
        }
        Ok(Prepared { plant, controller, world })
    }

    /// Checks everything `run_scenario` would check before integrating.
    pub fn validate(&self) -> Result<(), SimError> {
        self.prepare().map(|_| ())
    }

    /// Planar outputs of the initial states (no validation beyond length).
    pub fn initial_outputs(&self) -> Vec<Vector2<f64>> {
        self.initial_states
            .iter()
            .filter(|x| x.len() >= 2)
            .map(|x| match &self.system {
                SystemSpec::Unicycle { lookahead, .. } if x.len() >= 3 => {
                    Vector2::new(x[0] + lookahead * x[2].cos(), x[1] + lookahead * x[2].sin())
                }
                _ => Vector2::new(x[0], x[1]),
            })
            .collect()
    }

    pub fn builtin(name: &str) -> Option<Scenario> {
        builtin(name)
    }
}

struct Stepper<'a> {
    prep: &'a Prepared,
    scn: &'a Scenario,
    state: Option<LoopState>,
    x: Vector,
    k: usize,
    qp_solves: usize,
}

struct StepInfo {
    record: Record,
    events: Vec<SimEvent>,
    next: Vector,
}

impl Stepper<'_> {
    fn real_barriers(&self, x: &Vector) -> Vec<f64> {
        let mut out = Vec::new();
        if let Some(w) = &self.prep.world {
            out.extend(w.betas2(self.prep.plant.output(x)));
        }
        if let Controller::Standard { barrier, .. } = &self.prep.controller {
            out.push(barrier.value(x));
        }
        out
    }

    fn step(&mut self) -> Result<StepInfo, SimError> {
        let dt = self.scn.dt;
        let plant = self.prep.plant.as_ref();
        let x = self.x.clone();
        let t = self.k as f64 * dt;
        let real = self.real_barriers(&x);
        let mut flags = 0;
        if real.iter().any(|&b| b < 0.0) {
            flags |= FLAG_UNSAFE;
        }
        let mut events = Vec::new();
        for (i, &b) in real.iter().enumerate() {
            if b < -1e-6 {
                events.push(SimEvent::Unsafe { step: self.k, barrier: i, value: b });
            }
        }
        let u_nom = plant.nominal_input(&x);
        let intent = plant.output_velocity(&x, &u_nom);
        let p = plant.output(&x);
        let output = [p.x, p.y];

        let info = match &self.prep.controller {
            Controller::None => {
                let next = plant.advance(&x, &u_nom, dt);
                Record {
                    t,
                    x: x.clone(),
                    output,
                    q: vec![],
                    real_barriers: real,
                    ball_barriers: vec![],
                    balls: vec![],
                    speed: intent.norm(),
                    intent_speed: intent.norm(),
                    active_rows: 0,
                    flags,
                }
                .with_next(next)
            }
            Controller::Standard { barrier, gamma, system } => {
                let u = standard_filter(system, barrier.as_ref(), *gamma, &x, &u_nom)?;
                self.qp_solves += 1;
                let active = (&u - &u_nom).norm() > 1e-12;
                if active {
                    flags |= FLAG_FILTER_ACTIVE;
                }
                let v = system.dynamics(&x, &u);
                let next = plant.advance(&x, &u, dt);
                Record {
                    t,
                    x: x.clone(),
                    output,
                    q: vec![],
                    real_barriers: real,
                    ball_barriers: vec![],
                    balls: vec![],
                    speed: v.norm(),
                    intent_speed: system.dynamics(&x, &u_nom).norm(),
                    active_rows: active as usize,
                    flags,
                }
                .with_next(next)
            }
            Controller::BallWorld { diffeo, gains, gamma, .. } => {
                let state = self.state.as_ref().expect("ball-world loop state");
                let report = avoidance_step(state, plant, diffeo, *gains, *gamma)?;
                self.qp_solves += 1;
                let q = state.q.clone();
                let ball_barriers: Vec<f64> =
                    labelled_barriers(&state.world, &q)?.into_iter().map(|(_, v)| v).collect();
                let mut balls = vec![state.world.boundary_radius];
                for o in &state.world.obstacles {
                    balls.extend(o.center.iter());
                    balls.push(o.radius);
                }
                for e in &report.events {
                    match e {
                        ObstacleEvent::RadiusFloor(i) => {
                            flags |= FLAG_RADIUS_FLOOR;
                            events.push(SimEvent::RadiusFloor { step: self.k, obstacle: *i });
                        }
                        ObstacleEvent::BoundaryCap => {
                            flags |= FLAG_BOUNDARY_CAP;
                            events.push(SimEvent::BoundaryCap { step: self.k });
                        }
                        ObstacleEvent::StepTruncated(fraction) => {
                            flags |= FLAG_STEP_TRUNCATED;
                            events.push(SimEvent::StepTruncated { step: self.k, fraction: *fraction });
                        }
                    }
                }
                if report.jacobian_condition > crate::diffeo::SINGULAR_CONDITION {
                    flags |= FLAG_NEAR_SINGULAR;
                    events.push(SimEvent::NearSingularJacobian { step: self.k, condition: report.jacobian_condition });
                }
                let next = report.state.x.clone();
                let rec = Record {
                    t,
                    x: x.clone(),
                    output,
                    q: q.iter().copied().collect(),
                    real_barriers: real,
                    ball_barriers,
                    balls,
                    speed: report.velocity.norm(),
                    intent_speed: report.state.qdot.norm(),
                    active_rows: report.active.len(),
                    flags,
                };
                self.state = Some(report.state);
                rec.with_next(next)
            }
        };
        let mut info = info;
        info.events = events;
        Ok(info)
    }
}

impl Record {
    fn with_next(self, next: Vector) -> StepInfo {
        StepInfo { record: self, events: Vec::new(), next }
    }
}

fn run_one(prep: &Prepared, scn: &Scenario, index: usize) -> TrajectoryLog {
    let start = Instant::now();
    let x0 = Vector::from_column_slice(&scn.initial_states[index]);
    let mut events = Vec::new();
    let state = match &prep.controller {
        Controller::BallWorld { diffeo, balls, .. } => {
            match LoopState::new(prep.plant.as_ref(), diffeo, balls.clone(), x0.clone(), scn.dt) {
                Ok(s) => Some(s),
                Err(e) => {
                    events.push(SimEvent::Error { step: 0, message: e.to_string() });
                    None
                }
            }
        }
        _ => None,
    };
    let mut stepper = Stepper { prep, scn, state, x: x0.clone(), k: 0, qp_solves: 0 };
    let steps = (scn.horizon / scn.dt).round() as usize;
    let monitor = scn.monitor;
    let mut window = Window::new(monitor.window);
    let mut records = Vec::with_capacity(steps);
    let mut termination = Termination::Horizon;

    if !events.is_empty() {
        termination = Termination::Error;
    } else {
        for k in 0..steps {
            stepper.k = k;
            match stepper.step() {
                Ok(info) => {
                    let StepInfo { record, events: ev, next } = info;
                    window.push(record.speed, record.intent_speed);
                    let dist = goal_distance(&record.output, &scn.goal);
                    records.push(record);
                    events.extend(ev);
                    stepper.x = next;
                    if let Some(means) = window.means() {
                        if is_deadlocked(&monitor, means, dist) {
                            let r = records.last().expect("record");
                            events.push(SimEvent::Deadlock { step: k, t: r.t, x: r.x.clone() });
                            termination = Termination::Deadlock;
                            break;
                        }
                        if dist < monitor.goal_radius && means.0 < monitor.velocity_threshold {
                            termination = Termination::Converged;
                            break;
                        }
                    }
                }
                Err(e) => {
                    events.push(SimEvent::Error { step: k, message: e.to_string() });
                    termination = Termination::Error;
                    break;
                }
            }
        }
    }

    let final_state = stepper.x.clone();
    let final_real = stepper.real_barriers(&final_state);
    let min_real = records
        .iter()
        .flat_map(|r| r.real_barriers.iter())
        .chain(final_real.iter())
        .fold(f64::INFINITY, |a, &b| a.min(b));
    let mut min_ball = records.iter().flat_map(|r| r.ball_barriers.iter()).fold(f64::INFINITY, |a, &b| a.min(b));
    if let (Some(s), Controller::BallWorld { .. }) = (&stepper.state, &prep.controller) {
        if let Ok(bs) = labelled_barriers(&s.world, &s.q) {
            min_ball = bs.iter().fold(min_ball, |a, &(_, b)| a.min(b));
        }
    }
    let final_time = records.len() as f64 * scn.dt;
    let p = prep.plant.output(&final_state);
    let final_output = [p.x, p.y];
    let summary = Summary {
        goal_distance: goal_distance(&final_output, &scn.goal),
        final_state,
        final_output,
        final_time,
        min_real_barrier: min_real,
        min_ball_barrier: min_ball,
        outcome: EquilibriumClass::None,
        termination,
        qp_solves: stepper.qp_solves,
        wall_time: start.elapsed().as_secs_f64(),
    };
    let mut log = TrajectoryLog { index, initial: x0, records, events, summary };
    log.summary.outcome = if termination == Termination::Error {
        EquilibriumClass::None
    } else {
        classify_equilibrium(&log, &monitor, scn.goal)
    };
    log
}

/// Runs every initial state (in parallel) and returns the logs in
/// initial-state order.
pub fn run_scenario(scn: &Scenario) -> Result<Vec<TrajectoryLog>, SimError> {
    let prep = scn.prepare()?;
    Ok((0..scn.initial_states.len()).into_par_iter().map(|i| run_one(&prep, scn, i)).collect())
}

/// Runs a single initial state of a scenario.
pub fn run_trajectory(scn: &Scenario, index: usize) -> Result<TrajectoryLog, SimError> {
    if index >= scn.initial_states.len() {
        return invalid(format!("no initial state {index}"));
    }
    let prep = scn.prepare()?;
    Ok(run_one(&prep, scn, index))
}

/// Names accepted by [`Scenario::builtin`].
pub const BUILTIN_NAMES: [&str; 5] = ["fig1-left", "fig1-right", "fig3-left", "fig3-right", "unicycle-nav"];

fn decoupled_system() -> SystemSpec {
    SystemSpec::Linear { drift: vec![vec![-6.0, 0.0], vec![0.0, -1.0]], input: None, nominal_gain: 0.0 }
}

fn two_lobe_world(centers: &[[f64; 2]]) -> WorldSpec {
    WorldSpec {
        workspace: WorkspaceSpec { center: [0.0, 0.0], shape: WorkspaceShape::Disk { radius: 10.0 } },
        obstacles: centers
            .iter()
            .map(|&c| ObstacleSpec { center: c, shape: StarShape::TwoLobe { a: 1.0, b: 1.1 } })
            .collect(),
    }
}

/// Shared by the ball-world built-ins. With α = 1 the balls start fleeing
/// while the mapped state is still far off and get pushed ahead of it; α in
/// roughly [8, 12] lets them sidestep late instead.
fn ball_world_controller() -> ControllerSpec {
    ControllerSpec::BallWorld {
        lambda: 100.0,
        kappa: 1.0,
        kp: 1.0,
        alpha: 10.0,
        ball_radii: None,
        boundary_radius: None,
    }
}

fn builtin(name: &str) -> Option<Scenario> {
    let base = |name: &str, controller, world, starts: &[&[f64]]| Scenario {
        name: name.into(),
        system: decoupled_system(),
        controller,
        world,
        goal: [0.0, 0.0],
        initial_states: starts.iter().map(|s| s.to_vec()).collect(),
        dt: DEFAULT_DT,
        horizon: DEFAULT_HORIZON,
        monitor: DeadlockMonitor::default(),
    };
    Some(match name {
        "fig1-left" => base(
            name,
            ControllerSpec::StandardCbf {
                barrier: BarrierSpec::Funnel {
                    center: vec![0.0, 3.0],
                    matrix: vec![vec![10.0, 0.0], vec![0.0, -1.0]],
                },
                alpha: 1.0,
            },
            None,
            &[&[-1.5, 6.0], &[1.5, 6.0]],
        ),
        "fig1-right" => base(
            name,
            ControllerSpec::StandardCbf { barrier: BarrierSpec::Circle { center: vec![0.0, 3.0], radius: 1.0 }, alpha: 1.0 },
            None,
            &[&[0.0, 6.0], &[-1.0, 6.0]],
        ),
        "fig3-left" => base(
            name,
            ball_world_controller(),
            Some(two_lobe_world(&[[0.0, 3.0]])),
            &[&[0.0, 4.0], &[-0.01, 4.0], &[0.01, 4.0], &[-1.0, 5.0], &[1.0, 5.0]],
        ),
        "fig3-right" => base(
            name,
            ball_world_controller(),
            Some(two_lobe_world(&[[0.0, 3.0], [0.0, -3.0]])),
            &[&[-2.0, 5.0], &[-1.0, 5.5], &[-0.01, 6.0], &[0.01, 6.0], &[1.0, 5.5], &[2.0, 5.0], &[1.5, -5.5]],
        ),
        "unicycle-nav" => Scenario {
            name: name.into(),
            system: SystemSpec::Unicycle { lookahead: 0.1, nominal_gain: 1.0 },
            controller: ball_world_controller(),
            world: Some(WorldSpec {
                workspace: WorkspaceSpec { center: [0.0, 0.0], shape: WorkspaceShape::Ellipse { semi_axes: [7.0, 5.0] } },
                obstacles: vec![
                    ObstacleSpec { center: [2.5, 1.0], shape: StarShape::TwoLobe { a: 0.6, b: 0.7 } },
                    ObstacleSpec { center: [-2.5, -1.0], shape: StarShape::Circle { radius: 0.7 } },
                ],
            }),
            goal: [0.0, 0.0],
            initial_states: vec![vec![5.0, 2.0, std::f64::consts::PI], vec![-5.0, -2.0, 0.0], vec![4.0, -3.0, 2.0]],
            dt: DEFAULT_DT,
            horizon: DEFAULT_HORIZON,
            monitor: DeadlockMonitor::default(),
        },
        _ => return None,
    })
}
