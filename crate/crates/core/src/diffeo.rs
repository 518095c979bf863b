//! Star-world to ball-world diffeomorphism
//!
//! ```text
//! F(x) = Σ σ_i(x)(ρ_i f_i(x) + q_i) + σ_g(x)(x − x_g + q_g)
//! σ_i  = γ_g β̄_i / (γ_g β̄_i + λ β_i),  γ_g = ‖x − x_g‖²,  β̄_i = Π_{j≠i} β_j
//! ```
//!
//! Index 0 is the workspace boundary, whose ray map is `(x − x_0)/r_0(θ)`.
//! Each level set is divided by its value at the real goal before entering
//! the switches, so every `β_i(x_g) = 1`. Without that the raw level sets
//! (quartic for the two-lobe obstacles, quadratic in the workspace radius)
//! differ by orders of magnitude and `λ` loses its meaning: `F` folds over and
//! stops being injective.

use nalgebra::{Matrix2, Vector2};
use thiserror::Error;

use crate::geometry::{planar, BallWorld, GeometryError, StarWorld};
use crate::{Matrix, Vector};

/// Condition number above which a Jacobian is reported as near-singular.
pub const SINGULAR_CONDITION: f64 = 1e12;
pub const INVERSE_TOLERANCE: f64 = 1e-10;
pub const INVERSE_MAX_ITERATIONS: usize = 100;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffeoError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("invalid diffeomorphism parameters: {0}")]
    InvalidParams(String),
    #[error("point is outside the safe set: level set {index} = {value}")]
    OutsideSafeSet { index: usize, value: f64 },
    #[error("real world has {real} obstacles but the ball world has {ball}")]
    WorldMismatch { real: usize, ball: usize },
    #[error("inverse did not converge: best iterate ({}, {}) with residual {residual}", best[0], best[1])]
    NoConvergence { best: Vector, residual: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiffeoParams {
    pub lambda: f64,
    pub real_goal: Vector,
    pub ball_goal: Vector,
}

impl Default for DiffeoParams {
    fn default() -> Self {
        Self { lambda: 100.0, real_goal: Vector::zeros(2), ball_goal: Vector::zeros(2) }
    }
}

/// Switch values at one point. Index 0 is the workspace boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct Switches {
    pub sigma: Vec<f64>,
    pub sigma_goal: f64,
    pub goal_distance: f64,
    pub omitted_products: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Jacobian {
    pub matrix: Matrix2<f64>,
    pub condition: f64,
}

impl Jacobian {
    pub fn is_near_singular(&self) -> bool {
        !(self.condition <= SINGULAR_CONDITION)
    }

    pub fn solve(&self, rhs: Vector2<f64>) -> Option<Vector2<f64>> {
        self.matrix.lu().solve(&rhs)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiffeoEvaluation {
    pub mapped: Vector,
    pub switches: Switches,
    pub jacobian: Jacobian,
}

#[derive(Debug, Clone)]
pub struct Diffeo {
    params: DiffeoParams,
    world: StarWorld,
    x_g: Vector2<f64>,
    q_g: Vector2<f64>,
    scale: Vec<f64>,
}

fn condition_number(m: &Matrix2<f64>) -> f64 {
    let sv = m.singular_values();
    let (hi, lo) = (sv.max(), sv.min());
    if lo == 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}

impl Diffeo {
    pub fn new(params: DiffeoParams, world: StarWorld) -> Result<Self, DiffeoError> {
        if !(params.lambda > 0.0 && params.lambda.is_finite()) {
            return Err(DiffeoError::InvalidParams(format!("lambda must be positive, got {}", params.lambda)));
        }
        let x_g = planar(&params.real_goal)?;
        let q_g = planar(&params.ball_goal)?;
        let at_goal = world.betas2(x_g);
        if let Some((index, &value)) = at_goal.iter().enumerate().find(|(_, &b)| !(b > 0.0)) {
            return Err(DiffeoError::InvalidParams(format!(
                "real goal must be strictly inside the safe set (level set {index} = {value})"
            )));
        }
        let scale = at_goal.iter().map(|b| 1.0 / b).collect();
        Ok(Self { params, world, x_g, q_g, scale })
    }

    pub fn params(&self) -> &DiffeoParams {
        &self.params
    }

    pub fn world(&self) -> &StarWorld {
        &self.world
    }

    pub fn num_obstacles(&self) -> usize {
        self.world.obstacles.len()
    }

    /// Checks that a ball world can be paired with this map: same obstacle
    /// count, planar, and the ball goal strictly inside its safe set.
    pub fn check_ball_world(&self, balls: &BallWorld) -> Result<(), DiffeoError> {
        self.check_counts(balls)?;
        let barriers = balls.state_barriers(&self.params.ball_goal)?;
        if let Some((index, &value)) = barriers.iter().enumerate().find(|(_, &b)| !(b > 0.0)) {
            return Err(DiffeoError::InvalidParams(format!(
                "ball goal must be strictly inside the ball-world safe set (barrier {index} = {value})"
            )));
        }
        Ok(())
    }

    fn check_counts(&self, balls: &BallWorld) -> Result<(), DiffeoError> {
        if balls.obstacles.len() != self.world.obstacles.len() {
            return Err(DiffeoError::WorldMismatch { real: self.world.obstacles.len(), ball: balls.obstacles.len() });
        }
        if balls.dim() != 2 {
            return Err(GeometryError::DimensionMismatch { expected: 2, got: balls.dim() }.into());
        }
        Ok(())
    }

    /// Goal-normalized level sets `β_0, β_1, …`.
    pub fn levels2(&self, x: Vector2<f64>) -> Vec<f64> {
        let mut b = self.world.betas2(x);
        for (v, s) in b.iter_mut().zip(&self.scale) {
            *v *= s;
        }
        b
    }

    fn check_safe(&self, levels: &[f64]) -> Result<(), DiffeoError> {
        match levels.iter().enumerate().find(|(_, &b)| !(b >= 0.0)) {
            Some((index, &value)) => Err(DiffeoError::OutsideSafeSet { index, value: value / self.scale[index] }),
            None => Ok(()),
        }
    }

    fn switches_from(&self, x: Vector2<f64>, levels: &[f64]) -> Switches {
        let goal_distance = (x - self.x_g).norm_squared();
        let k = levels.len();
        let mut sigma = Vec::with_capacity(k);
        let mut omitted = Vec::with_capacity(k);
        for i in 0..k {
            let bar: f64 = (0..k).filter(|&j| j != i).map(|j| levels[j]).product();
            let num = goal_distance * bar;
            let den = num + self.params.lambda * levels[i];
            sigma.push(if den == 0.0 { 0.0 } else { num / den });
            omitted.push(bar);
        }
        let sigma_goal = 1.0 - sigma.iter().sum::<f64>();
        Switches { sigma, sigma_goal, goal_distance, omitted_products: omitted }
    }

    pub fn switches2(&self, x: Vector2<f64>) -> Result<Switches, DiffeoError> {
        let levels = self.levels2(x);
        self.check_safe(&levels)?;
        Ok(self.switches_from(x, &levels))
    }

    pub fn eval_switches(&self, x: &Vector) -> Result<Switches, DiffeoError> {
        self.switches2(planar(x)?)
    }

    /// `F(x)` without the safe-set check; only meaningful on (a small
    /// neighbourhood of) the safe set, away from obstacle centers.
    fn map_unchecked(&self, balls: &BallWorld, x: Vector2<f64>, levels: &[f64]) -> Vector2<f64> {
        let s = self.switches_from(x, levels);
        let mut out = (x - self.x_g + self.q_g) * s.sigma_goal;
        let q0 = Vector2::new(balls.boundary_center[0], balls.boundary_center[1]);
        out += (self.world.workspace.ray_map2(x) * balls.boundary_radius + q0) * s.sigma[0];
        for (i, (obs, ball)) in self.world.obstacles.iter().zip(&balls.obstacles).enumerate() {
            let sig = s.sigma[i + 1];
            if sig == 0.0 {
                continue;
            }
            // the ray map is only singular at the center, which is never in the safe set
            let f = obs.ray_map2(x).unwrap_or_else(|_| Vector2::zeros());
            let q = Vector2::new(ball.center[0], ball.center[1]);
            out += (f * ball.radius + q) * sig;
        }
        out
    }

    fn map_raw(&self, balls: &BallWorld, x: Vector2<f64>) -> Vector2<f64> {
        let levels = self.levels2(x);
        self.map_unchecked(balls, x, &levels)
    }

    pub fn eval2(&self, balls: &BallWorld, x: Vector2<f64>) -> Result<Vector2<f64>, DiffeoError> {
        self.check_counts(balls)?;
        let levels = self.levels2(x);
        self.check_safe(&levels)?;
        Ok(self.map_unchecked(balls, x, &levels))
    }

    pub fn eval(&self, balls: &BallWorld, x: &Vector) -> Result<Vector, DiffeoError> {
        let q = self.eval2(balls, planar(x)?)?;
        Ok(Vector::from_column_slice(q.as_slice()))
    }

    /// Central-difference Jacobian with an explicit step.
    pub fn jacobian_with_step(
        &self,
        balls: &BallWorld,
        x: Vector2<f64>,
        step: f64,
    ) -> Result<Jacobian, DiffeoError> {
        self.check_counts(balls)?;
        self.check_safe(&self.levels2(x))?;
        let mut m = Matrix2::zeros();
        for k in 0..2 {
            let mut e = Vector2::zeros();
            e[k] = step;
            let safe = |y: Vector2<f64>| self.levels2(y).iter().all(|&b| b > 0.0);
            // One-sided next to a boundary so the stencil never leaves the safe set.
            let col = match (safe(x + e), safe(x - e)) {
                (false, true) => (self.map_raw(balls, x) - self.map_raw(balls, x - e)) / step,
                (true, false) => (self.map_raw(balls, x + e) - self.map_raw(balls, x)) / step,
                _ => (self.map_raw(balls, x + e) - self.map_raw(balls, x - e)) / (2.0 * step),
            };
            m.set_column(k, &col);
        }
        Ok(Jacobian { condition: condition_number(&m), matrix: m })
    }

    /// `∂F/∂x` by central differences with step `1e-6·(1 + ‖x‖)`.
    pub fn jacobian2(&self, balls: &BallWorld, x: Vector2<f64>) -> Result<Jacobian, DiffeoError> {
        self.jacobian_with_step(balls, x, 1e-6 * (1.0 + x.norm()))
    }

    pub fn jacobian(&self, balls: &BallWorld, x: &Vector) -> Result<Jacobian, DiffeoError> {
        self.jacobian2(balls, planar(x)?)
    }

    pub fn evaluate(&self, balls: &BallWorld, x: &Vector) -> Result<DiffeoEvaluation, DiffeoError> {
        let p = planar(x)?;
        let mapped = self.eval(balls, x)?;
        Ok(DiffeoEvaluation { mapped, switches: self.switches2(p)?, jacobian: self.jacobian2(balls, p)? })
    }

    /// Solves `F(x) = q` by damped Newton from `guess`; iterates are kept in
    /// the safe set by backtracking. Newton is local, so when it stalls from
    /// `guess` a second start at `x_g + (q − q_g)` is tried.
    pub fn inverse2(
        &self,
        balls: &BallWorld,
        q: Vector2<f64>,
        guess: Vector2<f64>,
    ) -> Result<Vector2<f64>, DiffeoError> {
        self.check_counts(balls)?;
        let first = self.newton(balls, q, guess);
        let Err(DiffeoError::NoConvergence { .. }) = &first else { return first };
        let fallback = self.x_g + (q - self.q_g);
        if (fallback - guess).norm() > 1e-12 && self.levels2(fallback).iter().all(|&b| b > 0.0) {
            if let Ok(x) = self.newton(balls, q, fallback) {
                return Ok(x);
            }
        }
        first
    }

    fn newton(&self, balls: &BallWorld, q: Vector2<f64>, guess: Vector2<f64>) -> Result<Vector2<f64>, DiffeoError> {
        let mut x = guess;
        let levels = self.levels2(x);
        self.check_safe(&levels)?;
        let mut residual = self.map_unchecked(balls, x, &levels) - q;
        let mut norm = residual.norm();
        for _ in 0..INVERSE_MAX_ITERATIONS {
            if norm <= INVERSE_TOLERANCE {
                return Ok(x);
            }
            let jac = self.jacobian2(balls, x)?;
            let Some(dx) = jac.solve(-residual) else { break };
            let mut t = 1.0;
            let mut accepted = false;
            while t > 1e-10 {
                let trial = x + dx * t;
                let lv = self.levels2(trial);
                if lv.iter().all(|&b| b > 0.0) {
                    let r = self.map_unchecked(balls, trial, &lv) - q;
                    let n = r.norm();
                    if n < norm {
                        x = trial;
                        residual = r;
                        norm = n;
                        accepted = true;
                        break;
                    }
                }
                t *= 0.5;
            }
            if !accepted {
                break;
            }
        }
        if norm <= INVERSE_TOLERANCE {
            return Ok(x);
        }
        Err(DiffeoError::NoConvergence { best: Vector::from_column_slice(x.as_slice()), residual: norm })
    }

    pub fn inverse(&self, balls: &BallWorld, q: &Vector, guess: &Vector) -> Result<Vector, DiffeoError> {
        let x = self.inverse2(balls, planar(q)?, planar(guess)?)?;
        Ok(Vector::from_column_slice(x.as_slice()))
    }
}

/// `Jacobian` as a dynamic matrix.
pub fn to_matrix(j: &Matrix2<f64>) -> Matrix {
    Matrix::from_column_slice(2, 2, j.as_slice())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{BallObstacle, StarObstacle, StarShape, Workspace, WorkspaceShape};

    fn v(xs: &[f64]) -> Vector {
        Vector::from_column_slice(xs)
    }

    fn fig3(lambda: f64) -> (Diffeo, BallWorld) {
        let ws = Workspace::new(&v(&[0.0, 0.0]), WorkspaceShape::Disk { radius: 10.0 }).unwrap();
        let shape = StarShape::TwoLobe { a: 1.0, b: 1.1 };
        let obstacles = vec![
            StarObstacle::new(&v(&[0.0, 3.0]), shape.clone()).unwrap(),
            StarObstacle::new(&v(&[0.0, -3.0]), shape).unwrap(),
        ];
        let params = DiffeoParams { lambda, ..DiffeoParams::default() };
        let diffeo = Diffeo::new(params, StarWorld::new(ws, obstacles)).unwrap();
        let balls = BallWorld::new(
            v(&[0.0, 0.0]),
            10.0,
            vec![BallObstacle::new(v(&[0.0, 3.0]), 0.4).unwrap(), BallObstacle::new(v(&[0.0, -3.0]), 0.4).unwrap()],
        )
        .unwrap();
        (diffeo, balls)
    }

    #[test]
    fn goal_maps_to_goal() {
        let (d, balls) = fig3(100.0);
        let s = d.eval_switches(&v(&[0.0, 0.0])).unwrap();
        assert_eq!(s.goal_distance, 0.0);
        assert!(s.sigma.iter().all(|&x| x == 0.0));
        assert_eq!(s.sigma_goal, 1.0);
        assert_eq!(d.eval(&balls, &v(&[0.0, 0.0])).unwrap(), v(&[0.0, 0.0]));
    }

    #[test]
    fn switches_sum_to_one() {
        let (d, _) = fig3(100.0);
        let s = d.eval_switches(&v(&[2.0, 0.0])).unwrap();
        let total: f64 = s.sigma.iter().sum::<f64>() + s.sigma_goal;
        assert!((total - 1.0).abs() <= 1e-14);
        assert!(s.sigma.iter().chain([&s.sigma_goal]).all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn boundary_point_selects_its_ball() {
        let (d, balls) = fig3(100.0);
        let obs = &d.world().obstacles[0];
        let x = obs.boundary_point(0.7);
        let s = d.switches2(x).unwrap();
        assert!((s.sigma[1] - 1.0).abs() < 1e-9);
        let q = d.eval2(&balls, x).unwrap();
        assert!(((q - Vector2::new(0.0, 3.0)).norm() - 0.4).abs() < 1e-6);
    }

    #[test]
    fn inside_obstacle_is_a_domain_error() {
        let (d, balls) = fig3(100.0);
        assert!(matches!(d.eval(&balls, &v(&[0.0, 3.0])), Err(DiffeoError::OutsideSafeSet { index: 1, .. })));
        assert!(matches!(d.eval(&balls, &v(&[11.0, 0.0])), Err(DiffeoError::OutsideSafeSet { index: 0, .. })));
    }

    #[test]
    fn jacobian_is_identity_at_goal() {
        let (d, balls) = fig3(100.0);
        let j = d.jacobian(&balls, &v(&[0.0, 0.0])).unwrap();
        assert!((j.matrix - Matrix2::identity()).amax() < 1e-8);
        assert!(!j.is_near_singular());
    }

    #[test]
    fn inverse_round_trip() {
        let (d, balls) = fig3(100.0);
        for x in [Vector2::new(2.0, 0.5), Vector2::new(-1.0, 5.0), Vector2::new(0.3, 3.6), Vector2::new(7.0, -6.0)] {
            let q = d.eval2(&balls, x).unwrap();
            let back = d.inverse2(&balls, q, x + Vector2::new(0.05, -0.03)).unwrap();
            assert!((back - x).norm() < 1e-8, "{x} -> {back}");
        }
    }

    #[test]
    fn ball_goal_inverts_from_any_start() {
        let (d, balls) = fig3(100.0);
        for guess in [Vector2::new(5.0, 5.0), Vector2::new(-2.0, 0.1), Vector2::new(0.3, 4.0)] {
            let x = d.inverse2(&balls, Vector2::zeros(), guess).unwrap();
            assert!(x.norm() < 1e-10);
        }
    }

    #[test]
    fn rejects_bad_params() {
        let (d, _) = fig3(100.0);
        let world = d.world().clone();
        let bad = DiffeoParams { lambda: 0.0, ..DiffeoParams::default() };
        assert!(Diffeo::new(bad, world.clone()).is_err());
        let bad = DiffeoParams { real_goal: v(&[0.0, 3.0]), ..DiffeoParams::default() };
        assert!(Diffeo::new(bad, world).is_err());
    }
}
