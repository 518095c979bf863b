//! Barrier functions, the standard CBF-QP safety filter and the affine
//! constraint rows that keep the ball-world configuration safe.

use std::sync::Arc;

use thiserror::Error;

use crate::geometry::{BallObstacle, BallWorld, GeometryError, StarObstacle};
use crate::qp::{solve_qp, QpError, QpStatus, QuadraticProgram};
use crate::{Matrix, Vector};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CbfError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Qp(#[from] QpError),
    #[error("safety filter infeasible: h = {h}, L_f h = {lf_h}, ‖L_g h‖ = {lg_h_norm}")]
    FilterInfeasible { h: f64, lf_h: f64, lg_h_norm: f64 },
    #[error("invalid configuration: {0}")]
    Configuration(String),
}

/// `ẋ = f(x) + g(x)u`.
pub trait ControlAffineSystem: Send + Sync {
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn drift(&self, x: &Vector) -> Vector;
    fn input_map(&self, x: &Vector) -> Matrix;

    fn dynamics(&self, x: &Vector, u: &Vector) -> Vector {
        self.drift(x) + self.input_map(x) * u
    }
}

/// `ẋ = Ax + Bu`.
#[derive(Debug, Clone)]
pub struct LinearSystem {
    pub a: Matrix,
    pub b: Matrix,
}

impl LinearSystem {
    pub fn new(a: Matrix, b: Matrix) -> Result<Self, CbfError> {
        if !a.is_square() || b.nrows() != a.nrows() {
            return Err(CbfError::Configuration(format!(
                "linear system shapes do not match: A is {}x{}, B is {}x{}",
                a.nrows(),
                a.ncols(),
                b.nrows(),
                b.ncols()
            )));
        }
        Ok(Self { a, b })
    }

    /// Fully actuated `ẋ = Ax + u`.
    pub fn fully_actuated(a: Matrix) -> Result<Self, CbfError> {
        let n = a.nrows();
        Self::new(a, Matrix::identity(n, n))
    }
}

impl ControlAffineSystem for LinearSystem {
    fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    fn drift(&self, x: &Vector) -> Vector {
        &self.a * x
    }

    fn input_map(&self, _x: &Vector) -> Matrix {
        self.b.clone()
    }
}

/// Central-difference gradient with step `1e-6·(1 + ‖x‖)`.
pub fn fd_gradient<F: Fn(&Vector) -> f64>(f: F, x: &Vector) -> Vector {
    let h = 1e-6 * (1.0 + x.norm());
    let mut g = Vector::zeros(x.len());
    let mut probe = x.clone();
    for k in 0..x.len() {
        probe[k] = x[k] + h;
        let up = f(&probe);
        probe[k] = x[k] - h;
        let down = f(&probe);
        probe[k] = x[k];
        g[k] = (up - down) / (2.0 * h);
    }
    g
}

/// Continuously differentiable `h` whose zero-superlevel set is the safe set.
pub trait BarrierFunction: Send + Sync {
    fn value(&self, x: &Vector) -> f64;

    fn gradient(&self, x: &Vector) -> Vector {
        fd_gradient(|y| self.value(y), x)
    }
}

/// `h(x) = ‖x − c‖² − r²`.
#[derive(Debug, Clone)]
pub struct CircleBarrier {
    pub center: Vector,
    pub radius: f64,
}

impl BarrierFunction for CircleBarrier {
    fn value(&self, x: &Vector) -> f64 {
        (x - &self.center).norm_squared() - self.radius * self.radius
    }

    fn gradient(&self, x: &Vector) -> Vector {
        (x - &self.center) * 2.0
    }
}

/// `h(x) = ‖x − c‖⁴ − (x − c)ᵀ M (x − c)`: a funnel-shaped pair of unsafe
/// lobes pinched at `c` when `M` is indefinite.
#[derive(Debug, Clone)]
pub struct FunnelBarrier {
    pub center: Vector,
    pub shape: Matrix,
}

impl BarrierFunction for FunnelBarrier {
    fn value(&self, x: &Vector) -> f64 {
        let d = x - &self.center;
        d.norm_squared().powi(2) - d.dot(&(&self.shape * &d))
    }

    fn gradient(&self, x: &Vector) -> Vector {
        let d = x - &self.center;
        let sym = &self.shape + self.shape.transpose();
        &d * (4.0 * d.norm_squared()) - sym * d
    }
}

/// A star obstacle's level set used directly as a barrier.
#[derive(Debug, Clone)]
pub struct StarBarrier(pub StarObstacle);

impl BarrierFunction for StarBarrier {
    fn value(&self, x: &Vector) -> f64 {
        self.0.beta(x).unwrap_or(f64::NAN)
    }
}

impl<B: BarrierFunction + ?Sized> BarrierFunction for Arc<B> {
    fn value(&self, x: &Vector) -> f64 {
        (**self).value(x)
    }

    fn gradient(&self, x: &Vector) -> Vector {
        (**self).gradient(x)
    }
}

/// Linear extended class-K∞ function `γ(s) = αs`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassKappa {
    alpha: f64,
}

impl ClassKappa {
    pub fn new(alpha: f64) -> Result<Self, CbfError> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(CbfError::Configuration(format!("class-K gain must be positive, got {alpha}")));
        }
        Ok(Self { alpha })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn apply(&self, s: f64) -> f64 {
        self.alpha * s
    }
}

impl Default for ClassKappa {
    fn default() -> Self {
        Self { alpha: 1.0 }
    }
}

/// Affine constraint `aᵀu ≤ b`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintRow {
    pub coefficients: Vector,
    pub bound: f64,
}

impl ConstraintRow {
    /// `aᵀu − b`; positive means violated.
    pub fn violation(&self, u: &Vector) -> f64 {
        self.coefficients.dot(u) - self.bound
    }
}

/// Constraint value `L_f h + L_g h·u + γ(h)` of the CBF condition at `x`.
pub fn cbf_condition(
    sys: &dyn ControlAffineSystem,
    h: &dyn BarrierFunction,
    gamma: ClassKappa,
    x: &Vector,
    u: &Vector,
) -> f64 {
    let grad = h.gradient(x);
    grad.dot(&sys.dynamics(x, u)) + gamma.apply(h.value(x))
}

/// Standard CBF-QP: the input closest to `u_hat` satisfying
/// `L_f h + L_g h·u + γ(h) ≥ 0`.
pub fn standard_filter(
    sys: &dyn ControlAffineSystem,
    h: &dyn BarrierFunction,
    gamma: ClassKappa,
    x: &Vector,
    u_hat: &Vector,
) -> Result<Vector, CbfError> {
    let m = sys.input_dim();
    if u_hat.len() != m {
        return Err(GeometryError::DimensionMismatch { expected: m, got: u_hat.len() }.into());
    }
    if x.len() != sys.state_dim() {
        return Err(GeometryError::DimensionMismatch { expected: sys.state_dim(), got: x.len() }.into());
    }
    let grad = h.gradient(x);
    let hx = h.value(x);
    let lf_h = grad.dot(&sys.drift(x));
    let lg_h = sys.input_map(x).transpose() * &grad;

    let row = Matrix::from_row_slice(1, m, (-&lg_h).as_slice());
    let bound = Vector::from_element(1, lf_h + gamma.apply(hx));
    let qp = QuadraticProgram::new(Matrix::identity(m, m) * 2.0, u_hat * -2.0, row, bound)?;
    let sol = solve_qp(&qp)?;
    match sol.status {
        QpStatus::Optimal => Ok(sol.minimizer),
        QpStatus::Infeasible => Err(CbfError::FilterInfeasible { h: hx, lf_h, lg_h_norm: lg_h.norm() }),
    }
}

fn same_dim(a: &Vector, b: &Vector) -> Result<(), GeometryError> {
    if a.len() != b.len() {
        return Err(GeometryError::DimensionMismatch { expected: a.len(), got: b.len() });
    }
    Ok(())
}

/// Keeps `q` outside ball `i`, over `(u_{q_i}, u_{ρ_i})`.
pub fn build_state_obstacle_row(
    ball: &BallObstacle,
    q: &Vector,
    qdot: &Vector,
    gamma: ClassKappa,
) -> Result<ConstraintRow, CbfError> {
    same_dim(&ball.center, q)?;
    same_dim(q, qdot)?;
    let n = q.len();
    let diff = &ball.center - q;
    let h = diff.norm_squared() - ball.radius * ball.radius;
    let mut a = Vector::zeros(n + 1);
    a.rows_mut(0, n).copy_from(&(&diff * -2.0));
    a[n] = 2.0 * ball.radius;
    Ok(ConstraintRow { coefficients: a, bound: -2.0 * diff.dot(qdot) + gamma.apply(h) })
}

/// Keeps `q` inside the boundary ball, over `u_{ρ_0}`.
pub fn build_state_boundary_row(
    world: &BallWorld,
    q: &Vector,
    qdot: &Vector,
    gamma: ClassKappa,
) -> Result<ConstraintRow, CbfError> {
    same_dim(&world.boundary_center, q)?;
    same_dim(q, qdot)?;
    let diff = &world.boundary_center - q;
    let h = world.boundary_radius * world.boundary_radius - diff.norm_squared();
    Ok(ConstraintRow {
        coefficients: Vector::from_element(1, -2.0 * world.boundary_radius),
        bound: 2.0 * diff.dot(qdot) + gamma.apply(h),
    })
}

/// Keeps balls `i` and `j` apart, over `(u_{q_i}, u_{q_j}, u_{ρ_i}, u_{ρ_j})`.
pub fn build_pairwise_row(ball_i: &BallObstacle, ball_j: &BallObstacle, gamma: ClassKappa) -> Result<ConstraintRow, CbfError> {
    same_dim(&ball_i.center, &ball_j.center)?;
    let n = ball_i.dim();
    let diff = &ball_i.center - &ball_j.center;
    let sum = ball_i.radius + ball_j.radius;
    let h = diff.norm_squared() - sum * sum;
    let mut a = Vector::zeros(2 * n + 2);
    a.rows_mut(0, n).copy_from(&(&diff * -2.0));
    a.rows_mut(n, n).copy_from(&(&diff * 2.0));
    a[2 * n] = 2.0 * sum;
    a[2 * n + 1] = 2.0 * sum;
    Ok(ConstraintRow { coefficients: a, bound: gamma.apply(h) })
}

/// Keeps ball `i` inside the boundary ball, over `(u_{q_i}, u_{ρ_i}, u_{ρ_0})`.
pub fn build_containment_row(ball: &BallObstacle, world: &BallWorld, gamma: ClassKappa) -> Result<ConstraintRow, CbfError> {
    same_dim(&ball.center, &world.boundary_center)?;
    let gap = world.boundary_radius - ball.radius;
    if gap <= 0.0 {
        return Err(CbfError::Configuration(format!(
            "obstacle radius {} is not smaller than the boundary radius {}",
            ball.radius, world.boundary_radius
        )));
    }
    let n = ball.dim();
    let diff = &ball.center - &world.boundary_center;
    let h = gap * gap - diff.norm_squared();
    let mut a = Vector::zeros(n + 2);
    a.rows_mut(0, n).copy_from(&(&diff * 2.0));
    a[n] = 2.0 * gap;
    a[n + 1] = -2.0 * gap;
    Ok(ConstraintRow { coefficients: a, bound: gamma.apply(h) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::matrix2;

    fn v(xs: &[f64]) -> Vector {
        Vector::from_column_slice(xs)
    }

    fn decoupled_system() -> LinearSystem {
        LinearSystem::fully_actuated(matrix2([[-6.0, 0.0], [0.0, -1.0]])).unwrap()
    }

    fn ball(c: &[f64], r: f64) -> BallObstacle {
        BallObstacle::new(v(c), r).unwrap()
    }

    #[test]
    fn state_obstacle_row_examples() {
        let gamma = ClassKappa::default();
        let row = build_state_obstacle_row(&ball(&[2.0, 0.0], 1.0), &v(&[0.0, 0.0]), &v(&[1.0, 0.0]), gamma).unwrap();
        assert_eq!(row.coefficients, v(&[-4.0, 0.0, 2.0]));
        assert_eq!(row.bound, -1.0);

        let row = build_state_obstacle_row(&ball(&[3.0, 0.0], 1.0), &v(&[0.0, 0.0]), &v(&[0.0, 0.0]), gamma).unwrap();
        assert_eq!(row.bound, 8.0);
        assert!(row.violation(&Vector::zeros(3)) <= 0.0);

        // q at the ball center forces the ball to shrink
        let row = build_state_obstacle_row(&ball(&[1.0, 1.0], 0.5), &v(&[1.0, 1.0]), &v(&[0.3, 0.1]), gamma).unwrap();
        assert_eq!(row.coefficients, v(&[0.0, 0.0, 1.0]));
        assert_eq!(row.bound, -0.25);
    }

    #[test]
    fn state_obstacle_boundary_row_examples() {
        let gamma = ClassKappa::default();
        let world = BallWorld::new(v(&[0.0, 0.0]), 5.0, vec![]).unwrap();
        let row = build_state_boundary_row(&world, &v(&[3.0, 0.0]), &v(&[1.0, 0.0]), gamma).unwrap();
        assert_eq!(row.coefficients, v(&[-10.0]));
        assert_eq!(row.bound, 10.0);

        let row = build_state_boundary_row(&world, &v(&[0.0, 0.0]), &v(&[1.0, 2.0]), gamma).unwrap();
        assert_eq!(row.bound, 25.0);

        // near the rim and moving outward: the world has to grow
        let row = build_state_boundary_row(&world, &v(&[4.99, 0.0]), &v(&[1.0, 0.0]), gamma).unwrap();
        assert!(row.bound < 0.0);
        assert!(row.violation(&v(&[0.0])) > 0.0);
        assert!(row.violation(&v(&[1.0])) <= 0.0);
    }

    #[test]
    fn pairwise_row_examples() {
        let gamma = ClassKappa::default();
        let row = build_pairwise_row(&ball(&[1.0, 0.0], 0.5), &ball(&[-1.0, 0.0], 0.5), gamma).unwrap();
        assert_eq!(row.coefficients, v(&[-4.0, 0.0, 4.0, 0.0, 2.0, 2.0]));
        assert_eq!(row.bound, 3.0);
        assert!(row.violation(&Vector::zeros(6)) <= 0.0);

        let row = build_pairwise_row(&ball(&[1.0, 0.0], 1.0), &ball(&[-1.0, 0.0], 1.0), gamma).unwrap();
        assert_eq!(row.bound, 0.0);
        assert!(row.violation(&v(&[0.0, 0.0, 0.0, 0.0, -0.1, -0.2])) <= 0.0);
    }

    #[test]
    fn containment_row_examples() {
        let gamma = ClassKappa::default();
        let world = BallWorld::new(v(&[0.0, 0.0]), 5.0, vec![]).unwrap();
        let row = build_containment_row(&ball(&[3.0, 0.0], 1.0), &world, gamma).unwrap();
        assert_eq!(row.coefficients, v(&[6.0, 0.0, 8.0, -8.0]));
        assert_eq!(row.bound, 7.0);

        let row = build_containment_row(&ball(&[0.0, 0.0], 2.0), &world, gamma).unwrap();
        assert_eq!(row.coefficients, v(&[0.0, 0.0, 6.0, -6.0]));
        assert_eq!(row.bound, 9.0);

        let row = build_containment_row(&ball(&[4.0, 0.0], 1.0), &world, gamma).unwrap();
        assert_eq!(row.bound, 0.0);

        assert!(matches!(build_containment_row(&ball(&[0.0, 0.0], 5.0), &world, gamma), Err(CbfError::Configuration(_))));
    }

    #[test]
    fn filter_passes_nominal_when_slack() {
        let h = CircleBarrier { center: v(&[0.0, 3.0]), radius: 1.0 };
        let u_hat = v(&[0.1, -0.2]);
        let u = standard_filter(&decoupled_system(), &h, ClassKappa::default(), &v(&[0.0, 0.5]), &u_hat).unwrap();
        assert!((&u - &u_hat).norm() < 1e-14, "{u} vs {u_hat}");
    }

    #[test]
    fn filter_enforces_condition_above_circle() {
        let sys = decoupled_system();
        let h = CircleBarrier { center: v(&[0.0, 3.0]), radius: 1.0 };
        let x = v(&[0.0, 4.5]);
        let gamma = ClassKappa::default();
        // unfiltered: L_f h + γ(h) = 2·1.5·(−4.5) + 1.25 < 0
        assert!(cbf_condition(&sys, &h, gamma, &x, &Vector::zeros(2)) < 0.0);
        let u = standard_filter(&sys, &h, gamma, &x, &Vector::zeros(2)).unwrap();
        // the constraint is active: u₂ = (13.5 − 1.25) / 3
        assert!((&u - v(&[0.0, 12.25 / 3.0])).norm() < 1e-12);
        assert!(cbf_condition(&sys, &h, gamma, &x, &u) >= -1e-12);
    }

    #[test]
    fn filter_reports_degenerate_infeasibility() {
        // h depends only on x₂ but the input only drives x₁
        let sys = LinearSystem::new(matrix2([[0.0, 0.0], [0.0, -1.0]]), Matrix::from_row_slice(2, 1, &[1.0, 0.0]))
            .unwrap();
        let h = CircleBarrier { center: v(&[0.0, 0.0]), radius: 1.0 };
        let err = standard_filter(&sys, &h, ClassKappa::default(), &v(&[0.0, 1.2]), &v(&[0.0])).unwrap_err();
        assert!(matches!(err, CbfError::FilterInfeasible { .. }));
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        let funnel = FunnelBarrier { center: v(&[0.0, 3.0]), shape: matrix2([[10.0, 0.0], [0.0, -1.0]]) };
        let circle = CircleBarrier { center: v(&[0.0, 3.0]), radius: 1.0 };
        for x in [v(&[0.3, 5.0]), v(&[-2.0, 1.0]), v(&[1.5, 3.2])] {
            for h in [&funnel as &dyn BarrierFunction, &circle] {
                let analytic = h.gradient(&x);
                let numeric = fd_gradient(|y| h.value(y), &x);
                assert!((&analytic - &numeric).norm() <= 1e-4 * analytic.norm().max(1.0));
            }
        }
    }

    #[test]
    fn class_kappa_validation() {
        assert!(ClassKappa::new(0.0).is_err());
        assert!(ClassKappa::new(-1.0).is_err());
        assert_eq!(ClassKappa::new(2.5).unwrap().apply(2.0), 5.0);
    }
}
