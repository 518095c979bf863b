//! Real-world and ball-world sets as smooth level-set functions.
//!
//! Sign convention throughout: a level set is strictly positive in the free
//! interior, zero on the boundary and negative inside an unsafe region.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::{Matrix, Vector};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("ray map is singular at the obstacle center")]
    SingularPoint,
    #[error("invalid shape: {0}")]
    InvalidShape(String),
}

pub(crate) fn check_dim(expected: usize, v: &Vector) -> Result<(), GeometryError> {
    if v.len() != expected {
        return Err(GeometryError::DimensionMismatch { expected, got: v.len() });
    }
    Ok(())
}

pub(crate) fn planar(v: &Vector) -> Result<Vector2<f64>, GeometryError> {
    check_dim(2, v)?;
    Ok(Vector2::new(v[0], v[1]))
}

/// A closed ball `{q : ‖q − center‖ ≤ radius}` in the ball world.
#[derive(Debug, Clone, PartialEq)]
pub struct BallObstacle {
    pub center: Vector,
    pub radius: f64,
    initial_center: Vector,
    initial_radius: f64,
}

impl BallObstacle {
    pub fn new(center: Vector, radius: f64) -> Result<Self, GeometryError> {
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(GeometryError::InvalidShape(format!("ball radius must be positive, got {radius}")));
        }
        if center.iter().any(|c| !c.is_finite()) {
            return Err(GeometryError::InvalidShape("ball center must be finite".into()));
        }
        Ok(Self { initial_center: center.clone(), initial_radius: radius, center, radius })
    }

    pub fn initial_center(&self) -> &Vector {
        &self.initial_center
    }

    pub fn initial_radius(&self) -> f64 {
        self.initial_radius
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    /// `‖q_i − q‖² − ρ_i²`.
    pub fn beta(&self, q: &Vector) -> Result<f64, GeometryError> {
        check_dim(self.dim(), q)?;
        Ok((&self.center - q).norm_squared() - self.radius * self.radius)
    }
}

/// Ball world: a boundary ball with fixed center and variable radius, holding
/// `M` ball obstacles.
#[derive(Debug, Clone, PartialEq)]
pub struct BallWorld {
    pub boundary_center: Vector,
    pub boundary_radius: f64,
    initial_boundary_radius: f64,
    pub obstacles: Vec<BallObstacle>,
}

impl BallWorld {
    pub fn new(
        boundary_center: Vector,
        boundary_radius: f64,
        obstacles: Vec<BallObstacle>,
    ) -> Result<Self, GeometryError> {
        if !(boundary_radius > 0.0 && boundary_radius.is_finite()) {
            return Err(GeometryError::InvalidShape(format!(
                "boundary radius must be positive, got {boundary_radius}"
            )));
        }
        let n = boundary_center.len();
        if n == 0 {
            return Err(GeometryError::InvalidShape("ball world needs dimension >= 1".into()));
        }
        for o in &obstacles {
            if o.dim() != n {
                return Err(GeometryError::DimensionMismatch { expected: n, got: o.dim() });
            }
        }
        Ok(Self { boundary_center, boundary_radius, initial_boundary_radius: boundary_radius, obstacles })
    }

    pub fn dim(&self) -> usize {
        self.boundary_center.len()
    }

    pub fn len(&self) -> usize {
        self.obstacles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.obstacles.is_empty()
    }

    pub fn initial_boundary_radius(&self) -> f64 {
        self.initial_boundary_radius
    }

    /// `ρ_0² − ‖q_0 − q‖²`.
    pub fn beta_boundary(&self, q: &Vector) -> Result<f64, GeometryError> {
        check_dim(self.dim(), q)?;
        Ok(self.boundary_radius * self.boundary_radius - (&self.boundary_center - q).norm_squared())
    }

    pub fn is_safe(&self, q: &Vector) -> Result<bool, GeometryError> {
        if self.beta_boundary(q)? < 0.0 {
            return Ok(false);
        }
        for o in &self.obstacles {
            if o.beta(q)? < 0.0 {
                return Ok(false);
            }
        }
        Ok(true)
    }

    /// Every barrier of the configuration itself: pairwise separation
    /// `‖q_i − q_j‖² − (ρ_i + ρ_j)²` for `i < j`, then containment
    /// `(ρ_0 − ρ_i)² − ‖q_i − q_0‖²`.
    pub fn configuration_barriers(&self) -> Vec<f64> {
        let m = self.len();
        let mut out = Vec::with_capacity(m * (m + 1) / 2);
        for i in 0..m {
            for j in (i + 1)..m {
                let (a, b) = (&self.obstacles[i], &self.obstacles[j]);
                let s = a.radius + b.radius;
                out.push((&a.center - &b.center).norm_squared() - s * s);
            }
        }
        for o in &self.obstacles {
            let gap = self.boundary_radius - o.radius;
            out.push(gap * gap - (&o.center - &self.boundary_center).norm_squared());
        }
        out
    }

    /// Ball-world barriers seen by the mapped state `q`: `β̂_0(q)` then `β̂_i(q)`.
    pub fn state_barriers(&self, q: &Vector) -> Result<Vec<f64>, GeometryError> {
        let mut out = Vec::with_capacity(self.len() + 1);
        out.push(self.beta_boundary(q)?);
        for o in &self.obstacles {
            out.push(o.beta(q)?);
        }
        Ok(out)
    }

    /// True when `q` is safe and the obstacles are pairwise disjoint and
    /// strictly inside the boundary ball.
    pub fn is_safe_configuration(&self, q: &Vector) -> Result<bool, GeometryError> {
        let state_ok = self.state_barriers(q)?.iter().all(|&b| b > 0.0);
        let conf_ok = self.configuration_barriers().iter().all(|&b| b > 0.0)
            && self.obstacles.iter().all(|o| o.radius < self.boundary_radius);
        Ok(state_ok && conf_ok)
    }
}

/// Truncated Fourier series for a radius profile `r(θ) = r₀ + Σ aₖ cos kθ + bₖ sin kθ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RadialProfile {
    pub mean: f64,
    #[serde(default)]
    pub cos: Vec<f64>,
    #[serde(default)]
    pub sin: Vec<f64>,
}

impl RadialProfile {
    pub fn eval(&self, theta: f64) -> f64 {
        let mut r = self.mean;
        for (k, a) in self.cos.iter().enumerate() {
            r += a * ((k + 1) as f64 * theta).cos();
        }
        for (k, b) in self.sin.iter().enumerate() {
            r += b * ((k + 1) as f64 * theta).sin();
        }
        r
    }

    /// Conservative lower bound on `r(θ)` (mean minus the sum of amplitudes).
    pub fn lower_bound(&self) -> f64 {
        self.mean - self.cos.iter().chain(&self.sin).map(|c| c.abs()).sum::<f64>()
    }
}

/// Shapes of star-shaped unsafe regions, each with an analytic level set and
/// a matching radius function about the obstacle center.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum StarShape {
    Circle { radius: f64 },
    /// Two-lobe (Cassini oval) region
    /// `((dx − a)² + dy²)((dx + a)² + dy²) − b⁴ ≤ 0`; star-shaped about its
    /// center whenever `b > a`, concave for `b < a√2`.
    TwoLobe { a: f64, b: f64 },
    /// Region `‖d‖ ≤ r(θ)` for a Fourier radius profile; level set `‖d‖² − r(θ)²`.
    Radial(RadialProfile),
}

impl StarShape {
    fn validate(&self) -> Result<(), GeometryError> {
        match self {
            StarShape::Circle { radius } if !(*radius > 0.0) => {
                Err(GeometryError::InvalidShape(format!("circle radius must be positive, got {radius}")))
            }
            StarShape::TwoLobe { a, b } if !(*a >= 0.0 && *b > *a) => Err(GeometryError::InvalidShape(format!(
                "two-lobe shape is star-shaped only for b > a >= 0 (a={a}, b={b})"
            ))),
            StarShape::Radial(p) if !(p.lower_bound() > 0.0) => {
                Err(GeometryError::InvalidShape("radial profile must stay positive".into()))
            }
            _ => Ok(()),
        }
    }

    fn level(&self, d: Vector2<f64>) -> f64 {
        match self {
            StarShape::Circle { radius } => d.norm_squared() - radius * radius,
            StarShape::TwoLobe { a, b } => {
                let (dx, dy) = (d.x, d.y);
                ((dx - a).powi(2) + dy * dy) * ((dx + a).powi(2) + dy * dy) - b.powi(4)
            }
            StarShape::Radial(p) => {
                let r = p.eval(d.y.atan2(d.x));
                d.norm_squared() - r * r
            }
        }
    }

    /// Boundary radius along direction `d` (need not be normalized, must be nonzero).
    fn radius_along(&self, d: Vector2<f64>) -> f64 {
        match self {
            StarShape::Circle { radius } => *radius,
            StarShape::TwoLobe { a, b } => {
                let n2 = d.norm_squared();
                let cos2 = (d.x * d.x - d.y * d.y) / n2;
                let sin2 = 2.0 * d.x * d.y / n2;
                let (a2, b4) = (a * a, b.powi(4));
                (a2 * cos2 + (b4 - a2 * a2 * sin2 * sin2).sqrt()).sqrt()
            }
            StarShape::Radial(p) => p.eval(d.y.atan2(d.x)),
        }
    }
}

/// Star-shaped obstacle in the planar real world.
#[derive(Debug, Clone, PartialEq)]
pub struct StarObstacle {
    center: Vector2<f64>,
    shape: StarShape,
}

impl StarObstacle {
    pub fn new(center: &Vector, shape: StarShape) -> Result<Self, GeometryError> {
        shape.validate()?;
        Ok(Self { center: planar(center)?, shape })
    }

    pub fn center(&self) -> Vector {
        Vector::from_column_slice(self.center.as_slice())
    }

    pub fn center2(&self) -> Vector2<f64> {
        self.center
    }

    pub fn shape(&self) -> &StarShape {
        &self.shape
    }

    pub fn beta(&self, x: &Vector) -> Result<f64, GeometryError> {
        Ok(self.beta2(planar(x)?))
    }

    pub fn beta2(&self, x: Vector2<f64>) -> f64 {
        self.shape.level(x - self.center)
    }

    /// `r_i(θ)`.
    pub fn radius(&self, theta: f64) -> f64 {
        self.shape.radius_along(Vector2::new(theta.cos(), theta.sin()))
    }

    /// `(‖x − x_i‖ / r_i(θ)) [cos θ, sin θ]`, `θ = ∠(x − x_i)`.
    pub fn ray_map(&self, x: &Vector) -> Result<Vector, GeometryError> {
        let f = self.ray_map2(planar(x)?)?;
        Ok(Vector::from_column_slice(f.as_slice()))
    }

    pub fn ray_map2(&self, x: Vector2<f64>) -> Result<Vector2<f64>, GeometryError> {
        let d = x - self.center;
        if d.norm_squared() == 0.0 {
            return Err(GeometryError::SingularPoint);
        }
        Ok(d / self.shape.radius_along(d))
    }

    /// Boundary point along angle `θ`.
    pub fn boundary_point(&self, theta: f64) -> Vector2<f64> {
        self.center + self.radius(theta) * Vector2::new(theta.cos(), theta.sin())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum WorkspaceShape {
    Disk { radius: f64 },
    Ellipse { semi_axes: [f64; 2] },
}

/// Compact workspace `{β_0 ≥ 0}`; star-shaped about its center so the
/// boundary has a ray map like any obstacle.
#[derive(Debug, Clone, PartialEq)]
pub struct Workspace {
    center: Vector2<f64>,
    shape: WorkspaceShape,
}

impl Workspace {
    pub fn new(center: &Vector, shape: WorkspaceShape) -> Result<Self, GeometryError> {
        match &shape {
            WorkspaceShape::Disk { radius } if !(*radius > 0.0) => {
                return Err(GeometryError::InvalidShape(format!("workspace radius must be positive, got {radius}")))
            }
            WorkspaceShape::Ellipse { semi_axes } if !(semi_axes[0] > 0.0 && semi_axes[1] > 0.0) => {
                return Err(GeometryError::InvalidShape("ellipse semi-axes must be positive".into()))
            }
            _ => {}
        }
        Ok(Self { center: planar(center)?, shape })
    }

    pub fn center2(&self) -> Vector2<f64> {
        self.center
    }

    pub fn shape(&self) -> &WorkspaceShape {
        &self.shape
    }

    pub fn beta(&self, x: &Vector) -> Result<f64, GeometryError> {
        Ok(self.beta2(planar(x)?))
    }

    pub fn beta2(&self, x: Vector2<f64>) -> f64 {
        let d = x - self.center;
        match &self.shape {
            WorkspaceShape::Disk { radius } => radius * radius - d.norm_squared(),
            WorkspaceShape::Ellipse { semi_axes: [a, b] } => a * b * (1.0 - (d.x / a).powi(2) - (d.y / b).powi(2)),
        }
    }

    pub fn radius_along(&self, d: Vector2<f64>) -> f64 {
        match &self.shape {
            WorkspaceShape::Disk { radius } => *radius,
            WorkspaceShape::Ellipse { semi_axes: [a, b] } => {
                let n = d.norm();
                if n == 0.0 {
                    return a.min(*b);
                }
                let (c, s) = (d.x / n, d.y / n);
                a * b / ((b * c).powi(2) + (a * s).powi(2)).sqrt()
            }
        }
    }

    /// `(x − x_0) / r_0(θ)`; continuous through the center.
    pub fn ray_map2(&self, x: Vector2<f64>) -> Vector2<f64> {
        let d = x - self.center;
        d / self.radius_along(d)
    }

    /// Axis-aligned bounding box `(min, max)`.
    pub fn bounds(&self) -> (Vector2<f64>, Vector2<f64>) {
        let half = match &self.shape {
            WorkspaceShape::Disk { radius } => Vector2::new(*radius, *radius),
            WorkspaceShape::Ellipse { semi_axes: [a, b] } => Vector2::new(*a, *b),
        };
        (self.center - half, self.center + half)
    }
}

/// Planar real world: a workspace with star-shaped obstacles.
#[derive(Debug, Clone)]
pub struct StarWorld {
    pub workspace: Workspace,
    pub obstacles: Vec<StarObstacle>,
}

impl StarWorld {
    pub fn new(workspace: Workspace, obstacles: Vec<StarObstacle>) -> Self {
        Self { workspace, obstacles }
    }

    /// `β_0(x)` followed by `β_i(x)` for every obstacle.
    pub fn betas2(&self, x: Vector2<f64>) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.obstacles.len() + 1);
        out.push(self.workspace.beta2(x));
        out.extend(self.obstacles.iter().map(|o| o.beta2(x)));
        out
    }

    pub fn betas(&self, x: &Vector) -> Result<Vec<f64>, GeometryError> {
        Ok(self.betas2(planar(x)?))
    }

    pub fn is_safe(&self, x: &Vector) -> Result<bool, GeometryError> {
        Ok(self.betas(x)?.iter().all(|&b| b >= 0.0))
    }

    pub fn is_safe2(&self, x: Vector2<f64>) -> bool {
        self.workspace.beta2(x) >= 0.0 && self.obstacles.iter().all(|o| o.beta2(x) >= 0.0)
    }
}

/// Boundary radius `r(θ)` recovered from a level set alone: bisection along
/// each ray, cached on a uniform angle grid, linear interpolation between
/// samples.
#[derive(Debug, Clone)]
pub struct RadiusTable {
    samples: Arc<[f64]>,
}

impl RadiusTable {
    pub const DEFAULT_SAMPLES: usize = 4096;
    const BISECTION_TOL: f64 = 1e-10;

    /// `level` is evaluated relative to the center; it must be negative at
    /// small radii and cross zero exactly once along every ray.
    pub fn from_level_set<F>(level: F, samples: usize) -> Result<Self, GeometryError>
    where
        F: Fn(Vector2<f64>) -> f64,
    {
        if samples < 3 {
            return Err(GeometryError::InvalidShape("radius table needs at least 3 samples".into()));
        }
        let mut out = Vec::with_capacity(samples);
        for k in 0..samples {
            let theta = 2.0 * PI * k as f64 / samples as f64;
            let dir = Vector2::new(theta.cos(), theta.sin());
            let mut lo = 1e-12;
            if level(dir * lo) >= 0.0 {
                return Err(GeometryError::InvalidShape("level set is not negative at its center".into()));
            }
            let mut hi = 1.0;
            let mut grow = 0;
            while level(dir * hi) < 0.0 {
                lo = hi;
                hi *= 2.0;
                grow += 1;
                if grow > 60 {
                    return Err(GeometryError::InvalidShape("level set has no boundary along a ray".into()));
                }
            }
            while hi - lo > Self::BISECTION_TOL {
                let mid = 0.5 * (lo + hi);
                if level(dir * mid) < 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            out.push(0.5 * (lo + hi));
        }
        Ok(Self { samples: out.into() })
    }

    pub fn for_obstacle(obs: &StarObstacle, samples: usize) -> Result<Self, GeometryError> {
        let shape = obs.shape.clone();
        Self::from_level_set(move |d| shape.level(d), samples)
    }

    pub fn eval(&self, theta: f64) -> f64 {
        let n = self.samples.len();
        let u = theta.rem_euclid(2.0 * PI) / (2.0 * PI) * n as f64;
        let k = (u.floor() as usize).min(n - 1);
        let w = u - k as f64;
        (1.0 - w) * self.samples[k] + w * self.samples[(k + 1) % n]
    }
}

/// Row-major 2×2 matrix helper for scenario data.
pub fn matrix2(rows: [[f64; 2]; 2]) -> Matrix {
    Matrix::from_row_slice(2, 2, &[rows[0][0], rows[0][1], rows[1][0], rows[1][1]])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(xs: &[f64]) -> Vector {
        Vector::from_column_slice(xs)
    }

    fn fig3_obstacle(cy: f64) -> StarObstacle {
        StarObstacle::new(&v(&[0.0, cy]), StarShape::TwoLobe { a: 1.0, b: 1.1 }).unwrap()
    }

    #[test]
    fn ball_level_set_examples() {
        let ball = BallObstacle::new(v(&[2.0, 0.0]), 1.0).unwrap();
        assert_eq!(ball.beta(&v(&[0.0, 0.0])).unwrap(), 3.0);
        let c = v(&[0.3, -1.2]);
        let ball = BallObstacle::new(c.clone(), 0.7).unwrap();
        assert!((ball.beta(&c).unwrap() + 0.49).abs() < 1e-15);
        let ball = BallObstacle::new(v(&[0.0, 0.0]), 1.0).unwrap();
        assert_eq!(ball.beta(&v(&[1.0, 0.0])).unwrap(), 0.0);
        assert!(matches!(
            ball.beta(&v(&[1.0, 0.0, 0.0])),
            Err(GeometryError::DimensionMismatch { expected: 2, got: 3 })
        ));
    }

    #[test]
    fn boundary_level_set_examples() {
        let world = BallWorld::new(v(&[0.0, 0.0]), 5.0, vec![]).unwrap();
        assert_eq!(world.beta_boundary(&v(&[0.0, 0.0])).unwrap(), 25.0);
        assert_eq!(world.beta_boundary(&v(&[5.0, 0.0])).unwrap(), 0.0);
        assert_eq!(world.beta_boundary(&v(&[3.0, 4.0])).unwrap(), 0.0);
        assert!(world.beta_boundary(&v(&[1.0])).is_err());
    }

    #[test]
    fn two_lobe_level_set_at_center() {
        let obs = fig3_obstacle(3.0);
        assert!((obs.beta(&v(&[0.0, 3.0])).unwrap() + 0.4641).abs() < 1e-12);
        assert!(obs.beta(&v(&[10.0, 10.0])).unwrap() > 1e4);
    }

    #[test]
    fn circle_boundary_is_zero() {
        let obs = StarObstacle::new(&v(&[1.0, 1.0]), StarShape::Circle { radius: 2.0 }).unwrap();
        assert!(obs.beta(&v(&[3.0, 1.0])).unwrap().abs() < 1e-15);
    }

    #[test]
    fn ray_map_examples() {
        let obs = StarObstacle::new(&v(&[1.0, -2.0]), StarShape::Circle { radius: 0.5 }).unwrap();
        let f = obs.ray_map(&v(&[2.0, -1.0])).unwrap();
        assert!((f - v(&[2.0, 2.0])).norm() < 1e-15);

        let limacon = StarShape::Radial(RadialProfile { mean: 1.0, cos: vec![0.5], sin: vec![] });
        let obs = StarObstacle::new(&v(&[0.0, 0.0]), limacon).unwrap();
        let f = obs.ray_map(&v(&[3.0, 0.0])).unwrap();
        assert!((f - v(&[2.0, 0.0])).norm() < 1e-15);

        assert_eq!(obs.ray_map(&v(&[0.0, 0.0])), Err(GeometryError::SingularPoint));
    }

    #[test]
    fn ray_map_is_unit_on_boundary() {
        let obs = fig3_obstacle(-3.0);
        for k in 0..360 {
            let th = k as f64 * PI / 180.0;
            let p = obs.boundary_point(th);
            assert!(obs.beta2(p).abs() < 1e-12, "β on boundary at θ={th}");
            let f = obs.ray_map2(p).unwrap();
            assert!((f.norm() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn tabulated_radius_matches_closed_form() {
        let obs = fig3_obstacle(3.0);
        let table = RadiusTable::for_obstacle(&obs, RadiusTable::DEFAULT_SAMPLES).unwrap();
        for k in 0..997 {
            let th = 2.0 * PI * k as f64 / 997.0;
            assert!((table.eval(th) - obs.radius(th)).abs() < 1e-6, "θ={th}");
        }
        // narrowest ray is straight up/down through the pinch
        assert!((obs.radius(PI / 2.0) - 0.21f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn rejects_non_star_two_lobe() {
        assert!(StarObstacle::new(&v(&[0.0, 0.0]), StarShape::TwoLobe { a: 1.0, b: 0.9 }).is_err());
        assert!(StarObstacle::new(&v(&[0.0, 0.0, 0.0]), StarShape::Circle { radius: 1.0 }).is_err());
    }

    #[test]
    fn safety_queries() {
        let world = BallWorld::new(
            v(&[0.0, 0.0]),
            10.0,
            vec![
                BallObstacle::new(v(&[0.0, 3.0]), 0.4).unwrap(),
                BallObstacle::new(v(&[0.0, -3.0]), 0.4).unwrap(),
            ],
        )
        .unwrap();
        assert!(world.is_safe(&v(&[0.0, 0.0])).unwrap());
        assert!(!world.is_safe(&v(&[0.1, 3.1])).unwrap());
        assert!(!world.is_safe(&v(&[11.0, 0.0])).unwrap());

        let ws = Workspace::new(&v(&[0.0, 0.0]), WorkspaceShape::Disk { radius: 10.0 }).unwrap();
        let stars = StarWorld::new(ws, vec![fig3_obstacle(3.0), fig3_obstacle(-3.0)]);
        assert!(stars.is_safe(&v(&[0.0, 6.0])).unwrap());
        assert!(!stars.is_safe(&v(&[0.0, 3.0])).unwrap());
    }

    #[test]
    fn ellipse_workspace_ray_map_unit_on_boundary() {
        let ws = Workspace::new(&v(&[0.5, 0.0]), WorkspaceShape::Ellipse { semi_axes: [3.0, 2.0] }).unwrap();
        for k in 0..64 {
            let th = 2.0 * PI * k as f64 / 64.0;
            let dir = Vector2::new(th.cos(), th.sin());
            let p = ws.center2() + ws.radius_along(dir) * dir;
            assert!(ws.beta2(p).abs() < 1e-12);
            assert!((ws.ray_map2(p).norm() - 1.0).abs() < 1e-12);
        }
    }
}
