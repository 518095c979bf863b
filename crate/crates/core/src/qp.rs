//! Dense strictly convex quadratic programs
//!
//! ```text
//! minimize ½ zᵀHz + cᵀz   subject to   Az ≤ b
//! ```
//!
//! solved by a primal active-set method. A feasible starting point comes from
//! the minimax-slack problem `min t s.t. Az − t·1 ≤ b`, itself solved by an
//! active-set LP iteration; when its optimum is positive the LP multipliers
//! are a Farkas certificate of infeasibility.

use nalgebra::DMatrix;
use thiserror::Error;

use crate::{Matrix, Vector};

/// Phase-1 slack above which the constraint set is declared empty.
pub const INFEASIBILITY_SLACK: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QpError {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch { what: &'static str, expected: usize, got: usize },
    #[error("hessian is not symmetric")]
    NotSymmetric,
    #[error("hessian is not positive definite")]
    NotPositiveDefinite,
    #[error("problem data contains non-finite values")]
    NonFinite,
    #[error("iteration cap of {cap} exceeded in {phase}")]
    IterationLimit { phase: &'static str, cap: usize },
    #[error("singular working-set system in {phase}")]
    Singular { phase: &'static str },
}

#[derive(Debug, Clone)]
pub struct QuadraticProgram {
    hessian: Matrix,
    linear: Vector,
    constraints: Matrix,
    bounds: Vector,
}

impl QuadraticProgram {
    pub fn new(hessian: Matrix, linear: Vector, constraints: Matrix, bounds: Vector) -> Result<Self, QpError> {
        let d = linear.len();
        if hessian.nrows() != d || hessian.ncols() != d {
            return Err(QpError::DimensionMismatch { what: "hessian", expected: d, got: hessian.nrows() });
        }
        if constraints.ncols() != d {
            return Err(QpError::DimensionMismatch { what: "constraint columns", expected: d, got: constraints.ncols() });
        }
        if constraints.nrows() != bounds.len() {
            return Err(QpError::DimensionMismatch {
                what: "constraint rows",
                expected: constraints.nrows(),
                got: bounds.len(),
            });
        }
        let finite = |m: &Matrix| m.iter().all(|v| v.is_finite());
        if !finite(&hessian) || !finite(&constraints) || linear.iter().any(|v| !v.is_finite()) {
            return Err(QpError::NonFinite);
        }
        if bounds.iter().any(|v| v.is_nan() || *v == f64::NEG_INFINITY) {
            return Err(QpError::NonFinite);
        }
        let scale = 1.0 + hessian.amax();
        if (&hessian - hessian.transpose()).amax() > 1e-12 * scale {
            return Err(QpError::NotSymmetric);
        }
        let chol = hessian.clone().cholesky().ok_or(QpError::NotPositiveDefinite)?;
        // reject numerically semidefinite matrices as well
        let diag_min = chol.l_dirty().diagonal().iter().fold(f64::INFINITY, |a, &b| a.min(b));
        if !(diag_min * diag_min > 1e-14 * scale) {
            return Err(QpError::NotPositiveDefinite);
        }
        Ok(Self { hessian, linear, constraints, bounds })
    }

    /// Problem with no inequality constraints.
    pub fn unconstrained(hessian: Matrix, linear: Vector) -> Result<Self, QpError> {
        let d = linear.len();
        Self::new(hessian, linear, Matrix::zeros(0, d), Vector::zeros(0))
    }

    pub fn hessian(&self) -> &Matrix {
        &self.hessian
    }

    pub fn linear(&self) -> &Vector {
        &self.linear
    }

    pub fn constraints(&self) -> &Matrix {
        &self.constraints
    }

    pub fn bounds(&self) -> &Vector {
        &self.bounds
    }

    pub fn dim(&self) -> usize {
        self.linear.len()
    }

    pub fn num_constraints(&self) -> usize {
        self.bounds.len()
    }

    pub fn objective(&self, z: &Vector) -> f64 {
        0.5 * z.dot(&(&self.hessian * z)) + self.linear.dot(z)
    }

    /// Slack `b − Az`; negative entries are violations.
    pub fn slack(&self, z: &Vector) -> Vector {
        &self.bounds - &self.constraints * z
    }

    fn iteration_cap(&self) -> usize {
        100 * (self.dim() + self.num_constraints()).max(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    Infeasible,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub status: QpStatus,
    /// Minimizer when optimal; the phase-1 minimax point when infeasible.
    pub minimizer: Vector,
    /// Sorted indices of constraints in the final working set.
    pub active_set: Vec<usize>,
    /// One multiplier per constraint row, zero off the active set.
    pub multipliers: Vector,
    /// Farkas certificate `y ≥ 0, Aᵀy = 0, bᵀy < 0` when infeasible.
    pub certificate: Option<Vector>,
    /// Smallest achievable uniform constraint violation (phase 1); ≤ 0 when feasible.
    pub min_slack: f64,
    pub iterations: usize,
}

impl QpSolution {
    pub fn is_optimal(&self) -> bool {
        self.status == QpStatus::Optimal
    }
}

/// Solves `kkt · x = rhs` with partial-pivoting LU.
fn solve_dense(kkt: DMatrix<f64>, rhs: &Vector, phase: &'static str) -> Result<Vector, QpError> {
    let lu = kkt.lu();
    let x = lu.solve(rhs).ok_or(QpError::Singular { phase })?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(QpError::Singular { phase });
    }
    Ok(x)
}

/// Phase 1: `min t` over `w = (z, t)` subject to `Az − t ≤ b` and `t ≥ −1`.
/// Returns `(z, t, multipliers on the A rows, iterations)`.
fn minimax_slack(qp: &QuadraticProgram) -> Result<(Vector, f64, Vector, usize), QpError> {
    let (d, m) = (qp.dim(), qp.num_constraints());
    let p = d + 1;
    // augmented rows: A_i z − t ≤ b_i for i < m, and −t ≤ 1 as row m
    let row = |i: usize| -> Vector {
        let mut r = Vector::zeros(p);
        if i < m {
            for j in 0..d {
                r[j] = qp.constraints[(i, j)];
            }
            r[d] = -1.0;
        } else {
            r[d] = -1.0;
        }
        r
    };
    let rhs = |i: usize| if i < m { qp.bounds[i] } else { 1.0 };
    let rows: Vec<Vector> = (0..=m).map(row).collect();

    let mut w = Vector::zeros(p);
    w[d] = qp.bounds.iter().fold(-1.0f64, |acc, &bi| acc.max(-bi));
    let mut e = Vector::zeros(p);
    e[d] = 1.0;

    let mut working: Vec<usize> = Vec::new();
    let cap = qp.iteration_cap() + 100;
    let scale = 1.0 + qp.constraints.amax();
    for iter in 0..cap {
        // multipliers from the least-squares fit e + N^T λ ≈ 0
        let k = working.len();
        let lambda = if k == 0 {
            Vector::zeros(0)
        } else {
            let n = Matrix::from_fn(k, p, |r, c| rows[working[r]][c]);
            let nnt = &n * n.transpose();
            let ne = &n * &e;
            solve_dense(nnt, &(-ne), "phase 1")?
        };
        let mut dir = -e.clone();
        for (r, &idx) in working.iter().enumerate() {
            dir -= &rows[idx] * lambda[r];
        }
        if k >= p || dir.amax() <= 1e-10 * scale {
            // stationary on the working set; Bland's rule (lowest index) on
            // the drop keeps degenerate vertices from cycling
            let drop = lambda.iter().position(|&l| l < -1e-12);
            match drop {
                Some(r) => {
                    working.remove(r);
                    continue;
                }
                None => {
                    let mut mult = Vector::zeros(m);
                    for (r, &idx) in working.iter().enumerate() {
                        if idx < m {
                            mult[idx] = lambda[r].max(0.0);
                        }
                    }
                    let z = w.rows(0, d).into_owned();
                    return Ok((z, w[d], mult, iter + 1));
                }
            }
        }
        // ratio test, lowest index on ties
        let mut step = f64::INFINITY;
        let mut block = None;
        for (i, row) in rows.iter().enumerate().take(m + 1) {
            if working.contains(&i) {
                continue;
            }
            let rate = row.dot(&dir);
            // rows dependent on the working set have zero rate up to roundoff
            if rate > 1e-10 * row.norm() * dir.norm() {
                let alpha = ((rhs(i) - row.dot(&w)) / rate).max(0.0);
                if alpha < step {
                    step = alpha;
                    block = Some(i);
                }
            }
        }
        let Some(i) = block else {
            // t ≥ −1 always blocks a descent direction
            return Err(QpError::Singular { phase: "phase 1" });
        };
        w += &dir * step;
        working.push(i);
        working.sort_unstable();
    }
    Err(QpError::IterationLimit { phase: "phase 1", cap })
}

/// Solves the QP. Infeasibility is a status, not an error; errors are
/// reserved for solver breakdowns such as exceeding the iteration cap.
pub fn solve_qp(qp: &QuadraticProgram) -> Result<QpSolution, QpError> {
    let (d, m) = (qp.dim(), qp.num_constraints());
    let mut iterations = 0;

    let (mut z, min_slack) = if qp.bounds.iter().all(|&b| b >= 0.0) {
        (Vector::zeros(d), -qp.bounds.iter().fold(f64::INFINITY, |a, &b| a.min(b)).min(1.0))
    } else {
        let (z0, t, mult, it) = minimax_slack(qp)?;
        iterations += it;
        if t > INFEASIBILITY_SLACK {
            let active_set = (0..m).filter(|&i| mult[i] > 0.0).collect();
            return Ok(QpSolution {
                status: QpStatus::Infeasible,
                minimizer: z0,
                active_set,
                multipliers: Vector::zeros(m),
                certificate: Some(mult),
                min_slack: t,
                iterations,
            });
        }
        (z0, t)
    };

    let h = &qp.hessian;
    let a = &qp.constraints;
    let b = &qp.bounds;
    let mut working: Vec<usize> = Vec::new();
    let cap = qp.iteration_cap();
    for _ in 0..cap {
        iterations += 1;
        let k = working.len();
        if k == d {
            // re-solve the vertex so drift from earlier steps does not linger
            let aw = Matrix::from_fn(d, d, |r, c| a[(working[r], c)]);
            let bw = Vector::from_fn(d, |r, _| b[working[r]]);
            if let Some(snapped) = aw.full_piv_lu().solve(&bw) {
                if snapped.iter().all(|v| v.is_finite()) {
                    z = snapped;
                }
            }
        }
        let g = h * &z + &qp.linear;
        let mut kkt = DMatrix::zeros(d + k, d + k);
        kkt.view_mut((0, 0), (d, d)).copy_from(h);
        for (r, &idx) in working.iter().enumerate() {
            for j in 0..d {
                kkt[(d + r, j)] = a[(idx, j)];
                kkt[(j, d + r)] = a[(idx, j)];
            }
        }
        let mut rhs = Vector::zeros(d + k);
        rhs.rows_mut(0, d).copy_from(&(-&g));
        let sol = solve_dense(kkt, &rhs, "phase 2")?;
        // d independent working rows pin a vertex: the step is exactly zero,
        // and on nearly parallel rows the solve would return only roundoff
        let step = if k >= d { Vector::zeros(d) } else { sol.rows(0, d).into_owned() };
        let lambda = sol.rows(d, k).into_owned();

        if step.amax() <= 1e-12 * (1.0 + z.amax()) {
            let lam_scale = 1e-12 * (1.0 + g.amax());
            let drop = lambda.iter().position(|&l| l < -lam_scale);
            match drop {
                Some(r) => {
                    working.remove(r);
                    continue;
                }
                None => {
                    z += step;
                    let mut multipliers = Vector::zeros(m);
                    for (r, &idx) in working.iter().enumerate() {
                        multipliers[idx] = lambda[r].max(0.0);
                    }
                    return Ok(QpSolution {
                        status: QpStatus::Optimal,
                        minimizer: z,
                        active_set: working,
                        multipliers,
                        certificate: None,
                        min_slack,
                        iterations,
                    });
                }
            }
        }

        let mut alpha = 1.0;
        let mut block = None;
        let step_norm = step.norm();
        for i in 0..m {
            if working.contains(&i) {
                continue;
            }
            let ai = a.row(i);
            let rate = ai.dot(&step.transpose());
            if rate > 1e-10 * step_norm * ai.norm() {
                let ratio = ((b[i] - ai.dot(&z.transpose())) / rate).max(0.0);
                if ratio < alpha {
                    alpha = ratio;
                    block = Some(i);
                }
            }
        }
        z += step * alpha;
        if let Some(i) = block {
            working.push(i);
            working.sort_unstable();
        }
    }
    Err(QpError::IterationLimit { phase: "phase 2", cap })
}

/// Largest of: stationarity `‖Hz + c + Aᵀμ‖∞`, primal violation
/// `max(Az − b)₊`, dual violation `max(−μ)₊`, and complementarity
/// `max |μᵢ (Az − b)ᵢ|`.
pub fn kkt_residual(qp: &QuadraticProgram, sol: &QpSolution) -> f64 {
    let z = &sol.minimizer;
    let mu = &sol.multipliers;
    let stationarity = (&qp.hessian * z + &qp.linear + qp.constraints.transpose() * mu).amax();
    let slack = qp.slack(z);
    let primal = slack.iter().fold(0.0f64, |acc, &s| acc.max(-s));
    let dual = mu.iter().fold(0.0f64, |acc, &u| acc.max(-u));
    let comp = mu.iter().zip(slack.iter()).fold(0.0f64, |acc, (u, s)| acc.max((u * s).abs()));
    stationarity.max(primal).max(dual).max(comp)
}

/// Checks a Farkas certificate: `y ≥ 0`, `Aᵀy ≈ 0` and `bᵀy < 0`.
pub fn certifies_infeasibility(qp: &QuadraticProgram, y: &Vector) -> bool {
    if y.len() != qp.num_constraints() || y.iter().any(|&v| v < 0.0) {
        return false;
    }
    let total: f64 = y.iter().sum();
    if total <= 0.0 {
        return false;
    }
    let combo = (qp.constraints.transpose() * y).amax();
    let gap = qp.bounds.dot(y);
    combo <= 1e-9 * total * (1.0 + qp.constraints.amax()) && gap < -INFEASIBILITY_SLACK * total * 0.5
}
