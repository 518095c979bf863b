//! Reference computations for the verification suites. They are written
//! from the definitions and never call the code they are used to check.

use nalgebra::DMatrix;

use crate::geometry::BallWorld;
use crate::{Matrix, Vector};

/// Outcome of exhaustive active-set enumeration.
#[derive(Debug, Clone, PartialEq)]
pub enum Enumerated {
    Optimal { minimizer: Vector, multipliers: Vector, active: Vec<usize> },
    Infeasible,
}

/// Solves `min ½zᵀHz + cᵀz s.t. Az ≤ b` (H positive definite) by trying
/// every subset of rows as the active set: each subset's equality-constrained
/// KKT system is solved and kept if the point is feasible and the multipliers
/// are nonnegative. Exponential in the row count; meant for m ≤ ~10.
pub fn enumerate_qp(h: &Matrix, c: &Vector, a: &Matrix, b: &Vector, tol: f64) -> Enumerated {
    let (d, m) = (h.nrows(), a.nrows());
    let mut best: Option<(f64, Vector, Vector, Vec<usize>)> = None;
    for mask in 0u32..(1 << m) {
        let rows: Vec<usize> = (0..m).filter(|r| mask & (1 << r) != 0).collect();
        if rows.len() > d {
            continue;
        }
        let k = rows.len();
        let mut kkt = DMatrix::zeros(d + k, d + k);
        kkt.view_mut((0, 0), (d, d)).copy_from(h);
        let mut rhs = Vector::zeros(d + k);
        rhs.rows_mut(0, d).copy_from(&(-c));
        for (j, &r) in rows.iter().enumerate() {
            for i in 0..d {
                kkt[(i, d + j)] = a[(r, i)];
                kkt[(d + j, i)] = a[(r, i)];
            }
            rhs[d + j] = b[r];
        }
        let lu = kkt.clone().full_piv_lu();
        if !lu.is_invertible() {
            continue;
        }
        let Some(mut sol) = lu.solve(&rhs) else { continue };
        // one round of iterative refinement; vertices of nearly dependent
        // rows otherwise lose several digits
        if let Some(fix) = lu.solve(&(&rhs - &kkt * &sol)) {
            sol += fix;
        }
        let z = sol.rows(0, d).into_owned();
        let mu = sol.rows(d, k).into_owned();
        if mu.iter().any(|&v| v < -tol) {
            continue;
        }
        if (0..m).any(|r| a.row(r).transpose().dot(&z) - b[r] > tol) {
            continue;
        }
        let f = 0.5 * z.dot(&(h * &z)) + c.dot(&z);
        if best.as_ref().is_none_or(|(g, ..)| f < *g) {
            let mut full = Vector::zeros(m);
            for (j, &r) in rows.iter().enumerate() {
                full[r] = mu[j].max(0.0);
            }
            best = Some((f, z, full, rows));
        }
    }
    match best {
        Some((_, minimizer, multipliers, active)) => Enumerated::Optimal { minimizer, multipliers, active },
        None => Enumerated::Infeasible,
    }
}

/// Ball-world barriers straight from their definitions, in the order
/// state/obstacle (i = 1..M), state/boundary, pairwise (i < j), containment.
pub fn ball_barriers(world: &BallWorld, q: &Vector) -> Vec<f64> {
    let obs = &world.obstacles;
    let mut out = Vec::new();
    for o in obs {
        out.push((&o.center - q).norm_squared() - o.radius.powi(2));
    }
    out.push(world.boundary_radius.powi(2) - (&world.boundary_center - q).norm_squared());
    for i in 0..obs.len() {
        for j in (i + 1)..obs.len() {
            out.push((&obs[i].center - &obs[j].center).norm_squared() - (obs[i].radius + obs[j].radius).powi(2));
        }
    }
    for o in obs {
        out.push((world.boundary_radius - o.radius).powi(2) - (&o.center - &world.boundary_center).norm_squared());
    }
    out
}

/// The world after moving for time `t` under a stacked command
/// `z = (u_q, u_ρ)` (`u_ρ[0]` for the boundary).
pub fn drift_world(world: &BallWorld, z: &Vector, t: f64) -> BallWorld {
    let n = world.boundary_center.len();
    let m = world.obstacles.len();
    let mut w = world.clone();
    for (i, o) in w.obstacles.iter_mut().enumerate() {
        for k in 0..n {
            o.center[k] += t * z[i * n + k];
        }
        o.radius += t * z[n * m + 1 + i];
    }
    w.boundary_radius += t * z[n * m];
    w
}

/// Central-difference rate of every ball-world barrier while `q` moves with
/// `qdot` and the world follows command `z`.
pub fn barrier_rates(world: &BallWorld, q: &Vector, qdot: &Vector, z: &Vector, eps: f64) -> Vec<f64> {
    let fwd = ball_barriers(&drift_world(world, z, eps), &(q + qdot * eps));
    let bwd = ball_barriers(&drift_world(world, z, -eps), &(q - qdot * eps));
    fwd.iter().zip(&bwd).map(|(f, b)| (f - b) / (2.0 * eps)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BallObstacle;

    fn v(xs: &[f64]) -> Vector {
        Vector::from_column_slice(xs)
    }

    #[test]
    fn projection_onto_half_space() {
        let h = Matrix::identity(2, 2) * 2.0;
        let c = v(&[-2.0, 0.0]);
        let a = Matrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let Enumerated::Optimal { minimizer, multipliers, active } = enumerate_qp(&h, &c, &a, &v(&[0.0]), 1e-12) else {
            panic!("feasible");
        };
        assert!(minimizer.norm() < 1e-14);
        assert_eq!(active, vec![0]);
        assert!((multipliers[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn contradictory_rows() {
        let h = Matrix::identity(1, 1);
        let a = Matrix::from_row_slice(2, 1, &[1.0, -1.0]);
        assert_eq!(enumerate_qp(&h, &v(&[0.0]), &a, &v(&[-1.0, -1.0]), 1e-12), Enumerated::Infeasible);
    }

    #[test]
    fn barrier_values_by_hand() {
        let w = BallWorld::new(v(&[0.0, 0.0]), 5.0, vec![BallObstacle::new(v(&[2.0, 0.0]), 1.0).unwrap()]).unwrap();
        assert_eq!(ball_barriers(&w, &v(&[0.0, 0.0])), vec![3.0, 25.0, 12.0]);
    }
}
