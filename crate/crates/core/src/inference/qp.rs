//! Strictly convex quadratic programs over a box, by projected Newton.
//!
//! Minimizes `½xᵀQx − bᵀx` subject to `lo ≤ x_i ≤ hi`. Each iteration fixes
//! the ε-active bounds, takes a Newton step on the free block and searches
//! along the projection arc with an Armijo rule. When the free-block system
//! cannot be factored the iteration falls back to a diagonally scaled
//! projected gradient step.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

const ARMIJO_SIGMA: f64 = 1e-4;
const MAX_ITER: usize = 200;

/// Which bound, if any, a coordinate sits on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundState {
    Free,
    Lower,
    Upper,
}

#[derive(Debug, Clone)]
pub struct BoxQpSolution {
    pub x: DVector<f64>,
    pub state: Vec<BoundState>,
    /// Non-negative Lagrange multipliers of the active faces (zero on free
    /// coordinates).
    pub multipliers: DVector<f64>,
    /// `‖x − clamp(x − g/diag(Q))‖∞` at the returned point.
    pub kkt_residual: f64,
    pub iterations: usize,
}

fn objective(q: &DMatrix<f64>, b: &DVector<f64>, x: &DVector<f64>) -> f64 {
    0.5 * x.dot(&(q * x)) - b.dot(x)
}

fn scaled_residual(x: &DVector<f64>, g: &DVector<f64>, diag: &DVector<f64>, lo: f64, hi: f64) -> f64 {
    x.iter()
        .zip(g.iter())
        .zip(diag.iter())
        .map(|((xi, gi), di)| (xi - (xi - gi / di).clamp(lo, hi)).abs())
        .fold(0.0, f64::max)
}

/// Solves the box-constrained QP from a starting point (clamped into the box).
pub fn solve_box_qp(
    q: &DMatrix<f64>,
    b: &DVector<f64>,
    lo: f64,
    hi: f64,
    x0: &DVector<f64>,
    tol: f64,
) -> Result<BoxQpSolution> {
    let n = b.len();
    if q.shape() != (n, n) || x0.len() != n {
        return Err(Error::invalid("box QP dimension mismatch"));
    }
    if !(lo < hi) {
        return Err(Error::invalid(format!("empty box [{lo}, {hi}]")));
    }
    let diag = q.diagonal();
    if diag.iter().any(|d| !(*d > 0.0)) {
        return Err(Error::numeric("box QP matrix has a non-positive diagonal"));
    }
    let mut x = x0.map(|v| v.clamp(lo, hi));
    let mut g = q * &x - b;
    let mut residual = scaled_residual(&x, &g, &diag, lo, hi);
    let mut iterations = 0;

    while residual > tol && iterations < MAX_ITER {
        iterations += 1;
        let eps = residual.min(1e-3 * (hi - lo));
        let active: Vec<bool> = (0..n)
            .map(|i| (x[i] <= lo + eps && g[i] > 0.0) || (x[i] >= hi - eps && g[i] < 0.0))
            .collect();
        let free: Vec<usize> = (0..n).filter(|&i| !active[i]).collect();

        let mut dir = DVector::zeros(n);
        let mut newton = false;
        if !free.is_empty() {
            let qff = DMatrix::from_fn(free.len(), free.len(), |a, c| q[(free[a], free[c])]);
            let gf = DVector::from_iterator(free.len(), free.iter().map(|&i| -g[i]));
            if let Some(chol) = qff.cholesky() {
                let df = chol.solve(&gf);
                for (k, &i) in free.iter().enumerate() {
                    dir[i] = df[k];
                }
                newton = true;
            }
        }
        for i in 0..n {
            if active[i] || !newton {
                dir[i] = -g[i] / diag[i];
            }
        }

        let f0 = objective(q, b, &x);
        let mut t = 1.0;
        let mut accepted = None;
        while t > 1e-14 {
            let trial = DVector::from_fn(n, |i, _| (x[i] + t * dir[i]).clamp(lo, hi));
            let decrease: f64 = (0..n)
                .map(|i| {
                    if active[i] || !newton {
                        g[i] * (x[i] - trial[i])
                    } else {
                        -t * g[i] * dir[i]
                    }
                })
                .sum();
            let f1 = objective(q, b, &trial);
            if f0 - f1 >= ARMIJO_SIGMA * decrease {
                accepted = Some(trial);
                break;
            }
            t *= 0.5;
        }
        let Some(next) = accepted else {
            // No decrease is representable; the point is optimal to rounding.
            break;
        };
        x = next;
        g = q * &x - b;
        residual = scaled_residual(&x, &g, &diag, lo, hi);
    }

    if !x.iter().all(|v| v.is_finite()) {
        return Err(Error::numeric("box QP produced non-finite iterate"));
    }
    let mut state = Vec::with_capacity(n);
    let mut multipliers = DVector::zeros(n);
    for i in 0..n {
        let s = if x[i] <= lo && g[i] >= 0.0 {
            multipliers[i] = g[i];
            BoundState::Lower
        } else if x[i] >= hi && g[i] <= 0.0 {
            multipliers[i] = -g[i];
            BoundState::Upper
        } else {
            BoundState::Free
        };
        state.push(s);
    }
    Ok(BoxQpSolution {
        x,
        state,
        multipliers,
        kkt_residual: residual,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interior_solution_is_unconstrained_minimizer() {
        let q = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let b = DVector::from_vec(vec![1.0, -0.5]);
        let sol = solve_box_qp(&q, &b, -10.0, 10.0, &DVector::zeros(2), 1e-12).unwrap();
        let exact = q.clone().cholesky().unwrap().solve(&b);
        assert!((sol.x - exact).amax() < 1e-12);
        assert!(sol.state.iter().all(|s| *s == BoundState::Free));
    }

    #[test]
    fn scalar_projects_to_nearest_face() {
        let q = DMatrix::from_element(1, 1, 2.0);
        let b = DVector::from_element(1, 200.0);
        let sol = solve_box_qp(&q, &b, -90.0, 20.0, &DVector::zeros(1), 1e-10).unwrap();
        assert_eq!(sol.x[0], 20.0);
        assert_eq!(sol.state[0], BoundState::Upper);
        assert!((sol.multipliers[0] - 160.0).abs() < 1e-12);
    }

    #[test]
    fn coupled_active_set() {
        // unconstrained minimizer (3, -3) lies outside [-1, 1]²
        let q = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let b = DVector::from_vec(vec![3.0, -3.0]);
        let sol = solve_box_qp(&q, &b, -1.0, 1.0, &DVector::zeros(2), 1e-12).unwrap();
        assert_eq!(sol.x.as_slice(), &[1.0, -1.0]);
        assert!(sol.multipliers.iter().all(|m| *m >= 0.0));
    }

    #[test]
    fn rejects_empty_box() {
        let q = DMatrix::identity(1, 1);
        let b = DVector::zeros(1);
        assert!(solve_box_qp(&q, &b, 1.0, 1.0, &b, 1e-8).is_err());
    }
}
