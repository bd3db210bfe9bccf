//! Dense strictly convex QP via the Goldfarb–Idnani dual active-set method.
//!
//! Solves `minimize ½xᵀGx + aᵀx  s.t.  Cx ≥ b` with `G` positive definite.
//! The method starts from the unconstrained minimizer and adds violated
//! constraints one at a time, keeping the iterate dual feasible. The factor
//! `J = L⁻ᵀ` (with `G = LLᵀ`) and the triangular `R` satisfy `Jᵀ N = [R; 0]`
//! for the matrix `N` of active normals; both are updated with Givens
//! rotations.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QpError {
    #[error("Hessian is not positive definite")]
    NotPositiveDefinite,
    #[error("constraints are inconsistent")]
    Infeasible,
    #[error("active-set iteration limit reached")]
    IterationLimit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub x: DVector<f64>,
    /// One nonnegative multiplier per constraint row; zero when inactive.
    pub multipliers: DVector<f64>,
    pub objective: f64,
    pub active: Vec<usize>,
    pub iterations: usize,
}

/// Rows of `c` are constraint normals.
pub fn solve_qp(
    g: &DMatrix<f64>,
    a: &DVector<f64>,
    c: &DMatrix<f64>,
    b: &DVector<f64>,
) -> Result<QpSolution, QpError> {
    let n = g.nrows();
    let m = c.nrows();
    assert_eq!(g.ncols(), n);
    assert_eq!(a.len(), n);
    assert_eq!(c.ncols(), n);
    assert_eq!(b.len(), m);

    let chol = g.clone().cholesky().ok_or(QpError::NotPositiveDefinite)?;
    let mut x = -chol.solve(a);
    let l = chol.l();
    let mut j = l
        .transpose()
        .solve_upper_triangular(&DMatrix::identity(n, n))
        .ok_or(QpError::NotPositiveDefinite)?;
    let mut r = DMatrix::<f64>::zeros(n, n);
    let mut active: Vec<usize> = Vec::with_capacity(n);
    let mut u: Vec<f64> = Vec::with_capacity(n);
    let norms: Vec<f64> = (0..m).map(|i| c.row(i).norm().max(1e-300)).collect();

    let cap = 20 * (n + m) + 50;
    let mut iterations = 0;
    let mut d = DVector::<f64>::zeros(n);
    let mut z = DVector::<f64>::zeros(n);
    let mut rvec = vec![0.0; n];

    'outer: loop {
        // Step 1: most violated constraint (scaled by its normal length).
        let mut p = None;
        let mut worst = 0.0;
        for i in 0..m {
            if active.contains(&i) {
                continue;
            }
            let s = c.row(i).dot(&x.transpose()) - b[i];
            let tol = 1e-11 * (1.0 + b[i].abs());
            if s < -tol {
                let scaled = s / norms[i];
                if scaled < worst {
                    worst = scaled;
                    p = Some(i);
                }
            }
        }
        let Some(p) = p else {
            break;
        };
        let np = c.row(p).transpose();
        let mut u_plus = 0.0;

        // Step 2: move along the primal/dual directions for constraint p.
        loop {
            iterations += 1;
            if iterations > cap {
                return Err(QpError::IterationLimit);
            }
            let q = active.len();
            d.gemv_tr(1.0, &j, &np, 0.0);
            z.fill(0.0);
            for k in q..n {
                z.axpy(d[k], &j.column(k), 1.0);
            }
            for i in (0..q).rev() {
                let mut s = d[i];
                for k in i + 1..q {
                    s -= r[(i, k)] * rvec[k];
                }
                rvec[i] = s / r[(i, i)];
            }

            let mut t1 = f64::INFINITY;
            let mut drop = None;
            for k in 0..q {
                if rvec[k] > 1e-14 {
                    let ratio = u[k] / rvec[k];
                    if ratio < t1 {
                        t1 = ratio;
                        drop = Some(k);
                    }
                }
            }
            let zn = z.dot(&np);
            let t2 = if z.norm() > 1e-12 * d.norm().max(1e-300) && zn > 1e-300 {
                -(np.dot(&x) - b[p]) / zn
            } else {
                f64::INFINITY
            };
            let t = t1.min(t2);
            if !t.is_finite() {
                return Err(QpError::Infeasible);
            }
            if t2.is_finite() {
                x.axpy(t, &z, 1.0);
            }
            for k in 0..q {
                u[k] -= t * rvec[k];
            }
            u_plus += t;

            if t2.is_finite() && t2 <= t1 {
                add_constraint(&mut j, &mut r, &mut d, q);
                active.push(p);
                u.push(u_plus);
                continue 'outer;
            }
            let k = drop.expect("partial step has a blocking constraint");
            drop_constraint(&mut j, &mut r, k, q);
            active.remove(k);
            u.remove(k);
        }
    }

    let mut multipliers = DVector::zeros(m);
    for (&i, &ui) in active.iter().zip(&u) {
        multipliers[i] = ui.max(0.0);
    }
    let objective = 0.5 * x.dot(&(g * &x)) + a.dot(&x);
    Ok(QpSolution {
        x,
        multipliers,
        objective,
        active,
        iterations,
    })
}

fn givens(a: f64, b: f64) -> (f64, f64, f64) {
    let h = a.hypot(b);
    if h == 0.0 {
        (1.0, 0.0, 0.0)
    } else {
        (a / h, b / h, h)
    }
}

fn rotate_columns(j: &mut DMatrix<f64>, k0: usize, k1: usize, c: f64, s: f64) {
    for i in 0..j.nrows() {
        let (a, b) = (j[(i, k0)], j[(i, k1)]);
        j[(i, k0)] = c * a + s * b;
        j[(i, k1)] = -s * a + c * b;
    }
}

/// Appends the normal whose image `d = Jᵀn` is given as column `q` of `R`.
fn add_constraint(j: &mut DMatrix<f64>, r: &mut DMatrix<f64>, d: &mut DVector<f64>, q: usize) {
    let n = j.nrows();
    for k in (q + 1..n).rev() {
        let (c, s, h) = givens(d[k - 1], d[k]);
        if s == 0.0 {
            continue;
        }
        d[k - 1] = h;
        d[k] = 0.0;
        rotate_columns(j, k - 1, k, c, s);
    }
    for i in 0..=q {
        r[(i, q)] = d[i];
    }
}

/// Removes active constraint `k` of `q` and retriangularizes `R`.
fn drop_constraint(j: &mut DMatrix<f64>, r: &mut DMatrix<f64>, k: usize, q: usize) {
    for col in k..q - 1 {
        for row in 0..=col + 1 {
            r[(row, col)] = r[(row, col + 1)];
        }
    }
    for row in 0..q {
        r[(row, q - 1)] = 0.0;
    }
    for col in k..q - 1 {
        let (c, s, h) = givens(r[(col, col)], r[(col + 1, col)]);
        if s == 0.0 {
            continue;
        }
        r[(col, col)] = h;
        r[(col + 1, col)] = 0.0;
        for kk in col + 1..q - 1 {
            let (a, b) = (r[(col, kk)], r[(col + 1, kk)]);
            r[(col, kk)] = c * a + s * b;
            r[(col + 1, kk)] = -s * a + c * b;
        }
        rotate_columns(j, col, col + 1, c, s);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{solve_lp, LpProblem, LpStatus};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn kkt_residual(
        g: &DMatrix<f64>,
        a: &DVector<f64>,
        c: &DMatrix<f64>,
        b: &DVector<f64>,
        s: &QpSolution,
    ) -> f64 {
        let stat = g * &s.x + a - c.transpose() * &s.multipliers;
        let slack = c * &s.x - b;
        let viol = slack.iter().fold(0.0f64, |m, v| m.max(-v));
        let comp = slack
            .iter()
            .zip(s.multipliers.iter())
            .fold(0.0f64, |m, (sl, l)| m.max((sl * l).abs()));
        stat.amax().max(viol).max(comp)
    }

    #[test]
    fn small_textbook_problem() {
        // min ½x² + ½y² + x  s.t. x + 2y ≥ 1
        let g = DMatrix::identity(2, 2);
        let a = DVector::from_vec(vec![1.0, 0.0]);
        let c = DMatrix::from_row_slice(1, 2, &[1.0, 2.0]);
        let b = DVector::from_vec(vec![1.0]);
        let s = solve_qp(&g, &a, &c, &b).unwrap();
        assert!((s.x[0] + 0.6).abs() < 1e-12 && (s.x[1] - 0.8).abs() < 1e-12);
        assert!((s.multipliers[0] - 0.4).abs() < 1e-12);
    }

    #[test]
    fn unconstrained_minimum_when_inactive() {
        let g = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let a = DVector::from_vec(vec![-1.0, 1.0]);
        let c = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let b = DVector::from_vec(vec![-10.0]);
        let s = solve_qp(&g, &a, &c, &b).unwrap();
        let expect = -g.clone().cholesky().unwrap().solve(&a);
        assert!((s.x - expect).amax() < 1e-12);
        assert!(s.active.is_empty());
    }

    #[test]
    fn detects_infeasibility() {
        let g = DMatrix::identity(1, 1);
        let a = DVector::zeros(1);
        let c = DMatrix::from_row_slice(2, 1, &[1.0, -1.0]);
        let b = DVector::from_vec(vec![1.0, 0.0]);
        assert_eq!(solve_qp(&g, &a, &c, &b), Err(QpError::Infeasible));
    }

    #[test]
    fn random_problems_satisfy_kkt() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..300 {
            let n = rng.gen_range(1..8);
            let m = rng.gen_range(0..25);
            let f = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
            let g = &f * f.transpose() + DMatrix::identity(n, n) * 0.1;
            let a = DVector::from_fn(n, |_, _| rng.gen_range(-5.0..5.0));
            let c = DMatrix::from_fn(m, n, |_, _| rng.gen_range(-1.0..1.0));
            // feasible by construction: b below C x0 for a random x0
            let x0 = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
            let b = &c * &x0 - DVector::from_fn(m, |_, _| rng.gen_range(0.0..1.0));
            let s = solve_qp(&g, &a, &c, &b).unwrap();
            assert!(kkt_residual(&g, &a, &c, &b, &s) < 1e-8, "n={n} m={m}");
        }
    }

    #[test]
    fn infeasibility_matches_lp_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut seen = [0, 0];
        for _ in 0..200 {
            let n = 2;
            let m = rng.gen_range(3..7);
            let c = DMatrix::from_fn(m, n, |_, _| rng.gen_range(-1.0..1.0));
            let b = DVector::from_fn(m, |_, _| rng.gen_range(-0.5..1.0));
            let mut lp = LpProblem::maximize(vec![0.0; n]);
            for i in 0..m {
                lp.push_le(vec![-c[(i, 0)], -c[(i, 1)]], -b[i]);
            }
            let feasible = solve_lp(&lp).status != LpStatus::Infeasible;
            let qp = solve_qp(&DMatrix::identity(n, n), &DVector::zeros(n), &c, &b);
            seen[feasible as usize] += 1;
            assert_eq!(qp.is_ok(), feasible);
        }
        assert!(seen[0] > 0 && seen[1] > 0);
    }
}
