//! Dense two-phase simplex for small inequality-form linear programs.
//!
//! Problems are stated as `maximize cᵀx s.t. A x ≤ b` with free variables.
//! Internally each free variable is split into a nonnegative pair, a slack is
//! added per row, and rows with negative right-hand side get an artificial
//! variable for phase one. Entering columns follow Bland's rule; the
//! leaving row uses a Harris two-pass ratio test for numerical stability.

use serde::{Deserialize, Serialize};

const PIVOT_EPS: f64 = 1e-9;
const HARRIS_TOL: f64 = 1e-10;
const FEAS_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LpStatus {
    Optimal,
    Infeasible,
    Unbounded,
    /// Pivot cap reached before a certificate was found.
    NumericalFailure,
}

/// `maximize objectiveᵀx` subject to `rows[i]ᵀx ≤ rhs[i]`, `x` free.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LpProblem {
    pub objective: Vec<f64>,
    pub rows: Vec<Vec<f64>>,
    pub rhs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LpSolution {
    pub status: LpStatus,
    pub x: Vec<f64>,
    pub value: f64,
    /// Nonnegative row multipliers; `rhsᵀdual` equals `value` at optimality.
    pub dual: Vec<f64>,
    pub pivots: usize,
}

impl LpProblem {
    pub fn maximize(objective: Vec<f64>) -> Self {
        Self {
            objective,
            rows: Vec::new(),
            rhs: Vec::new(),
        }
    }

    /// Adds the row `coeffsᵀx ≤ bound`.
    pub fn le(mut self, coeffs: Vec<f64>, bound: f64) -> Self {
        self.push_le(coeffs, bound);
        self
    }

    pub fn push_le(&mut self, coeffs: Vec<f64>, bound: f64) {
        assert_eq!(coeffs.len(), self.objective.len(), "row width mismatch");
        self.rows.push(coeffs);
        self.rhs.push(bound);
    }

    pub fn num_vars(&self) -> usize {
        self.objective.len()
    }

    /// Largest amount by which `x` violates any row.
    pub fn max_violation(&self, x: &[f64]) -> f64 {
        self.rows
            .iter()
            .zip(&self.rhs)
            .map(|(row, b)| dot(row, x) - b)
            .fold(0.0, f64::max)
    }

    pub fn dual_value(&self, dual: &[f64]) -> f64 {
        dot(&self.rhs, dual)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| p * q).sum()
}

struct Tableau {
    /// `m` constraint rows followed by the objective row; last column is the rhs.
    t: Vec<Vec<f64>>,
    basis: Vec<usize>,
    m: usize,
    cols: usize,
    pivots: usize,
}

enum PhaseOutcome {
    Optimal,
    Unbounded,
    Capped,
}

impl Tableau {
    fn rhs(&self, r: usize) -> f64 {
        self.t[r][self.cols]
    }

    fn pivot(&mut self, row: usize, col: usize) {
        self.pivots += 1;
        let p = self.t[row][col];
        for v in self.t[row].iter_mut() {
            *v /= p;
        }
        let pivot_row = self.t[row].clone();
        for (r, line) in self.t.iter_mut().enumerate() {
            if r == row {
                continue;
            }
            let f = line[col];
            if f != 0.0 {
                for (v, pv) in line.iter_mut().zip(&pivot_row) {
                    *v -= f * pv;
                }
                line[col] = 0.0;
            }
        }
        self.basis[row] = col;
    }

    /// Minimizes the objective row (stored as reduced costs) over `allowed` columns.
    fn run(&mut self, allowed: usize, cap: usize) -> PhaseOutcome {
        let obj = self.m;
        loop {
            if self.pivots >= cap {
                return PhaseOutcome::Capped;
            }
            // Bland: lowest-index column with negative reduced cost.
            let Some(col) = (0..allowed).find(|&c| self.t[obj][c] < -PIVOT_EPS) else {
                return PhaseOutcome::Optimal;
            };
            // Harris ratio test: among rows within a small feasibility
            // tolerance of the minimum ratio, pivot on the largest entry.
            let mut bound = f64::INFINITY;
            for r in 0..self.m {
                let a = self.t[r][col];
                if a > PIVOT_EPS {
                    bound = bound.min((self.rhs(r).max(0.0) + HARRIS_TOL) / a);
                }
            }
            if !bound.is_finite() {
                return PhaseOutcome::Unbounded;
            }
            let mut best: Option<usize> = None;
            for r in 0..self.m {
                let a = self.t[r][col];
                if a > PIVOT_EPS && self.rhs(r).max(0.0) / a <= bound {
                    best = match best {
                        Some(br)
                            if self.t[br][col] > a
                                || (self.t[br][col] == a && self.basis[br] < self.basis[r]) =>
                        {
                            Some(br)
                        }
                        _ => Some(r),
                    };
                }
            }
            let row = best.expect("a row attains the Harris bound");
            self.pivot(row, col);
            for r in 0..self.m {
                let v = self.t[r][self.cols];
                if v < 0.0 && v > -HARRIS_TOL {
                    self.t[r][self.cols] = 0.0;
                }
            }
        }
    }
}

/// Solves the problem; never panics on degenerate input.
pub fn solve_lp(problem: &LpProblem) -> LpSolution {
    let n = problem.num_vars();
    let m = problem.rows.len();
    // Columns: x⁺ (n), x⁻ (n), slacks (m), artificials (m).
    let n_struct = 2 * n + m;
    let cols = n_struct + m;
    let cap = 50 * (cols + m + 10);

    let mut t = vec![vec![0.0; cols + 1]; m + 1];
    let mut basis = vec![0; m];
    let mut needs_artificial = vec![false; m];
    for i in 0..m {
        let sign = if problem.rhs[i] < 0.0 { -1.0 } else { 1.0 };
        for j in 0..n {
            t[i][j] = sign * problem.rows[i][j];
            t[i][n + j] = -sign * problem.rows[i][j];
        }
        t[i][2 * n + i] = sign;
        t[i][cols] = sign * problem.rhs[i];
        if sign < 0.0 {
            needs_artificial[i] = true;
            t[i][n_struct + i] = 1.0;
            basis[i] = n_struct + i;
        } else {
            basis[i] = 2 * n + i;
        }
    }
    let mut tab = Tableau {
        t,
        basis,
        m,
        cols,
        pivots: 0,
    };

    let failed = |status: LpStatus, pivots: usize| LpSolution {
        status,
        x: vec![0.0; n],
        value: f64::NAN,
        dual: vec![0.0; m],
        pivots,
    };

    if needs_artificial.iter().any(|&a| a) {
        // Phase one: minimize the sum of artificials.
        for i in 0..m {
            if needs_artificial[i] {
                for c in 0..=cols {
                    let v = tab.t[i][c];
                    tab.t[m][c] -= v;
                }
                tab.t[m][n_struct + i] = 0.0;
            }
        }
        match tab.run(cols, cap) {
            PhaseOutcome::Capped => return failed(LpStatus::NumericalFailure, tab.pivots),
            PhaseOutcome::Unbounded => return failed(LpStatus::NumericalFailure, tab.pivots),
            PhaseOutcome::Optimal => {}
        }
        if -tab.t[m][cols] > FEAS_EPS * (1.0 + max_abs(&problem.rhs)) {
            return failed(LpStatus::Infeasible, tab.pivots);
        }
        // Drive remaining artificials out of the basis where possible.
        for r in 0..m {
            if tab.basis[r] >= n_struct {
                let best = (0..n_struct)
                    .filter(|&c| tab.t[r][c].abs() > PIVOT_EPS)
                    .max_by(|&a, &b| tab.t[r][a].abs().total_cmp(&tab.t[r][b].abs()));
                if let Some(c) = best {
                    tab.pivot(r, c);
                }
            }
        }
        for line in tab.t.iter_mut() {
            for v in line[n_struct..cols].iter_mut() {
                *v = 0.0;
            }
        }
    }

    // Phase two objective: minimize −cᵀx expressed in reduced costs.
    let obj = &mut tab.t[m];
    obj.iter_mut().for_each(|v| *v = 0.0);
    for j in 0..n {
        obj[j] = -problem.objective[j];
        obj[n + j] = problem.objective[j];
    }
    for r in 0..m {
        let b = tab.basis[r];
        let f = tab.t[m][b];
        if f != 0.0 {
            for c in 0..=cols {
                let v = tab.t[r][c];
                tab.t[m][c] -= f * v;
            }
        }
    }
    match tab.run(n_struct, cap) {
        PhaseOutcome::Capped => return failed(LpStatus::NumericalFailure, tab.pivots),
        PhaseOutcome::Unbounded => return failed(LpStatus::Unbounded, tab.pivots),
        PhaseOutcome::Optimal => {}
    }

    let mut split = vec![0.0; 2 * n];
    for r in 0..m {
        let b = tab.basis[r];
        if b < 2 * n {
            split[b] = tab.rhs(r);
        }
    }
    let x: Vec<f64> = (0..n).map(|j| split[j] - split[n + j]).collect();
    // Reduced cost of slack i equals the multiplier of row i; negating a row
    // flips both the row dual and the slack sign, so no correction is needed.
    let dual: Vec<f64> = (0..m).map(|i| tab.t[m][2 * n + i].max(0.0)).collect();
    let value = dot(&problem.objective, &x);
    let scale = 1.0 + max_abs(&problem.rhs) + max_abs(&x);
    if !x.iter().all(|v| v.is_finite()) || problem.max_violation(&x) > 1e-7 * scale {
        return failed(LpStatus::NumericalFailure, tab.pivots);
    }
    LpSolution {
        status: LpStatus::Optimal,
        x,
        value,
        dual,
        pivots: tab.pivots,
    }
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |a, b| a.max(b.abs()))
}
