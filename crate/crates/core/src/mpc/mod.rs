//! CBF-constrained model predictive control over a chain of free cells.
//!
//! `MPC(i)` steers the LIP output toward the waypoint `w_{i+1}` while the
//! static barriers of cell `H_i` and the barriers of nearby moving ellipses
//! decay no faster than the exponential CBF rates allow. States are
//! eliminated through the affine step map, so the decision vector is the
//! stacked input sequence `[u_k … u_{k+N−1}]`.

mod qp;

pub use qp::{solve_qp, QpError, QpSolution};

use crate::freespace::FreeSpaceChain;
use crate::geometry::{Point2, Polytope};
use crate::lip::{
    angle_diff, output, step_matrices, wrap_angle, LipInput, LipParams, LipState, Stance,
    StanceBounds, StateVector,
};
use nalgebra::{DMatrix, DVector, Matrix2};
use serde::{Deserialize, Serialize};
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CbfParams {
    pub gamma_static: f64,
    pub gamma_moving: f64,
}

impl Default for CbfParams {
    fn default() -> Self {
        Self {
            gamma_static: 0.1,
            gamma_moving: 0.2,
        }
    }
}

impl CbfParams {
    pub fn is_valid(&self) -> bool {
        let ok = |g: f64| g > 0.0 && g <= 1.0;
        ok(self.gamma_static) && ok(self.gamma_moving)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathKnot {
    pub time_s: f64,
    #[serde(rename = "position_m")]
    pub position: Point2,
}

/// Elliptical obstacle following a known piecewise-linear path.
///
/// Outside the knot times the center is held at the first or last knot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MovingObstacle {
    /// Inflated semi-axes `(α, β)`.
    #[serde(rename = "semi_axes_m")]
    pub semi_axes: [f64; 2],
    pub path: Vec<PathKnot>,
    pub orientation_rad: f64,
    pub angular_rate_radps: f64,
    /// `null` in JSON when unlimited.
    #[serde(rename = "activation_radius_m", with = "unlimited")]
    pub activation_radius: f64,
}

mod unlimited {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_some(v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

impl MovingObstacle {
    pub fn stationary(center: Point2, semi_axes: [f64; 2], orientation_rad: f64) -> Self {
        Self {
            semi_axes,
            path: vec![PathKnot {
                time_s: 0.0,
                position: center,
            }],
            orientation_rad,
            angular_rate_radps: 0.0,
            activation_radius: f64::INFINITY,
        }
    }

    /// Circle moving from `start` at constant `velocity` for `duration_s`.
    pub fn straight_line(start: Point2, velocity: Point2, duration_s: f64, radius: f64) -> Self {
        Self {
            semi_axes: [radius, radius],
            path: vec![
                PathKnot {
                    time_s: 0.0,
                    position: start,
                },
                PathKnot {
                    time_s: duration_s,
                    position: start + velocity * duration_s,
                },
            ],
            orientation_rad: 0.0,
            angular_rate_radps: 0.0,
            activation_radius: f64::INFINITY,
        }
    }

    pub fn with_activation_radius(mut self, r: f64) -> Self {
        self.activation_radius = r;
        self
    }

    pub fn is_valid(&self) -> bool {
        self.semi_axes.iter().all(|&a| a > 0.0 && a.is_finite())
            && !self.path.is_empty()
            && self.path.windows(2).all(|w| w[1].time_s > w[0].time_s)
            && self.activation_radius > 0.0
    }

    fn segment(&self, t: f64) -> Option<(&PathKnot, &PathKnot)> {
        self.path
            .windows(2)
            .find(|w| t >= w[0].time_s && t < w[1].time_s)
            .map(|w| (&w[0], &w[1]))
    }

    pub fn center(&self, t: f64) -> Point2 {
        let first = self.path[0];
        let last = self.path[self.path.len() - 1];
        if t <= first.time_s {
            return first.position;
        }
        if t >= last.time_s {
            return last.position;
        }
        let (a, b) = self.segment(t).expect("t lies inside the knot span");
        let s = (t - a.time_s) / (b.time_s - a.time_s);
        a.position.lerp(b.position, s)
    }

    /// Velocity of the segment active at `t` (right-continuous).
    pub fn velocity(&self, t: f64) -> Point2 {
        match self.segment(t) {
            Some((a, b)) => (b.position - a.position) * (1.0 / (b.time_s - a.time_s)),
            None => Point2::new(0.0, 0.0),
        }
    }

    pub fn orientation(&self, t: f64) -> f64 {
        wrap_angle(self.orientation_rad + self.angular_rate_radps * t)
    }

    pub fn shape_matrix(&self, t: f64) -> Matrix2<f64> {
        ellipse_shape_matrix(self.semi_axes[0], self.semi_axes[1], self.orientation(t))
    }

    /// Center at `t` extrapolated with the velocity observed at `t_now`.
    pub fn predicted_center(&self, t_now: f64, t: f64) -> Point2 {
        self.center(t_now) + self.velocity(t_now) * (t - t_now)
    }

    pub fn is_active(&self, p: Point2, t: f64) -> bool {
        p.distance(self.center(t)) < self.activation_radius
    }
}

/// `P = Rᵀ diag(1/α², 1/β²) R` with `R` the rotation by `φ`.
pub fn ellipse_shape_matrix(alpha: f64, beta: f64, phi: f64) -> Matrix2<f64> {
    let (s, c) = phi.sin_cos();
    let r = Matrix2::new(c, -s, s, c);
    let d = Matrix2::new(1.0 / (alpha * alpha), 0.0, 0.0, 1.0 / (beta * beta));
    r.transpose() * d * r
}

fn quad_form(p: &Matrix2<f64>, q: Point2) -> f64 {
    q.x * (p[(0, 0)] * q.x + p[(0, 1)] * q.y) + q.y * (p[(1, 0)] * q.x + p[(1, 1)] * q.y)
}

fn mat_vec(p: &Matrix2<f64>, q: Point2) -> Point2 {
    Point2::new(
        p[(0, 0)] * q.x + p[(0, 1)] * q.y,
        p[(1, 0)] * q.x + p[(1, 1)] * q.y,
    )
}

/// `h^d = (Cx − p^d)ᵀ P^d (Cx − p^d) − 1`.
pub fn moving_barrier(x: &LipState, obs: &MovingObstacle, t: f64) -> f64 {
    quad_form(&obs.shape_matrix(t), output(x) - obs.center(t)) - 1.0
}

/// `h_ij(x) = b_j − r_jᵀ C x` for every face of `cell`.
pub fn static_barriers(cell: &Polytope, x: &LipState) -> Vec<f64> {
    let p = output(x);
    cell.rows().iter().map(|h| h.slack(p)).collect()
}

pub fn cbf_residual(h_next: f64, h_now: f64, gamma: f64) -> f64 {
    h_next - (1.0 - gamma) * h_now
}

/// Desired `[w; θ; 0; 0]` in reorganized order. `theta` is unwrapped to lie
/// within π of the heading it was built from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetState {
    pub position: Point2,
    pub theta: f64,
}

impl TargetState {
    pub fn reorganized(&self) -> [f64; 5] {
        [self.position.x, self.position.y, self.theta, 0.0, 0.0]
    }
}

pub fn build_target(x: &LipState, w_next: Point2) -> TargetState {
    let d = w_next - output(x);
    let theta = if d.norm() < 1e-6 {
        x.theta
    } else {
        x.theta + angle_diff(d.y.atan2(d.x), x.theta)
    };
    TargetState {
        position: w_next,
        theta,
    }
}

/// `Sx − Sx^des` with the heading error taken the short way round.
fn tracking_error(x: &LipState, target: &TargetState) -> [f64; 5] {
    [
        x.x - target.position.x,
        x.y - target.position.y,
        angle_diff(x.theta, target.theta),
        x.xdot,
        x.ydot,
    ]
}

fn weighted_sq(e: &[f64], w: &[f64]) -> f64 {
    e.iter().zip(w).map(|(e, w)| w * e * e).sum()
}

pub fn terminal_cost(x: &LipState, target: &TargetState, w1: &[f64; 5]) -> f64 {
    weighted_sq(&tracking_error(x, target), w1)
}

pub fn stage_cost(
    x: &LipState,
    u: &LipInput,
    target: &TargetState,
    w2: &[f64; 5],
    w3: &[f64; 5],
) -> f64 {
    weighted_sq(&tracking_error(x, target), w2) + weighted_sq(&[u.ux, u.uy, u.utheta], &w3[..3])
}

/// Reorganized weights mapped back onto state order `[x, ẋ, y, ẏ, θ]`.
fn state_order(w: &[f64; 5]) -> [f64; 5] {
    [w[0], w[3], w[1], w[4], w[2]]
}

fn error_state_order(x: &LipState, target: &TargetState) -> [f64; 5] {
    let e = tracking_error(x, target);
    [e[0], e[3], e[1], e[4], e[2]]
}

/// Gradient of [`terminal_cost`] in state order.
pub fn terminal_cost_gradient(x: &LipState, target: &TargetState, w1: &[f64; 5]) -> [f64; 5] {
    let (w, e) = (state_order(w1), error_state_order(x, target));
    std::array::from_fn(|i| 2.0 * w[i] * e[i])
}

/// Gradient of [`stage_cost`] with respect to the state and the input.
pub fn stage_cost_gradient(
    x: &LipState,
    u: &LipInput,
    target: &TargetState,
    w2: &[f64; 5],
    w3: &[f64; 5],
) -> ([f64; 5], [f64; 3]) {
    let gu = [u.ux, u.uy, u.utheta];
    (
        terminal_cost_gradient(x, target, w2),
        std::array::from_fn(|i| 2.0 * w3[i] * gu[i]),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MpcConfig {
    #[serde(rename = "horizon_steps")]
    pub horizon: usize,
    pub w_terminal: [f64; 5],
    pub w_stage: [f64; 5],
    /// Input weights; only the first three entries apply.
    pub w_input: [f64; 5],
    pub cbf: CbfParams,
    pub kkt_tolerance: f64,
    pub max_sqp_iterations: usize,
    /// Output distance to the goal that counts as arrival.
    pub goal_tolerance_m: f64,
    /// Cells shrink and moving ellipses grow by this much inside the program,
    /// covering the COM's excursion between step boundaries.
    pub safety_margin_m: f64,
}

impl Default for MpcConfig {
    fn default() -> Self {
        Self {
            horizon: 3,
            w_terminal: [5.0, 5.0, 2.0, 10.0, 10.0],
            w_stage: [0.5, 0.5, 2.0, 10.0, 10.0],
            w_input: [30.0; 5],
            cbf: CbfParams::default(),
            kkt_tolerance: 1e-6,
            max_sqp_iterations: 50,
            goal_tolerance_m: 0.5,
            safety_margin_m: 0.04,
        }
    }
}

impl MpcConfig {
    pub fn with_horizon(mut self, n: usize) -> Self {
        self.horizon = n;
        self
    }

    pub fn is_valid(&self) -> bool {
        let nonneg = |w: &[f64; 5]| w.iter().all(|v| *v >= 0.0 && v.is_finite());
        self.horizon >= 1
            && nonneg(&self.w_terminal)
            && nonneg(&self.w_stage)
            && nonneg(&self.w_input)
            && self.w_input[..3].iter().all(|v| *v > 0.0)
            && self.cbf.is_valid()
            && self.kkt_tolerance > 0.0
            && self.max_sqp_iterations >= 1
            && self.goal_tolerance_m > 0.0
            && self.safety_margin_m >= 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MpcStatus {
    Solved,
    Infeasible,
    MaxIter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MpcSolution {
    /// `x_{k+1} … x_{k+N}`.
    pub states: Vec<LipState>,
    /// `u_k … u_{k+N−1}`.
    pub inputs: Vec<LipInput>,
    pub status: MpcStatus,
    pub kkt_residual: f64,
    pub max_violation: f64,
    pub objective: f64,
    pub terminal_cost: f64,
    pub solve_time_s: f64,
    pub iterations: usize,
    pub active_moving: usize,
}

impl MpcSolution {
    pub fn is_usable(&self) -> bool {
        self.status == MpcStatus::Solved
            || (self.status == MpcStatus::MaxIter && self.max_violation <= 1e-6)
    }

    /// Inputs shifted one step ahead with the last one repeated.
    pub fn shifted_inputs(&self) -> Vec<LipInput> {
        let mut u: Vec<LipInput> = self.inputs.iter().skip(1).copied().collect();
        if let Some(&last) = self.inputs.last() {
            u.push(last);
        }
        u
    }
}

/// Inputs to one `MPC(i)` solve.
#[derive(Debug, Clone, Copy)]
pub struct MpcProblem<'a> {
    pub cell_index: usize,
    pub x_init: LipState,
    pub chain: &'a FreeSpaceChain,
    pub obstacles: &'a [MovingObstacle],
    pub t_now: f64,
    /// Stance during the first step of the horizon.
    pub stance: Stance,
    pub lip: &'a LipParams,
    pub bounds: &'a StanceBounds,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConstraintKind {
    Reach,
    Heading,
    Travel,
    StaticCbf,
    MovingCbf,
}

struct MovingTrack {
    centers: Vec<Point2>,
    shape: Matrix2<f64>,
}

/// The single-shooting nonlinear program behind `MPC(i)`; constraints are
/// `g(z) ≥ 0`.
pub struct MpcProgram {
    horizon: usize,
    theta0: f64,
    stances: Vec<Stance>,
    bounds: StanceBounds,
    target: TargetState,
    /// `Φ_j x_init` for `j = 0 … N`.
    free: Vec<StateVector>,
    /// `∂x_j/∂z`, each `5 × 3N`.
    sens: Vec<DMatrix<f64>>,
    hessian: DMatrix<f64>,
    q_stage: [f64; 5],
    q_terminal: [f64; 5],
    w_input: [f64; 3],
    cell: Vec<(Point2, f64)>,
    moving: Vec<MovingTrack>,
    gamma_s: f64,
    gamma_m: f64,
    kinds: Vec<(usize, ConstraintKind)>,
}

impl MpcProgram {
    pub fn new(problem: &MpcProblem<'_>, cfg: &MpcConfig) -> Self {
        let n = cfg.horizon;
        let nz = 3 * n;
        let (a, b) = step_matrices(problem.lip);
        let x0 = problem.x_init.to_vector();
        let mut free = vec![x0];
        let mut sens = vec![DMatrix::zeros(5, nz)];
        for j in 0..n {
            free.push(a * free[j]);
            let mut s = DMatrix::<f64>::zeros(5, nz);
            s.copy_from(&(DMatrix::from_column_slice(5, 5, a.as_slice()) * &sens[j]));
            for r in 0..5 {
                for c in 0..3 {
                    s[(r, 3 * j + c)] += b[(r, c)];
                }
            }
            sens.push(s);
        }

        let q_stage = state_order(&cfg.w_stage);
        let q_terminal = state_order(&cfg.w_terminal);
        let w_input = [cfg.w_input[0], cfg.w_input[1], cfg.w_input[2]];
        let mut hessian = DMatrix::<f64>::zeros(nz, nz);
        for j in 1..=n {
            let q = if j == n { &q_terminal } else { &q_stage };
            let s = &sens[j];
            for r in 0..5 {
                if q[r] != 0.0 {
                    let row = s.row(r);
                    hessian += row.transpose() * row * (2.0 * q[r]);
                }
            }
        }
        for j in 0..n {
            for c in 0..3 {
                hessian[(3 * j + c, 3 * j + c)] += 2.0 * w_input[c];
            }
        }

        let i = problem.cell_index;
        let cell = problem.chain.cells[i]
            .rows()
            .iter()
            .map(|h| (h.normal, h.offset - cfg.safety_margin_m))
            .collect();
        let p0 = output(&problem.x_init);
        let t = problem.lip.step_duration_s;
        let moving = problem
            .obstacles
            .iter()
            .filter(|o| o.is_active(p0, problem.t_now))
            .map(|o| MovingTrack {
                centers: (0..=n)
                    .map(|j| o.predicted_center(problem.t_now, problem.t_now + j as f64 * t))
                    .collect(),
                shape: ellipse_shape_matrix(
                    o.semi_axes[0] + cfg.safety_margin_m,
                    o.semi_axes[1] + cfg.safety_margin_m,
                    o.orientation(problem.t_now),
                ),
            })
            .collect::<Vec<_>>();

        let w = problem.chain.waypoints[i];
        let stances: Vec<Stance> = (0..n)
            .map(|j| {
                if j % 2 == 0 {
                    problem.stance
                } else {
                    problem.stance.other()
                }
            })
            .collect();
        let mut program = Self {
            horizon: n,
            theta0: problem.x_init.theta,
            stances,
            bounds: *problem.bounds,
            target: build_target(&problem.x_init, w),
            free,
            sens,
            hessian,
            q_stage,
            q_terminal,
            w_input,
            cell,
            moving,
            gamma_s: cfg.cbf.gamma_static,
            gamma_m: cfg.cbf.gamma_moving,
            kinds: Vec::new(),
        };
        program.kinds = program.layout();
        program
    }

    fn layout(&self) -> Vec<(usize, ConstraintKind)> {
        let mut k = Vec::new();
        for j in 0..self.horizon {
            k.extend([(j, ConstraintKind::Reach); 4]);
            k.extend([(j, ConstraintKind::Heading); 2]);
            k.push((j, ConstraintKind::Travel));
            if self.bounds.has_travel_floor() {
                k.push((j, ConstraintKind::Travel));
            }
            k.extend(std::iter::repeat_n(
                (j, ConstraintKind::StaticCbf),
                self.cell.len(),
            ));
            k.extend(std::iter::repeat_n(
                (j, ConstraintKind::MovingCbf),
                self.moving.len(),
            ));
        }
        k
    }

    pub fn num_vars(&self) -> usize {
        3 * self.horizon
    }

    pub fn num_constraints(&self) -> usize {
        self.kinds.len()
    }

    pub fn constraint_kinds(&self) -> &[(usize, ConstraintKind)] {
        &self.kinds
    }

    pub fn active_moving(&self) -> usize {
        self.moving.len()
    }

    pub fn target(&self) -> &TargetState {
        &self.target
    }

    /// Constant Hessian of the (quadratic) objective.
    pub fn hessian(&self) -> &DMatrix<f64> {
        &self.hessian
    }

    /// States `x_0 … x_N` with θ left unwrapped.
    fn states(&self, z: &DVector<f64>) -> Vec<StateVector> {
        (0..=self.horizon)
            .map(|j| {
                let mut x = self.free[j];
                if j > 0 {
                    let dx = &self.sens[j] * z;
                    for r in 0..5 {
                        x[r] += dx[r];
                    }
                }
                x
            })
            .collect()
    }

    /// Predicted `x_{k+1} … x_{k+N}` and the inputs encoded in `z`.
    pub fn rollout(&self, z: &DVector<f64>) -> (Vec<LipState>, Vec<LipInput>) {
        let xs = self.states(z);
        let states = xs[1..]
            .iter()
            .map(|v| {
                let mut s = LipState::from_vector(v);
                s.theta = wrap_angle(s.theta);
                s
            })
            .collect();
        (states, decode(z))
    }

    fn error(&self, x: &StateVector) -> [f64; 5] {
        [
            x[0] - self.target.position.x,
            x[1],
            x[2] - self.target.position.y,
            x[3],
            x[4] - self.target.theta,
        ]
    }

    pub fn objective(&self, z: &DVector<f64>) -> f64 {
        let xs = self.states(z);
        let mut f = 0.0;
        for (j, x) in xs.iter().enumerate() {
            let q = if j == self.horizon {
                &self.q_terminal
            } else {
                &self.q_stage
            };
            f += weighted_sq(&self.error(x), q);
        }
        for j in 0..self.horizon {
            f += weighted_sq(&[z[3 * j], z[3 * j + 1], z[3 * j + 2]], &self.w_input);
        }
        f
    }

    pub fn terminal_cost(&self, z: &DVector<f64>) -> f64 {
        let xs = self.states(z);
        weighted_sq(&self.error(&xs[self.horizon]), &self.q_terminal)
    }

    pub fn objective_gradient(&self, z: &DVector<f64>) -> DVector<f64> {
        let xs = self.states(z);
        let mut g = DVector::zeros(self.num_vars());
        for j in 1..=self.horizon {
            let q = if j == self.horizon {
                &self.q_terminal
            } else {
                &self.q_stage
            };
            let e = self.error(&xs[j]);
            for r in 0..5 {
                let c = 2.0 * q[r] * e[r];
                if c != 0.0 {
                    g.axpy(c, &self.sens[j].row(r).transpose(), 1.0);
                }
            }
        }
        for j in 0..self.horizon {
            for c in 0..3 {
                g[3 * j + c] += 2.0 * self.w_input[c] * z[3 * j + c];
            }
        }
        g
    }

    fn heading_at(&self, z: &DVector<f64>, j: usize) -> f64 {
        self.theta0 + (0..=j).map(|i| z[3 * i + 2]).sum::<f64>()
    }

    pub fn constraints(&self, z: &DVector<f64>) -> DVector<f64> {
        self.evaluate(z, false).0
    }

    pub fn jacobian(&self, z: &DVector<f64>) -> DMatrix<f64> {
        self.evaluate(z, true).1
    }

    fn evaluate(&self, z: &DVector<f64>, with_jacobian: bool) -> (DVector<f64>, DMatrix<f64>) {
        let m = self.num_constraints();
        let nz = self.num_vars();
        let mut g = DVector::zeros(m);
        let mut jac = if with_jacobian {
            DMatrix::zeros(m, nz)
        } else {
            DMatrix::zeros(0, 0)
        };
        let xs = self.states(z);
        let pos = |j: usize| Point2::new(xs[j][0], xs[j][2]);
        let mut row = 0;
        for j in 0..self.horizon {
            let (ux, uy) = (z[3 * j], z[3 * j + 1]);
            let (s, c) = self.heading_at(z, j).sin_cos();
            let fwd = c * ux + s * uy;
            let lat = -s * ux + c * uy;
            let r = self.bounds.reach(self.stances[j]);
            g[row] = fwd - r.lb_xc;
            g[row + 1] = r.ub_xc - fwd;
            g[row + 2] = lat - r.lb_yc;
            g[row + 3] = r.ub_yc - lat;
            if with_jacobian {
                for (k, sign) in [(0, 1.0), (1, -1.0)] {
                    jac[(row + k, 3 * j)] = sign * c;
                    jac[(row + k, 3 * j + 1)] = sign * s;
                    jac[(row + 2 + k, 3 * j)] = -sign * s;
                    jac[(row + 2 + k, 3 * j + 1)] = sign * c;
                    for i in 0..=j {
                        jac[(row + k, 3 * i + 2)] = sign * lat;
                        jac[(row + 2 + k, 3 * i + 2)] = -sign * fwd;
                    }
                }
            }
            row += 4;

            let ut = z[3 * j + 2];
            g[row] = ut - self.bounds.lb_theta;
            g[row + 1] = self.bounds.ub_theta - ut;
            if with_jacobian {
                jac[(row, 3 * j + 2)] = 1.0;
                jac[(row + 1, 3 * j + 2)] = -1.0;
            }
            row += 2;

            let d = pos(j + 1) - pos(j);
            let d2 = d.dot(d);
            let dmax = self.bounds.delta_max;
            g[row] = dmax * dmax - d2;
            if with_jacobian {
                self.position_gradient(&mut jac, row, j + 1, d * -2.0);
                self.position_gradient(&mut jac, row, j, d * 2.0);
            }
            row += 1;
            if self.bounds.has_travel_floor() {
                let dmin = self.bounds.delta_min;
                g[row] = d2 - dmin * dmin;
                if with_jacobian {
                    self.position_gradient(&mut jac, row, j + 1, d * 2.0);
                    self.position_gradient(&mut jac, row, j, d * -2.0);
                }
                row += 1;
            }

            let keep = 1.0 - self.gamma_s;
            for &(normal, offset) in &self.cell {
                let h_now = offset - normal.dot(pos(j));
                let h_next = offset - normal.dot(pos(j + 1));
                g[row] = h_next - keep * h_now;
                if with_jacobian {
                    self.position_gradient(&mut jac, row, j + 1, -normal);
                    self.position_gradient(&mut jac, row, j, normal * keep);
                }
                row += 1;
            }

            let keep = 1.0 - self.gamma_m;
            for track in &self.moving {
                let q_now = pos(j) - track.centers[j];
                let q_next = pos(j + 1) - track.centers[j + 1];
                let h_now = quad_form(&track.shape, q_now) - 1.0;
                let h_next = quad_form(&track.shape, q_next) - 1.0;
                g[row] = h_next - keep * h_now;
                if with_jacobian {
                    self.position_gradient(
                        &mut jac,
                        row,
                        j + 1,
                        mat_vec(&track.shape, q_next) * 2.0,
                    );
                    self.position_gradient(
                        &mut jac,
                        row,
                        j,
                        mat_vec(&track.shape, q_now) * (-2.0 * keep),
                    );
                }
                row += 1;
            }
        }
        debug_assert_eq!(row, m);
        (g, jac)
    }

    /// Adds `coeffᵀ ∂p_j/∂z` to row `row` of `jac`.
    fn position_gradient(&self, jac: &mut DMatrix<f64>, row: usize, j: usize, coeff: Point2) {
        if j == 0 {
            return;
        }
        let s = &self.sens[j];
        for c in 0..self.num_vars() {
            jac[(row, c)] += coeff.x * s[(0, c)] + coeff.y * s[(2, c)];
        }
    }

    /// `Σ λ_i ∇²g_i(z)`, the constraint part of the Lagrangian Hessian.
    pub fn constraint_curvature(&self, z: &DVector<f64>, lambda: &DVector<f64>) -> DMatrix<f64> {
        let nz = self.num_vars();
        let mut m = DMatrix::<f64>::zeros(nz, nz);
        let rows = |j: usize| -> DMatrix<f64> {
            let mut g = DMatrix::zeros(2, nz);
            g.row_mut(0).copy_from(&self.sens[j].row(0));
            g.row_mut(1).copy_from(&self.sens[j].row(2));
            g
        };
        let mut row = 0;
        for j in 0..self.horizon {
            let (ux, uy) = (z[3 * j], z[3 * j + 1]);
            let (s, c) = self.heading_at(z, j).sin_cos();
            let fwd = c * ux + s * uy;
            let lat = -s * ux + c * uy;
            let a = lambda[row] - lambda[row + 1];
            let b = lambda[row + 2] - lambda[row + 3];
            if a != 0.0 || b != 0.0 {
                for i in 0..=j {
                    let ti = 3 * i + 2;
                    let cross_x = -a * s - b * c;
                    let cross_y = a * c - b * s;
                    m[(3 * j, ti)] += cross_x;
                    m[(ti, 3 * j)] += cross_x;
                    m[(3 * j + 1, ti)] += cross_y;
                    m[(ti, 3 * j + 1)] += cross_y;
                    for l in 0..=j {
                        m[(ti, 3 * l + 2)] -= a * fwd + b * lat;
                    }
                }
            }
            row += 6;

            let d = rows(j + 1) - rows(j);
            let dtd = d.transpose() * &d;
            m -= &dtd * (2.0 * lambda[row]);
            row += 1;
            if self.bounds.has_travel_floor() {
                m += &dtd * (2.0 * lambda[row]);
                row += 1;
            }
            row += self.cell.len();

            let keep = 1.0 - self.gamma_m;
            let (g0, g1) = (rows(j), rows(j + 1));
            for track in &self.moving {
                let l = lambda[row];
                if l != 0.0 {
                    let p = DMatrix::from_column_slice(2, 2, track.shape.as_slice());
                    m += (g1.transpose() * &p * &g1) * (2.0 * l);
                    m -= (g0.transpose() * &p * &g0) * (2.0 * keep * l);
                }
                row += 1;
            }
        }
        m
    }

    /// Gait-in-place guess: zero forward offset, narrowest lateral offset.
    pub fn nominal_guess(&self) -> DVector<f64> {
        let mut z = DVector::zeros(self.num_vars());
        for j in 0..self.horizon {
            let r = self.bounds.reach(self.stances[j]);
            let fwd = 0.0f64.clamp(r.lb_xc, r.ub_xc);
            let lat = 0.0f64.clamp(r.lb_yc, r.ub_yc);
            let off = Point2::new(fwd, lat).rotated(self.theta0);
            z[3 * j] = off.x;
            z[3 * j + 1] = off.y;
        }
        z
    }
}

fn encode(u: &[LipInput], n: usize) -> DVector<f64> {
    let mut z = DVector::zeros(3 * n);
    for (j, ui) in u.iter().take(n).enumerate() {
        z[3 * j] = ui.ux;
        z[3 * j + 1] = ui.uy;
        z[3 * j + 2] = ui.utheta;
    }
    z
}

fn decode(z: &DVector<f64>) -> Vec<LipInput> {
    (0..z.len() / 3)
        .map(|j| LipInput::new(z[3 * j], z[3 * j + 1], z[3 * j + 2]))
        .collect()
}

fn max_violation(g: &DVector<f64>) -> f64 {
    g.iter().fold(0.0f64, |m, v| m.max(-v))
}

fn l1_violation(g: &DVector<f64>) -> f64 {
    g.iter().map(|v| (-v).max(0.0)).sum()
}

/// Solves `MPC(i)` by SQP with an ℓ1 merit line search.
///
/// Each subproblem uses the exact (constant) objective Hessian and the
/// linearized constraints; an inconsistent linearization falls back to an
/// ℓ∞-elastic subproblem that minimizes the worst violation.
pub fn solve_mpc(
    problem: &MpcProblem<'_>,
    cfg: &MpcConfig,
    warm_start: Option<&[LipInput]>,
) -> MpcSolution {
    let started = Instant::now();
    let program = MpcProgram::new(problem, cfg);
    let mut z = match warm_start {
        Some(u) if u.len() >= cfg.horizon => encode(u, cfg.horizon),
        _ => program.nominal_guess(),
    };
    let result = sqp(&program, &mut z, cfg);
    let (states, inputs) = program.rollout(&z);
    MpcSolution {
        states,
        inputs,
        status: result.status,
        kkt_residual: result.kkt,
        max_violation: result.violation,
        objective: program.objective(&z),
        terminal_cost: program.terminal_cost(&z),
        solve_time_s: started.elapsed().as_secs_f64(),
        iterations: result.iterations,
        active_moving: program.active_moving(),
    }
}

struct SqpResult {
    status: MpcStatus,
    kkt: f64,
    violation: f64,
    iterations: usize,
}

const ELASTIC_PENALTY: f64 = 1e6;

fn sqp(program: &MpcProgram, z: &mut DVector<f64>, cfg: &MpcConfig) -> SqpResult {
    let n = program.num_vars();
    let h = program.hessian();
    let floor = 0.1 * h.clone().symmetric_eigenvalues().min();
    let mut rho: f64 = 10.0;
    let mut lambda: Option<DVector<f64>> = None;
    let mut iterations = 0;
    let mut kkt = f64::INFINITY;
    let mut elastic_stall = 0;

    loop {
        let (g, jac) = program.evaluate(z, true);
        let grad = program.objective_gradient(z);
        let violation = max_violation(&g);
        if let Some(l) = &lambda {
            let stat = (&grad - jac.transpose() * l).amax() / grad.amax().max(1.0);
            let comp = g
                .iter()
                .zip(l.iter())
                .fold(0.0f64, |m, (gi, li)| m.max((gi * li).abs()));
            kkt = stat.max(violation).max(comp);
            if kkt <= cfg.kkt_tolerance {
                return SqpResult {
                    status: MpcStatus::Solved,
                    kkt,
                    violation,
                    iterations,
                };
            }
        }
        if iterations >= cfg.max_sqp_iterations {
            let status = if violation <= 1e-6 {
                MpcStatus::MaxIter
            } else {
                MpcStatus::Infeasible
            };
            return SqpResult {
                status,
                kkt,
                violation,
                iterations,
            };
        }
        iterations += 1;

        let hk = match &lambda {
            Some(l) => convexify(h - program.constraint_curvature(z, l), floor),
            None => h.clone(),
        };
        let neg_g = -&g;
        let (d, lam, elastic) = match solve_qp(&hk, &grad, &jac, &neg_g) {
            Ok(s) => (s.x, s.multipliers, false),
            Err(_) => match elastic_step(&hk, &grad, &jac, &g) {
                Some((d, lam)) => (d, lam, true),
                None => {
                    return SqpResult {
                        status: MpcStatus::Infeasible,
                        kkt,
                        violation,
                        iterations,
                    }
                }
            },
        };
        if !elastic {
            rho = rho.max(1.5 * lam.amax() + 1.0);
        }

        let lin = &g + &jac * &d;
        let phi0 = program.objective(z) + rho * l1_violation(&g);
        let slope = grad.dot(&d) - rho * (l1_violation(&g) - l1_violation(&lin));
        let mut alpha = 1.0;
        let mut accepted = false;
        if d.amax() <= 1e-14 * (1.0 + z.amax()) {
            accepted = true;
        } else if slope < 0.0 {
            while alpha > 1e-10 {
                let trial = &*z + &d * alpha;
                let phi =
                    program.objective(&trial) + rho * l1_violation(&program.constraints(&trial));
                if phi <= phi0 + 1e-4 * alpha * slope {
                    *z = trial;
                    accepted = true;
                    break;
                }
                alpha *= 0.5;
            }
        }
        if !accepted {
            // No merit decrease available: take the full step and let the
            // KKT test or the iteration cap decide.
            *z += &d;
        }
        if elastic {
            elastic_stall += 1;
            if d.amax() < 1e-9 || elastic_stall >= 10 {
                let violation = max_violation(&program.constraints(z));
                if violation > 1e-6 {
                    return SqpResult {
                        status: MpcStatus::Infeasible,
                        kkt,
                        violation,
                        iterations,
                    };
                }
            }
            lambda = None;
        } else {
            elastic_stall = 0;
            lambda = Some(lam);
        }
        debug_assert_eq!(z.len(), n);
    }
}

/// Clamps the eigenvalues of the symmetric `m` from below.
fn convexify(m: DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    let sym = (&m + m.transpose()) * 0.5;
    let eig = sym.clone().symmetric_eigen();
    if eig.eigenvalues.min() >= floor {
        return sym;
    }
    let clamped = eig.eigenvalues.map(|v| v.max(floor));
    &eig.eigenvectors * DMatrix::from_diagonal(&clamped) * eig.eigenvectors.transpose()
}

/// `min ½dᵀHd + gᵀd + ρt + ½t²  s.t.  c + Jd + t ≥ 0, t ≥ 0`.
fn elastic_step(
    h: &DMatrix<f64>,
    grad: &DVector<f64>,
    jac: &DMatrix<f64>,
    g: &DVector<f64>,
) -> Option<(DVector<f64>, DVector<f64>)> {
    let n = h.nrows();
    let m = jac.nrows();
    let mut he = DMatrix::zeros(n + 1, n + 1);
    he.view_mut((0, 0), (n, n)).copy_from(h);
    he[(n, n)] = 1.0;
    let mut ae = DVector::zeros(n + 1);
    ae.rows_mut(0, n).copy_from(grad);
    ae[n] = ELASTIC_PENALTY;
    let mut ce = DMatrix::zeros(m + 1, n + 1);
    ce.view_mut((0, 0), (m, n)).copy_from(jac);
    for i in 0..m {
        ce[(i, n)] = 1.0;
    }
    ce[(m, n)] = 1.0;
    let mut be = DVector::zeros(m + 1);
    be.rows_mut(0, m).copy_from(&(-g));
    let s = solve_qp(&he, &ae, &ce, &be).ok()?;
    Some((
        s.x.rows(0, n).into_owned(),
        s.multipliers.rows(0, m).into_owned(),
    ))
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SequencerError {
    #[error("output ({}, {}) lies in no cell with index ≥ {1}", .0.x, .0.y)]
    OutOfChain(Point2, usize),
}

/// Largest `j ≥ active` whose cell contains the output of `x`.
pub fn sequencer_advance(
    active: usize,
    x: &LipState,
    chain: &FreeSpaceChain,
) -> Result<usize, SequencerError> {
    let p = output(x);
    (active..chain.len())
        .rev()
        .find(|&j| chain.cells[j].contains(p))
        .ok_or(SequencerError::OutOfChain(p, active))
}

/// Like [`sequencer_advance`], but skips ahead only to cells holding the
/// output at least `margin` inside their faces, so a skip never lands the
/// controller on a face it must keep clear of. Entering `active + 1` also
/// switches once the output sits half the margin deep in it, or as deep as
/// in the active cell.
pub fn sequencer_advance_with_margin(
    active: usize,
    x: &LipState,
    chain: &FreeSpaceChain,
    margin: f64,
) -> Result<usize, SequencerError> {
    let p = output(x);
    let deep = (active..chain.len())
        .rev()
        .find(|&j| chain.cells[j].min_slack(p) >= margin);
    let here = chain.cells.get(active).map_or(0.0, |c| c.min_slack(p));
    let next = (active + 1..chain.len().min(active + 2)).find(|&j| {
        let s = chain.cells[j].min_slack(p);
        s >= 0.0 && s >= here.min(0.5 * margin)
    });
    match deep.max(next) {
        Some(j) => Ok(j),
        None if chain.cells.get(active).is_some_and(|c| c.contains(p)) => Ok(active),
        None => sequencer_advance(active, x, chain),
    }
}

#[cfg(test)]
mod tests;
