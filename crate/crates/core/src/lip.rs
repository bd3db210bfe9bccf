//! Three-dimensional linear inverted pendulum (3D-LIP).
//!
//! The state is `[x, ẋ, y, ẏ, θ]` sampled at step boundaries; the input is the
//! stance-foot offset from the COM `(uˣ, uʸ)` plus a heading increment `uᶿ`.
//! Within a step each planar channel obeys `ẍ = ω²(x − p_st)` with the foot
//! `p_st = x(0) + uˣ` fixed, so `ẍ(0) = −ω² uˣ`.

use crate::geometry::Point2;
use nalgebra::{SMatrix, SVector};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

pub type StateVector = SVector<f64, 5>;
pub type InputVector = SVector<f64, 3>;
pub type StepMatrix = SMatrix<f64, 5, 5>;
pub type InputMatrix = SMatrix<f64, 5, 3>;

/// Wraps an angle to `(−π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    w
}

/// Signed shortest rotation taking `from` to `to`.
pub fn angle_diff(to: f64, from: f64) -> f64 {
    wrap_angle(to - from)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LipParams {
    pub step_duration_s: f64,
    pub height_m: f64,
    #[serde(default = "default_gravity")]
    pub gravity_mps2: f64,
}

fn default_gravity() -> f64 {
    9.81
}

impl Default for LipParams {
    /// Digit-like pendulum: 0.3 s steps at 0.91 m height.
    fn default() -> Self {
        Self {
            step_duration_s: 0.3,
            height_m: 0.91,
            gravity_mps2: default_gravity(),
        }
    }
}

impl LipParams {
    pub fn omega(&self) -> f64 {
        (self.gravity_mps2 / self.height_m).sqrt()
    }

    pub fn is_valid(&self) -> bool {
        self.step_duration_s > 0.0 && self.height_m > 0.0 && self.gravity_mps2 > 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LipState {
    pub x: f64,
    pub xdot: f64,
    pub y: f64,
    pub ydot: f64,
    pub theta: f64,
}

impl LipState {
    pub fn at_rest(position: Point2, theta: f64) -> Self {
        Self {
            x: position.x,
            xdot: 0.0,
            y: position.y,
            ydot: 0.0,
            theta: wrap_angle(theta),
        }
    }

    /// State on the period-two lateral sway orbit, about to take a step with
    /// `first` stance using the narrowest admissible lateral offset.
    ///
    /// Along that orbit the lateral velocity flips sign every step and the
    /// step-boundary position repeats, so a robot started here can stand still.
    pub fn gait_start(
        position: Point2,
        theta: f64,
        first: Stance,
        params: &LipParams,
        bounds: &StanceBounds,
    ) -> Self {
        let r = bounds.reach(first);
        let lateral = 0.0f64.clamp(r.lb_yc, r.ub_yc);
        let wt = params.omega() * params.step_duration_s;
        let v = params.omega() * wt.sinh() * lateral / (1.0 + wt.cosh());
        let vel = Point2::new(0.0, v).rotated(theta);
        Self {
            x: position.x,
            xdot: vel.x,
            y: position.y,
            ydot: vel.y,
            theta: wrap_angle(theta),
        }
    }

    pub fn to_vector(&self) -> StateVector {
        StateVector::new(self.x, self.xdot, self.y, self.ydot, self.theta)
    }

    pub fn from_vector(v: &StateVector) -> Self {
        Self {
            x: v[0],
            xdot: v[1],
            y: v[2],
            ydot: v[3],
            theta: v[4],
        }
    }

    pub fn position(&self) -> Point2 {
        output(self)
    }

    pub fn velocity(&self) -> Point2 {
        Point2::new(self.xdot, self.ydot)
    }

    pub fn is_finite(&self) -> bool {
        self.to_vector().iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LipInput {
    pub ux: f64,
    pub uy: f64,
    pub utheta: f64,
}

impl LipInput {
    pub fn new(ux: f64, uy: f64, utheta: f64) -> Self {
        Self { ux, uy, utheta }
    }

    pub fn to_vector(&self) -> InputVector {
        InputVector::new(self.ux, self.uy, self.utheta)
    }

    pub fn from_vector(v: &InputVector) -> Self {
        Self::new(v[0], v[1], v[2])
    }

    pub fn offset(&self) -> Point2 {
        Point2::new(self.ux, self.uy)
    }
}

/// `A = diag(Â, Â, 1)`, `B = diag(B̂, B̂, 1)` for one step of duration `T`.
pub fn step_matrices(params: &LipParams) -> (StepMatrix, InputMatrix) {
    transition(params.omega(), params.step_duration_s)
}

/// Translational transition over `t` seconds; the θ entries are identity/one.
fn transition(omega: f64, t: f64) -> (StepMatrix, InputMatrix) {
    let (s, c) = ((omega * t).sinh(), (omega * t).cosh());
    let mut a = StepMatrix::zeros();
    let mut b = InputMatrix::zeros();
    for (row, col) in [(0usize, 0usize), (2, 1)] {
        a[(row, row)] = 1.0;
        a[(row, row + 1)] = s / omega;
        a[(row + 1, row + 1)] = c;
        b[(row, col)] = 1.0 - c;
        b[(row + 1, col)] = -omega * s;
    }
    a[(4, 4)] = 1.0;
    b[(4, 2)] = 1.0;
    (a, b)
}

/// `x_{k+1} = A x_k + B u_k`, θ wrapped.
pub fn step(x: &LipState, u: &LipInput, params: &LipParams) -> LipState {
    let (a, b) = step_matrices(params);
    let mut next = LipState::from_vector(&(a * x.to_vector() + b * u.to_vector()));
    next.theta = wrap_angle(next.theta);
    next
}

/// Closed-form evolution `t` seconds into a step that started at `state`.
///
/// θ only changes once the step completes (`t ≥ T`).
pub fn propagate_continuous(
    state: &LipState,
    u: &LipInput,
    t: f64,
    params: &LipParams,
) -> LipState {
    propagate_from_phase(state, u, 0.0, t, params)
}

/// Evolution over `dt` seconds from a state sampled `phase` seconds into the
/// step. `u` is the foot offset measured from the COM of `state`. The heading
/// increment is applied if the step end is reached.
pub fn propagate_from_phase(
    state: &LipState,
    u: &LipInput,
    phase: f64,
    dt: f64,
    params: &LipParams,
) -> LipState {
    let (a, b) = transition(params.omega(), dt);
    let mut v = a * state.to_vector() + b * u.to_vector();
    let t_end = params.step_duration_s;
    v[4] = if phase + dt >= t_end - 1e-12 {
        wrap_angle(state.theta + u.utheta)
    } else {
        state.theta
    };
    LipState::from_vector(&v)
}

/// Foot offset, relative to `state`'s COM, of a foot that was at offset `u`
/// from `origin`'s COM.
pub fn reanchor(u: &LipInput, origin: &LipState, state: &LipState) -> LipInput {
    let foot = origin.position() + u.offset();
    let off = foot - state.position();
    LipInput::new(off.x, off.y, u.utheta)
}

/// `C x`: the COM position.
pub fn output(x: &LipState) -> Point2 {
    Point2::new(x.x, x.y)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Stance {
    Left,
    Right,
}

impl Stance {
    pub fn other(self) -> Stance {
        match self {
            Stance::Left => Stance::Right,
            Stance::Right => Stance::Left,
        }
    }
}

/// Support leg alternates every step starting from `initial`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StanceSchedule {
    pub initial: Stance,
}

impl StanceSchedule {
    pub fn new(initial: Stance) -> Self {
        Self { initial }
    }

    pub fn stance_at(&self, k: usize) -> Stance {
        if k.is_multiple_of(2) {
            self.initial
        } else {
            self.initial.other()
        }
    }
}

/// Foot-placement rectangle in the heading frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReachBox {
    #[serde(rename = "lb_xc_m")]
    pub lb_xc: f64,
    #[serde(rename = "ub_xc_m")]
    pub ub_xc: f64,
    #[serde(rename = "lb_yc_m")]
    pub lb_yc: f64,
    #[serde(rename = "ub_yc_m")]
    pub ub_yc: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StanceBounds {
    pub left: ReachBox,
    pub right: ReachBox,
    #[serde(rename = "lb_theta_rad")]
    pub lb_theta: f64,
    #[serde(rename = "ub_theta_rad")]
    pub ub_theta: f64,
    #[serde(rename = "delta_min_m")]
    pub delta_min: f64,
    #[serde(rename = "delta_max_m")]
    pub delta_max: f64,
}

impl Default for StanceBounds {
    /// Digit reachability: forward [−0.2, 0.5] m, lateral 0.2–0.5 m to the
    /// stance side, ±15° heading change, at most 0.2 m COM travel per step.
    fn default() -> Self {
        Self {
            left: ReachBox {
                lb_xc: -0.2,
                ub_xc: 0.5,
                lb_yc: -0.5,
                ub_yc: -0.2,
            },
            right: ReachBox {
                lb_xc: -0.2,
                ub_xc: 0.5,
                lb_yc: 0.2,
                ub_yc: 0.5,
            },
            lb_theta: -15f64.to_radians(),
            ub_theta: 15f64.to_radians(),
            delta_min: 0.0,
            delta_max: 0.2,
        }
    }
}

impl StanceBounds {
    pub fn reach(&self, stance: Stance) -> &ReachBox {
        match stance {
            Stance::Left => &self.left,
            Stance::Right => &self.right,
        }
    }

    pub fn is_valid(&self) -> bool {
        let ok = |r: &ReachBox| r.lb_xc <= r.ub_xc && r.lb_yc <= r.ub_yc;
        ok(&self.left)
            && ok(&self.right)
            && self.lb_theta <= self.ub_theta
            && self.delta_min >= 0.0
            && self.delta_min <= self.delta_max
    }

    /// Whether the lower travel bound contributes a constraint.
    pub fn has_travel_floor(&self) -> bool {
        self.delta_min > 0.0
    }
}

/// Residuals of the per-step state/input constraint set; feasible iff all ≥ 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct XuResiduals {
    /// forward − lb, ub − forward, lateral − lb, ub − lateral
    pub reach: [f64; 4],
    pub heading: [f64; 2],
    /// `δ_max² − |Δ|²`
    pub travel_max: f64,
    /// `|Δ|² − δ_min²`, absent when `δ_min = 0`.
    pub travel_min: Option<f64>,
}

impl XuResiduals {
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = self.reach.to_vec();
        v.extend_from_slice(&self.heading);
        v.push(self.travel_max);
        v.extend(self.travel_min);
        v
    }

    pub fn min(&self) -> f64 {
        self.to_vec().into_iter().fold(f64::INFINITY, f64::min)
    }
}

/// Foot offset expressed in the heading frame rotated by `θ + uᶿ`.
pub fn foot_in_heading_frame(theta: f64, u: &LipInput) -> (f64, f64) {
    let (s, c) = (theta + u.utheta).sin_cos();
    (c * u.ux + s * u.uy, -s * u.ux + c * u.uy)
}

pub fn constraint_residuals(
    x: &LipState,
    u: &LipInput,
    x_next: &LipState,
    stance: Stance,
    bounds: &StanceBounds,
) -> XuResiduals {
    let (fwd, lat) = foot_in_heading_frame(x.theta, u);
    let r = bounds.reach(stance);
    let d = x_next.position() - x.position();
    let d2 = d.dot(d);
    XuResiduals {
        reach: [fwd - r.lb_xc, r.ub_xc - fwd, lat - r.lb_yc, r.ub_yc - lat],
        heading: [u.utheta - bounds.lb_theta, bounds.ub_theta - u.utheta],
        travel_max: bounds.delta_max * bounds.delta_max - d2,
        travel_min: bounds
            .has_travel_floor()
            .then_some(d2 - bounds.delta_min * bounds.delta_min),
    }
}

/// Predicts the state at the end of the current step from feedback sampled
/// `xi` seconds into it.
///
/// The foot offset is `stance_foot − COM(ξ)`, matching the dynamics' sign
/// convention. θ is the stance heading and stays constant.
pub fn predict_step_end(
    feedback: &LipState,
    stance_foot: Point2,
    xi: f64,
    params: &LipParams,
) -> LipState {
    let remaining = (params.step_duration_s - xi).max(0.0);
    let off = stance_foot - feedback.position();
    let u = LipInput::new(off.x, off.y, 0.0);
    let (a, b) = transition(params.omega(), remaining);
    let mut v = a * feedback.to_vector() + b * u.to_vector();
    v[4] = feedback.theta;
    LipState::from_vector(&v)
}
