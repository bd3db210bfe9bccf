//! Closed-loop execution of the sequential MPC on the LIP plant, with
//! optional velocity kicks, JSON-lines trajectory logs and an independent
//! collision oracle.

use crate::freespace::FreeSpaceChain;
use crate::geometry::{Point2, BOUNDARY_TOL};
use crate::lip::{
    output, predict_step_end, propagate_continuous, propagate_from_phase, reanchor, step,
    wrap_angle, LipInput, LipState, Stance, StanceSchedule,
};
use crate::mpc::{
    moving_barrier, sequencer_advance_with_margin, solve_mpc, static_barriers, MovingObstacle,
    MpcConfig, MpcProblem, MpcStatus,
};
use crate::scenario::Scenario;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use thiserror::Error;

/// Barrier values below this count as a safety violation.
pub const BARRIER_TOL: f64 = 1e-6;
/// Consecutive unusable solves tolerated before the run fails.
pub const MAX_FALLBACK_STEPS: usize = 3;
/// Sub-samples per step checked by [`collision_oracle`].
pub const ORACLE_SAMPLES: usize = 20;

/// Random additive jumps of the COM velocity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DisturbanceModel {
    /// Each axis is drawn uniformly from `[−r, r]`.
    pub velocity_kick_range_mps: f64,
    pub kick_probability_per_step: f64,
    pub min_separation_steps: usize,
    pub rng_seed: u64,
}

impl DisturbanceModel {
    /// ±50 N for 100 ms on a 47.9 kg body is about ±0.1 m/s; kicks at least
    /// 2 s (7 steps of 0.3 s) apart.
    pub fn pushes(rng_seed: u64) -> Self {
        Self {
            velocity_kick_range_mps: 0.1,
            kick_probability_per_step: 0.3,
            min_separation_steps: 7,
            rng_seed,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.velocity_kick_range_mps >= 0.0 && (0.0..=1.0).contains(&self.kick_probability_per_step)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SimOptions {
    pub disturbance: Option<DisturbanceModel>,
    /// Re-solve at this phase of each step from mid-step feedback; kicks then
    /// land at the same phase.
    pub intra_step_phase_s: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Verdict {
    GoalReached,
    CollisionDetected,
    SolverFailure,
    Timeout,
}

impl Verdict {
    pub fn name(self) -> &'static str {
        match self {
            Verdict::GoalReached => "goal_reached",
            Verdict::CollisionDetected => "collision_detected",
            Verdict::SolverFailure => "solver_failure",
            Verdict::Timeout => "timeout",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Kick {
    pub delta_velocity_mps: Point2,
    /// Time into the step at which the kick lands.
    pub phase_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverStats {
    pub status: MpcStatus,
    pub solve_time_s: f64,
    pub iterations: usize,
    pub kkt_residual: f64,
    pub terminal_cost: f64,
    pub active_moving: usize,
    /// The applied input came from the previous solution.
    pub fallback: bool,
}

/// State at the start of step `k` and what was done during it. The last
/// record of a log has no input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub k: usize,
    pub time_s: f64,
    pub state: LipState,
    pub stance: Stance,
    pub cell_index: usize,
    pub min_static_barrier: f64,
    /// Over all moving obstacles at their nominal size; `None` without any.
    pub min_moving_barrier: Option<f64>,
    pub input: Option<LipInput>,
    pub solver: Option<SolverStats>,
    pub disturbance: Option<Kick>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub scenario: String,
    pub horizon: usize,
    pub verdict: Verdict,
    pub steps: usize,
    pub final_distance_m: f64,
    pub path_length_m: f64,
    pub min_static_barrier: f64,
    pub min_moving_barrier: Option<f64>,
    pub mean_solve_time_s: f64,
    pub solves: usize,
    pub fallbacks: usize,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryLog {
    pub steps: Vec<StepRecord>,
    pub summary: RunSummary,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum LogLine {
    Step(StepRecord),
    Summary(RunSummary),
}

#[derive(Debug, Error)]
pub enum LogError {
    #[error("line {0}: {1}")]
    Parse(usize, serde_json::Error),
    #[error("log has no summary record")]
    MissingSummary,
    #[error("record after the summary on line {0}")]
    TrailingRecord(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl TrajectoryLog {
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for s in &self.steps {
            serde_json::to_writer(&mut w, &LogLine::Step(s.clone()))?;
            writeln!(w)?;
        }
        serde_json::to_writer(&mut w, &LogLine::Summary(self.summary.clone()))?;
        writeln!(w)
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self, LogError> {
        let mut steps = Vec::new();
        let mut summary = None;
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            if summary.is_some() {
                return Err(LogError::TrailingRecord(i + 1));
            }
            match serde_json::from_str(&line).map_err(|e| LogError::Parse(i + 1, e))? {
                LogLine::Step(s) => steps.push(s),
                LogLine::Summary(s) => summary = Some(s),
            }
        }
        Ok(Self {
            steps,
            summary: summary.ok_or(LogError::MissingSummary)?,
        })
    }

    pub fn solve_times(&self) -> impl Iterator<Item = f64> + '_ {
        self.steps
            .iter()
            .filter_map(|s| s.solver.map(|v| v.solve_time_s))
    }

    pub fn states(&self) -> impl Iterator<Item = &LipState> + '_ {
        self.steps.iter().map(|s| &s.state)
    }
}

/// Pose of a moving obstacle at one instant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObstacleState {
    pub center: Point2,
    pub orientation_rad: f64,
    pub semi_axes: [f64; 2],
}

/// Every obstacle's pose `dt` seconds after `t`.
pub fn advance_obstacles(obstacles: &[MovingObstacle], t: f64, dt: f64) -> Vec<ObstacleState> {
    obstacles
        .iter()
        .map(|o| ObstacleState {
            center: o.center(t + dt),
            orientation_rad: o.orientation(t + dt),
            semi_axes: o.semi_axes,
        })
        .collect()
}

fn min_moving(x: &LipState, obstacles: &[MovingObstacle], t: f64) -> Option<f64> {
    obstacles
        .iter()
        .map(|o| moving_barrier(x, o, t))
        .reduce(f64::min)
}

/// Runs the sequential MPC from the scenario start until a verdict.
pub fn run_closed_loop(
    scenario: &Scenario,
    chain: &FreeSpaceChain,
    cfg: &MpcConfig,
    options: &SimOptions,
) -> TrajectoryLog {
    let lip = &scenario.lip;
    let bounds = &scenario.bounds;
    let obstacles = &scenario.moving_obstacles;
    let period = lip.step_duration_s;
    let goal = chain.goal().unwrap_or(scenario.goal);
    let sched = StanceSchedule::new(scenario.initial_stance);
    let mut rng = options
        .disturbance
        .map(|d| ChaCha8Rng::seed_from_u64(d.rng_seed));
    let mut last_kick: Option<usize> = None;

    let mut x = scenario.initial_state(chain.waypoints.first().copied().unwrap_or(goal));
    let mut steps: Vec<StepRecord> = Vec::new();
    let mut failure = None;
    let mut active = match sequencer_advance_with_margin(0, &x, chain, cfg.safety_margin_m) {
        Ok(i) => i,
        Err(e) => {
            failure = Some(e.to_string());
            0
        }
    };
    let mut warm: Option<Vec<LipInput>> = None;
    let mut fallback: Vec<LipInput> = Vec::new();
    let mut unusable = 0;
    let mut fallbacks = 0;

    let verdict = 'run: loop {
        let k = steps.len();
        let t = k as f64 * period;
        let min_static = static_barriers(&chain.cells[active], &x)
            .into_iter()
            .fold(f64::INFINITY, f64::min);
        let min_mov = min_moving(&x, obstacles, t);
        steps.push(StepRecord {
            k,
            time_s: t,
            state: x,
            stance: sched.stance_at(k),
            cell_index: active,
            min_static_barrier: min_static,
            min_moving_barrier: min_mov,
            input: None,
            solver: None,
            disturbance: None,
        });
        if failure.is_some() {
            break Verdict::CollisionDetected;
        }
        if min_static < -BARRIER_TOL {
            failure = Some(format!(
                "static barrier {min_static:.3e} in cell {active} at step {k}"
            ));
            break Verdict::CollisionDetected;
        }
        if let Some(h) = min_mov.filter(|&h| h < -BARRIER_TOL) {
            failure = Some(format!("moving barrier {h:.3e} at step {k}"));
            break Verdict::CollisionDetected;
        }
        if output(&x).distance(goal) <= cfg.goal_tolerance_m {
            break Verdict::GoalReached;
        }
        if k >= scenario.max_steps {
            break Verdict::Timeout;
        }

        let stance = sched.stance_at(k);
        let problem = MpcProblem {
            cell_index: active,
            x_init: x,
            chain,
            obstacles,
            t_now: t,
            stance,
            lip,
            bounds,
        };
        let sol = solve_mpc(&problem, cfg, warm.as_deref());
        let mut stats = SolverStats {
            status: sol.status,
            solve_time_s: sol.solve_time_s,
            iterations: sol.iterations,
            kkt_residual: sol.kkt_residual,
            terminal_cost: sol.terminal_cost,
            active_moving: sol.active_moving,
            fallback: false,
        };
        let u = if sol.is_usable() {
            unusable = 0;
            fallback = sol.shifted_inputs();
            sol.inputs[0]
        } else {
            unusable += 1;
            if unusable >= MAX_FALLBACK_STEPS || fallback.is_empty() {
                steps[k].solver = Some(stats);
                failure = Some(format!(
                    "{unusable} consecutive unusable solves ({:?}) at step {k}",
                    sol.status
                ));
                break 'run Verdict::SolverFailure;
            }
            stats.fallback = true;
            fallbacks += 1;
            let u = fallback[0];
            let last = *fallback.last().unwrap();
            fallback.remove(0);
            fallback.push(last);
            u
        };
        warm = Some(fallback.clone());

        let kick = match (options.disturbance, rng.as_mut()) {
            (Some(d), Some(rng)) => {
                let spaced = last_kick.is_none_or(|l| k - l >= d.min_separation_steps);
                let fire = rng.gen::<f64>() < d.kick_probability_per_step;
                let r = d.velocity_kick_range_mps;
                let dv = Point2::new(rng.gen_range(-r..=r), rng.gen_range(-r..=r));
                (spaced && fire).then(|| {
                    last_kick = Some(k);
                    Kick {
                        delta_velocity_mps: dv,
                        phase_s: options.intra_step_phase_s.unwrap_or(period),
                    }
                })
            }
            _ => None,
        };

        let next = match options.intra_step_phase_s {
            Some(xi) => {
                let mut mid = propagate_continuous(&x, &u, xi, lip);
                if let Some(kk) = kick {
                    mid.xdot += kk.delta_velocity_mps.x;
                    mid.ydot += kk.delta_velocity_mps.y;
                }
                let foot = output(&x) + u.offset();
                let mut end = predict_step_end(&mid, foot, xi, lip);
                end.theta = wrap_angle(x.theta + u.utheta);
                end
            }
            None => {
                let mut end = step(&x, &u, lip);
                if let Some(kk) = kick {
                    end.xdot += kk.delta_velocity_mps.x;
                    end.ydot += kk.delta_velocity_mps.y;
                }
                end
            }
        };
        steps[k].input = Some(u);
        steps[k].solver = Some(stats);
        steps[k].disturbance = kick;
        x = next;
        match sequencer_advance_with_margin(active, &x, chain, cfg.safety_margin_m) {
            Ok(i) => active = i,
            Err(e) => failure = Some(e.to_string()),
        }
    };

    let solve_times: Vec<f64> = steps
        .iter()
        .filter_map(|s| s.solver.map(|v| v.solve_time_s))
        .collect();
    let positions: Vec<Point2> = steps.iter().map(|s| output(&s.state)).collect();
    let summary = RunSummary {
        scenario: scenario.name.clone(),
        horizon: cfg.horizon,
        verdict,
        steps: steps.len() - 1,
        final_distance_m: output(&x).distance(goal),
        path_length_m: crate::rrt::polyline_length(&positions),
        min_static_barrier: steps
            .iter()
            .map(|s| s.min_static_barrier)
            .fold(f64::INFINITY, f64::min),
        min_moving_barrier: steps
            .iter()
            .filter_map(|s| s.min_moving_barrier)
            .reduce(f64::min),
        mean_solve_time_s: if solve_times.is_empty() {
            0.0
        } else {
            solve_times.iter().sum::<f64>() / solve_times.len() as f64
        },
        solves: solve_times.len(),
        fallbacks,
        failure,
    };
    TrajectoryLog { steps, summary }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ViolationKind {
    OutsideWorkspace,
    StaticObstacle(usize),
    MovingObstacle(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub k: usize,
    pub sample: usize,
    pub time_s: f64,
    pub position: Point2,
    pub kind: ViolationKind,
    /// How far inside the forbidden region, in metres (moving: barrier value).
    pub depth: f64,
}

/// COM positions within step `rec`, `ORACLE_SAMPLES + 1` points from its
/// start to its end, rebuilt from the logged input and kick.
pub fn step_samples(
    rec: &StepRecord,
    period: f64,
    lip: &crate::lip::LipParams,
) -> Vec<(f64, Point2)> {
    let Some(u) = rec.input else {
        return vec![(rec.time_s, output(&rec.state))];
    };
    let kick = rec.disturbance.filter(|kk| kk.phase_s < period);
    let mid = kick.map(|kk| {
        let mut m = propagate_continuous(&rec.state, &u, kk.phase_s, lip);
        m.xdot += kk.delta_velocity_mps.x;
        m.ydot += kk.delta_velocity_mps.y;
        (kk.phase_s, m, reanchor(&u, &rec.state, &m))
    });
    (0..=ORACLE_SAMPLES)
        .map(|j| {
            let tau = period * j as f64 / ORACLE_SAMPLES as f64;
            let s = match mid {
                Some((xi, m, um)) if tau > xi => propagate_from_phase(&m, &um, xi, tau - xi, lip),
                _ => propagate_continuous(&rec.state, &u, tau, lip),
            };
            (rec.time_s + tau, output(&s))
        })
        .collect()
}

/// Checks the logged COM path against the raw geometry at robot-radius
/// clearance: workspace walls, raw obstacles and nominal moving ellipses.
pub fn collision_oracle(log: &TrajectoryLog, scenario: &Scenario) -> Vec<Violation> {
    let period = scenario.lip.step_duration_s;
    let r = scenario.robot_radius_m;
    let ws = scenario.workspace.expanded(-r);
    let mut out = Vec::new();
    for rec in &log.steps {
        for (j, (t, p)) in step_samples(rec, period, &scenario.lip)
            .into_iter()
            .enumerate()
        {
            let mut flag = |kind, depth| {
                out.push(Violation {
                    k: rec.k,
                    sample: j,
                    time_s: t,
                    position: p,
                    kind,
                    depth,
                })
            };
            let outside = (ws.min.x - p.x)
                .max(p.x - ws.max.x)
                .max(ws.min.y - p.y)
                .max(p.y - ws.max.y);
            if outside > BOUNDARY_TOL {
                flag(ViolationKind::OutsideWorkspace, outside);
            }
            for (i, o) in scenario.static_obstacles.iter().enumerate() {
                let inside = o.contains_strict(p);
                let d = o.distance_to(p);
                if inside || d < r - BOUNDARY_TOL {
                    flag(
                        ViolationKind::StaticObstacle(i),
                        if inside { r } else { r - d },
                    );
                }
            }
            let probe = LipState::at_rest(p, 0.0);
            for (i, o) in scenario.moving_obstacles.iter().enumerate() {
                let h = moving_barrier(&probe, o, t);
                if h < -BOUNDARY_TOL {
                    flag(ViolationKind::MovingObstacle(i), h);
                }
            }
        }
    }
    out
}
