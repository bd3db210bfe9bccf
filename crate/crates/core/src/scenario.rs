//! Scenario files: workspace, raw obstacles, moving obstacles, endpoints and
//! every model parameter in one versioned JSON document.

use crate::freespace::{poly_fs_gen, FreeSpaceChain, FreespaceError};
use crate::geometry::{Aabb, ConvexPolygon, Point2, StaticMap};
use crate::lip::{LipParams, LipState, Stance, StanceBounds};
use crate::mapgen::RandomMap;
use crate::mpc::{MovingObstacle, MpcConfig, PathKnot};
use crate::rrt::{rrt_star_plan, PathPlan, RrtError, RrtParams};
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::time::Instant;
use thiserror::Error;

pub const FORMAT_VERSION: u32 = 1;
/// RRT* reruns allowed when the cell bridging fails on the returned path.
pub const PLAN_ATTEMPTS: u32 = 3;

/// Names accepted by [`Scenario::bundled`].
pub const BUNDLED: [&str; 2] = ["empty", "moving_obstacle"];

fn default_max_steps() -> usize {
    2000
}

fn default_stance() -> Stance {
    Stance::Left
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub format_version: u32,
    pub name: String,
    #[serde(rename = "workspace_m")]
    pub workspace: Aabb,
    pub robot_radius_m: f64,
    /// Raw obstacles; the planner inflates them by the robot radius.
    #[serde(rename = "static_obstacles_m", default)]
    pub static_obstacles: Vec<ConvexPolygon>,
    #[serde(default)]
    pub moving_obstacles: Vec<MovingObstacle>,
    #[serde(rename = "start_m")]
    pub start: Point2,
    /// Initial heading; when absent the robot faces its first waypoint.
    #[serde(default)]
    pub start_heading_rad: Option<f64>,
    #[serde(rename = "goal_m")]
    pub goal: Point2,
    #[serde(default = "default_stance")]
    pub initial_stance: Stance,
    #[serde(default)]
    pub lip: LipParams,
    #[serde(default)]
    pub bounds: StanceBounds,
    #[serde(default)]
    pub mpc: MpcConfig,
    #[serde(default)]
    pub rrt: RrtParams,
    #[serde(default = "default_max_steps")]
    pub max_steps: usize,
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("{path}:{line}:{column}: {message}")]
    Parse {
        path: String,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("{0}: {1}")]
    Io(String, std::io::Error),
    #[error("unknown bundled scenario {0:?}")]
    UnknownBundled(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlanError {
    #[error("global planner: {0}")]
    Rrt(#[from] RrtError),
    #[error("decomposition: {0}")]
    Freespace(#[from] FreespaceError),
}

/// Output of the offline stage: global path and its cell chain.
#[derive(Debug, Clone, PartialEq)]
pub struct PlannedScenario {
    pub map: StaticMap,
    pub path: PathPlan,
    pub chain: FreeSpaceChain,
    pub rrt_time_s: f64,
    pub decomposition_time_s: f64,
}

impl Scenario {
    pub fn from_json_str(text: &str, origin: &str) -> Result<Self, ScenarioError> {
        let s: Scenario = serde_json::from_str(text).map_err(|e| ScenarioError::Parse {
            path: origin.to_string(),
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let name = path.display().to_string();
        let text = std::fs::read_to_string(path).map_err(|e| ScenarioError::Io(name.clone(), e))?;
        Self::from_json_str(&text, &name)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn save(&self, path: &Path) -> Result<(), ScenarioError> {
        std::fs::write(path, self.to_json() + "\n")
            .map_err(|e| ScenarioError::Io(path.display().to_string(), e))
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |m: String| Err(ScenarioError::Invalid(m));
        if self.format_version != FORMAT_VERSION {
            return bad(format!(
                "format_version {} is not supported (expected {FORMAT_VERSION})",
                self.format_version
            ));
        }
        if !(self.workspace.width() > 0.0 && self.workspace.height() > 0.0) {
            return bad("workspace_m must have positive width and height".into());
        }
        if !(self.robot_radius_m >= 0.0) {
            return bad("robot_radius_m must be nonnegative".into());
        }
        if !self.lip.is_valid() {
            return bad("lip parameters must be positive".into());
        }
        if !self.bounds.is_valid() {
            return bad("bounds: every lower bound must not exceed its upper bound".into());
        }
        if !self.mpc.is_valid() {
            return bad("mpc: horizon must be at least 1 and weights nonnegative".into());
        }
        if let Some(i) = self.moving_obstacles.iter().position(|o| !o.is_valid()) {
            return bad(format!(
                "moving_obstacles[{i}] has non-positive axes or unordered knots"
            ));
        }
        let map = self.static_map();
        for (what, p) in [("start_m", self.start), ("goal_m", self.goal)] {
            if !map.is_free(p) {
                return bad(format!(
                    "{what} ({}, {}) is not in inflated free space",
                    p.x, p.y
                ));
            }
        }
        Ok(())
    }

    /// Obstacles inflated by the robot radius and clipped to the workspace.
    pub fn static_map(&self) -> StaticMap {
        StaticMap::from_raw(self.workspace, &self.static_obstacles, self.robot_radius_m)
    }

    /// Gait-start state at the start point, facing `toward` unless a heading
    /// is given.
    pub fn initial_state(&self, toward: Point2) -> LipState {
        let d = toward - self.start;
        let heading =
            self.start_heading_rad
                .unwrap_or(if d.norm() > 1e-9 { d.y.atan2(d.x) } else { 0.0 });
        LipState::gait_start(
            self.start,
            heading,
            self.initial_stance,
            &self.lip,
            &self.bounds,
        )
    }

    /// RRT* path and cell chain, both timed.
    pub fn plan(&self) -> Result<PlannedScenario, PlanError> {
        let map = self.static_map();
        let mut rrt = self.rrt;
        let mut attempt = 1;
        loop {
            let t0 = Instant::now();
            let path = rrt_star_plan(&map, self.start, self.goal, &rrt)?;
            let rrt_time_s = t0.elapsed().as_secs_f64();
            let t1 = Instant::now();
            let chain = match poly_fs_gen(self.start, &path, self.goal, &map) {
                Ok(c) => c,
                Err(FreespaceError::BridgingFailed(_)) if attempt < PLAN_ATTEMPTS => {
                    // A different tree usually avoids the pinch point.
                    attempt += 1;
                    rrt.rng_seed = rrt
                        .rng_seed
                        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                        .wrapping_add(1);
                    continue;
                }
                Err(e) => return Err(e.into()),
            };
            let decomposition_time_s = t1.elapsed().as_secs_f64();
            return Ok(PlannedScenario {
                map,
                path,
                chain,
                rrt_time_s,
                decomposition_time_s,
            });
        }
    }

    /// Static scenario on a generated map with default model parameters.
    pub fn from_random_map(name: &str, map: &RandomMap, rrt_seed: u64) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            name: name.to_string(),
            workspace: map.map.workspace.expanded(map.map.inflation_radius),
            robot_radius_m: map.map.inflation_radius,
            static_obstacles: map.raw.clone(),
            moving_obstacles: Vec::new(),
            start: map.start,
            start_heading_rad: None,
            goal: map.goal,
            initial_stance: Stance::Left,
            lip: LipParams::default(),
            bounds: StanceBounds::default(),
            mpc: MpcConfig::default(),
            rrt: RrtParams::with_seed(rrt_seed),
            max_steps: default_max_steps(),
        }
    }

    pub fn bundled(name: &str) -> Result<Self, ScenarioError> {
        match name {
            "empty" => Ok(Self::empty_map()),
            "moving_obstacle" => Ok(Self::moving_obstacle()),
            _ => Err(ScenarioError::UnknownBundled(name.to_string())),
        }
    }

    /// 10 m × 10 m box without obstacles; goal 5 m ahead of the start.
    pub fn empty_map() -> Self {
        Self {
            format_version: FORMAT_VERSION,
            name: "empty".into(),
            workspace: Aabb::new(Point2::new(0.0, 0.0), Point2::new(10.0, 10.0)),
            robot_radius_m: 0.5,
            static_obstacles: Vec::new(),
            moving_obstacles: Vec::new(),
            start: Point2::new(2.0, 5.0),
            start_heading_rad: Some(0.0),
            goal: Point2::new(7.0, 5.0),
            initial_stance: Stance::Left,
            lip: LipParams::default(),
            bounds: StanceBounds::default(),
            mpc: MpcConfig::default(),
            rrt: RrtParams::default(),
            max_steps: default_max_steps(),
        }
    }

    /// 10 m × 10 m box with ten static obstacles and one 0.5 m disc crossing
    /// the route at 0.3 m/s, considered only within 5 m.
    pub fn moving_obstacle() -> Self {
        let rect = |cx: f64, cy: f64, hx: f64, hy: f64| {
            ConvexPolygon::rectangle(Point2::new(cx - hx, cy - hy), Point2::new(cx + hx, cy + hy))
                .expect("valid rectangle")
        };
        let poly = |pts: &[(f64, f64)]| {
            ConvexPolygon::new(pts.iter().map(|&(x, y)| Point2::new(x, y)).collect())
                .expect("valid polygon")
        };
        let radius = 0.5;
        let robot = 0.5;
        // Shuttles across the start-goal diagonal at 0.3 m/s until 600 s.
        let ends = [Point2::new(7.6, 2.4), Point2::new(2.4, 7.6)];
        let leg = ends[0].distance(ends[1]) / 0.3;
        let path = (0..=(600.0 / leg) as usize)
            .map(|i| PathKnot {
                time_s: i as f64 * leg,
                position: ends[i % 2],
            })
            .collect();
        let disc = MovingObstacle {
            semi_axes: [radius + robot; 2],
            path,
            orientation_rad: 0.0,
            angular_rate_radps: 0.0,
            activation_radius: 5.0,
        };
        Self {
            format_version: FORMAT_VERSION,
            name: "moving_obstacle".into(),
            workspace: Aabb::new(Point2::new(0.0, 0.0), Point2::new(10.0, 10.0)),
            robot_radius_m: robot,
            static_obstacles: vec![
                rect(2.5, 5.2, 0.5, 0.5),
                rect(5.2, 2.5, 0.5, 0.5),
                rect(4.8, 7.6, 0.6, 0.4),
                rect(7.6, 4.8, 0.4, 0.6),
                rect(0.9, 3.3, 0.4, 0.5),
                rect(3.3, 0.9, 0.5, 0.4),
                rect(6.8, 9.1, 0.5, 0.3),
                rect(9.1, 6.8, 0.3, 0.5),
                poly(&[(8.6, 0.5), (9.5, 0.7), (9.3, 1.6), (8.7, 1.4)]),
                poly(&[(0.5, 8.6), (1.4, 8.7), (1.6, 9.3), (0.7, 9.5)]),
            ],
            moving_obstacles: vec![disc],
            start: Point2::new(1.0, 1.0),
            start_heading_rad: None,
            goal: Point2::new(9.0, 9.0),
            initial_stance: Stance::Left,
            lip: LipParams::default(),
            bounds: StanceBounds::default(),
            mpc: MpcConfig::default(),
            rrt: RrtParams::default(),
            max_steps: default_max_steps(),
        }
    }
}
