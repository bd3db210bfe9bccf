//! RRT* with fixed-radius rewiring and a greedy shortcutting pass.

use crate::geometry::{segment_collision_free, Aabb, Point2, StaticMap};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RrtError {
    #[error("no path to the goal after {0} iterations")]
    NoPathFound(usize),
    #[error("{0} is not in free space")]
    EndpointInCollision(&'static str),
    #[error("invalid planner parameters: {0}")]
    InvalidParams(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RrtParams {
    pub max_iterations: usize,
    #[serde(rename = "step_size_m")]
    pub step_size: f64,
    pub goal_bias: f64,
    #[serde(rename = "rewire_radius_m")]
    pub rewire_radius: f64,
    #[serde(rename = "goal_tolerance_m")]
    pub goal_tolerance: f64,
    /// Iterations spent improving the tree once the goal is first reached.
    pub refine_iterations: usize,
    pub rng_seed: u64,
    /// Extra distance from obstacles and walls tried first; planning retries
    /// at two thirds and one third of it, then at zero.
    #[serde(rename = "clearance_m", default = "default_clearance")]
    pub clearance: f64,
}

fn default_clearance() -> f64 {
    0.15
}

impl Default for RrtParams {
    fn default() -> Self {
        Self {
            max_iterations: 20_000,
            step_size: 1.0,
            goal_bias: 0.1,
            rewire_radius: 3.0,
            goal_tolerance: 0.5,
            refine_iterations: 1_500,
            rng_seed: 0,
            clearance: default_clearance(),
        }
    }
}

impl RrtParams {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            rng_seed: seed,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<(), RrtError> {
        if !(self.step_size > 0.0) {
            return Err(RrtError::InvalidParams("step_size must be positive"));
        }
        if !(0.0..=1.0).contains(&self.goal_bias) {
            return Err(RrtError::InvalidParams("goal_bias must lie in [0, 1]"));
        }
        if self.rewire_radius < self.step_size {
            return Err(RrtError::InvalidParams(
                "rewire_radius must be at least step_size",
            ));
        }
        if !(self.goal_tolerance >= 0.0) {
            return Err(RrtError::InvalidParams(
                "goal_tolerance must be nonnegative",
            ));
        }
        if !(self.clearance >= 0.0) {
            return Err(RrtError::InvalidParams("clearance must be nonnegative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathPlan {
    pub points: Vec<Point2>,
    pub total_length: f64,
}

impl PathPlan {
    pub fn from_points(points: Vec<Point2>) -> Self {
        let total_length = polyline_length(&points);
        Self {
            points,
            total_length,
        }
    }
}

pub fn polyline_length(points: &[Point2]) -> f64 {
    points.windows(2).map(|w| w[0].distance(w[1])).sum()
}

/// Full planner output, including the goal cost history used for diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct RrtOutcome {
    pub plan: PathPlan,
    /// Path before shortcutting.
    pub raw_path: Vec<Point2>,
    /// Best cost-to-go-to-goal after each iteration since the goal was first reached.
    pub goal_cost_history: Vec<f64>,
    pub iterations: usize,
    pub tree_size: usize,
}

struct Node {
    p: Point2,
    parent: usize,
    cost: f64,
    children: Vec<usize>,
}

/// Uniform bucket grid over the workspace for radius queries.
struct Grid {
    origin: Point2,
    cell: f64,
    nx: usize,
    ny: usize,
    buckets: Vec<Vec<usize>>,
}

impl Grid {
    fn new(ws: &Aabb, cell: f64) -> Self {
        let nx = ((ws.width() / cell).ceil() as usize).max(1);
        let ny = ((ws.height() / cell).ceil() as usize).max(1);
        Self {
            origin: ws.min,
            cell,
            nx,
            ny,
            buckets: vec![Vec::new(); nx * ny],
        }
    }

    fn coords(&self, p: Point2) -> (usize, usize) {
        let cx = ((p.x - self.origin.x) / self.cell).floor().max(0.0) as usize;
        let cy = ((p.y - self.origin.y) / self.cell).floor().max(0.0) as usize;
        (cx.min(self.nx - 1), cy.min(self.ny - 1))
    }

    fn insert(&mut self, p: Point2, id: usize) {
        let (cx, cy) = self.coords(p);
        self.buckets[cy * self.nx + cx].push(id);
    }

    fn ring(&self, cx: usize, cy: usize, r: usize, out: &mut Vec<usize>) {
        let (x0, x1) = (cx as isize - r as isize, cx as isize + r as isize);
        let (y0, y1) = (cy as isize - r as isize, cy as isize + r as isize);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let on_ring = x == x0 || x == x1 || y == y0 || y == y1;
                if !on_ring || x < 0 || y < 0 || x >= self.nx as isize || y >= self.ny as isize {
                    continue;
                }
                out.extend_from_slice(&self.buckets[y as usize * self.nx + x as usize]);
            }
        }
    }

    fn nearest(&self, nodes: &[Node], p: Point2) -> usize {
        let (cx, cy) = self.coords(p);
        let mut best = (f64::INFINITY, usize::MAX);
        let mut buf = Vec::new();
        let max_r = self.nx.max(self.ny);
        for r in 0..=max_r {
            // Anything in ring r is at least (r−1)·cell away.
            if best.1 != usize::MAX && (r as f64 - 1.0) * self.cell > best.0 {
                break;
            }
            buf.clear();
            self.ring(cx, cy, r, &mut buf);
            for &id in &buf {
                let d = nodes[id].p.distance(p);
                if d < best.0 || (d == best.0 && id < best.1) {
                    best = (d, id);
                }
            }
        }
        best.1
    }

    fn within(&self, nodes: &[Node], p: Point2, radius: f64, out: &mut Vec<usize>) {
        out.clear();
        let (cx, cy) = self.coords(p);
        let reach = (radius / self.cell).ceil() as usize;
        let mut buf = Vec::new();
        for r in 0..=reach {
            self.ring(cx, cy, r, &mut buf);
        }
        out.extend(
            buf.into_iter()
                .filter(|&id| nodes[id].p.distance(p) <= radius),
        );
        out.sort_unstable();
    }
}

/// Plans a collision-free polyline from `start` to within tolerance of `goal`.
pub fn rrt_star_plan(
    map: &StaticMap,
    start: Point2,
    goal: Point2,
    params: &RrtParams,
) -> Result<PathPlan, RrtError> {
    params.validate()?;
    for c in [1.0, 2.0 / 3.0, 1.0 / 3.0].map(|f| f * params.clearance) {
        if c <= 0.0 {
            break;
        }
        let wide = StaticMap::from_raw(map.workspace, &map.obstacles, c);
        if wide.is_free(start) && wide.is_free(goal) {
            if let Ok(o) = rrt_star_explore(&wide, start, goal, params) {
                return Ok(o.plan);
            }
        }
    }
    rrt_star_explore(map, start, goal, params).map(|o| o.plan)
}

pub fn rrt_star_explore(
    map: &StaticMap,
    start: Point2,
    goal: Point2,
    params: &RrtParams,
) -> Result<RrtOutcome, RrtError> {
    params.validate()?;
    if !map.is_free(start) {
        return Err(RrtError::EndpointInCollision("start"));
    }
    if !map.is_free(goal) {
        return Err(RrtError::EndpointInCollision("goal"));
    }
    let ws = map.workspace;
    let mut rng = ChaCha8Rng::seed_from_u64(params.rng_seed);
    let mut grid = Grid::new(&ws, params.rewire_radius.max(params.step_size));
    let mut nodes = vec![Node {
        p: start,
        parent: 0,
        cost: 0.0,
        children: Vec::new(),
    }];
    grid.insert(start, 0);

    // Nodes within tolerance of the goal, with the extra cost of the final hop.
    let mut goal_nodes: Vec<(usize, f64)> = Vec::new();
    let goal_hop = |p: Point2| -> Option<f64> {
        let d = p.distance(goal);
        (d <= params.goal_tolerance && segment_collision_free(p, goal, map)).then_some(d)
    };
    if let Some(h) = goal_hop(start) {
        goal_nodes.push((0, h));
    }
    let mut history = Vec::new();
    let mut first_hit: Option<usize> = (!goal_nodes.is_empty()).then_some(0);
    let mut near = Vec::new();
    let mut iterations = 0;

    while iterations < params.max_iterations {
        if let Some(h) = first_hit {
            if iterations >= h + params.refine_iterations {
                break;
            }
        }
        iterations += 1;
        let sample = if rng.gen::<f64>() < params.goal_bias {
            goal
        } else {
            Point2::new(
                rng.gen_range(ws.min.x..=ws.max.x),
                rng.gen_range(ws.min.y..=ws.max.y),
            )
        };
        let nearest = grid.nearest(&nodes, sample);
        let from = nodes[nearest].p;
        let d = from.distance(sample);
        if d < 1e-9 {
            record(&nodes, &goal_nodes, &mut history, first_hit.is_some());
            continue;
        }
        let new_p = if d > params.step_size {
            from + (sample - from) * (params.step_size / d)
        } else {
            sample
        };
        if !map.is_free(new_p) || !segment_collision_free(from, new_p, map) {
            record(&nodes, &goal_nodes, &mut history, first_hit.is_some());
            continue;
        }

        grid.within(&nodes, new_p, params.rewire_radius, &mut near);
        let mut parent = nearest;
        let mut best = nodes[nearest].cost + d.min(params.step_size);
        let mut free_near = Vec::with_capacity(near.len());
        for &id in &near {
            let free = id == nearest || segment_collision_free(nodes[id].p, new_p, map);
            if free {
                free_near.push(id);
                let c = nodes[id].cost + nodes[id].p.distance(new_p);
                if c < best - 1e-12 {
                    best = c;
                    parent = id;
                }
            }
        }
        let new_id = nodes.len();
        nodes.push(Node {
            p: new_p,
            parent,
            cost: best,
            children: Vec::new(),
        });
        nodes[parent].children.push(new_id);
        grid.insert(new_p, new_id);

        for &id in &free_near {
            if id == parent {
                continue;
            }
            let c = best + new_p.distance(nodes[id].p);
            if c < nodes[id].cost - 1e-12 {
                let old = nodes[id].parent;
                nodes[old].children.retain(|&ch| ch != id);
                nodes[id].parent = new_id;
                nodes[new_id].children.push(id);
                let delta = nodes[id].cost - c;
                propagate_decrease(&mut nodes, id, delta);
            }
        }

        if let Some(h) = goal_hop(new_p) {
            goal_nodes.push((new_id, h));
            first_hit.get_or_insert(iterations);
        }
        record(&nodes, &goal_nodes, &mut history, first_hit.is_some());
    }

    let Some(&(best_node, hop)) = goal_nodes.iter().min_by(|a, b| {
        (nodes[a.0].cost + a.1)
            .total_cmp(&(nodes[b.0].cost + b.1))
            .then(a.0.cmp(&b.0))
    }) else {
        return Err(RrtError::NoPathFound(iterations));
    };
    let mut raw = vec![];
    let mut cur = best_node;
    loop {
        raw.push(nodes[cur].p);
        if cur == 0 {
            break;
        }
        cur = nodes[cur].parent;
    }
    raw.reverse();
    if hop > 0.0 {
        raw.push(goal);
    }
    let plan = PathPlan::from_points(shortcut(&raw, map));
    Ok(RrtOutcome {
        plan,
        raw_path: raw,
        goal_cost_history: history,
        iterations,
        tree_size: nodes.len(),
    })
}

fn record(nodes: &[Node], goal_nodes: &[(usize, f64)], history: &mut Vec<f64>, active: bool) {
    if active {
        let best = goal_nodes
            .iter()
            .map(|&(id, h)| nodes[id].cost + h)
            .fold(f64::INFINITY, f64::min);
        history.push(best);
    }
}

fn propagate_decrease(nodes: &mut [Node], root: usize, delta: f64) {
    let mut stack = vec![root];
    while let Some(id) = stack.pop() {
        nodes[id].cost -= delta;
        stack.extend_from_slice(&nodes[id].children);
    }
}

/// Greedy shortcutting: from each kept point jump to the farthest later point
/// reachable by a free segment.
pub fn shortcut(points: &[Point2], map: &StaticMap) -> Vec<Point2> {
    if points.len() <= 2 {
        return points.to_vec();
    }
    let mut out = vec![points[0]];
    let mut i = 0;
    while i + 1 < points.len() {
        let j = (i + 1..points.len())
            .rev()
            .find(|&j| j == i + 1 || segment_collision_free(points[i], points[j], map))
            .unwrap_or(i + 1);
        out.push(points[j]);
        i = j;
    }
    out
}
