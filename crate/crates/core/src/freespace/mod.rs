//! Obstacle-free convex decomposition along a global plan.
//!
//! [`poly_fs_gen`] walks the plan, grows a polytope around every point that
//! leaves the current cell, and bridges disjoint neighbours with extra cells
//! seeded where the connecting segment exits the previous one. Consecutive
//! cells overlap and each overlap holds a waypoint at its Chebyshev center.

mod iris;

pub use iris::{
    generate_polytope, generate_polytope_traced, inscribed_ellipse, Ellipse, IrisSnapshot,
    SeedGrowthTrace, SEED_CLEARANCE,
};

use crate::geometry::{
    chebyshev_center, poly_line_intersect, GeometryError, Point2, Polytope, StaticMap,
};
use crate::rrt::PathPlan;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Most intermediate cells a single bridge may insert.
pub const MAX_BRIDGING_POLYTOPES: usize = 50;

/// Consecutive cells must share a disc at least this wide, so the overlap
/// stays reachable when the controller keeps a margin from cell faces.
pub const MIN_OVERLAP_RADIUS: f64 = 0.05;

/// Chebyshev center of `a ∩ b` when the overlap is wide enough.
pub fn overlap_center(a: &Polytope, b: &Polytope) -> Result<Option<Point2>, GeometryError> {
    Ok(chebyshev_center(a, b)?
        .filter(|c| c.radius >= MIN_OVERLAP_RADIUS)
        .map(|c| c.center))
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FreespaceError {
    #[error("seed ({}, {}) is inside or touching an obstacle", .0.x, .0.y)]
    SeedInObstacle(Point2),
    #[error("bridging between cells did not close after {0} polytopes")]
    BridgingFailed(usize),
    #[error("decomposition failed validation: {0}")]
    DecompositionFailed(String),
    #[error("numerical failure in polytope generation")]
    NumericalFailure,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Cells `H_0 … H_{M−1}` and waypoints `w_1 … w_M`; `w_i` lies in
/// `H_{i−1} ∩ H_i` and `w_M` is the goal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FreeSpaceChain {
    pub cells: Vec<Polytope>,
    pub waypoints: Vec<Point2>,
}

impl FreeSpaceChain {
    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn goal(&self) -> Option<Point2> {
        self.waypoints.last().copied()
    }

    /// Indices of every cell containing `p`.
    pub fn cells_containing(&self, p: Point2) -> impl Iterator<Item = usize> + '_ {
        self.cells
            .iter()
            .enumerate()
            .filter(move |(_, c)| c.contains(p))
            .map(|(i, _)| i)
    }
}

/// Bridges `h1` (holding `p1`) to `h2` (holding `p2`).
///
/// Returns `(H^1, w^1) … (H^L, w^L), (h2, w_new)` where each waypoint is the
/// Chebyshev center of its cell's overlap with the previous cell. When a
/// bridge cell already holds `p2` but meets `h2` too thinly, it ends the
/// bridge in place of `h2`.
pub fn intersecting_polytopes(
    h1: &Polytope,
    p1: Point2,
    h2: &Polytope,
    p2: Point2,
    map: &StaticMap,
) -> Result<Vec<(Polytope, Point2)>, FreespaceError> {
    if let Some(c) = overlap_center(h1, h2)? {
        return Ok(vec![(h2.clone(), c)]);
    }
    let mut out = Vec::new();
    let mut prev = h1.clone();
    let mut p = p1;
    loop {
        if out.len() >= MAX_BRIDGING_POLYTOPES {
            return Err(FreespaceError::BridgingFailed(out.len()));
        }
        if !out.is_empty() && prev.contains(p2) {
            return Ok(out);
        }
        let exit = if prev.contains(p2) {
            p2
        } else {
            poly_line_intersect(&prev, p, p2)?
        };
        let (next, seed, w) = bridge_cell(&prev, p, exit, p2, map)?
            .ok_or(FreespaceError::BridgingFailed(out.len() + 1))?;
        let closing = overlap_center(&next, h2)?;
        out.push((next.clone(), w));
        if let Some(c) = closing {
            out.push((h2.clone(), c));
            return Ok(out);
        }
        prev = next;
        p = seed;
    }
}

/// Offsets along the segment tried around the exit point, in metres.
const BRIDGE_SEED_OFFSETS: [f64; 9] = [0.0, 0.1, -0.1, 0.25, -0.25, 0.5, -0.5, 1.0, -1.0];
/// Radii of the seed rings tried around the exit point when no seed on the
/// segment works.
const BRIDGE_RING_RADII: [f64; 3] = [0.15, 0.3, 0.6];
const BRIDGE_RING_SEEDS: usize = 12;

/// Parameter interval of `p + s·dir`, `s ∈ [0, len]`, inside `h`.
fn clip_segment(h: &Polytope, p: Point2, dir: Point2, len: f64) -> Option<(f64, f64)> {
    let (mut lo, mut hi) = (0.0, len);
    for row in h.rows() {
        let a = row.normal.dot(dir);
        let b = row.offset - row.normal.dot(p);
        if a.abs() < 1e-12 {
            if b < 0.0 {
                return None;
            }
        } else if a > 0.0 {
            hi = f64::min(hi, b / a);
        } else {
            lo = f64::max(lo, b / a);
        }
    }
    (lo <= hi).then_some((lo, hi))
}

/// Grows a cell near `exit` that overlaps `prev` widely and covers part of
/// the segment `p → p2` beyond `exit`. Returns the cell, a segment point
/// inside it and the overlap waypoint.
fn bridge_cell(
    prev: &Polytope,
    p: Point2,
    exit: Point2,
    p2: Point2,
    map: &StaticMap,
) -> Result<Option<(Polytope, Point2, Point2)>, FreespaceError> {
    let span = p2 - p;
    let len = span.norm();
    if len <= 0.0 {
        return Ok(None);
    }
    let dir = span * (1.0 / len);
    let s_exit = (exit - p).dot(dir);
    let on_segment = BRIDGE_SEED_OFFSETS
        .iter()
        .map(|off| p + dir * (s_exit + off).clamp(0.0, len));
    let rings = BRIDGE_RING_RADII.iter().flat_map(|&r| {
        (0..BRIDGE_RING_SEEDS).map(move |i| {
            let a = std::f64::consts::TAU * i as f64 / BRIDGE_RING_SEEDS as f64;
            exit + Point2::new(a.cos(), a.sin()) * r
        })
    });
    for seed in on_segment.chain(rings) {
        if !map.is_free(seed) {
            continue;
        }
        let next = match generate_polytope(map, seed) {
            Ok(h) => h,
            Err(FreespaceError::SeedInObstacle(_)) => continue,
            Err(e) => return Err(e),
        };
        let Some((lo, hi)) = clip_segment(&next, p, dir, len) else {
            continue;
        };
        if hi <= s_exit + 1e-3 {
            continue;
        }
        if let Some(w) = overlap_center(prev, &next)? {
            return Ok(Some((next, p + dir * lo.max(s_exit).min(hi), w)));
        }
    }
    Ok(None)
}

/// Builds the cell chain from `y0` along `plan` to `goal`.
pub fn poly_fs_gen(
    y0: Point2,
    plan: &PathPlan,
    goal: Point2,
    map: &StaticMap,
) -> Result<FreeSpaceChain, FreespaceError> {
    let mut points = Vec::with_capacity(plan.points.len() + 2);
    points.push(y0);
    points.extend_from_slice(&plan.points);
    points.push(goal);

    let mut cells = vec![generate_polytope(map, y0)?];
    let mut waypoints = Vec::new();
    for j in 1..points.len() {
        let current = cells.last().unwrap();
        if current.contains(points[j]) {
            continue;
        }
        let fresh = generate_polytope(map, points[j])?;
        let bridge = intersecting_polytopes(current, points[j - 1], &fresh, points[j], map)?;
        for (cell, w) in bridge {
            cells.push(cell);
            waypoints.push(w);
        }
    }
    waypoints.push(goal);
    let chain = FreeSpaceChain { cells, waypoints };
    validate_chain(&chain, map, y0, goal).map_err(FreespaceError::DecompositionFailed)?;
    Ok(chain)
}

/// Checks every structural invariant of a chain.
///
/// Obstacle exclusion is exact: each obstacle clipped by each cell must have
/// (numerically) zero area.
pub fn validate_chain(
    chain: &FreeSpaceChain,
    map: &StaticMap,
    y0: Point2,
    goal: Point2,
) -> Result<(), String> {
    let m = chain.cells.len();
    if m == 0 || chain.waypoints.len() != m {
        return Err(format!("{m} cells but {} waypoints", chain.waypoints.len()));
    }
    if !chain.cells[0].contains(y0) {
        return Err("start outside the first cell".into());
    }
    if chain.waypoints[m - 1] != goal || !chain.cells[m - 1].contains(goal) {
        return Err("goal is not the last waypoint inside the last cell".into());
    }
    for i in 1..m {
        let (a, b) = (&chain.cells[i - 1], &chain.cells[i]);
        let w = chain.waypoints[i - 1];
        if !a.contains(w) || !b.contains(w) {
            return Err(format!("waypoint {i} outside cells {} and {i}", i - 1));
        }
        match overlap_center(a, b) {
            Ok(Some(_)) => {}
            Ok(None) => {
                return Err(format!(
                    "cells {} and {i} do not overlap by {MIN_OVERLAP_RADIUS} m",
                    i - 1
                ))
            }
            Err(e) => return Err(e.to_string()),
        }
    }
    for (i, cell) in chain.cells.iter().enumerate() {
        if cell.vertices().len() < 3 {
            return Err(format!("cell {i} is empty"));
        }
        for (k, o) in map.obstacles.iter().enumerate() {
            let mut pts = o.vertices().to_vec();
            for h in cell.rows() {
                pts = crate::geometry::clip_halfplane(&pts, h.normal, h.offset);
                if pts.len() < 3 {
                    break;
                }
            }
            if pts.len() >= 3 && crate::geometry::signed_area(&pts) > 1e-8 {
                return Err(format!("cell {i} overlaps obstacle {k}"));
            }
        }
    }
    Ok(())
}

/// Re-targets an existing chain to new endpoints without replanning.
///
/// Returns `None` when either endpoint lies outside every cell.
pub fn rewire_chain(
    chain: &FreeSpaceChain,
    y0_new: Point2,
    goal_new: Point2,
) -> Option<FreeSpaceChain> {
    let starts: Vec<usize> = chain.cells_containing(y0_new).collect();
    let goals: Vec<usize> = chain.cells_containing(goal_new).collect();
    let (m, n) = starts
        .iter()
        .flat_map(|&m| goals.iter().map(move |&n| (m, n)))
        .min_by_key(|&(m, n)| (m.abs_diff(n), m))?;
    let order: Vec<usize> = if m <= n {
        (m..=n).collect()
    } else {
        (n..=m).rev().collect()
    };
    let cells: Vec<Polytope> = order.iter().map(|&i| chain.cells[i].clone()).collect();
    let mut waypoints = Vec::with_capacity(cells.len());
    for pair in cells.windows(2) {
        waypoints.push(chebyshev_center(&pair[0], &pair[1]).ok()??.center);
    }
    waypoints.push(goal_new);
    Some(FreeSpaceChain { cells, waypoints })
}
