//! Random cluttered maps: rectangles, rotated rectangles or general convex
//! polygons on a jittered lattice, sized to a target raw coverage.

use crate::geometry::{
    closest_point_on_convex, convex_hull, Aabb, ConvexPolygon, Point2, StaticMap,
};
use crate::rrt::{rrt_star_explore, RrtParams};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::{FRAC_PI_2, TAU};
use thiserror::Error;

pub const MAX_ATTEMPTS: usize = 20;
/// Allowed absolute deviation of measured coverage from the target.
pub const COVERAGE_TOLERANCE: f64 = 0.05;
/// Extra clearance a start-to-goal route must keep for a map to be accepted;
/// narrower passages cannot hold overlapping cells.
pub const PASSAGE_CLEARANCE_M: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ObstacleFamily {
    Rectangles,
    RotatedRectangles,
    Polytopes,
}

impl ObstacleFamily {
    pub const ALL: [ObstacleFamily; 3] = [
        ObstacleFamily::Rectangles,
        ObstacleFamily::RotatedRectangles,
        ObstacleFamily::Polytopes,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ObstacleFamily::Rectangles => "rectangles",
            ObstacleFamily::RotatedRectangles => "rotated_rectangles",
            ObstacleFamily::Polytopes => "polytopes",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|f| f.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapGenParams {
    pub family: ObstacleFamily,
    pub count: usize,
    pub workspace: Aabb,
    pub target_coverage: f64,
    pub inflation_radius: f64,
    /// Minimum distance between raw obstacles, and between obstacles and walls.
    pub min_gap: f64,
    pub start: Point2,
    pub goal: Point2,
    pub seed: u64,
}

impl MapGenParams {
    /// 50 m × 50 m box, start near (2, 2), goal near (48, 48), 0.5 m inflation.
    pub fn benchmark(family: ObstacleFamily, count: usize, seed: u64) -> Self {
        Self {
            family,
            count,
            workspace: Aabb::new(Point2::new(0.0, 0.0), Point2::new(50.0, 50.0)),
            target_coverage: 0.4,
            inflation_radius: 0.5,
            min_gap: 1.5,
            start: Point2::new(2.0, 2.0),
            goal: Point2::new(48.0, 48.0),
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RandomMap {
    pub raw: Vec<ConvexPolygon>,
    pub map: StaticMap,
    pub start: Point2,
    pub goal: Point2,
    pub coverage: f64,
    pub attempts: usize,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MapGenError {
    #[error("could not generate a valid map after {0} attempts")]
    GenerationFailed(usize),
    #[error("invalid generator parameters: {0}")]
    InvalidParams(&'static str),
}

/// Raw-obstacle area over workspace area.
pub fn coverage(raw: &[ConvexPolygon], workspace: &Aabb) -> f64 {
    raw.iter().map(|o| o.area()).sum::<f64>() / workspace.area()
}

pub fn generate_random_map(params: &MapGenParams) -> Result<RandomMap, MapGenError> {
    if params.target_coverage < 0.0 || params.target_coverage >= 0.6 {
        return Err(MapGenError::InvalidParams(
            "target_coverage must lie in [0, 0.6)",
        ));
    }
    let ws = params.workspace;
    if params.count == 0 {
        return Ok(RandomMap {
            raw: Vec::new(),
            map: StaticMap::from_raw(ws, &[], params.inflation_radius),
            start: params.start,
            goal: params.goal,
            coverage: 0.0,
            attempts: 1,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    for attempt in 1..=MAX_ATTEMPTS {
        let Some(raw) = place_obstacles(params, &mut rng) else {
            continue;
        };
        let cov = coverage(&raw, &ws);
        if (cov - params.target_coverage).abs() > COVERAGE_TOLERANCE {
            continue;
        }
        let map = StaticMap::from_raw(ws, &raw, params.inflation_radius);
        if !map.is_free(params.start) || !map.is_free(params.goal) {
            continue;
        }
        let rrt = RrtParams::with_seed(rng.gen());
        let wide = StaticMap::from_raw(map.workspace, &map.obstacles, PASSAGE_CLEARANCE_M);
        if !wide.is_free(params.start)
            || !wide.is_free(params.goal)
            || rrt_star_explore(&wide, params.start, params.goal, &rrt).is_err()
        {
            continue;
        }
        return Ok(RandomMap {
            raw,
            map,
            start: params.start,
            goal: params.goal,
            coverage: cov,
            attempts: attempt,
        });
    }
    Err(MapGenError::GenerationFailed(MAX_ATTEMPTS))
}

/// One obstacle per lattice cell, skipping the cells holding start and goal.
fn place_obstacles(params: &MapGenParams, rng: &mut ChaCha8Rng) -> Option<Vec<ConvexPolygon>> {
    let ws = params.workspace;
    let n = params.count;
    let cells = lattice(&ws, n, params.start, params.goal);
    let mut chosen: Vec<Aabb> = cells.choose_multiple(rng, n).copied().collect();
    chosen.sort_by(|a, b| {
        a.min
            .y
            .total_cmp(&b.min.y)
            .then(a.min.x.total_cmp(&b.min.x))
    });

    let weights: Vec<f64> = (0..n).map(|_| rng.gen_range(0.6..1.4)).collect();
    let half_gap = 0.5 * params.min_gap;
    let mut shapes = Vec::with_capacity(n);
    for cell in &chosen {
        let room = Aabb::new(
            cell.min + Point2::new(half_gap, half_gap),
            cell.max - Point2::new(half_gap, half_gap),
        );
        if room.width() <= 0.0 || room.height() <= 0.0 {
            return None;
        }
        let unit = unit_shape(params.family, rng)?;
        let bb = Aabb::of_points(&unit);
        let max_scale = (room.width() / bb.width()).min(room.height() / bb.height());
        shapes.push((unit, room, max_scale * max_scale));
    }
    // Areas proportional to the weights, capped by what fits; the cap's
    // shortfall is spread over the others by bisecting a common multiplier.
    let target = params.target_coverage * params.workspace.area();
    let total = |lambda: f64| -> f64 {
        shapes
            .iter()
            .zip(&weights)
            .map(|((_, _, cap), w)| (lambda * w).min(*cap))
            .sum()
    };
    let mut hi = shapes
        .iter()
        .zip(&weights)
        .map(|((_, _, cap), w)| cap / w)
        .fold(0.0, f64::max);
    let mut lo = 0.0;
    let reachable = target.min(total(hi));
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if total(mid) < reachable {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mut raw = Vec::with_capacity(n);
    for ((unit, room, cap), w) in shapes.iter().zip(&weights) {
        let scale = (hi * w).min(*cap).sqrt();
        let local: Vec<Point2> = unit.iter().map(|&p| p * scale).collect();
        let bb = Aabb::of_points(&local);
        let slack_x = (room.width() - bb.width()).max(0.0);
        let slack_y = (room.height() - bb.height()).max(0.0);
        let shift = Point2::new(
            room.min.x - bb.min.x + rng.gen_range(0.0..=slack_x),
            room.min.y - bb.min.y + rng.gen_range(0.0..=slack_y),
        );
        raw.push(ConvexPolygon::new(local.into_iter().map(|p| p + shift).collect()).ok()?);
    }
    grow_to_target(&mut raw, target, params);
    Some(raw)
}

/// Enlarges obstacles about their centroids, keeping every pairwise gap and
/// the wall margin, until the total area reaches `target` or nothing can grow.
fn grow_to_target(raw: &mut [ConvexPolygon], target: f64, params: &MapGenParams) {
    let inner = params.workspace.expanded(-0.5 * params.min_gap);
    let keep_clear = params.inflation_radius + 1.0;
    let fits = |raw: &[ConvexPolygon], i: usize, cand: &ConvexPolygon| -> bool {
        let bb = cand.bounding_box();
        if bb.min.x < inner.min.x
            || bb.min.y < inner.min.y
            || bb.max.x > inner.max.x
            || bb.max.y > inner.max.y
        {
            return false;
        }
        if cand.distance_to(params.start) < keep_clear || cand.distance_to(params.goal) < keep_clear
        {
            return false;
        }
        let reach = bb.expanded(params.min_gap);
        raw.iter().enumerate().all(|(j, o)| {
            j == i
                || !o.bounding_box().overlaps(&reach)
                || polygon_distance(cand, o) >= params.min_gap
        })
    };
    for _ in 0..60 {
        let area: f64 = raw.iter().map(|o| o.area()).sum();
        if area >= target * (1.0 - 1e-6) {
            return;
        }
        let wanted = (target / area).sqrt().min(1.1);
        let mut grew = false;
        for i in 0..raw.len() {
            // Step away from whatever is closest so the next growth has room.
            let push = repulsion(raw, i, &inner, params.min_gap);
            if push.norm() > 1e-9 {
                let step = push * (0.25 / push.norm()).min(1.0);
                let moved = raw[i].translated(step);
                if fits(raw, i, &moved) {
                    raw[i] = moved;
                }
            }
            let scaled = |s: f64| {
                let c = raw[i].centroid();
                ConvexPolygon::new(raw[i].vertices().iter().map(|&v| c + (v - c) * s).collect())
                    .ok()
            };
            let (mut lo, mut hi) = (1.0, wanted);
            if let Some(c) = scaled(hi).filter(|c| fits(raw, i, c)) {
                raw[i] = c;
                grew = true;
                continue;
            }
            for _ in 0..12 {
                let mid = 0.5 * (lo + hi);
                if scaled(mid).is_some_and(|c| fits(raw, i, &c)) {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            if lo > 1.0 + 1e-4 {
                raw[i] = scaled(lo).expect("scaling a valid polygon");
                grew = true;
            }
        }
        if !grew {
            return;
        }
    }
}

/// Sum of unit pushes away from neighbours and walls closer than twice the gap.
fn repulsion(raw: &[ConvexPolygon], i: usize, inner: &Aabb, gap: f64) -> Point2 {
    let me = &raw[i];
    let bb = me.bounding_box();
    let horizon = 2.0 * gap;
    let mut push = Point2::default();
    for (j, o) in raw.iter().enumerate() {
        if j == i || !o.bounding_box().overlaps(&bb.expanded(horizon)) {
            continue;
        }
        let (d, dir) = closest_approach(me, o);
        if d < horizon {
            push = push + dir * (horizon - d);
        }
    }
    let walls = [
        (bb.min.x - inner.min.x, Point2::new(1.0, 0.0)),
        (inner.max.x - bb.max.x, Point2::new(-1.0, 0.0)),
        (bb.min.y - inner.min.y, Point2::new(0.0, 1.0)),
        (inner.max.y - bb.max.y, Point2::new(0.0, -1.0)),
    ];
    for (d, dir) in walls {
        if d < horizon {
            push = push + dir * (horizon - d);
        }
    }
    push
}

/// Distance between disjoint convex polygons and the unit direction from `b` towards `a`.
fn closest_approach(a: &ConvexPolygon, b: &ConvexPolygon) -> (f64, Point2) {
    let mut best = (f64::INFINITY, Point2::default());
    for &v in a.vertices() {
        let q = closest_point_on_convex(b.vertices(), v);
        let d = v.distance(q);
        if d < best.0 && d > 0.0 {
            best = (d, (v - q) * (1.0 / d));
        }
    }
    for &v in b.vertices() {
        let q = closest_point_on_convex(a.vertices(), v);
        let d = v.distance(q);
        if d < best.0 && d > 0.0 {
            best = (d, (q - v) * (1.0 / d));
        }
    }
    best
}

/// Euclidean distance between two convex polygons (zero when they touch or overlap).
fn polygon_distance(a: &ConvexPolygon, b: &ConvexPolygon) -> f64 {
    let crosses = a.edges().any(|(p, q)| b.intersects_segment_interior(p, q))
        || a.vertices().iter().any(|&v| b.contains(v))
        || b.vertices().iter().any(|&v| a.contains(v));
    if crosses {
        return 0.0;
    }
    let ab = a
        .vertices()
        .iter()
        .map(|&v| b.distance_to(v))
        .fold(f64::INFINITY, f64::min);
    let ba = b
        .vertices()
        .iter()
        .map(|&v| a.distance_to(v))
        .fold(f64::INFINITY, f64::min);
    ab.min(ba)
}

/// Smallest `kx × ky` grid (aspect within one) with at least `n` cells free of
/// the start and goal.
fn lattice(ws: &Aabb, n: usize, start: Point2, goal: Point2) -> Vec<Aabb> {
    let mut best: Option<Vec<Aabb>> = None;
    let base = (n as f64).sqrt().floor().max(1.0) as usize;
    for kx in base..=base + 3 {
        for ky in [kx, kx + 1] {
            let (cw, ch) = (ws.width() / kx as f64, ws.height() / ky as f64);
            let cells: Vec<Aabb> = (0..kx * ky)
                .map(|i| {
                    let min = ws.min + Point2::new((i % kx) as f64 * cw, (i / kx) as f64 * ch);
                    Aabb::new(min, min + Point2::new(cw, ch))
                })
                .filter(|c| !c.contains(start) && !c.contains(goal))
                .collect();
            if cells.len() >= n && best.as_ref().is_none_or(|b| cells.len() < b.len()) {
                best = Some(cells);
            }
        }
    }
    best.expect("lattice search always finds enough cells")
}

/// A unit-area shape of the family centered near the origin.
fn unit_shape(family: ObstacleFamily, rng: &mut ChaCha8Rng) -> Option<Vec<Point2>> {
    match family {
        ObstacleFamily::Rectangles => Some(rectangle(1.0, 0.0, rng)),
        ObstacleFamily::RotatedRectangles => {
            Some(rectangle(1.0, rng.gen_range(0.0..FRAC_PI_2), rng))
        }
        ObstacleFamily::Polytopes => random_hull(1.0, rng),
    }
}

fn rectangle(area: f64, angle: f64, rng: &mut ChaCha8Rng) -> Vec<Point2> {
    let aspect: f64 = rng.gen_range(0.6f64..1.67);
    let w = (area * aspect).sqrt();
    let h = area / w;
    [(-0.5, -0.5), (0.5, -0.5), (0.5, 0.5), (-0.5, 0.5)]
        .iter()
        .map(|&(a, b)| Point2::new(a * w, b * h).rotated(angle))
        .collect()
}

/// Hull of 5–8 points drawn in a disc, rescaled to `area`.
fn random_hull(area: f64, rng: &mut ChaCha8Rng) -> Option<Vec<Point2>> {
    for _ in 0..50 {
        let k = rng.gen_range(5..=8);
        let radius = rng.gen_range(0.5..1.5);
        let pts: Vec<Point2> = (0..k)
            .map(|_| {
                let a = rng.gen_range(0.0..TAU);
                let r = radius * rng.gen_range(0.6f64..1.0).sqrt();
                Point2::new(a.cos(), a.sin()) * r
            })
            .collect();
        let hull = convex_hull(&pts);
        if hull.len() < 5 {
            continue;
        }
        let poly = ConvexPolygon::new(hull).ok()?;
        if poly.len() < 5 {
            continue;
        }
        let c = poly.centroid();
        let s = (area / poly.area()).sqrt();
        return Some(poly.vertices().iter().map(|&v| (v - c) * s).collect());
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_count_is_empty() {
        let m = generate_random_map(&MapGenParams::benchmark(ObstacleFamily::Rectangles, 0, 1))
            .unwrap();
        assert!(m.raw.is_empty() && m.map.obstacles.is_empty());
    }

    #[test]
    fn rectangles_hit_coverage() {
        for seed in 0..3 {
            let m = generate_random_map(&MapGenParams::benchmark(
                ObstacleFamily::Rectangles,
                30,
                seed,
            ))
            .unwrap();
            assert_eq!(m.raw.len(), 30);
            assert!((0.35..=0.45).contains(&m.coverage), "{}", m.coverage);
            for o in &m.raw {
                assert_eq!(o.len(), 4);
                for e in o.edges() {
                    let d = e.1 - e.0;
                    assert!(d.x.abs() < 1e-9 || d.y.abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn obstacles_are_raw_disjoint() {
        for fam in ObstacleFamily::ALL {
            let m = generate_random_map(&MapGenParams::benchmark(fam, 60, 5)).unwrap();
            for (i, a) in m.raw.iter().enumerate() {
                for b in &m.raw[i + 1..] {
                    if !a.bounding_box().overlaps(&b.bounding_box()) {
                        continue;
                    }
                    assert!(a.vertices().iter().all(|&v| !b.contains(v)));
                    assert!(b.vertices().iter().all(|&v| !a.contains(v)));
                }
            }
        }
    }

    #[test]
    fn polytopes_are_convex_with_five_to_eight_vertices() {
        let m = generate_random_map(&MapGenParams::benchmark(ObstacleFamily::Polytopes, 40, 2))
            .unwrap();
        for o in &m.raw {
            assert!((5..=8).contains(&o.len()));
            let hull = convex_hull(o.vertices());
            assert_eq!(hull.len(), o.len());
            for v in o.vertices() {
                assert!(hull.iter().any(|h| h.distance(*v) < 1e-12));
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let p = MapGenParams::benchmark(ObstacleFamily::RotatedRectangles, 50, 17);
        assert_eq!(
            generate_random_map(&p).unwrap().raw,
            generate_random_map(&p).unwrap().raw
        );
    }
}
